"""GRU cell and recurrent layers on top of the autodiff core.

Sequences are laid out time-major: a batch of B sequences of length T
lives in a (T*B, dim) matrix whose row t*B + b is token t of sequence b.
That makes the per-step input a contiguous row slice, and lets the
input-to-gate projection of a whole sequence be one matmul.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["init_gru", "gru_cell", "gru_sequence", "bigru", "init_bigru"]


def init_gru(rng: np.random.Generator, input_dim: int, hidden: int) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in)) gate weights, zero biases.

    Layout: ``w_x`` maps input to the stacked (update, reset, candidate)
    pre-activations; ``u_zr`` and ``u_c`` are the recurrent weights.
    """
    kx = 1.0 / np.sqrt(input_dim)
    kh = 1.0 / np.sqrt(hidden)
    return {
        "w_x": Tensor(rng.uniform(-kx, kx, (input_dim, 3 * hidden)), requires_grad=True),
        "u_zr": Tensor(rng.uniform(-kh, kh, (hidden, 2 * hidden)), requires_grad=True),
        "u_c": Tensor(rng.uniform(-kh, kh, (hidden, hidden)), requires_grad=True),
        "b": Tensor(np.zeros(3 * hidden), requires_grad=True),
    }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_step(x_proj: Tensor, h: Tensor, u_zr: Tensor, u_c: Tensor) -> Tensor:
    """One whole GRU state update as a single fused op.

    ``x_proj`` is the precomputed input projection x @ w_x + b (B, 3H)
    holding the stacked update/reset/candidate contributions. The new
    state is (1-z)*h + z*candidate: the update gate weights the fresh
    candidate, so zero weights leave a zero state fixed. Fusing the
    dozen-odd pointwise/gating ops into one node keeps tapes for long
    sequences small; the hand-written backward rule is covered by the
    finite-difference suite like every other op.
    """
    x_proj, h = ad._as_tensor(x_proj), ad._as_tensor(h)
    u_zr, u_c = ad._as_tensor(u_zr), ad._as_tensor(u_c)
    hidden = h.shape[-1]
    if x_proj.shape != (h.shape[0], 3 * hidden) or u_zr.shape != (hidden, 2 * hidden):
        raise ad.DimensionError(
            f"gru_step: x_proj {x_proj.shape}, h {h.shape}, u_zr {u_zr.shape} do not conform"
        )
    xp, hv = x_proj.data, h.data
    hu = hv @ u_zr.data
    z = _sigmoid(xp[:, :hidden] + hu[:, :hidden])
    r = _sigmoid(xp[:, hidden : 2 * hidden] + hu[:, hidden : 2 * hidden])
    rh = r * hv
    c = np.tanh(xp[:, 2 * hidden :] + rh @ u_c.data)
    out = (1.0 - z) * hv + z * c

    def backward(g):
        gc = g * z * (1.0 - c * c)
        d_rh = gc @ u_c.data.T
        gr = d_rh * hv * r * (1.0 - r)
        gz = g * (c - hv) * z * (1.0 - z)
        dhu = np.concatenate([gz, gr], axis=1)
        dh = g * (1.0 - z) + d_rh * r + dhu @ u_zr.data.T
        dxp = np.concatenate([gz, gr, gc], axis=1)
        return dxp, dh, hv.T @ dhu, rh.T @ gc

    return ad._node(out, (x_proj, h, u_zr, u_c), backward, "gru_step")


ad.OPS["gru_step"] = gru_step


def _gates(xs: Tensor, h: Tensor, w: dict[str, Tensor], hidden: int) -> Tensor:
    return gru_step(xs, h, w["u_zr"], w["u_c"])


def gru_cell(x: Tensor, h: Tensor, w: dict[str, Tensor]) -> Tensor:
    """One GRU step: (B, in), (B, H) -> (B, H)."""
    hidden = h.shape[-1]
    if x.shape[-1] != w["w_x"].shape[0] or 3 * hidden != w["w_x"].shape[1]:
        raise ad.DimensionError(
            f"gru_cell: x {x.shape}, h {h.shape} do not match weights {w['w_x'].shape}"
        )
    xs = ad.add(ad.matmul(x, w["w_x"]), w["b"])
    return _gates(xs, h, w, hidden)


def gru_run(
    x_proj: Tensor,
    u_zr: Tensor,
    u_c: Tensor,
    seq_len: int,
    batch: int,
    step_mask: np.ndarray | None = None,
    reverse: bool = False,
) -> Tensor:
    """A whole recurrent pass as one fused op: (T*B, 3H) -> (T*B, H).

    ``x_proj`` holds the precomputed input projections for every step,
    time-major. ``step_mask`` is a (T, B) array of 1/0 flags; at masked
    (padding) steps the state is carried through unchanged, so a
    reversed run with the zero initial state starts fresh at each
    sequence's last real token and right-padding cannot leak into real
    positions.

    Fusing the time loop keeps the tape at one node per layer run
    instead of ~20 per token; the backward rule replays the loop in
    reverse and is exercised by the finite-difference suite.
    """
    x_proj = ad._as_tensor(x_proj)
    u_zr, u_c = ad._as_tensor(u_zr), ad._as_tensor(u_c)
    hidden = u_c.shape[0]
    if x_proj.shape != (seq_len * batch, 3 * hidden) or u_zr.shape != (hidden, 2 * hidden):
        raise ad.DimensionError(
            f"gru_run: x_proj {x_proj.shape} does not match T={seq_len}, B={batch}, H={hidden}"
        )
    order = range(seq_len - 1, -1, -1) if reverse else range(seq_len)
    xp = x_proj.data
    uzr, uc = u_zr.data, u_c.data
    h = np.zeros((batch, hidden))
    out = np.empty((seq_len * batch, hidden))
    saved: list[tuple] = [()] * seq_len
    for t in order:
        xs = xp[t * batch : (t + 1) * batch]
        hu = h @ uzr
        z = _sigmoid(xs[:, :hidden] + hu[:, :hidden])
        r = _sigmoid(xs[:, hidden : 2 * hidden] + hu[:, hidden : 2 * hidden])
        rh = r * h
        c = np.tanh(xs[:, 2 * hidden :] + rh @ uc)
        h_new = (1.0 - z) * h + z * c
        if step_mask is not None and not step_mask[t].all():
            m = step_mask[t][:, None]
            h_next = m * h_new + (1.0 - m) * h
        else:
            m = None
            h_next = h_new
        saved[t] = (z, r, c, rh, h, m)
        h = h_next
        out[t * batch : (t + 1) * batch] = h

    def backward(g):
        dxs = np.zeros_like(xp)
        du_zr = np.zeros_like(uzr)
        du_c = np.zeros_like(uc)
        dh_carry = np.zeros((batch, hidden))
        for t in reversed(list(order)):
            z, r, c, h_prev, rh_t, m = (
                saved[t][0],
                saved[t][1],
                saved[t][2],
                saved[t][4],
                saved[t][3],
                saved[t][5],
            )
            g_t = g[t * batch : (t + 1) * batch] + dh_carry
            if m is not None:
                dh_new = g_t * m
                dh_prev_direct = g_t * (1.0 - m)
            else:
                dh_new = g_t
                dh_prev_direct = 0.0
            gc = dh_new * z * (1.0 - c * c)
            d_rh = gc @ uc.T
            gr = d_rh * h_prev * r * (1.0 - r)
            gz = dh_new * (c - h_prev) * z * (1.0 - z)
            dhu = np.concatenate([gz, gr], axis=1)
            dh_carry = dh_new * (1.0 - z) + d_rh * r + dhu @ uzr.T + dh_prev_direct
            block = dxs[t * batch : (t + 1) * batch]
            block[:, :hidden] = gz
            block[:, hidden : 2 * hidden] = gr
            block[:, 2 * hidden :] = gc
            du_zr += h_prev.T @ dhu
            du_c += rh_t.T @ gc
        return dxs, du_zr, du_c

    return ad._node(out, (x_proj, u_zr, u_c), backward, "gru_run")


ad.OPS["gru_run"] = gru_run


def gru_sequence(
    x: Tensor,
    seq_len: int,
    batch: int,
    w: dict[str, Tensor],
    hidden: int,
    step_mask: np.ndarray | None = None,
    reverse: bool = False,
) -> Tensor:
    """Run a GRU over a time-major (T*B, in) block; returns (T*B, H)."""
    xs_all = ad.add(ad.matmul(x, w["w_x"]), w["b"])
    return gru_run(xs_all, w["u_zr"], w["u_c"], seq_len, batch, step_mask, reverse)


def init_bigru(rng: np.random.Generator, input_dim: int, hidden: int) -> dict[str, dict[str, Tensor]]:
    return {"fwd": init_gru(rng, input_dim, hidden), "bwd": init_gru(rng, input_dim, hidden)}


def bigru(
    x: Tensor,
    seq_len: int,
    batch: int,
    w: dict[str, dict[str, Tensor]],
    hidden: int,
    step_mask: np.ndarray | None = None,
) -> Tensor:
    """Bidirectional GRU; concatenates both directions to (T*B, 2H)."""
    fwd = gru_sequence(x, seq_len, batch, w["fwd"], hidden, step_mask, reverse=False)
    bwd = gru_sequence(x, seq_len, batch, w["bwd"], hidden, step_mask, reverse=True)
    return ad.concat([fwd, bwd], axis=1)
