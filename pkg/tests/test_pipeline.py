"""Pipeline tests: the two training phases, filtering, masking,
inference composition, and determinism."""

import dataclasses

import numpy as np
import pytest

from etp import losses, metrics
from etp.autodiff import Tape
from etp.data import batchify
from etp.models import mask_input, pool_subtokens
from etp.pipeline import (
    PipelineError,
    TrainConfig,
    build_masked_dataset,
    coerce_config,
    dump_flat_config,
    evaluate,
    faithfulness,
    filter_training_instances,
    infer,
    infer_many,
    keep_mask_closure,
    load_run,
    parse_flat_config,
    run_pipeline,
    save_run,
    train_explainer,
    train_predictor,
)

from conftest import tiny_dataset, tiny_train_config


class TestTrainConfig:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(lam=-1.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(threshold=1.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(head="graph").validate()

    def test_flat_config_round_trip(self):
        cfg = tiny_train_config(lam=2.5, head="span", subtoken_mode="char_bigram")
        text = dump_flat_config(cfg)
        again = coerce_config(TrainConfig, parse_flat_config(text))
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            coerce_config(TrainConfig, {"momentum": "0.9"})


class TestTrainExplainer:
    def test_lambda_zero_leaves_explanation_head_at_init(self, dataset):
        cfg = tiny_train_config(lam=0.0, epochs=2)
        model, _ = train_explainer(
            dataset.splits["train"], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        fresh = type(model)(model.cfg, seed=cfg.seed)
        for name, p in model.exp_head_parameters().items():
            np.testing.assert_array_equal(p.data, fresh.exp_head_parameters()[name].data)
        # while the task head did move
        moved = [
            not np.array_equal(p.data, fresh.task_head_parameters()[name].data)
            for name, p in model.task_head_parameters().items()
        ]
        assert any(moved)

    def test_one_epoch_decreases_training_loss(self, dataset):
        cfg = tiny_train_config(epochs=3, patience=3)
        _, history = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        assert history.epochs[-1].l_loss < history.epochs[0].l_loss

    def test_same_seed_identical_loss_curves(self, dataset):
        cfg = tiny_train_config(epochs=2)
        curves = []
        for _ in range(2):
            _, history = train_explainer(
                dataset.splits["train"], dataset.splits["val"], cfg, dataset.vocab, 2
            )
            curves.append([(e.l_task, e.l_exp, e.l_loss, e.val_macro_f1) for e in history.epochs])
        assert curves[0] == curves[1]

    def test_empty_validation_rejected(self, dataset):
        with pytest.raises(PipelineError, match="validation"):
            train_explainer(dataset.splits["train"], [], tiny_train_config(), dataset.vocab, 2)

    def test_nan_loss_aborts_without_crashing(self, dataset, monkeypatch):
        from etp.models import ExplainerModel

        orig = ExplainerModel.__init__

        def poisoned(self, cfg_, seed=0):
            orig(self, cfg_, seed=seed)
            self.params["enc"]["embedding"].data[0, 0] = np.nan

        monkeypatch.setattr(ExplainerModel, "__init__", poisoned)
        _, history = train_explainer(
            dataset.splits["train"], dataset.splits["val"], tiny_train_config(), dataset.vocab, 2
        )
        assert history.diverged and not history.epochs

    def test_span_head_trains(self, dataset):
        cfg = tiny_train_config(head="span", epochs=1)
        model, history = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"][:4], cfg, dataset.vocab, 2
        )
        assert model.cfg.head == "span"
        assert history.epochs[0].val_token_f1 is not None


class TestFilter:
    def test_constant_classifier_keeps_one_class(self, dataset):
        cfg = tiny_train_config()
        model, _ = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        model.params["task"]["w2"].data[...] = 0.0
        model.params["task"]["b2"].data[...] = [5.0, -5.0]  # always predict class 0
        kept = filter_training_instances(model, dataset.splits["train"], dataset.vocab, cfg)
        assert kept and all(inst.label == 0 for inst in kept)

    def test_matches_brute_force_per_instance_check(self, dataset):
        cfg = tiny_train_config(epochs=1)
        model, _ = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        kept = filter_training_instances(model, dataset.splits["train"], dataset.vocab, cfg)
        brute = []
        for inst in dataset.splits["train"]:
            batch = batchify([inst], 1, dataset.vocab, cfg.max_len, cfg.subtoken_mode)[0]
            probs = model.predict_task(model.encode(batch.ids, batch.pad_mask)).data[0]
            if int(np.argmax(probs)) == inst.label:
                brute.append(inst.uid)
        assert [inst.uid for inst in kept] == brute

    def test_filtered_set_is_subset_with_exact_membership(self, dataset):
        cfg = tiny_train_config(epochs=1)
        model, _ = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        kept = filter_training_instances(model, dataset.splits["train"], dataset.vocab, cfg)
        train_ids = {inst.uid for inst in dataset.splits["train"]}
        assert {inst.uid for inst in kept} <= train_ids


class TestMaskedDataset:
    def _trained(self, dataset, **kw):
        cfg = tiny_train_config(epochs=1, **kw)
        model, _ = train_explainer(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        return model, cfg

    def test_all_high_scores_leave_documents_unchanged(self, dataset):
        model, cfg = self._trained(dataset)
        for t in model.params["exp"]["gru"].values():
            t.data[...] = 0.0
        model.params["exp"]["w"].data[...] = 0.0
        model.params["exp"]["b"].data[...] = 0.0  # sigmoid(0) = 0.5 >= threshold
        masked = build_masked_dataset(model, dataset.splits["val"], dataset.vocab, cfg)
        for orig, m in zip(dataset.splits["val"], masked):
            assert m.document == orig.document

    def test_all_low_scores_give_all_wildcard_documents(self, dataset):
        model, cfg = self._trained(dataset)
        for t in model.params["exp"]["gru"].values():
            t.data[...] = 0.0
        model.params["exp"]["w"].data[...] = 0.0
        model.params["exp"]["b"].data[...] = -12.0
        masked = build_masked_dataset(model, dataset.splits["val"], dataset.vocab, cfg)
        for orig, m in zip(dataset.splits["val"], masked):
            assert m.document == [cfg.wildcard] * len(orig.document)
            assert m.query == orig.query
            assert m.label == orig.label

    def test_matches_manual_explain_threshold_mask_composition(self, dataset):
        model, cfg = self._trained(dataset)
        instances = dataset.splits["val"]
        masked = build_masked_dataset(model, instances, dataset.vocab, cfg)
        for inst, got in zip(instances, masked):
            batch = batchify([inst], 1, dataset.vocab, cfg.max_len, cfg.subtoken_mode)[0]
            scores = model.explain_tokens(
                model.encode(batch.ids, batch.pad_mask), batch.doc_mask
            ).data
            sub = scores[batch.doc_row_index[0], 0]
            words = pool_subtokens(sub, batch.word_groups[0])
            hard = np.zeros(len(inst.document), dtype=np.int8)
            hard[: len(words)] = words >= cfg.threshold
            assert got.document == mask_input(inst.document, hard, cfg.wildcard)


class TestTrainPredictor:
    def test_all_ones_rationale_equals_full_input_training(self, dataset):
        cfg = tiny_train_config(epochs=1)
        full = dataset.splits["train"][:8]
        masked = [
            dataclasses.replace(i, document=mask_input(i.document, np.ones(len(i.document)), "."))
            for i in full
        ]
        assert all(a.document == b.document for a, b in zip(full, masked))
        m1, h1 = train_predictor(masked, dataset.splits["val"], cfg, dataset.vocab, 2)
        m2, h2 = train_predictor(full, dataset.splits["val"], cfg, dataset.vocab, 2)
        assert [e.l_task for e in h1.epochs] == [e.l_task for e in h2.epochs]

    def test_loss_decreases(self, dataset):
        cfg = tiny_train_config(epochs=3, patience=3)
        _, history = train_predictor(
            dataset.splits["train"], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        assert history.epochs[-1].l_task < history.epochs[0].l_task

    def test_empty_training_set_rejected(self, dataset):
        with pytest.raises(PipelineError, match="empty"):
            train_predictor([], dataset.splits["val"], tiny_train_config(), dataset.vocab, 2)

    def test_stage2_history_has_no_token_f1(self, dataset):
        cfg = tiny_train_config(epochs=1)
        _, history = train_predictor(
            dataset.splits["train"][:8], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        assert all(e.val_token_f1 is None for e in history.epochs)


@pytest.fixture(scope="module")
def state():
    dataset = tiny_dataset()
    return run_pipeline(dataset, tiny_train_config()), dataset


class TestInference:
    def test_equals_manual_composition(self, state):
        st, dataset = state
        inst = dataset.splits["test"][0]
        res = infer(st, inst)
        masked_doc = mask_input(inst.document, res.rationale_mask, st.cfg.wildcard)
        batch = batchify(
            [dataclasses.replace(inst, document=masked_doc)],
            1,
            st.vocab,
            st.cfg.max_len,
            st.cfg.subtoken_mode,
        )[0]
        probs = st.predictor.predict_task(st.predictor.encode(batch.ids, batch.pad_mask)).data[0]
        assert res.label == int(np.argmax(probs))
        np.testing.assert_allclose(res.probs, probs, atol=1e-12)

    def test_auxiliary_head_perturbation_has_no_effect(self, state):
        st, dataset = state
        inst = dataset.splits["test"][1]
        before = infer(st, inst)
        st.explainer.params["task"]["w2"].data[...] += 3.21
        st.explainer.params["task"]["b2"].data[...] -= 1.23
        after = infer(st, inst)
        st.explainer.params["task"]["w2"].data[...] -= 3.21
        st.explainer.params["task"]["b2"].data[...] += 1.23
        assert before.label == after.label
        np.testing.assert_array_equal(before.rationale_mask, after.rationale_mask)
        np.testing.assert_array_equal(before.probs, after.probs)

    def test_all_zero_rationale_is_wildcard_document_prediction(self, state):
        st, dataset = state
        inst = dataset.splits["test"][2]
        wild_doc = [st.cfg.wildcard] * len(inst.document)
        batch = batchify(
            [dataclasses.replace(inst, document=wild_doc)],
            1,
            st.vocab,
            st.cfg.max_len,
            st.cfg.subtoken_mode,
        )[0]
        expected = st.predictor.predict_task(
            st.predictor.encode(batch.ids, batch.pad_mask)
        ).data[0]
        closure = keep_mask_closure(st, inst)
        got = closure(np.zeros(len(inst.document), dtype=int))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_infer_many_matches_single(self, state):
        st, dataset = state
        instances = dataset.splits["test"][:4]
        many = infer_many(st, instances)
        for inst, res in zip(instances, many):
            single = infer(st, inst)
            assert single.label == res.label
            np.testing.assert_array_equal(single.rationale_mask, res.rationale_mask)


class TestFaithfulnessComposition:
    def test_batched_equals_per_instance_closures(self):
        dataset = tiny_dataset(seed=3)
        st = run_pipeline(dataset, tiny_train_config(epochs=1))
        instances = dataset.splits["test"][:5]
        masks = [inst.rationale_mask for inst in instances]
        comp, suff = faithfulness(st, instances, masks)
        for i, inst in enumerate(instances):
            closure = keep_mask_closure(st, inst)
            assert comp[i] == pytest.approx(
                metrics.comprehensiveness(closure, masks[i]), abs=1e-12
            )
            assert suff[i] == pytest.approx(metrics.sufficiency(closure, masks[i]), abs=1e-12)


class TestEndToEnd:
    def test_pipeline_determinism_identical_reports(self):
        reports = []
        for _ in range(2):
            dataset = tiny_dataset(seed=1)
            state = run_pipeline(dataset, tiny_train_config(epochs=2))
            reports.append(evaluate(state, dataset.splits["test"]).to_json())
        assert reports[0] == reports[1]

    def test_save_load_run_round_trip(self, tmp_path):
        dataset = tiny_dataset(seed=2)
        state = run_pipeline(dataset, tiny_train_config(epochs=1))
        report = evaluate(state, dataset.splits["test"])
        save_run(tmp_path / "run", state, report)
        again = load_run(tmp_path / "run")
        inst = dataset.splits["test"][0]
        a, b = infer(state, inst), infer(again, inst)
        assert a.label == b.label
        np.testing.assert_array_equal(a.rationale_mask, b.rationale_mask)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert (tmp_path / "run" / "stage1_metrics.csv").exists()
        assert (tmp_path / "run" / "metrics.json").read_text() == report.to_json()

    def test_stage2_set_is_filtered_stage1_subset(self):
        dataset = tiny_dataset(seed=4)
        cfg = tiny_train_config(epochs=1)
        model, _ = train_explainer(
            dataset.splits["train"], dataset.splits["val"], cfg, dataset.vocab, 2
        )
        kept = filter_training_instances(model, dataset.splits["train"], dataset.vocab, cfg)
        masked = build_masked_dataset(model, kept, dataset.vocab, cfg)
        assert [m.uid for m in masked] == [k.uid for k in kept]
