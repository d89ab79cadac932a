import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import option_tracing.evaluation as ev
import option_tracing.models as om
import option_tracing.training as tr
from option_tracing.data import StudentSequence, make_event
from option_tracing.errors import DataError


class TestMacroF1:
    def test_worked_example(self):
        # classes A and B both earn F1 = 2/3, C and D contribute 0
        assert ev.macro_f1([0, 0, 1], [0, 1, 1]) == pytest.approx(1 / 3, abs=1e-12)

    def test_majority_predictor_on_skewed_labels(self):
        true = np.repeat([0, 1, 2, 3], [57, 25, 11, 7])
        pred = np.zeros(100, dtype=int)
        assert ev.macro_f1(true, pred) == pytest.approx(57 / 314, abs=1e-12)
        assert ev.macro_f1(true, pred) == pytest.approx(0.1815, abs=5e-4)

    def test_perfect_prediction(self):
        true = np.array([0, 1, 2, 3, 2, 1])
        assert ev.macro_f1(true, true) == 1.0

    def test_absent_class_contributes_zero_not_nan(self):
        score = ev.macro_f1([0, 0], [0, 0])
        assert score == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ev.macro_f1([], [])

    def test_matches_sklearn(self):
        sk = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(0)
        for _ in range(20):
            true = rng.integers(0, 4, 50)
            pred = rng.integers(0, 4, 50)
            want = sk.f1_score(true, pred, labels=range(4), average="macro",
                               zero_division=0)
            assert ev.macro_f1(true, pred) == pytest.approx(want, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=1, max_size=60))
    @settings(max_examples=50, deadline=None)
    def test_swapping_true_and_pred_is_symmetric(self, pairs):
        true = np.array([a for a, _ in pairs])
        pred = np.array([b for _, b in pairs])
        assert ev.macro_f1(true, pred) == pytest.approx(ev.macro_f1(pred, true), abs=1e-12)
        assert 0.0 <= ev.macro_f1(true, pred) <= 1.0


class TestAccuracy:
    def test_option_accuracy(self):
        assert ev.option_accuracy([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5

    def test_correctness_threshold_ties_predict_correct(self):
        assert ev.correctness_accuracy([0.5, 0.49], [1, 0]) == 1.0

    def test_base_rate(self):
        assert ev.base_rate([1, 1, 1, 0]) == 0.75
        assert ev.base_rate([0, 0, 0, 1]) == 0.75

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            ev.option_accuracy([0, 1], [0])


class TestBaselines:
    def unit(self, qids, chosen, student=0):
        events = tuple(make_event(q, (0,), c, 0) for q, c in zip(qids, chosen))
        return tr.LossUnit(StudentSequence(student, events), np.ones(len(events)))

    def test_majority_counts_per_question(self):
        units = [self.unit([0, 0, 0, 1], [2, 2, 1, 3])]
        maj = ev.fit_majority(units, num_questions=3)
        assert maj.per_question == {0: 2, 1: 3}
        assert maj.fallback == 2
        assert maj.predict([0, 1, 2]).tolist() == [2, 3, 2]

    def test_tie_goes_to_lowest_option(self):
        units = [self.unit([0, 0], [3, 1])]
        assert ev.fit_majority(units, 1).per_question[0] == 1

    def test_weights_gate_the_counts(self):
        events = tuple(make_event(0, (0,), c, 0) for c in (1, 2, 2))
        unit = tr.LossUnit(StudentSequence(0, events), np.array([1.0, 0.0, 0.0]))
        assert ev.fit_majority([unit], 1).per_question[0] == 1

    def test_random_baseline_deterministic(self):
        a = ev.random_baseline(100, seed=5)
        b = ev.random_baseline(100, seed=5)
        assert (a == b).all()
        assert set(a) <= {0, 1, 2, 3}
        assert not (a == ev.random_baseline(100, seed=6)).all()


def small_model_and_units(task="option"):
    rng = np.random.default_rng(3)
    seqs = []
    for i in range(6):
        events = []
        for t in range(5):
            q = int(rng.integers(0, 4))
            correct = q % 4
            chosen = correct if rng.random() < 0.7 else int(rng.integers(0, 4))
            events.append(make_event(q, (q % 2,), chosen, correct, timestamp=t))
        seqs.append(StudentSequence(i, tuple(events)))
    cfg = om.ModelConfig(num_questions=4, num_subjects=2, num_students=6, d=3, hidden=4)
    model = om.build_model("ncf", task, cfg, seed=0)
    return model, tr.full_units(seqs)


class TestCells:
    def test_collect_respects_weights(self):
        model, units = small_model_and_units()
        sparse = [tr.LossUnit(u.sequence, (np.arange(5) % 2).astype(float))
                  for u in units]
        cells = ev.collect_cells(model, sparse)
        assert len(cells) == 6 * 2
        want_q = [u.sequence.events[t].question_id for u in sparse for t in (1, 3)]
        assert sorted(cells.question.tolist()) == sorted(want_q)
        assert cells.probabilities.shape == (12, 4)
        np.testing.assert_allclose(cells.probabilities.sum(axis=1), 1.0, atol=1e-12)

    def test_no_weighted_cells_rejected(self):
        model, units = small_model_and_units()
        empty = [tr.LossUnit(u.sequence, np.zeros(5)) for u in units]
        with pytest.raises(DataError):
            ev.collect_cells(model, empty)


class TestReports:
    def test_option_report_structure(self, tmp_path):
        model, units = small_model_and_units()
        report = ev.evaluate_options(model, units[4:], train_units=units[:4], seed=1)
        assert report.task == "option"
        assert report.num_cells == 10
        for key in ("accuracy", "macro_f1", "nll"):
            assert key in report.metrics
        assert 0 <= report.metrics["accuracy"] <= 1
        assert report.baselines["majority_accuracy"] >= report.baselines["random_accuracy"] - 0.5
        path = tmp_path / "report.json"
        report.write(path)
        loaded = json.loads(path.read_text())
        assert loaded["metrics"] == report.metrics
        csv_path = tmp_path / "per_question.csv"
        report.write_per_question_csv(csv_path)
        header = csv_path.read_text().splitlines()[0]
        assert header == "question_id,cells,accuracy,majority_option,majority_share"

    def test_correctness_report(self):
        model, units = small_model_and_units(task="correctness")
        report = ev.evaluate_correctness(model, units)
        assert report.task == "correctness"
        assert 0 <= report.metrics["accuracy"] <= 1
        assert report.baselines["base_rate"] >= 0.5

    def test_task_mismatch_rejected(self):
        model, units = small_model_and_units()
        with pytest.raises(DataError):
            ev.evaluate_correctness(model, units)
