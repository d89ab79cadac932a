"""Metrics and evaluation reports.

All metrics run over "cells": the (student, step) positions whose loss unit
weight is positive, i.e. exactly the positions a protocol held out (or, for
training diagnostics, the observed ones).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import NUM_OPTIONS, OPTIONS
from .errors import DataError
from .models import BaseModel, flatten_cells, head_probabilities, make_batch, predicted_option
from .seeding import substream


def option_accuracy(true_options, predicted) -> float:
    true_options = np.asarray(true_options)
    predicted = np.asarray(predicted)
    if true_options.shape != predicted.shape or true_options.size == 0:
        raise DataError("accuracy needs two equal-length non-empty label arrays")
    return float((true_options == predicted).mean())


def macro_f1(true_options, predicted, num_classes: int = NUM_OPTIONS) -> float:
    """Unweighted mean of per-class F1; a class absent from both labels and
    predictions contributes 0, never NaN."""
    true_options = np.asarray(true_options)
    predicted = np.asarray(predicted)
    if true_options.shape != predicted.shape or true_options.size == 0:
        raise DataError("macro F1 needs two equal-length non-empty label arrays")
    scores = []
    for cls in range(num_classes):
        tp = float(((true_options == cls) & (predicted == cls)).sum())
        fp = float(((true_options != cls) & (predicted == cls)).sum())
        fn = float(((true_options == cls) & (predicted != cls)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def correctness_accuracy(probabilities, labels, threshold: float = 0.5) -> float:
    """Accuracy of thresholded correctness probabilities; ties at the
    threshold predict correct."""
    probabilities = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels)
    if probabilities.shape != labels.shape or labels.size == 0:
        raise DataError("correctness accuracy needs matching non-empty arrays")
    return float(((probabilities >= threshold).astype(int) == labels).mean())


def base_rate(labels) -> float:
    """Accuracy of always predicting the more common binary label."""
    labels = np.asarray(labels)
    rate = float(labels.mean())
    return max(rate, 1.0 - rate)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

@dataclass
class CellTable:
    """Flat arrays over every evaluated cell."""
    student: np.ndarray
    question: np.ndarray
    chosen: np.ndarray
    correct_option: np.ndarray
    correctness: np.ndarray
    probabilities: np.ndarray  # (n, 4) for options, (n,) for correctness

    def __len__(self):
        return len(self.question)


def collect_cells(model: BaseModel, units, batch_size: int = 64) -> CellTable:
    """Run the model and keep one row per positively-weighted cell."""
    units = [u for u in units if u.weights.sum() > 0]
    if not units:
        raise DataError("no cells to evaluate")
    rows = {k: [] for k in ("student", "question", "chosen", "correct_option",
                            "correctness")}
    probs = []
    for start in range(0, len(units), batch_size):
        chunk = units[start:start + batch_size]
        batch = make_batch([u.sequence for u in chunk], model.config)
        flat, order = model.forward_batch(batch)
        B, T = batch.size
        w = np.zeros((B, T))
        for b, u in enumerate(chunk):
            w[b, :len(u.weights)] = u.weights
        keep = flatten_cells(w * batch.pad, order) > 0
        p = head_probabilities(model, flat.values)[keep]
        probs.append(p if model.task == "option" else p[:, 0])
        for key, arr in (("student", np.repeat(batch.student_ids[:, None], T, axis=1)),
                         ("question", batch.questions), ("chosen", batch.chosen),
                         ("correct_option", batch.correct),
                         ("correctness", batch.correctness)):
            rows[key].append(flatten_cells(arr, order)[keep])
    return CellTable(probabilities=np.concatenate(probs),
                     **{k: np.concatenate(v) for k, v in rows.items()})


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class MajorityBaseline:
    """Most frequent chosen option per question, with the global mode as the
    fallback for unseen questions. Count ties resolve to the lowest option."""
    per_question: dict
    fallback: int

    def predict(self, question_ids) -> np.ndarray:
        return np.array([self.per_question.get(int(q), self.fallback)
                         for q in question_ids], dtype=int)


def fit_majority(units, num_questions: int) -> MajorityBaseline:
    counts = np.zeros((num_questions, NUM_OPTIONS), dtype=np.int64)
    for unit in units:
        for ev, w in zip(unit.sequence.events, unit.weights):
            if w > 0:
                counts[ev.question_id, ev.chosen_option] += 1
    if counts.sum() == 0:
        raise DataError("majority baseline needs at least one weighted cell")
    per_question = {q: int(counts[q].argmax())
                    for q in range(num_questions) if counts[q].sum() > 0}
    return MajorityBaseline(per_question=per_question,
                            fallback=int(counts.sum(axis=0).argmax()))


def random_baseline(n: int, seed: int) -> np.ndarray:
    return substream(seed, "baseline/random").integers(0, NUM_OPTIONS, size=n)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    num_cells: int
    metrics: dict
    baselines: dict = field(default_factory=dict)
    per_question: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {"task": self.task, "num_cells": self.num_cells,
                   "metrics": self.metrics, "baselines": self.baselines,
                   "per_question": self.per_question}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def write_per_question_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["question_id", "cells", "accuracy",
                                                    "majority_option", "majority_share"])
            writer.writeheader()
            for row in self.per_question:
                writer.writerow(row)


def _per_question_rows(cells: CellTable, predicted) -> list:
    rows = []
    for q in sorted(set(int(x) for x in cells.question)):
        at = cells.question == q
        chosen = cells.chosen[at]
        top = int(np.bincount(chosen, minlength=NUM_OPTIONS).argmax())
        rows.append({
            "question_id": q,
            "cells": int(at.sum()),
            "accuracy": round(float((chosen == predicted[at]).mean()), 6),
            "majority_option": OPTIONS[top],
            "majority_share": round(float((chosen == top).mean()), 6),
        })
    return rows


def evaluate_options(model: BaseModel, eval_units, train_units=None,
                     seed: int = 0, batch_size: int = 64) -> EvalReport:
    """Option prediction metrics plus random/majority reference points.

    The majority baseline is fit on train_units when given (the honest
    setting), otherwise on the evaluation cells themselves.
    """
    if model.task != "option":
        raise DataError(f"model predicts {model.task}, not options")
    cells = collect_cells(model, eval_units, batch_size)
    predicted = predicted_option(cells.probabilities)
    majority = fit_majority(train_units if train_units is not None else eval_units,
                            model.config.num_questions)
    majority_pred = majority.predict(cells.question)
    random_pred = random_baseline(len(cells), seed)
    report = EvalReport(
        task="option",
        num_cells=len(cells),
        metrics={
            "accuracy": option_accuracy(cells.chosen, predicted),
            "macro_f1": macro_f1(cells.chosen, predicted),
            "nll": float(-np.log(np.maximum(
                cells.probabilities[np.arange(len(cells)), cells.chosen], 1e-300)).mean()),
        },
        baselines={
            "majority_accuracy": option_accuracy(cells.chosen, majority_pred),
            "majority_macro_f1": macro_f1(cells.chosen, majority_pred),
            "random_accuracy": option_accuracy(cells.chosen, random_pred),
            "random_macro_f1": macro_f1(cells.chosen, random_pred),
        },
    )
    report.per_question = _per_question_rows(cells, predicted)
    return report


def evaluate_correctness(model: BaseModel, eval_units, batch_size: int = 64) -> EvalReport:
    """Correctness-head metrics against the majority-label base rate."""
    if model.task != "correctness":
        raise DataError(f"model predicts {model.task}, not correctness")
    cells = collect_cells(model, eval_units, batch_size)
    return EvalReport(
        task="correctness",
        num_cells=len(cells),
        metrics={
            "accuracy": correctness_accuracy(cells.probabilities, cells.correctness),
        },
        baselines={"base_rate": base_rate(cells.correctness)},
    )
