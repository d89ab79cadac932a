"""Shared neural building blocks: embedding tables, feed-forward nets, the
LSTM cell, and bipartite graph propagation over question-subject tags."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import NUM_OPTIONS
from .errors import DataError

log = logging.getLogger(__name__)


def init_matrix(rng, rows: int, cols: int) -> ad.Tensor:
    """Scaled uniform init: entries in (-1/sqrt(cols), 1/sqrt(cols))."""
    bound = 1.0 / np.sqrt(cols)
    return ad.parameter(rng.uniform(-bound, bound, size=(rows, cols)))


def init_bias(cols: int) -> ad.Tensor:
    return ad.parameter(np.zeros(cols))


@dataclass
class EmbeddingTables:
    """Learnable lookup tables shared by every model.

    question: num_questions x d, subject: num_subjects x d,
    option: 4 x d (indexes both chosen and correct options),
    response: 2 x d (incorrect/correct), user: num_students x d (NCF only).
    """
    question: ad.Tensor
    subject: ad.Tensor
    option: ad.Tensor
    response: ad.Tensor
    user: ad.Tensor | None
    d: int

    @classmethod
    def create(cls, rng, num_questions, num_subjects, d, num_students=None):
        return cls(
            question=init_matrix(rng, num_questions, d),
            subject=init_matrix(rng, num_subjects, d),
            option=init_matrix(rng, NUM_OPTIONS, d),
            response=init_matrix(rng, 2, d),
            user=init_matrix(rng, num_students, d) if num_students else None,
            d=d,
        )

    def named(self, out: dict, prefix="emb"):
        out[f"{prefix}.question"] = self.question
        out[f"{prefix}.subject"] = self.subject
        out[f"{prefix}.option"] = self.option
        out[f"{prefix}.response"] = self.response
        if self.user is not None:
            out[f"{prefix}.user"] = self.user


def embed_subject_set(tables: EmbeddingTables, subject_ids) -> ad.Tensor:
    """Sum of subject embedding rows over a non-empty tag set; (1, d)."""
    ids = sorted(set(int(s) for s in subject_ids))
    if not ids:
        raise DataError("subject set is empty")
    if max(ids) >= tables.subject.values.shape[0] or min(ids) < 0:
        raise DataError(f"unknown subject id in {ids}")
    rows = ad.gather_rows(tables.subject, ids)
    return ad.matmul(ad.constant(np.ones((1, len(ids)))), rows)


def subject_multihot(subject_ids_per_row, num_subjects: int) -> np.ndarray:
    """Multi-hot indicator matrix; row i sums the listed subjects' rows when
    multiplied against the subject table."""
    hot = np.zeros((len(subject_ids_per_row), num_subjects))
    for i, ids in enumerate(subject_ids_per_row):
        for s in ids:
            if s < 0 or s >= num_subjects:
                raise DataError(f"unknown subject id {s}")
            hot[i, s] = 1.0
    return hot


class FeedForwardNet:
    """Fully-connected net, tanh between layers, linear final layer."""

    def __init__(self, rng, widths):
        if len(widths) < 2:
            raise DataError(f"feed-forward net needs at least two widths, got {widths}")
        self.widths = tuple(widths)
        self.weights = [init_matrix(rng, widths[i], widths[i + 1])
                        for i in range(len(widths) - 1)]
        self.biases = [init_bias(w) for w in widths[1:]]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i < len(self.weights) - 1:
                x = ad.tanh(x)
        return x

    def named(self, out: dict, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b


class LstmCell:
    """Gated recurrent cell for one direction."""

    GATES = ("input", "forget", "output", "cell")

    def __init__(self, rng, input_dim: int, hidden: int):
        self.input_dim = input_dim
        self.hidden = hidden
        self.w_x = {g: init_matrix(rng, input_dim, hidden) for g in self.GATES}
        self.w_h = {g: init_matrix(rng, hidden, hidden) for g in self.GATES}
        self.b = {g: init_bias(hidden) for g in self.GATES}

    def named(self, out: dict, prefix: str):
        for g in self.GATES:
            out[f"{prefix}.wx_{g}"] = self.w_x[g]
            out[f"{prefix}.wh_{g}"] = self.w_h[g]
            out[f"{prefix}.b_{g}"] = self.b[g]

    def _gate(self, name, x, h):
        return ad.add(ad.add(ad.matmul(x, self.w_x[name]), ad.matmul(h, self.w_h[name])),
                      self.b[name])

    def step(self, h: ad.Tensor, c: ad.Tensor, x: ad.Tensor):
        """One gated update; returns (h', c')."""
        i = ad.sigmoid(self._gate("input", x, h))
        f = ad.sigmoid(self._gate("forget", x, h))
        o = ad.sigmoid(self._gate("output", x, h))
        g = ad.tanh(self._gate("cell", x, h))
        c_new = ad.add(ad.multiply(f, c), ad.multiply(i, g))
        h_new = ad.multiply(o, ad.tanh(c_new))
        return h_new, c_new


def lstm_step(cell: LstmCell, h, c, x):
    return cell.step(h, c, x)


class GcnParams:
    """Weight matrices for two-level propagation over the bipartite graph."""

    def __init__(self, rng, d: int):
        self.w_ss = init_matrix(rng, d, d)
        self.w_sq = init_matrix(rng, d, d)
        self.w_qq = init_matrix(rng, d, d)
        self.w_qs = init_matrix(rng, d, d)

    def named(self, out: dict, prefix="gcn"):
        out[f"{prefix}.w_ss"] = self.w_ss
        out[f"{prefix}.w_sq"] = self.w_sq
        out[f"{prefix}.w_qq"] = self.w_qq
        out[f"{prefix}.w_qs"] = self.w_qs


def neighbor_means(question_subjects: dict, num_questions: int, num_subjects: int):
    """Row-normalized bipartite adjacencies (subject->questions and
    question->subjects). Rows without neighbors stay zero."""
    a_sq = np.zeros((num_subjects, num_questions))
    a_qs = np.zeros((num_questions, num_subjects))
    for q, subjects in question_subjects.items():
        for s in subjects:
            a_sq[s, q] = 1.0
            a_qs[q, s] = 1.0
    sq_counts = a_sq.sum(axis=1, keepdims=True)
    qs_counts = a_qs.sum(axis=1, keepdims=True)
    lonely = int(((sq_counts == 0).sum()))
    if lonely:
        log.warning("%d subject ids have no tagged questions; their neighbor mean is zero", lonely)
    np.divide(a_sq, sq_counts, out=a_sq, where=sq_counts > 0)
    np.divide(a_qs, qs_counts, out=a_qs, where=qs_counts > 0)
    return a_sq, a_qs


def gcn_embed(params: GcnParams, tables: EmbeddingTables, question_subjects: dict,
              num_questions: int, num_subjects: int):
    """Two-level graph propagation.

    Level-1 subject rows mix each subject with the mean of its questions;
    level-2 question rows mix each question with the mean of its subjects'
    level-1 rows. Both pass through tanh.
    """
    a_sq, a_qs = neighbor_means(question_subjects, num_questions, num_subjects)
    s1 = ad.tanh(ad.add(ad.matmul(tables.subject, params.w_ss),
                        ad.matmul(ad.constant(a_sq), ad.matmul(tables.question, params.w_sq))))
    q2 = ad.tanh(ad.add(ad.matmul(tables.question, params.w_qq),
                        ad.matmul(ad.constant(a_qs), ad.matmul(s1, params.w_qs))))
    return s1, q2
