"""Finite-difference verification of every primitive and every model.

Each primitive is checked at many random points through a random linear
functional of its output, so all output entries contribute to the scalar
being differentiated. Models are checked end to end on a tiny batch through
the actual training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import training as tr
from .data import StudentSequence, make_event
from .models import MODEL_KINDS, ModelConfig, build_model, flatten_cells, make_batch
from .seeding import substream

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        word = "pass" if self.passed else "FAIL"
        return (f"{word}  {self.name:<24} max_rel_err {self.max_error:.3e}  "
                f"tol {self.tolerance:.0e}")


def _param(rng, *shape):
    return ad.parameter(rng.normal(0.0, 1.0, shape))


def _positive(rng, *shape):
    return ad.parameter(rng.uniform(0.2, 2.0, shape))


# each entry builds (op, xs) at a random point; the harness adds the random
# linear functional on top
_PRIMITIVES = {
    "matmul": lambda rng: (ad.matmul, [_param(rng, 3, 4), _param(rng, 4, 2)]),
    "add": lambda rng: (ad.add, [_param(rng, 3, 4), _param(rng, 3, 4)]),
    "add_row_bias": lambda rng: (ad.add, [_param(rng, 3, 4), _param(rng, 4)]),
    "multiply": lambda rng: (ad.multiply, [_param(rng, 3, 4), _param(rng, 3, 4)]),
    "scale": lambda rng: (lambda a: ad.scale(a, 1.7), [_param(rng, 3, 4)]),
    "concat_cols": lambda rng: (lambda a, b: ad.concat([a, b]),
                                [_param(rng, 3, 2), _param(rng, 3, 3)]),
    "concat_rows": lambda rng: (lambda a, b: ad.concat([a, b], axis=0),
                                [_param(rng, 2, 3), _param(rng, 4, 3)]),
    "take_slice": lambda rng: (lambda a: ad.take_slice(a, (slice(1, 3), slice(0, 2))),
                               [_param(rng, 4, 3)]),
    "transpose": lambda rng: (ad.transpose, [_param(rng, 3, 4)]),
    "tanh": lambda rng: (ad.tanh, [_param(rng, 3, 4)]),
    "sigmoid": lambda rng: (ad.sigmoid, [_param(rng, 3, 4)]),
    "exp": lambda rng: (ad.exp, [_param(rng, 3, 4)]),
    "log": lambda rng: (ad.log, [_positive(rng, 3, 4)]),
    "gather_rows": lambda rng: (
        lambda t: ad.gather_rows(t, np.array([0, 2, 2, 4, 1, 0])),
        [_param(rng, 5, 3)]),
    "row_sum": lambda rng: (ad.row_sum, [_param(rng, 3, 4)]),
    "sum_all": lambda rng: (ad.sum_all, [_param(rng, 3, 4)]),
    "softmax": lambda rng: (ad.softmax, [_param(rng, 4, 5)]),
    "masked_fill": lambda rng: (
        lambda a: ad.masked_fill(a, np.array([[True, False, True],
                                              [False, False, True]]), -3.0),
        [_param(rng, 2, 3)]),
}


def primitive_checks(seed: int = 0, points: int = 100):
    for name, build in _PRIMITIVES.items():
        rng = substream(seed, f"gradcheck/{name}")
        worst = 0.0
        for _ in range(points):
            op, xs = build(rng)
            probe = op(*xs)
            c = ad.constant(rng.normal(size=probe.values.shape))

            def f(*args):
                out = op(*args)
                if out.values.ndim == 0:
                    return ad.scale(out, 1.3)
                return ad.sum_all(ad.multiply(out, c))

            worst = max(worst, ad.finite_difference_check(f, xs))
        yield CheckResult(f"primitive/{name}", worst, PRIMITIVE_TOL)


def _toy_batch(config: ModelConfig, rng):
    seqs = []
    for i, length in enumerate((5, 3)):
        events = []
        for t in range(length):
            events.append(make_event(
                int(rng.integers(0, config.num_questions)),
                (int(rng.integers(0, config.num_subjects)),),
                int(rng.integers(0, 4)), int(rng.integers(0, 4)),
                mask=1 if t == 0 else int(rng.integers(0, 2))))
        seqs.append(StudentSequence(i, tuple(events)))
    return make_batch(seqs, config)


def model_checks(seed: int = 0):
    config = ModelConfig(num_questions=6, num_subjects=3, num_students=2,
                         d=4, hidden=8, memory_slots=4, attention_heads=2,
                         max_len=8)
    question_subjects = {q: (q % config.num_subjects,)
                         for q in range(config.num_questions)}
    tasks = [(kind, "option") for kind in sorted(MODEL_KINDS)]
    tasks.append(("pobidkt", "correctness"))
    for kind, task in tasks:
        rng = substream(seed, f"gradcheck/model/{kind}/{task}")
        model = build_model(kind, task, config, seed,
                            question_subjects=question_subjects)
        batch = _toy_batch(config, rng)
        _, order = model.forward_batch(batch)
        weights = flatten_cells(batch.label_mask * batch.pad, order)
        if task == "option":
            targets = flatten_cells(batch.chosen, order)
            loss = lambda logits: tr.nll_loss(logits, targets, weights)
        else:
            labels = flatten_cells(batch.correctness, order)
            loss = lambda logits: tr.bce_loss(logits, labels, weights)
        params = list(model.named_parameters().values())

        def f(*args):
            logits, _ = model.forward_batch(batch)
            return loss(logits)

        err = ad.finite_difference_check(f, params)
        yield CheckResult(f"model/{kind}/{task}", err, MODEL_TOL)


def run_gradcheck(seed: int = 0, points: int = 100):
    """All primitive and model checks; returns (results, all_passed)."""
    results = list(primitive_checks(seed, points))
    results.extend(model_checks(seed))
    return results, all(r.passed for r in results)
