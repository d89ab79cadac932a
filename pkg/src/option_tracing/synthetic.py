"""Synthetic response generator with planted shared-error structure.

Each question's three incorrect options carry three distinct error modes.
Students hold a small fixed number of modes; when they answer incorrectly
and a held mode is present they usually (expression_prob) pick one of its
options, so selections of same-mode options correlate across students.
Correctness follows a guess/slip channel around per-subject mastery that
grows logistically over the session.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .clustering import adjusted_rand_index, kmeans, l2_normalize
from .data import NUM_OPTIONS, OPTIONS, Dataset, build_dataset
from .errors import ConfigError
from .seeding import substream


@dataclass(frozen=True)
class GenConfig:
    num_students: int = 500
    num_questions: int = 100
    num_subjects: int = 10
    num_error_modes: int = 8
    length_range: tuple = (200, 250)
    learn_rate: float = 1.0     # scales how much mastery grows over a session
    guess: float = 0.05
    slip: float = 0.1
    misconceptions_per_student: int = 2
    expression_prob: float = 0.8
    ability_mean: float = -0.8  # questions start hard; wrong picks carry signal
    ability_sd: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if min(self.num_students, self.num_questions, self.num_subjects,
               self.num_error_modes) < 1:
            raise ConfigError("all generator counts must be at least 1")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad sequence length range {self.length_range}")
        wrong_slots = 3 * self.num_questions
        if self.num_error_modes > wrong_slots:
            raise ConfigError(
                f"{self.num_error_modes} error modes cannot be planted on "
                f"{wrong_slots} incorrect options")
        for name in ("guess", "slip", "expression_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {value}")
        if self.guess + self.slip >= 1.0:
            raise ConfigError("guess + slip must stay below 1")
        if not 0 <= self.misconceptions_per_student <= self.num_error_modes:
            raise ConfigError("misconceptions_per_student must fit in the mode count")
        if self.learn_rate < 0 or self.ability_sd < 0:
            raise ConfigError("learn_rate and ability_sd must be non-negative")


@dataclass(frozen=True)
class SyntheticTruth:
    """Everything the generator decided, for oracles and debugging."""
    mode_of: dict            # (question_id, wrong option index) -> error mode
    held_modes: dict         # student_id -> frozenset of error modes
    abilities: dict          # student_id -> float
    difficulties: dict       # question_id -> float
    analytic_correct_rate: float  # mean of the per-event Bernoulli correctness means

    def modes_in_pair_order(self, pairs) -> np.ndarray:
        return np.array([self.mode_of[p] for p in pairs], dtype=int)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _assign_modes(rng, num_questions: int, num_modes: int) -> np.ndarray:
    """Balanced mode labels over the 3 x num_questions wrong-option slots,
    with the three modes of any one question distinct whenever there are at
    least three modes to choose from."""
    slots = np.arange(3 * num_questions) % num_modes
    rng.shuffle(slots)
    if num_modes < 3:
        return slots
    for q in range(num_questions):
        tri = slice(3 * q, 3 * q + 3)
        for attempt in range(100):
            triple = slots[tri].tolist()
            if len(set(triple)) == 3:
                break
            i = next(i for i in range(3) if triple.count(triple[i]) > 1)
            for j in range(3 * num_questions):
                if j // 3 == q:
                    continue
                other = slots[3 * (j // 3):3 * (j // 3) + 3].tolist()
                other.remove(slots[j])
                if slots[j] not in triple and triple[i] not in other:
                    slots[3 * q + i], slots[j] = slots[j], slots[3 * q + i]
                    break
        else:
            raise ConfigError("could not place distinct error modes per question")
    return slots


def _question_bank(config: GenConfig):
    rng = substream(config.seed, "gen/questions")
    subjects, correct, difficulty = {}, {}, {}
    for q in range(config.num_questions):
        count = int(rng.integers(1, 4))  # 1 to 3 subject tags
        subjects[q] = tuple(sorted(rng.choice(config.num_subjects, size=min(
            count, config.num_subjects), replace=False).tolist()))
        correct[q] = int(rng.integers(0, NUM_OPTIONS))
        difficulty[q] = float(rng.normal(0.0, 1.0))
    pairs = [(q, o) for q in range(config.num_questions)
             for o in range(NUM_OPTIONS) if o != correct[q]]
    modes = _assign_modes(rng, config.num_questions, config.num_error_modes)
    mode_of = {pair: int(m) for pair, m in zip(pairs, modes)}
    return subjects, correct, difficulty, mode_of


def generate(config: GenConfig):
    """Returns (dataset, truth); byte-identical for identical configs."""
    subjects, correct, difficulty, mode_of = _question_bank(config)
    wrong_options = {q: tuple(o for o in range(NUM_OPTIONS) if o != correct[q])
                     for q in subjects}
    rows = []
    held_modes, abilities = {}, {}
    p_sum, p_events = 0.0, 0
    lo, hi = config.length_range
    for sid in range(config.num_students):
        rng = substream(config.seed, f"gen/student/{sid}")
        ability = float(rng.normal(config.ability_mean, config.ability_sd))
        abilities[sid] = ability
        held = frozenset(int(m) for m in rng.choice(
            config.num_error_modes, size=config.misconceptions_per_student,
            replace=False))
        held_modes[sid] = held
        # logistic mastery growth, one curve per subject
        amp = config.learn_rate * rng.uniform(0.5, 2.0, config.num_subjects)
        rate = rng.uniform(4.0, 8.0, config.num_subjects)
        mid = rng.uniform(0.3, 0.7, config.num_subjects)
        steps = int(rng.integers(lo, hi + 1))
        for t in range(steps):
            q = int(rng.integers(0, config.num_questions))
            progress = t / max(steps - 1, 1)
            curves = amp * (_sigmoid(rate * (progress - mid)) - _sigmoid(-rate * mid))
            mastery = ability + float(np.mean([curves[s] for s in subjects[q]]))
            p_correct = config.guess + (1.0 - config.guess - config.slip) * _sigmoid(
                mastery - difficulty[q])
            p_sum += p_correct
            p_events += 1
            if rng.random() < p_correct:
                chosen = correct[q]
            else:
                options = wrong_options[q]
                held_here = [o for o in options if mode_of[(q, o)] in held]
                if held_here and rng.random() < config.expression_prob:
                    chosen = held_here[int(rng.integers(0, len(held_here)))]
                else:
                    chosen = options[int(rng.integers(0, len(options)))]
            rows.append((sid, float(t), q, subjects[q], chosen, correct[q]))
    dataset = build_dataset(rows)
    truth = SyntheticTruth(mode_of=mode_of, held_modes=held_modes,
                           abilities=abilities, difficulties=difficulty,
                           analytic_correct_rate=p_sum / p_events)
    return dataset, truth


def write_ground_truth(truth: SyntheticTruth, path):
    """Planted clusters in the same CSV layout the clustering step emits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "option", "cluster"])
        for (q, o), mode in sorted(truth.mode_of.items()):
            writer.writerow([q, OPTIONS[o], mode])


# ---------------------------------------------------------------------------
# separability oracle
# ---------------------------------------------------------------------------

def co_selection_matrix(dataset: Dataset):
    """Count how often every student picked every incorrect option.

    Returns (pairs, matrix) with one row per (question, wrong option) pair
    and one column per student; same-mode rows correlate when misconceptions
    drive wrong answers.
    """
    pairs = [(q, o) for q in sorted(dataset.correct_options)
             for o in range(NUM_OPTIONS) if o != dataset.correct_options[q]]
    index = {pair: i for i, pair in enumerate(pairs)}
    matrix = np.zeros((len(pairs), dataset.num_students))
    for sid, _, ev in dataset.all_events():
        key = (ev.question_id, ev.chosen_option)
        if key in index:
            matrix[index[key], sid] += 1.0
    return pairs, matrix


def co_selection_profiles(matrix: np.ndarray) -> np.ndarray:
    """Cosine co-selection profile per pair: row i holds the similarity of
    pair i's selection pattern to every other pair's. Aggregating over all
    pairs averages out the per-student sampling noise that makes the raw
    count rows hard to cluster directly."""
    unit = l2_normalize(matrix)
    sim = unit @ unit.T
    np.fill_diagonal(sim, 0.0)
    return l2_normalize(sim)


def co_selection_ari(dataset: Dataset, truth: SyntheticTruth, seed: int = 0) -> float:
    """Agreement between k-means on co-selection profiles and the planted
    modes. High values mean the planted structure is recoverable from raw
    selections before any model enters the picture."""
    pairs, matrix = co_selection_matrix(dataset)
    k = len(set(truth.mode_of.values()))
    result = kmeans(co_selection_profiles(matrix), k=k, seed=seed, restarts=8)
    return adjusted_rand_index(result.labels, truth.modes_in_pair_order(pairs))
