"""K-means over learned (question, wrong-option) embeddings, plus the pair
counting agreement scores used to compare partitions.

Restarts are independent and deterministic per restart index, so running
them serially or across threads (capped by the OT_THREADS environment
variable) gives the same selected solution.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import NUM_OPTIONS, OPTIONS
from .errors import ConfigError, DataError
from .seeding import substream


def l2_normalize(points: np.ndarray) -> np.ndarray:
    """Scale rows to unit length; zero rows stay zero."""
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    return np.divide(points, norms, out=points.astype(float).copy(), where=norms > 0)


def _pair_counts(labels_a, labels_b):
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise DataError("partition scores need two equal-length non-empty label arrays")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return float((x * (x - 1) // 2).sum())

    together_both = comb2(table)
    together_a = comb2(table.sum(axis=1))
    together_b = comb2(table.sum(axis=0))
    total = comb2(np.array([a.size]))
    return together_both, together_a, together_b, total


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Rand index corrected for chance; 1 on identical partitions, around 0
    for independent ones, negative when pairs cross systematically."""
    both, ta, tb, total = _pair_counts(labels_a, labels_b)
    expected = ta * tb / total if total else 0.0
    maximum = (ta + tb) / 2.0
    if maximum == expected:
        return 1.0  # both partitions all-singletons or all-together
    return (both - expected) / (maximum - expected)


def fowlkes_mallows(labels_a, labels_b) -> float:
    """Geometric mean of pair precision and recall between two partitions."""
    both, ta, tb, _ = _pair_counts(labels_a, labels_b)
    if ta == 0 or tb == 0:
        return 0.0
    return both / np.sqrt(ta * tb)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KmeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int
    restart: int


def _plus_plus_init(points, k, rng):
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    dist2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist2.sum()
        if total <= 0:  # all remaining points sit on existing centers
            centers[i] = points[rng.integers(n)]
            continue
        centers[i] = points[rng.choice(n, p=dist2 / total)]
        dist2 = np.minimum(dist2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(points, k, rng, max_iter, tol):
    centers = _plus_plus_init(points, k, rng)
    labels = np.zeros(len(points), dtype=int)
    for iteration in range(1, max_iter + 1):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new_centers = centers.copy()
        closest = d2[np.arange(len(points)), labels]
        for c in range(k):
            member = labels == c
            if member.any():
                new_centers[c] = points[member].mean(axis=0)
            else:  # reseed an empty cluster with the worst-fit point
                worst = int(closest.argmax())
                new_centers[c] = points[worst]
                closest[worst] = 0.0
        shift = ((new_centers - centers) ** 2).sum(axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return labels, centers, inertia, iteration


def kmeans(points, k: int, seed: int = 0, restarts: int = 8,
           max_iter: int = 300, tol: float = 1e-8) -> KmeansResult:
    """Best of several k-means++ runs by inertia; ties keep the lowest
    restart index so the result never depends on scheduling."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise DataError(f"points must be a 2-d array, got shape {points.shape}")
    if not 1 <= k <= len(points):
        raise DataError(f"k={k} needs between 1 and {len(points)} clusters")
    if restarts < 1:
        raise ConfigError("restarts must be at least 1")

    def run(r):
        rng = substream(seed, f"kmeans/restart/{r}")
        return _lloyd(points, k, rng, max_iter, tol)

    workers = int(os.environ.get("OT_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(restarts)))
    else:
        outcomes = [run(r) for r in range(restarts)]
    best = min(range(restarts), key=lambda r: outcomes[r][2])
    labels, centers, inertia, iterations = outcomes[best]
    return KmeansResult(labels=labels, centers=centers, inertia=inertia,
                        iterations=iterations, restart=best)


# ---------------------------------------------------------------------------
# shared-error clustering over pair embeddings
# ---------------------------------------------------------------------------

def incorrect_pair_index(correct_options: dict, questions=None) -> list:
    """(question, option) pairs for every option that is not the key, in
    (question asc, option asc) order; three per question. ``questions``
    restricts to a subset, e.g. one subject's questions."""
    if questions is None:
        kept = sorted(correct_options)
    else:
        kept = sorted(set(questions))
        missing = [q for q in kept if q not in correct_options]
        if missing:
            raise DataError(f"no correct option recorded for questions {missing}")
    if not kept:
        raise DataError("no questions to index")
    return [(q, o) for q in kept
            for o in range(NUM_OPTIONS) if o != correct_options[q]]


def extract_incorrect_embeddings(model, correct_options: dict, questions=None):
    """Rows of the learned pair table for every incorrect option.

    Option scores are normalized within each question, so shifting all four
    of a question's rows by a common vector never changes the model's
    probabilities; the raw rows float on that arbitrary per-question offset.
    Subtracting the question mean removes it and leaves the part the
    optimizer actually pinned down.

    Returns (pairs, matrix) where matrix[i] embeds pairs[i].
    """
    if model.kind != "pair":
        raise DataError(f"embeddings come from a pair model, got {model.kind!r}")
    pairs = incorrect_pair_index(correct_options, questions)
    table = model.pair_table.values
    centered = {}
    for q in sorted({q for q, _ in pairs}):
        block = table[q * NUM_OPTIONS:(q + 1) * NUM_OPTIONS]
        centered[q] = block - block.mean(axis=0)
    rows = np.stack([centered[q][o] for q, o in pairs])
    return pairs, rows


@dataclass
class ErrorClusters:
    pairs: list            # (question_id, option_index), aligned with labels
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    k: int
    normalized: bool

    def assignment(self) -> dict:
        return {pair: int(lab) for pair, lab in zip(self.pairs, self.labels)}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["question_id", "option", "cluster"])
            for (q, o), lab in zip(self.pairs, self.labels):
                writer.writerow([q, OPTIONS[o], int(lab)])


def cluster_errors(model, correct_options: dict, k: int, seed: int = 0,
                   normalize: bool = True, restarts: int = 8,
                   questions=None) -> ErrorClusters:
    """K-means over (question, wrong option) embeddings; unit-normalizing
    first makes distances depend on direction rather than magnitude."""
    pairs, rows = extract_incorrect_embeddings(model, correct_options, questions)
    points = l2_normalize(rows) if normalize else rows
    result = kmeans(points, k, seed=seed, restarts=restarts)
    return ErrorClusters(pairs=pairs, labels=result.labels, centers=result.centers,
                         inertia=result.inertia, k=k, normalized=normalize)


def load_cluster_csv(path) -> dict:
    """Read a (question_id, option, cluster) CSV back into an assignment."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            try:
                out[(int(row["question_id"]), OPTIONS.index(row["option"]))] = \
                    int(row["cluster"])
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}: bad cluster row {i + 2}: {exc}") from exc
    if not out:
        raise DataError(f"{path}: no cluster assignments")
    return out
