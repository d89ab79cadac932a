"""Data model, ingestion, and CF/KT evaluation splits.

A dataset is an immutable collection of per-student, time-ordered response
sequences plus the bipartite question-subject graph. The CF split hides
labels at randomly chosen time steps inside each student's sequence; the KT
split holds out whole students.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .seeding import substream

log = logging.getLogger(__name__)

OPTIONS = ("A", "B", "C", "D")
NUM_OPTIONS = 4
UNTAGGED_SUBJECT = 0  # reserved id for questions with no subject tags
DEFAULT_MAX_LEN = 200


def option_index(letter: str) -> int:
    try:
        return OPTIONS.index(letter.strip().upper())
    except ValueError:
        raise DataError(f"unknown option {letter!r}; expected one of {OPTIONS}") from None


@dataclass(frozen=True)
class ResponseEvent:
    """One answered question at one time step.

    ``chosen_option`` and ``correct_option`` are indices into OPTIONS;
    ``correctness`` is always derived as chosen == correct. ``mask`` is 1
    when the step's labels are observed (training), 0 when held out.
    """
    question_id: int
    subject_ids: tuple[int, ...]
    chosen_option: int
    correct_option: int
    correctness: int
    mask: int = 1
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.subject_ids:
            raise DataError(f"question {self.question_id}: empty subject set")
        if self.correctness != int(self.chosen_option == self.correct_option):
            raise DataError(f"question {self.question_id}: correctness inconsistent "
                            "with chosen/correct options")


def make_event(question_id, subject_ids, chosen_option, correct_option,
               mask=1, timestamp=0.0) -> ResponseEvent:
    subjects = tuple(sorted(set(int(s) for s in subject_ids))) or (UNTAGGED_SUBJECT,)
    return ResponseEvent(
        question_id=int(question_id),
        subject_ids=subjects,
        chosen_option=int(chosen_option),
        correct_option=int(correct_option),
        correctness=int(int(chosen_option) == int(correct_option)),
        mask=int(mask),
        timestamp=float(timestamp),
    )


@dataclass(frozen=True)
class StudentSequence:
    student_id: int
    events: tuple[ResponseEvent, ...]

    def __post_init__(self):
        if not self.events:
            raise DataError(f"student {self.student_id}: empty sequence")

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Dataset:
    students: tuple[StudentSequence, ...]
    question_subjects: dict  # question_id -> tuple of subject ids
    correct_options: dict    # question_id -> option index
    num_questions: int       # table size: max id + 1
    num_subjects: int
    num_options: int = NUM_OPTIONS

    @property
    def num_students(self) -> int:
        return max(s.student_id for s in self.students) + 1

    def subject_questions(self) -> dict:
        """Reverse adjacency: subject id -> sorted tuple of question ids."""
        rev: dict[int, list] = {}
        for q, subjects in self.question_subjects.items():
            for s in subjects:
                rev.setdefault(s, []).append(q)
        return {s: tuple(sorted(qs)) for s, qs in rev.items()}

    def all_events(self):
        for seq in self.students:
            for t, ev in enumerate(seq.events):
                yield seq.student_id, t, ev


def build_dataset(rows) -> Dataset:
    """Assemble a Dataset from (student_id, timestamp, question_id,
    subject_ids, chosen_idx, correct_idx) tuples, enforcing invariants."""
    per_student: dict[int, list] = {}
    correct: dict[int, int] = {}
    subjects_of: dict[int, tuple] = {}
    for sid, ts, qid, subjects, chosen, corr in rows:
        ev = make_event(qid, subjects, chosen, corr, timestamp=ts)
        prev = correct.get(ev.question_id)
        if prev is not None and prev != ev.correct_option:
            raise DataError(f"question {ev.question_id}: inconsistent correct option "
                            f"({OPTIONS[prev]} vs {OPTIONS[ev.correct_option]})")
        correct[ev.question_id] = ev.correct_option
        known = subjects_of.get(ev.question_id)
        if known is not None and known != ev.subject_ids:
            raise DataError(f"question {ev.question_id}: inconsistent subject tags")
        subjects_of[ev.question_id] = ev.subject_ids
        per_student.setdefault(int(sid), []).append(ev)

    if not per_student:
        raise DataError("dataset contains no rows")
    students = []
    for sid in sorted(per_student):
        events = sorted(per_student[sid], key=lambda e: e.timestamp)  # stable: ties keep file order
        students.append(StudentSequence(sid, tuple(events)))
    num_questions = max(correct) + 1
    num_subjects = max(max(s) for s in subjects_of.values()) + 1
    return Dataset(
        students=tuple(students),
        question_subjects=dict(sorted(subjects_of.items())),
        correct_options=dict(sorted(correct.items())),
        num_questions=num_questions,
        num_subjects=num_subjects,
    )


# ---------------------------------------------------------------------------
# ingestion / serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("student_id", "timestamp", "question_id", "subject_ids",
               "chosen_option", "correct_option")


def _parse_subjects(text: str):
    text = text.strip()
    if not text:
        return (UNTAGGED_SUBJECT,)
    return tuple(int(part) for part in text.split(";"))


def load_dataset(path, format: str | None = None) -> Dataset:
    """Load a dataset from CSV or JSONL (format inferred from the extension
    when not given). Raises DataError naming the offending row."""
    path = str(path)
    if format is None:
        format = "jsonl" if path.endswith((".jsonl", ".json")) else "csv"
    if format not in ("csv", "jsonl"):
        raise DataError(f"unknown dataset format {format!r}")

    rows = []
    if format == "csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            for lineno, rec in enumerate(reader, start=2):
                try:
                    rows.append((int(rec["student_id"]), float(rec["timestamp"]),
                                 int(rec["question_id"]), _parse_subjects(rec["subject_ids"]),
                                 option_index(rec["chosen_option"]),
                                 option_index(rec["correct_option"])))
                except (TypeError, ValueError, KeyError, DataError) as exc:
                    raise DataError(f"{path}: malformed row {lineno}: {exc}") from None
    else:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rows.append((int(rec["student_id"]), float(rec["timestamp"]),
                                 int(rec["question_id"]),
                                 tuple(int(s) for s in rec["subject_ids"]) or (UNTAGGED_SUBJECT,),
                                 option_index(rec["chosen_option"]),
                                 option_index(rec["correct_option"])))
                except (TypeError, ValueError, KeyError, DataError) as exc:
                    raise DataError(f"{path}: malformed row {lineno}: {exc}") from None
    return build_dataset(rows)


def save_dataset(ds: Dataset, path, format: str | None = None):
    path = str(path)
    if format is None:
        format = "jsonl" if path.endswith((".jsonl", ".json")) else "csv"
    with open(path, "w", newline="") as fh:
        if format == "csv":
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for seq in ds.students:
                for ev in seq.events:
                    writer.writerow([seq.student_id, repr(ev.timestamp), ev.question_id,
                                     ";".join(str(s) for s in ev.subject_ids),
                                     OPTIONS[ev.chosen_option], OPTIONS[ev.correct_option]])
        elif format == "jsonl":
            for seq in ds.students:
                for ev in seq.events:
                    fh.write(json.dumps({
                        "student_id": seq.student_id, "timestamp": ev.timestamp,
                        "question_id": ev.question_id, "subject_ids": list(ev.subject_ids),
                        "chosen_option": OPTIONS[ev.chosen_option],
                        "correct_option": OPTIONS[ev.correct_option],
                    }, sort_keys=True) + "\n")
        else:
            raise DataError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    mode: str  # "cf" or "kt"
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("cf", "kt"):
            raise DataError(f"split mode must be 'cf' or 'kt', got {self.mode!r}")
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise DataError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass(frozen=True)
class CfSplit:
    """Per-time-step split: dataset has masks 0 at val/test steps."""
    dataset: Dataset
    val_indices: frozenset  # of (student_id, step)
    test_indices: frozenset
    warnings: tuple = ()

    def assignment_of(self, student_id: int, step: int) -> str:
        if (student_id, step) in self.test_indices:
            return "test"
        if (student_id, step) in self.val_indices:
            return "val"
        return "train"


@dataclass(frozen=True)
class KtSplit:
    """Per-student split: whole sequences per bucket."""
    dataset: Dataset
    train_students: tuple
    val_students: tuple
    test_students: tuple

    def subset(self, which: str) -> tuple:
        ids = set({"train": self.train_students, "val": self.val_students,
                   "test": self.test_students}[which])
        return tuple(s for s in self.dataset.students if s.student_id in ids)


def _rounded_count(frac: float, total: int) -> int:
    return int(np.floor(frac * total + 0.5))


def _mask_students(ds: Dataset, hidden: set) -> Dataset:
    students = []
    for seq in ds.students:
        events = tuple(replace(ev, mask=0) if (seq.student_id, t) in hidden else ev
                       for t, ev in enumerate(seq.events))
        students.append(StudentSequence(seq.student_id, events))
    return replace(ds, students=tuple(students))


def make_cf_split(ds: Dataset, spec: SplitSpec) -> CfSplit:
    """Hide ~val_frac/test_frac of each student's steps; every student keeps
    at least one observed training step. Students with fewer than 3 events
    stay entirely in training (warning recorded)."""
    if spec.mode != "cf":
        raise DataError("make_cf_split requires spec.mode == 'cf'")
    val, test, warnings = set(), set(), []
    for seq in ds.students:
        T = len(seq.events)
        if T < 3:
            warnings.append(f"student {seq.student_id}: only {T} events, kept fully in training")
            continue
        n_test = _rounded_count(spec.test_frac, T)
        n_val = _rounded_count(spec.val_frac, T)
        while T - n_test - n_val < 1:  # keep >= 1 training step
            if n_test >= n_val and n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        perm = substream(spec.seed, f"cf-split/{seq.student_id}").permutation(T)
        test.update((seq.student_id, int(t)) for t in perm[:n_test])
        val.update((seq.student_id, int(t)) for t in perm[n_test:n_test + n_val])
    for w in warnings:
        log.warning(w)
    masked = _mask_students(ds, val | test)
    return CfSplit(masked, frozenset(val), frozenset(test), tuple(warnings))


def make_kt_split(ds: Dataset, spec: SplitSpec) -> KtSplit:
    """Disjoint student-level partition at the given fractions."""
    if spec.mode != "kt":
        raise DataError("make_kt_split requires spec.mode == 'kt'")
    ids = [s.student_id for s in ds.students]
    n = len(ids)
    n_test = _rounded_count(spec.test_frac, n)
    n_val = _rounded_count(spec.val_frac, n)
    if n_test < 1 or n_val < 1 or n - n_test - n_val < 1:
        raise DataError(f"{n} students cannot fill all three KT buckets at {spec}")
    perm = substream(spec.seed, "kt-split").permutation(n)
    test = tuple(sorted(ids[i] for i in perm[:n_test]))
    val = tuple(sorted(ids[i] for i in perm[n_test:n_test + n_val]))
    train = tuple(sorted(ids[i] for i in perm[n_test + n_val:]))
    return KtSplit(ds, train, val, test)


def kfold(ds: Dataset, k: int, mode: str, seed: int, val_frac: float = 0.2):
    """k cross-validation splits; each test unit (step under CF, student
    under KT) lands in exactly one fold's test set."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    folds = []
    if mode == "kt":
        ids = [s.student_id for s in ds.students]
        if k > len(ids):
            raise DataError(f"k={k} exceeds {len(ids)} students")
        perm = substream(seed, "kfold-kt").permutation(len(ids))
        chunks = np.array_split(perm, k)
        for i, chunk in enumerate(chunks):
            test = sorted(ids[j] for j in chunk)
            rest = [ids[j] for c in chunks[:i] + chunks[i + 1:] for j in c]
            rng = substream(seed, f"kfold-kt/val/{i}")
            rest = list(rng.permutation(rest))
            n_val = max(1, _rounded_count(val_frac, len(ids)))
            if n_val >= len(rest):
                raise DataError("validation fraction leaves no training students")
            val = sorted(int(x) for x in rest[:n_val])
            train = sorted(int(x) for x in rest[n_val:])
            folds.append(KtSplit(ds, tuple(train), tuple(val), tuple(test)))
    elif mode == "cf":
        total_steps = sum(len(s.events) for s in ds.students)
        if k > total_steps:
            raise DataError(f"k={k} exceeds {total_steps} time steps")
        fold_sets = [(set(), set()) for _ in range(k)]  # (val, test) per fold
        for seq in ds.students:
            T = len(seq.events)
            perm = substream(seed, f"kfold-cf/{seq.student_id}").permutation(T)
            chunks = np.array_split(perm, k)
            for i in range(k):
                test_steps = set(int(t) for t in chunks[i])
                rest = [int(t) for c in chunks[:i] + chunks[i + 1:] for t in c]
                n_val = min(_rounded_count(val_frac, T), max(0, len(rest) - 1))
                rng = substream(seed, f"kfold-cf/val/{seq.student_id}/{i}")
                rest = list(rng.permutation(rest)) if rest else []
                fold_sets[i][1].update((seq.student_id, t) for t in test_steps)
                fold_sets[i][0].update((seq.student_id, int(t)) for t in rest[:n_val])
        for val, test in fold_sets:
            masked = _mask_students(ds, val | test)
            folds.append(CfSplit(masked, frozenset(val), frozenset(test)))
    else:
        raise DataError(f"split mode must be 'cf' or 'kt', got {mode!r}")
    return folds


def chunk_sequences(students, max_len: int = DEFAULT_MAX_LEN):
    """Cut sequences longer than max_len into consecutive windows; each
    window is treated as its own sequence downstream."""
    out = []
    for seq in students:
        if len(seq.events) <= max_len:
            out.append(seq)
        else:
            for start in range(0, len(seq.events), max_len):
                window = seq.events[start:start + max_len]
                out.append(StudentSequence(seq.student_id, tuple(window)))
    return out


# ---------------------------------------------------------------------------
# split artifacts
# ---------------------------------------------------------------------------

def split_to_json(split) -> dict:
    if isinstance(split, CfSplit):
        assignments = {}
        for seq in split.dataset.students:
            assignments[str(seq.student_id)] = [split.assignment_of(seq.student_id, t)
                                                for t in range(len(seq.events))]
        return {"mode": "cf", "assignments": assignments, "warnings": list(split.warnings)}
    if isinstance(split, KtSplit):
        assignments = {}
        for bucket in ("train", "val", "test"):
            for sid in getattr(split, f"{bucket}_students"):
                assignments[str(sid)] = bucket
        return {"mode": "kt", "assignments": assignments}
    raise DataError(f"cannot serialize split of type {type(split).__name__}")


def save_split(split, spec: SplitSpec | None, path):
    doc = split_to_json(split)
    if spec is not None:
        doc["spec"] = {"mode": spec.mode, "train_frac": spec.train_frac,
                       "val_frac": spec.val_frac, "test_frac": spec.test_frac,
                       "seed": spec.seed}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path, ds: Dataset):
    with open(path) as fh:
        doc = json.load(fh)
    if doc["mode"] == "cf":
        val, test = set(), set()
        for seq in ds.students:
            labels = doc["assignments"][str(seq.student_id)]
            if len(labels) != len(seq.events):
                raise DataError(f"split file does not match dataset for student {seq.student_id}")
            for t, label in enumerate(labels):
                if label == "val":
                    val.add((seq.student_id, t))
                elif label == "test":
                    test.add((seq.student_id, t))
        masked = _mask_students(ds, val | test)
        return CfSplit(masked, frozenset(val), frozenset(test),
                       tuple(doc.get("warnings", ())))
    if doc["mode"] == "kt":
        buckets = {"train": [], "val": [], "test": []}
        for sid, bucket in doc["assignments"].items():
            buckets[bucket].append(int(sid))
        return KtSplit(ds, tuple(sorted(buckets["train"])), tuple(sorted(buckets["val"])),
                       tuple(sorted(buckets["test"])))
    raise DataError(f"unknown split mode {doc['mode']!r}")
