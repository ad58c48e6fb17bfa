"""CSV ingestion, record filtering, per-student splits, group partition, context selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DISADVANTAGED, GENERAL, ADVANTAGED = 0, 1, 2
GROUP_NAMES = ("disadvantaged", "general", "advantaged")
MISSING = -1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class EmptyDatasetError(DataError):
    pass


class CorrelationError(DataError):
    pass


@dataclass
class InteractionLog:
    students: np.ndarray
    exercises: np.ndarray
    correct: np.ndarray
    num_students: int
    num_exercises: int
    student_ids: list[str] = field(default_factory=list)
    exercise_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.students = np.asarray(self.students, dtype=np.int64)
        self.exercises = np.asarray(self.exercises, dtype=np.int64)
        self.correct = np.asarray(self.correct, dtype=np.int64)
        if not self.student_ids:
            self.student_ids = [str(i) for i in range(self.num_students)]
        if not self.exercise_ids:
            self.exercise_ids = [str(j) for j in range(self.num_exercises)]

    def __len__(self) -> int:
        return len(self.students)

    @property
    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.students.tolist(), self.exercises.tolist(), self.correct.tolist()))

    def counts(self) -> np.ndarray:
        return np.bincount(self.students, minlength=self.num_students)

    def validate(self) -> None:
        if not np.all((self.correct == 0) | (self.correct == 1)):
            raise DataError("correct values must be 0 or 1")
        if len(self) and (
            self.students.min() < 0
            or self.students.max() >= self.num_students
            or self.exercises.min() < 0
            or self.exercises.max() >= self.num_exercises
        ):
            raise DataError("ids must be dense indices")
        pairs = self.students * self.num_exercises + self.exercises
        if len(np.unique(pairs)) != len(pairs):
            raise DataError("duplicate (student, exercise) pair")


@dataclass
class AttributeTable:
    """Per-student sensitive value plus categorical context answers (MISSING = -1)."""

    sensitive: np.ndarray
    context: np.ndarray
    sensitive_name: str = "sensitive"
    context_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.sensitive = np.asarray(self.sensitive, dtype=np.float64)
        self.context = np.asarray(self.context, dtype=np.int64).reshape(len(self.sensitive), -1)
        if not self.context_names:
            self.context_names = [f"ctx_{k}" for k in range(self.context.shape[1])]

    def __len__(self) -> int:
        return len(self.sensitive)

    def subset(self, rows) -> "AttributeTable":
        rows = np.asarray(rows, dtype=np.int64)
        return AttributeTable(
            self.sensitive[rows], self.context[rows], self.sensitive_name, list(self.context_names)
        )

    def num_classes(self) -> list[int]:
        return [int(max(col.max(initial=MISSING) + 1, 1)) for col in self.context.T]


@dataclass
class QMatrix:
    matrix: np.ndarray
    concept_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if np.any(self.matrix.sum(axis=1) == 0):
            raise DataError("every exercise must cover at least one concept")
        if not self.concept_ids:
            self.concept_ids = [str(k) for k in range(self.matrix.shape[1])]

    @property
    def num_concepts(self) -> int:
        return self.matrix.shape[1]


@dataclass
class GroupAssignment:
    labels: np.ndarray
    cutpoints: tuple[float, float]

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=3)


@dataclass
class SplitDataset:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int


# -- loading ---------------------------------------------------------------


def _read_rows(path: Path, expected: list[str] | None = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if expected is not None and header[: len(expected)] != expected:
            raise DataError(f"{path}, line 1: expected header {','.join(expected)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}, line {lineno}: expected {len(header)} columns, got {len(row)}")
            yield header, lineno, [c.strip() for c in row]


def read_interactions(path) -> InteractionLog:
    path = Path(path)
    sid: dict[str, int] = {}
    eid: dict[str, int] = {}
    seen: dict[tuple[int, int], int] = {}
    s_list, e_list, y_list = [], [], []
    for _, lineno, row in _read_rows(path, ["student_id", "exercise_id", "correct"]):
        s, e, y = row
        if not s:
            raise DataError(f"{path}, line {lineno}, column student_id: empty id")
        if not e:
            raise DataError(f"{path}, line {lineno}, column exercise_id: empty id")
        if y not in ("0", "1"):
            raise DataError(f"{path}, line {lineno}, column correct: expected 0 or 1, got {y!r}")
        si = sid.setdefault(s, len(sid))
        ei = eid.setdefault(e, len(eid))
        if (si, ei) in seen:
            raise DataError(
                f"{path}: duplicate pair ({s}, {e}) on lines {seen[(si, ei)]} and {lineno}"
            )
        seen[(si, ei)] = lineno
        s_list.append(si)
        e_list.append(ei)
        y_list.append(int(y))
    return InteractionLog(
        np.array(s_list, dtype=np.int64),
        np.array(e_list, dtype=np.int64),
        np.array(y_list, dtype=np.int64),
        len(sid),
        len(eid),
        list(sid),
        list(eid),
    )


def read_attributes(path, student_ids: list[str], sensitive: str | None = None) -> AttributeTable:
    path = Path(path)
    rows: dict[str, tuple[int, list[str]]] = {}
    header: list[str] = []
    for header, lineno, row in _read_rows(path):
        if header[0] != "student_id" or len(header) < 2:
            raise DataError(f"{path}, line 1: expected header student_id,<sensitive>,...")
        if row[0] in rows:
            raise DataError(f"{path}: duplicate student {row[0]} on lines {rows[row[0]][0]} and {lineno}")
        rows[row[0]] = (lineno, row[1:])
    if not header:
        raise DataError(f"{path}: no attribute rows")
    columns = header[1:]
    if sensitive is None:
        sensitive = columns[0]
    if sensitive not in columns:
        raise DataError(f"{path}: sensitive column {sensitive!r} not in header")
    s_col = columns.index(sensitive)
    ctx_cols = [k for k in range(len(columns)) if k != s_col]

    sens = np.empty(len(student_ids))
    ctx = np.full((len(student_ids), len(ctx_cols)), MISSING, dtype=np.int64)
    for i, s in enumerate(student_ids):
        if s not in rows:
            raise DataError(f"{path}: no attribute row for student {s}")
        lineno, vals = rows[s]
        raw = vals[s_col]
        try:
            sens[i] = float(raw)
        except ValueError:
            raise DataError(f"{path}, line {lineno}, column {sensitive}: bad sensitive value {raw!r}") from None
        if not math.isfinite(sens[i]):
            raise DataError(f"{path}, line {lineno}, column {sensitive}: bad sensitive value {raw!r}")
        for j, k in enumerate(ctx_cols):
            cell = vals[k]
            if cell == "":
                continue
            try:
                code = int(cell)
            except ValueError:
                raise DataError(f"{path}, line {lineno}, column {columns[k]}: bad category {cell!r}") from None
            if code < 0:
                raise DataError(f"{path}, line {lineno}, column {columns[k]}: negative category {cell!r}")
            ctx[i, j] = code
    return AttributeTable(sens, ctx, sensitive, [columns[k] for k in ctx_cols])


def read_qmatrix(path, exercise_ids: list[str]) -> QMatrix:
    path = Path(path)
    concepts: dict[str, int] = {}
    cover: dict[str, list[int]] = {}
    for _, lineno, row in _read_rows(path, ["exercise_id", "concept_ids"]):
        e, cids = row
        ks = [c.strip() for c in cids.split("|") if c.strip()]
        if not ks:
            raise DataError(f"{path}, line {lineno}, column concept_ids: no concepts")
        cover[e] = [concepts.setdefault(c, len(concepts)) for c in ks]
    q = np.zeros((len(exercise_ids), len(concepts)), dtype=np.int64)
    for j, e in enumerate(exercise_ids):
        if e not in cover:
            raise DataError(f"{path}: no Q-matrix row for exercise {e}")
        q[j, cover[e]] = 1
    return QMatrix(q, list(concepts))


def load_dataset(interactions_path, attributes_path, qmatrix_path=None, sensitive: str | None = None):
    log = read_interactions(interactions_path)
    attrs = read_attributes(attributes_path, log.student_ids, sensitive)
    if qmatrix_path is not None and Path(qmatrix_path).exists():
        q = read_qmatrix(qmatrix_path, log.exercise_ids)
    else:
        q = QMatrix(np.ones((log.num_exercises, 1), dtype=np.int64))
    return log, attrs, q


def write_id_map(path, ids: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["original_id", "dense_index"])
        for k, s in enumerate(ids):
            w.writerow([s, k])


# -- preprocessing ---------------------------------------------------------


def filter_min_records(log: InteractionLog, min_records: int = 10) -> tuple[InteractionLog, np.ndarray]:
    """Drop students with fewer than ``min_records`` records.

    Returns the re-densified log and ``kept``: the old dense index of each
    retained student (``kept[new] = old``), for re-aligning attribute tables.
    """
    if min_records < 1:
        raise ValueError("min_records must be >= 1")
    counts = log.counts()
    kept = np.flatnonzero(counts >= min_records)
    if kept.size == 0:
        raise EmptyDatasetError(f"no student has at least {min_records} records")
    remap = np.full(log.num_students, -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    mask = remap[log.students] >= 0
    out = InteractionLog(
        remap[log.students[mask]],
        log.exercises[mask],
        log.correct[mask],
        int(kept.size),
        log.num_exercises,
        [log.student_ids[k] for k in kept],
        list(log.exercise_ids),
    )
    return out, kept


def split_records(log: InteractionLog, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitDataset:
    """Per-student record split; every student keeps at least one training record."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = np.argsort(log.students, kind="stable")
    bounds = np.searchsorted(log.students[order], np.arange(log.num_students + 1))
    train, valid, test = [], [], []
    for s in range(log.num_students):
        recs = order[bounds[s] : bounds[s + 1]]
        recs = recs[rng.permutation(recs.size)]
        n = recs.size
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        while n - n_val - n_test < 1 and n_val + n_test > 0:
            if n_test >= n_val and n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        n_train = n - n_val - n_test
        train.append(recs[:n_train])
        valid.append(recs[n_train : n_train + n_val])
        test.append(recs[n_train + n_val :])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return SplitDataset(cat(train), cat(valid), cat(test), seed)


def assign_groups(sensitive, lower_q: float = 0.25, upper_q: float = 0.25) -> GroupAssignment:
    """Bottom ``lower_q`` by sensitive value -> disadvantaged, top ``upper_q`` -> advantaged.

    A student is disadvantaged only when strictly more than the allowed share of
    students have a larger value, so ties straddling a cutpoint land in general.
    """
    if isinstance(sensitive, AttributeTable):
        sensitive = sensitive.sensitive
    x = np.asarray(sensitive, dtype=np.float64)
    if not (0 < lower_q and 0 < upper_q and lower_q + upper_q < 1):
        raise ValueError("need 0 < lower_q, upper_q and lower_q + upper_q < 1")
    if np.any(~np.isfinite(x)):
        raise DataError("sensitive value missing for some students")
    if x.size == 0 or np.all(x == x[0]):
        raise DataError("sensitive values are constant; no group partition possible")
    n = x.size
    srt = np.sort(x)
    n_low = int(math.floor(lower_q * n + 1e-9))
    n_high = int(math.floor(upper_q * n + 1e-9))
    labels = np.full(n, GENERAL, dtype=np.int64)
    lo_cut = srt[n_low - 1] if n_low > 0 else -np.inf
    hi_cut = srt[n - n_high] if n_high > 0 else np.inf
    if n_low > 0:
        # a value tied with the first general student stays general
        low = x <= lo_cut
        if n_low < n and srt[n_low] == lo_cut:
            low = x < lo_cut
        labels[low] = DISADVANTAGED
    if n_high > 0:
        high = x >= hi_cut
        if n - n_high - 1 >= 0 and srt[n - n_high - 1] == hi_cut:
            high = x > hi_cut
        labels[high] = ADVANTAGED
    return GroupAssignment(labels, (float(lo_cut), float(hi_cut)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise CorrelationError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.sqrt(np.sum(dx * dx))
    syy = np.sqrt(np.sum(dy * dy))
    if sxx == 0.0 or syy == 0.0:
        raise CorrelationError("correlation undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / (sxx * syy), -1.0, 1.0))


def context_correlations(attrs: AttributeTable) -> list[float | None]:
    out: list[float | None] = []
    for col in attrs.context.T:
        ok = col != MISSING
        try:
            out.append(pearson(col[ok].astype(np.float64), attrs.sensitive[ok]))
        except CorrelationError:
            out.append(None)
    return out


def select_context_attributes(attrs: AttributeTable, k: int) -> list[tuple[int, float]]:
    """Top-k context columns by |rho| against the sensitive value."""
    rhos = [(j, r) for j, r in enumerate(context_correlations(attrs)) if r is not None]
    if k > len(rhos):
        raise CorrelationError(f"requested {k} context attributes, only {len(rhos)} have a defined correlation")
    rhos.sort(key=lambda t: (-abs(t[1]), t[0]))
    return rhos[:k]
