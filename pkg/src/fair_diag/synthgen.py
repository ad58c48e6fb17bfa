"""Synthetic response data with a planted direct (fairness-related) and an
indirect (environment -> ability) effect of a sensitive attribute."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    ADVANTAGED,
    DISADVANTAGED,
    GROUP_NAMES,
    MISSING,
    AttributeTable,
    InteractionLog,
    QMatrix,
    assign_groups,
)

P_MIN, P_MAX = 0.01, 0.99


@dataclass
class SynthConfig:
    num_students: int = 2000
    num_exercises: int = 100
    num_concepts: int = 10
    rho_env: float = 0.7
    g_env: float = 0.5
    delta_direct: float = 0.6
    seed: int = 7
    # fraction of exercises each student answers
    response_rate: float = 0.5
    num_context: int = 6
    context_levels: int = 3
    context_noise_min: float = 0.3
    context_noise_max: float = 3.0
    context_missing: float = 0.02
    max_concepts_per_exercise: int = 3
    group_lower_q: float = 0.25
    group_upper_q: float = 0.25

    def validate(self) -> None:
        if not 0.0 <= self.rho_env <= 1.0:
            raise ValueError("rho_env must lie in [0, 1]")
        if self.g_env < 0:
            raise ValueError("g_env must be >= 0")
        if not 0.0 <= self.delta_direct < 1.0:
            raise ValueError("delta_direct must lie in [0, 1)")
        if not 0.0 < self.response_rate <= 1.0:
            raise ValueError("response_rate must lie in (0, 1]")
        if min(self.num_students, self.num_exercises, self.num_concepts, self.num_context) < 1:
            raise ValueError("sizes must be positive")


@dataclass
class GroundTruth:
    talent: np.ndarray
    environment: np.ndarray
    ability: np.ndarray
    groups: np.ndarray
    difficulty: np.ndarray
    discrimination: np.ndarray
    response_prob: np.ndarray
    indirect_strength: float
    direct_strength: float


def response_probabilities(ability, difficulty, discrimination, groups, delta_direct) -> np.ndarray:
    """N x M probability table: 2PL logit shifted by +/- delta by group, then clamped."""
    logit = discrimination[None, :] * (ability[:, None] - difficulty[None, :])
    sign = np.where(groups == ADVANTAGED, 1.0, np.where(groups == DISADVANTAGED, -1.0, 0.0))
    logit = logit + delta_direct * sign[:, None]
    return np.clip(1.0 / (1.0 + np.exp(-logit)), P_MIN, P_MAX)


def generate(config: SynthConfig):
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, m, c = config.num_students, config.num_exercises, config.num_concepts

    talent = rng.standard_normal(n)
    sensitive = rng.standard_normal(n)
    env = config.rho_env * sensitive + np.sqrt(1.0 - config.rho_env**2) * rng.standard_normal(n)
    ability = talent + config.g_env * env
    groups = assign_groups(sensitive, config.group_lower_q, config.group_upper_q).labels

    difficulty = rng.standard_normal(m)
    discrimination = rng.uniform(0.5, 2.0, m)
    prob = response_probabilities(ability, difficulty, discrimination, groups, config.delta_direct)

    q = np.zeros((m, c), dtype=np.int64)
    for j in range(m):
        k = rng.integers(1, min(config.max_concepts_per_exercise, c) + 1)
        q[j, rng.choice(c, size=k, replace=False)] = 1

    per_student = max(1, int(round(config.response_rate * m)))
    s_idx, e_idx = [], []
    for i in range(n):
        s_idx.append(np.full(per_student, i))
        e_idx.append(np.sort(rng.choice(m, size=per_student, replace=False)))
    students = np.concatenate(s_idx)
    exercises = np.concatenate(e_idx)
    correct = (rng.random(students.size) < prob[students, exercises]).astype(np.int64)

    # context answers: noisy environment readings cut at equal-frequency levels
    noise = np.linspace(config.context_noise_min, config.context_noise_max, config.num_context)
    ctx = np.empty((n, config.num_context), dtype=np.int64)
    for k, sd in enumerate(noise):
        reading = env + sd * rng.standard_normal(n)
        cuts = np.quantile(reading, np.linspace(0, 1, config.context_levels + 1)[1:-1])
        ctx[:, k] = np.searchsorted(cuts, reading, side="right")
    ctx[rng.random(ctx.shape) < config.context_missing] = MISSING

    log = InteractionLog(
        students,
        exercises,
        correct,
        n,
        m,
        [f"s{i:05d}" for i in range(n)],
        [f"e{j:04d}" for j in range(m)],
    )
    attrs = AttributeTable(sensitive, ctx, "escs", [f"ctx{k + 1}" for k in range(config.num_context)])
    qm = QMatrix(q, [f"k{k:02d}" for k in range(c)])
    truth = GroundTruth(
        talent,
        env,
        ability,
        groups,
        difficulty,
        discrimination,
        prob,
        indirect_strength=config.rho_env * config.g_env,
        direct_strength=config.delta_direct,
    )
    return log, attrs, qm, truth


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(out_dir, log: InteractionLog, attrs: AttributeTable, q: QMatrix, truth: GroundTruth | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "exercise_id", "correct"])
        for s, e, y in zip(log.students, log.exercises, log.correct):
            w.writerow([log.student_ids[s], log.exercise_ids[e], int(y)])
    with open(out / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", attrs.sensitive_name, *attrs.context_names])
        for i, sid in enumerate(log.student_ids):
            ctx = ["" if v == MISSING else str(int(v)) for v in attrs.context[i]]
            w.writerow([sid, _fmt(attrs.sensitive[i]), *ctx])
    with open(out / "qmatrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exercise_id", "concept_ids"])
        for j, eid in enumerate(log.exercise_ids):
            w.writerow([eid, "|".join(q.concept_ids[k] for k in np.flatnonzero(q.matrix[j]))])
    if truth is not None:
        with open(out / "ground_truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "talent", "environment", "ability", "group"])
            for i, sid in enumerate(log.student_ids):
                w.writerow(
                    [sid, _fmt(truth.talent[i]), _fmt(truth.environment[i]), _fmt(truth.ability[i]), GROUP_NAMES[truth.groups[i]]]
                )
