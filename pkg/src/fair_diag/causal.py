"""Post-hoc total / direct / indirect effect contrasts of the fused proficiency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import GROUP_NAMES
from .gradengine import Tape
from .pscrf import PscrfParameters, _apply_mlp, _fuse


def fused_proficiency(
    params: PscrfParameters, u: np.ndarray, A: np.ndarray, alpha: float | None = None
) -> np.ndarray:
    """theta for given student embeddings ``u`` and attribute embeddings ``A`` (row-aligned).

    ``alpha`` overrides the learned gate for models trained with a constant one.
    """
    tape = Tape()
    ud = tape.sigmoid(_apply_mlp(tape, params.mlp1, tape.const(A)))
    joint = tape.concat(tape.const(u), ud)
    uf = tape.sigmoid(_apply_mlp(tape, params.mlp2, joint))
    if alpha is None:
        alpha = tape.sigmoid(tape.affine(joint, *params.gate_alpha))
    else:
        alpha = tape.const(np.full((u.shape[0], 1), alpha))
    return _fuse(tape, alpha, uf, ud).value


@dataclass
class EffectReport:
    te: np.ndarray
    nde: np.ndarray
    tie: np.ndarray
    groups: np.ndarray | None = None
    prob_te: np.ndarray | None = None
    prob_nde: np.ndarray | None = None
    prob_tie: np.ndarray | None = None
    group_means: dict = field(default_factory=dict)

    @property
    def te_mean(self) -> np.ndarray:
        return self.te.mean(axis=1)

    @property
    def nde_mean(self) -> np.ndarray:
        return self.nde.mean(axis=1)

    @property
    def tie_mean(self) -> np.ndarray:
        return self.tie.mean(axis=1)

    def summary(self) -> dict:
        out = {
            "TE_mean": float(self.te.mean()),
            "NDE_mean": float(self.nde.mean()),
            "TIE_mean": float(self.tie.mean()),
            "groups": self.group_means,
        }
        if self.prob_te is not None:
            out["probability_scale"] = {
                "TE_mean": float(self.prob_te.mean()),
                "NDE_mean": float(self.prob_nde.mean()),
                "TIE_mean": float(self.prob_tie.mean()),
            }
        return out


def compute_effects(
    params: PscrfParameters,
    students,
    buckets,
    population_buckets,
    groups=None,
    probability_scale: bool = False,
    alpha: float | None = None,
) -> EffectReport:
    """TE = theta(u, A) - theta(u*, A*), NDE = theta(u*, A) - theta(u*, A*), TIE = TE - NDE.

    ``u*`` is the mean student embedding and ``A*`` the mean attribute
    embedding over ``population_buckets`` (one bucket per student).
    """
    students = np.asarray(students, dtype=np.int64)
    buckets = np.asarray(buckets, dtype=np.int64)
    n = students.size
    u = params.student_emb.value[students]
    A = params.attr_emb.value[buckets]
    u_star = np.repeat(params.student_emb.value.mean(axis=0, keepdims=True), n, axis=0)
    pop = params.attr_emb.value[np.asarray(population_buckets, dtype=np.int64)]
    A_star = np.repeat(pop.mean(axis=0, keepdims=True), n, axis=0)

    factual = fused_proficiency(params, u, A, alpha)
    direct_only = fused_proficiency(params, u_star, A, alpha)
    baseline = fused_proficiency(params, u_star, A_star, alpha)
    te = factual - baseline
    nde = direct_only - baseline
    report = EffectReport(te, nde, te - nde)

    if probability_scale:
        m = params.backbone.q.shape[0] if hasattr(params.backbone, "q") else params.backbone.difficulty.shape[0]
        ex = np.arange(m)

        def mean_prob(theta):
            rows = np.repeat(theta, m, axis=0)
            return params.backbone.predict(rows, np.tile(ex, n)).reshape(n, m).mean(axis=1)

        pf, pd, pb = mean_prob(factual), mean_prob(direct_only), mean_prob(baseline)
        report.prob_te = pf - pb
        report.prob_nde = pd - pb
        report.prob_tie = report.prob_te - report.prob_nde

    if groups is not None:
        groups = np.asarray(groups)
        report.groups = groups
        for code, name in enumerate(GROUP_NAMES):
            rows = groups == code
            if rows.any():
                report.group_means[name] = {
                    "TE_mean": float(te[rows].mean()),
                    "NDE_mean": float(nde[rows].mean()),
                    "TIE_mean": float(report.tie[rows].mean()),
                    "students": int(rows.sum()),
                }
    return report
