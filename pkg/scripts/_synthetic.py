"""Shared protocol for the seeded synthetic experiments."""

from __future__ import annotations

import time

from fair_diag import pscrf as ps
from fair_diag.metrics import auc, fairness_report
from fair_diag.synthgen import SynthConfig, generate
from fair_diag.trainer import TrainConfig, prepare, train

SYNTH = SynthConfig(
    num_students=2000, num_exercises=100, num_concepts=10, rho_env=0.7, g_env=0.5, delta_direct=0.6, seed=7
)


def load(epochs: int = 50, seed: int = 7, synth: SynthConfig = SYNTH):
    log, attrs, q, truth = generate(synth)
    cfg = TrainConfig(max_epochs=epochs, patience=epochs, seed=seed)
    return prepare(log, attrs, q, cfg), cfg, truth


def score(preds, batch) -> dict:
    rep = fairness_report(preds, batch.labels, batch.groups)
    return {"auc": auc(preds, batch.labels), "eo": rep.eo, "d_under": rep.d_under, "ir": rep.ir}


def run(data, cfg: TrainConfig) -> dict:
    start = time.perf_counter()
    result = train(data, cfg)
    b = data.batch(data.split.test)
    anchors = ps.counterfactual_anchors(result.params, data.student_buckets)
    preds = ps.predict(result.params, b.students, b.exercises, b.buckets, anchors, cfg.eval_head, cfg.gates)
    out = score(preds, b)
    out.update(best_epoch=result.best_epoch, seconds=round(time.perf_counter() - start, 1))
    return out


def fmt(m: dict) -> str:
    return f"AUC {m['auc']:.4f}  EO {m['eo']:.4f}  D_under {m['d_under']:+.4f}  IR {m['ir']:.4f}"
