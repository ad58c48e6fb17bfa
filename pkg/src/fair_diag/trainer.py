"""Mini-batch Adam training with validation-AUC model selection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dataset as ds
from .gradengine import Parameter, Tape
from .metrics import MetricError, auc, fairness_report
from .pscrf import (
    HEADS,
    Batch,
    Gates,
    LossWeights,
    PscrfParameters,
    SensitiveEncoder,
    counterfactual_anchors,
    counterfactual_label,
    fairness_feature,
    forward,
    loss_total,
    representations,
)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 512
    w1: float = 1.0
    w2: float = 0.1
    w3: float = 0.5
    w4: float = 1.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    backbone: str = "irt"
    # only meaningful for mirt; irt uses 1 and ncd the concept count
    embed_dim: int = 8
    context_k: int = 5
    sensitive_bins: int = 10
    sensitive_type: str = "auto"
    min_records: int = 10
    group_lower_q: float = 0.25
    group_upper_q: float = 0.25
    split_train: float = 0.7
    split_valid: float = 0.1
    split_test: float = 0.2
    ce_heads: tuple[str, ...] = HEADS
    eval_head: str = "theta_d"
    gate_mode: str = "learned"
    fixed_alpha: float = 0.0
    fixed_beta: float = 0.0

    def __post_init__(self):
        self.ce_heads = tuple(self.ce_heads)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ValueError("loss weights must be non-negative")
        if not set(self.ce_heads) <= set(HEADS) or self.eval_head not in HEADS:
            raise ValueError(f"heads must be drawn from {HEADS}")
        if self.gate_mode not in ("learned", "fixed"):
            raise ValueError("gate_mode must be 'learned' or 'fixed'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w1, self.w2, self.w3, self.w4)

    @property
    def gates(self) -> Gates:
        if self.gate_mode == "fixed":
            return Gates(self.fixed_alpha, self.fixed_beta)
        return Gates()

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_valid, self.split_test)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ce_heads"] = list(self.ce_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def base_variant(self) -> "TrainConfig":
        """Same run with every fairness component switched off."""
        d = self.to_dict()
        d.update(w2=0.0, w3=0.0, w4=0.0, ce_heads=["theta"], eval_head="theta", gate_mode="fixed", fixed_alpha=0.0, fixed_beta=0.0)
        return TrainConfig.from_dict(d)


# -- data preparation ------------------------------------------------------


@dataclass
class PreparedData:
    log: ds.InteractionLog
    attrs: ds.AttributeTable
    qmatrix: ds.QMatrix
    groups: ds.GroupAssignment
    context: list[tuple[int, float]]
    encoder: SensitiveEncoder
    split: ds.SplitDataset
    student_buckets: np.ndarray = field(init=False)
    sens_target: np.ndarray = field(init=False)
    context_labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.student_buckets = self.encoder.buckets(self.attrs.sensitive)
        self.sens_target = self.encoder.targets(self.attrs.sensitive)
        cols = [j for j, _ in self.context]
        self.context_labels = self.attrs.context[:, cols] if cols else np.zeros((len(self.attrs), 0), dtype=np.int64)

    @property
    def context_classes(self) -> list[int]:
        return [int(max(c.max(initial=ds.MISSING) + 1, 1)) for c in self.context_labels.T]

    @property
    def counterfactual_target(self) -> np.ndarray:
        return counterfactual_label(self.encoder.kind, self.sens_target, self.encoder.num_classes)

    def batch(self, records) -> Batch:
        s = self.log.students[records]
        return Batch(
            students=s,
            exercises=self.log.exercises[records],
            labels=self.log.correct[records].astype(np.float64),
            buckets=self.student_buckets[s],
            sens_target=self.sens_target[s],
            context=self.context_labels[s],
            groups=self.groups.labels[s],
        )


def prepare(log, attrs, qmatrix, config: TrainConfig, seed: int | None = None) -> PreparedData:
    """Filter -> group -> select context -> split, in that order."""
    log, kept = ds.filter_min_records(log, config.min_records)
    attrs = attrs.subset(kept)
    groups = ds.assign_groups(attrs.sensitive, config.group_lower_q, config.group_upper_q)
    context = ds.select_context_attributes(attrs, config.context_k) if config.context_k > 0 else []
    encoder = SensitiveEncoder.fit(attrs.sensitive, config.sensitive_type, config.sensitive_bins)
    split = ds.split_records(log, config.ratios, config.seed if seed is None else seed)
    return PreparedData(log, attrs, qmatrix, groups, context, encoder, split)


def build_parameters(data: PreparedData, config: TrainConfig) -> PscrfParameters:
    return PscrfParameters(
        num_students=data.log.num_students,
        num_exercises=data.log.num_exercises,
        num_buckets=data.encoder.num_buckets,
        sensitive_classes=data.encoder.num_classes,
        context_classes=data.context_classes,
        backbone=config.backbone,
        latent_dim=config.embed_dim,
        qmatrix=data.qmatrix.matrix,
        seed=config.seed,
    )


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p in params:
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m, v = state.m[p.name], state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- training --------------------------------------------------------------


def _eval_split(params: PscrfParameters, data: PreparedData, records, config: TrainConfig) -> dict:
    anchors = counterfactual_anchors(params, data.student_buckets)
    b = data.batch(records)
    reps = representations(params, b.students, b.buckets, anchors, config.gates)
    preds = params.backbone.predict(reps[config.eval_head], b.exercises)
    out: dict = {"auc": None, "eo": None}
    try:
        out["auc"] = auc(preds, b.labels)
        out["eo"] = fairness_report(preds, b.labels, b.groups).eo
    except MetricError:
        pass
    return out


@dataclass
class TrainResult:
    params: PscrfParameters
    log: list[dict]
    best_epoch: int
    best_auc: float | None


def _fit(params: PscrfParameters, data: PreparedData, config: TrainConfig, step_loss) -> TrainResult:
    state = AdamState()
    plist = params.parameters()
    rng = np.random.default_rng([config.seed, 1])
    train_idx = np.asarray(data.split.train)
    history: list[dict] = []
    best_state = params.state()
    best_auc: float | None = None
    best_epoch = 0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        anchors = counterfactual_anchors(params, data.student_buckets)
        order = train_idx[rng.permutation(train_idx.size)]
        sums: dict[str, float] = {}
        n_batches = 0
        missing_groups = 0
        for b, start in enumerate(range(0, order.size, config.batch_size)):
            batch = data.batch(order[start : start + config.batch_size])
            for p in plist:
                p.zero_grad()
            tape = Tape()
            loss, terms = step_loss(tape, params, batch, anchors)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            if len(tape):
                tape.backward(loss)
            adam_step(plist, state, config.learning_rate)
            n_batches += 1
            sums["total"] = sums.get("total", 0.0) + value
            for k, v in terms.items():
                if v is None:
                    missing_groups += 1
                    continue
                sums[k] = sums.get(k, 0.0) + v
        val = _eval_split(params, data, data.split.valid, config)
        entry = {"epoch": epoch, "loss": {k: v / n_batches for k, v in sums.items()}}
        entry.update(val_auc=val["auc"], val_eo=val["eo"], batches_missing_group=missing_groups)
        history.append(entry)
        if val["auc"] is not None and (best_auc is None or val["auc"] > best_auc):
            best_auc, best_epoch, stale = val["auc"], epoch, 0
            best_state = params.state()
        else:
            stale += 1
            if stale >= config.patience:
                break
    params.load_state(best_state)
    return TrainResult(params, history, best_epoch, best_auc)


def train(data: PreparedData, config: TrainConfig, params: PscrfParameters | None = None) -> TrainResult:
    params = params if params is not None else build_parameters(data, config)
    weights = config.weights
    gates = config.gates
    heads = set(config.ce_heads)
    if weights.cons:
        heads |= {"theta_d", "ud"}
    heads = tuple(h for h in HEADS if h in heads)
    cf_target = data.counterfactual_target

    def step_loss(tape, params, batch, anchors):
        bundle = forward(tape, params, batch, anchors, gates, heads)
        return loss_total(tape, params, bundle, batch, weights, cf_target, config.ce_heads)

    return _fit(params, data, config, step_loss)


def train_base(data: PreparedData, config: TrainConfig, params: PscrfParameters | None = None) -> TrainResult:
    """Plain diagnosis model: the backbone scored on sigmoid(U_f), cross-entropy only."""
    params = params if params is not None else build_parameters(data, config)
    config = config.base_variant()

    def step_loss(tape, params, batch, anchors):
        u = tape.lookup(params.student_emb, batch.students)
        U_d = fairness_feature(tape, params, batch.buckets)
        W0, b0, W1, b1 = params.mlp2
        U_f = tape.sigmoid(tape.affine(tape.tanh(tape.affine(tape.concat(u, U_d), W0, b0)), W1, b1))
        pred = params.backbone.forward(tape, tape.sigmoid(U_f), batch.exercises)
        ce = tape.bce(pred, batch.labels)
        total = tape.scale(ce, config.w1)
        return total, {"ce": float(ce.value[0, 0])}

    return _fit(params, data, config, step_loss)


def gate_stats(params: PscrfParameters, data: PreparedData) -> dict[str, float]:
    students = np.arange(data.log.num_students)
    anchors = counterfactual_anchors(params, data.student_buckets)
    reps = representations(params, students, data.student_buckets, anchors)
    a, b = reps["alpha"].reshape(-1), reps["beta"].reshape(-1)
    return {
        "mean_alpha": float(a.mean()),
        "var_alpha": float(a.var()),
        "mean_beta": float(b.mean()),
        "var_beta": float(b.var()),
    }


def write_log(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
