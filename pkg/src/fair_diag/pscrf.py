"""Fairness-aware proficiency model with a counterfactual debiasing branch.

Data flow for a batch of records (one row per record)::

    A_i --MLP1--> U_d            (fairness-related feature)
    (u_i, U_d) --MLP2--> U_f     (diagnosis-related feature)
    theta   = sig((1 - alpha) U_f + alpha U_d)
    U_f*    = sig(MLP2(u*, U_d*))            (population-mean anchors)
    theta*  = sig((1 - alpha) U_f* + alpha U_d)
    theta_d = sig(theta - beta theta*)

Every head in {U_f, U_d, theta, theta_d} is scored through the same backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbones import Backbone, build_backbone
from .dataset import ADVANTAGED, DISADVANTAGED, GENERAL, MISSING
from .gradengine import Node, Parameter, Tape

HEADS = ("uf", "ud", "theta", "theta_d")


class UnknownBucketError(ValueError):
    pass


# -- sensitive attribute encoding ------------------------------------------


@dataclass
class SensitiveEncoder:
    """Maps raw sensitive values to embedding buckets and to regression/class targets.

    Continuous values use equal-frequency bins; discrete (ordinal) values get
    one bucket per observed level.
    """

    kind: str
    edges: list[float] = field(default_factory=list)
    levels: list[float] = field(default_factory=list)
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, values, kind: str = "auto", bins: int = 10) -> "SensitiveEncoder":
        x = np.asarray(values, dtype=np.float64)
        levels = np.unique(x)
        if kind == "auto":
            integral = np.all(x == np.round(x))
            kind = "discrete" if integral and levels.size <= 20 else "continuous"
        if kind == "discrete":
            return cls("discrete", levels=levels.tolist())
        if kind != "continuous":
            raise ValueError(f"unknown sensitive kind {kind!r}")
        qs = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
        std = float(x.std())
        return cls("continuous", edges=qs.tolist(), mean=float(x.mean()), std=std if std > 0 else 1.0)

    @property
    def num_buckets(self) -> int:
        return len(self.levels) if self.kind == "discrete" else len(self.edges) + 1

    @property
    def num_classes(self) -> int:
        return len(self.levels) if self.kind == "discrete" else 1

    def buckets(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64)
        if self.kind == "continuous":
            return np.searchsorted(np.asarray(self.edges), x, side="right").astype(np.int64)
        lv = np.asarray(self.levels)
        idx = np.searchsorted(lv, x)
        bad = (idx >= lv.size) | (lv[np.minimum(idx, lv.size - 1)] != x)
        if np.any(bad):
            raise UnknownBucketError(f"sensitive value {x[bad][0]!r} is not a known level")
        return idx.astype(np.int64)

    def targets(self, values) -> np.ndarray:
        """Regression target (standardized) or class index per value."""
        if self.kind == "continuous":
            return (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        return self.buckets(values)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "edges": self.edges, "levels": self.levels, "mean": self.mean, "std": self.std}


# -- parameters ------------------------------------------------------------


def _dense(rng, name, fan_in, fan_out) -> tuple[Parameter, Parameter]:
    bound = 1.0 / np.sqrt(fan_in)
    return (
        Parameter(f"{name}.W", rng.uniform(-bound, bound, (fan_in, fan_out))),
        Parameter(f"{name}.b", rng.uniform(-bound, bound, (1, fan_out))),
    )


def _mlp(rng, name, fan_in, hidden, fan_out) -> list[Parameter]:
    return [*_dense(rng, f"{name}.0", fan_in, hidden), *_dense(rng, f"{name}.1", hidden, fan_out)]


class PscrfParameters:
    """All trainable state of the model."""

    def __init__(
        self,
        num_students: int,
        num_exercises: int,
        num_buckets: int,
        sensitive_classes: int,
        context_classes: list[int],
        backbone: str = "irt",
        latent_dim: int = 8,
        qmatrix: np.ndarray | None = None,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.backbone: Backbone = build_backbone(backbone, num_exercises, rng, latent_dim, qmatrix)
        d = self.backbone.dim
        self.dim = d
        self.num_students = num_students
        self.context_classes = list(context_classes)
        self.sensitive_classes = sensitive_classes
        h = 2 * d
        self.student_emb = Parameter("student_emb", rng.uniform(-0.01, 0.01, (num_students, d)))
        self.attr_emb = Parameter("attr_emb", rng.uniform(-0.01, 0.01, (num_buckets, d)))
        self.mlp1 = _mlp(rng, "mlp1", d, h, d)
        self.mlp2 = _mlp(rng, "mlp2", 2 * d, h, d)
        self.smlp = _mlp(rng, "smlp", d, h, sensitive_classes)
        self.cls_trunk = list(_dense(rng, "cls.trunk", d, h))
        self.cls_heads = [list(_dense(rng, f"cls.head{k}", h, c)) for k, c in enumerate(self.context_classes)]
        self.gate_alpha = list(_dense(rng, "gate_alpha", 2 * d, 1))
        self.gate_beta = list(_dense(rng, "gate_beta", 2 * d, 1))

    def parameters(self) -> list[Parameter]:
        out = [self.student_emb, self.attr_emb, *self.mlp1, *self.mlp2, *self.smlp, *self.cls_trunk]
        for head in self.cls_heads:
            out += head
        out += [*self.gate_alpha, *self.gate_beta, *self.backbone.parameters()]
        return out

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named().items():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"parameter {name}: shape {state[name].shape} != {p.shape}")
            p.value[...] = state[name]


# -- forward pieces --------------------------------------------------------


def _apply_mlp(tape: Tape, layers, x: Node) -> Node:
    W0, b0, W1, b1 = layers
    return tape.affine(tape.tanh(tape.affine(x, W0, b0)), W1, b1)


def _fuse(tape: Tape, alpha: Node, uf: Node, ud: Node) -> Node:
    return tape.sigmoid(tape.add(tape.mul(tape.sub(1.0, alpha), uf), tape.mul(alpha, ud)))


@dataclass
class Gates:
    """Either learned per-student gates or constants (``alpha``/``beta`` set)."""

    alpha: float | None = None
    beta: float | None = None


@dataclass
class Factual:
    u: Node
    U_d: Node
    U_f: Node
    theta: Node
    alpha: Node
    joint: Node


def fairness_feature(tape: Tape, params: PscrfParameters, buckets) -> Node:
    buckets = np.asarray(buckets, dtype=np.int64)
    if buckets.size and (buckets.min() < 0 or buckets.max() >= params.attr_emb.shape[0]):
        raise UnknownBucketError("sensitive bucket out of range")
    A = tape.lookup(params.attr_emb, buckets)
    return tape.sigmoid(_apply_mlp(tape, params.mlp1, A))


def forward_factual(tape: Tape, params: PscrfParameters, students, buckets, gates: Gates = Gates()) -> Factual:
    u = tape.lookup(params.student_emb, students)
    U_d = fairness_feature(tape, params, buckets)
    joint = tape.concat(u, U_d)
    U_f = tape.sigmoid(_apply_mlp(tape, params.mlp2, joint))
    if gates.alpha is None:
        alpha = tape.sigmoid(tape.affine(joint, *params.gate_alpha))
    else:
        alpha = tape.const(np.full((U_d.shape[0], 1), gates.alpha))
    return Factual(u, U_d, U_f, _fuse(tape, alpha, U_f, U_d), alpha, joint)


def counterfactual_anchors(params: PscrfParameters, buckets) -> tuple[np.ndarray, np.ndarray]:
    """Population means ``u*`` of the student embeddings and ``U_d*`` of the fairness features.

    ``buckets`` holds one sensitive bucket per student of the reference population.
    """
    if params.student_emb.shape[0] == 0:
        raise ValueError("empty reference population")
    u_star = params.student_emb.value.mean(axis=0, keepdims=True)
    U_d = fairness_feature(Tape(), params, buckets).value
    return u_star, U_d.mean(axis=0, keepdims=True)


def forward_counterfactual(
    tape: Tape, params: PscrfParameters, fact: Factual, anchors, gates: Gates = Gates()
) -> tuple[Node, Node]:
    """Returns ``(theta*, beta)``; ``U_f*`` is shared by every row."""
    u_star, ud_star = anchors
    joint_star = tape.const(np.concatenate([u_star, ud_star], axis=1))
    uf_star = tape.sigmoid(_apply_mlp(tape, params.mlp2, joint_star))
    theta_star = _fuse(tape, fact.alpha, uf_star, fact.U_d)
    if gates.beta is None:
        beta = tape.sigmoid(tape.affine(fact.joint, *params.gate_beta))
    else:
        beta = tape.const(np.full((fact.U_d.shape[0], 1), gates.beta))
    return theta_star, beta


def debias(tape: Tape, theta: Node, theta_star: Node, beta: Node) -> Node:
    return tape.sigmoid(tape.sub(theta, tape.mul(beta, theta_star)))


# -- loss terms ------------------------------------------------------------


def loss_cls(tape: Tape, params: PscrfParameters, U_f: Node, context_labels) -> Node:
    K = len(params.cls_heads)
    if K == 0:
        raise ValueError("context loss needs at least one context attribute")
    labels = np.asarray(context_labels, dtype=np.int64).reshape(U_f.shape[0], K)
    trunk = tape.tanh(tape.affine(U_f, *params.cls_trunk))
    total = None
    for k, (W, b) in enumerate(params.cls_heads):
        ce = tape.softmax_ce(tape.affine(trunk, W, b), labels[:, k])
        total = ce if total is None else tape.add(total, ce)
    return tape.scale(total, 1.0 / K)


def loss_rev(
    tape: Tape, params: PscrfParameters, U_d: Node, U_f: Node, target, counterfactual_target
) -> Node:
    """Sensitive prediction from U_d plus counterfactual prediction from U_f, shared SMLP.

    For a continuous attribute both targets are regression values (MSE); for a
    discrete one ``target`` holds class indices and ``counterfactual_target``
    a probability row (softmax cross-entropy).
    """
    pred_d = _apply_mlp(tape, params.smlp, U_d)
    pred_f = _apply_mlp(tape, params.smlp, U_f)
    if params.sensitive_classes == 1:
        cf = np.broadcast_to(np.asarray(counterfactual_target, dtype=np.float64).reshape(-1, 1), pred_f.shape)
        return tape.add(tape.mse(pred_d, np.asarray(target, dtype=np.float64).reshape(-1, 1)), tape.mse(pred_f, cf))
    cf = np.broadcast_to(np.asarray(counterfactual_target, dtype=np.float64).reshape(1, -1), pred_f.shape)
    return tape.add(tape.softmax_ce(pred_d, np.asarray(target, dtype=np.int64)), tape.softmax_ce(pred_f, cf.copy()))


def group_mean_spread(tape: Tape, pred: Node, groups) -> Node | None:
    """Population std of the three group-mean predictions, or None if a group is absent."""
    groups = np.asarray(groups)
    means = []
    for g in (DISADVANTAGED, GENERAL, ADVANTAGED):
        rows = np.flatnonzero(groups == g)
        if rows.size == 0:
            return None
        means.append(tape.col_mean(tape.take_rows(pred, rows)))
    return tape.pop_std(tape.concat(*means))


def loss_cons(tape: Tape, pred_theta_d: Node, pred_U_d: Node, groups) -> Node | None:
    a = group_mean_spread(tape, pred_theta_d, groups)
    if a is None:
        return None
    return tape.sub(a, group_mean_spread(tape, pred_U_d, groups))


@dataclass
class Batch:
    students: np.ndarray
    exercises: np.ndarray
    labels: np.ndarray
    buckets: np.ndarray
    sens_target: np.ndarray
    context: np.ndarray
    groups: np.ndarray

    def __len__(self) -> int:
        return len(self.students)


@dataclass
class ForwardBundle:
    fact: Factual
    theta_star: Node
    beta: Node
    theta_d: Node
    anchors: tuple
    preds: dict[str, Node]

    @property
    def U_f(self):
        return self.fact.U_f

    @property
    def U_d(self):
        return self.fact.U_d

    @property
    def theta(self):
        return self.fact.theta

    @property
    def alpha(self):
        return self.fact.alpha


def forward(
    tape: Tape,
    params: PscrfParameters,
    batch: Batch,
    anchors,
    gates: Gates = Gates(),
    heads=HEADS,
) -> ForwardBundle:
    fact = forward_factual(tape, params, batch.students, batch.buckets, gates)
    theta_star, beta = forward_counterfactual(tape, params, fact, anchors, gates)
    theta_d = debias(tape, fact.theta, theta_star, beta)
    reps = {"uf": fact.U_f, "ud": fact.U_d, "theta": fact.theta, "theta_d": theta_d}
    preds = {h: params.backbone.forward(tape, reps[h], batch.exercises) for h in heads}
    return ForwardBundle(fact, theta_star, beta, theta_d, anchors, preds)


@dataclass
class LossWeights:
    ce: float = 1.0
    cls: float = 0.1
    rev: float = 0.5
    cons: float = 1.0


def loss_total(
    tape: Tape,
    params: PscrfParameters,
    bundle: ForwardBundle,
    batch: Batch,
    weights: LossWeights,
    counterfactual_target,
    ce_heads=HEADS,
) -> tuple[Node, dict[str, float]]:
    """Weighted sum of the four objectives; zero-weight terms are not evaluated.

    Returns the loss node and the unweighted term values. ``terms["cons"]`` is
    None when the batch lacks one of the three groups.
    """
    terms: dict[str, float | None] = {}
    parts = []
    if weights.ce:
        ce = None
        for h in ce_heads:
            term = tape.bce(bundle.preds[h], batch.labels)
            ce = term if ce is None else tape.add(ce, term)
        terms["ce"] = float(ce.value[0, 0])
        parts.append(tape.scale(ce, weights.ce))
    if weights.cls:
        cls = loss_cls(tape, params, bundle.U_f, batch.context)
        terms["cls"] = float(cls.value[0, 0])
        parts.append(tape.scale(cls, weights.cls))
    if weights.rev:
        rev = loss_rev(tape, params, bundle.U_d, bundle.U_f, batch.sens_target, counterfactual_target)
        terms["rev"] = float(rev.value[0, 0])
        parts.append(tape.scale(rev, weights.rev))
    if weights.cons:
        cons = loss_cons(tape, bundle.preds["theta_d"], bundle.preds["ud"], batch.groups)
        terms["cons"] = None if cons is None else float(cons.value[0, 0])
        if cons is not None:
            parts.append(tape.scale(cons, weights.cons))
    if not parts:
        return tape.const(0.0), terms
    total = parts[0]
    for p in parts[1:]:
        total = tape.add(total, p)
    return total, terms


def counterfactual_label(encoder_kind: str, sens_targets: np.ndarray, num_classes: int) -> np.ndarray:
    """Population-mean regression target, or the uniform class distribution."""
    if encoder_kind == "continuous":
        return np.array([np.mean(sens_targets)])
    return np.full(num_classes, 1.0 / num_classes)


# -- numeric evaluation helpers --------------------------------------------


def representations(
    params: PscrfParameters, students, buckets, anchors, gates: Gates = Gates()
) -> dict[str, np.ndarray]:
    tape = Tape()
    fact = forward_factual(tape, params, students, buckets, gates)
    theta_star, beta = forward_counterfactual(tape, params, fact, anchors, gates)
    theta_d = debias(tape, fact.theta, theta_star, beta)
    return {
        "uf": fact.U_f.value,
        "ud": fact.U_d.value,
        "theta": fact.theta.value,
        "theta_star": theta_star.value,
        "theta_d": theta_d.value,
        "alpha": fact.alpha.value,
        "beta": beta.value,
    }


def predict(params: PscrfParameters, students, exercises, buckets, anchors, head: str = "theta_d", gates: Gates = Gates()):
    reps = representations(params, students, buckets, anchors, gates)
    return params.backbone.predict(reps[head], exercises)
