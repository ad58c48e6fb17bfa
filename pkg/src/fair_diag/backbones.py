"""Interaction functions mapping proficiency and exercise parameters to P(correct).

Each backbone owns its exercise parameters and builds its forward graph on a
:class:`~fair_diag.gradengine.Tape`, so any proficiency head of the fairness
model can be pushed through the same exercise parameters.
"""

from __future__ import annotations

import numpy as np

from .gradengine import Node, Parameter, Tape

BACKBONES = ("irt", "mirt", "ncd")
DISC_INIT = 10.0


def _inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# theta lives in a narrow slice of (0, 1), so discrimination starts large
class Backbone:
    name = "base"
    dim: int

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def forward(self, tape: Tape, theta: Node, exercise_ids) -> Node:
        raise NotImplementedError

    def predict(self, theta, exercise_ids) -> np.ndarray:
        """Numeric evaluation outside of training; returns a flat probability vector."""
        tape = Tape()
        return self.forward(tape, tape.const(theta), exercise_ids).value.reshape(-1)


class IRT(Backbone):
    """Two-parameter logistic model: sigmoid(softplus(a) * (theta - b))."""

    name = "irt"

    def __init__(self, num_exercises: int, rng: np.random.Generator, disc_init: float = DISC_INIT):
        self.dim = 1
        self.difficulty = Parameter("ex.difficulty", rng.uniform(-0.01, 0.01, (num_exercises, 1)))
        raw = _inv_softplus(disc_init) + rng.uniform(-0.01, 0.01, (num_exercises, 1))
        self.raw_disc = Parameter("ex.raw_disc", raw)

    def parameters(self):
        return [self.difficulty, self.raw_disc]

    def forward(self, tape, theta, exercise_ids):
        if theta.shape[1] != 1:
            raise ValueError(f"irt: proficiency must be 1-dimensional, got {theta.shape}")
        diff = tape.lookup(self.difficulty, exercise_ids)
        disc = tape.softplus(tape.lookup(self.raw_disc, exercise_ids))
        return tape.sigmoid(tape.mul(disc, tape.sub(theta, diff)))


class MIRT(Backbone):
    """Compensatory multidimensional IRT: sigmoid(a . theta - b)."""

    name = "mirt"

    def __init__(self, num_exercises: int, latent_dim: int, rng: np.random.Generator):
        self.dim = latent_dim
        self.disc = Parameter("ex.disc", _uniform_fan_in(rng, latent_dim, (num_exercises, latent_dim)))
        self.difficulty = Parameter("ex.difficulty", rng.uniform(-0.01, 0.01, (num_exercises, 1)))

    def parameters(self):
        return [self.disc, self.difficulty]

    def forward(self, tape, theta, exercise_ids):
        if theta.shape[1] != self.dim:
            raise ValueError(f"mirt: proficiency dim {theta.shape[1]} != latent dim {self.dim}")
        a = tape.lookup(self.disc, exercise_ids)
        # row-sum as row-mean scaled by width
        dot = tape.scale(tape.row_mean(tape.mul(a, theta)), self.dim)
        return tape.sigmoid(tape.sub(dot, tape.lookup(self.difficulty, exercise_ids)))


class NCD(Backbone):
    """Neural cognitive diagnosis interaction network.

    The input is ``q_row * (theta - sigmoid(diff)) * softplus(disc)``; the dense
    layers use squared weights so the output is non-decreasing in every
    proficiency component the exercise covers.
    """

    name = "ncd"

    def __init__(
        self,
        qmatrix: np.ndarray,
        rng: np.random.Generator,
        hidden: tuple[int, int] = (32, 16),
        disc_init: float = DISC_INIT,
    ):
        q = np.asarray(qmatrix, dtype=np.float64)
        if np.any(q.sum(axis=1) == 0):
            raise ValueError("ncd: every exercise needs at least one concept in the Q-matrix")
        self.q = q
        num_exercises, num_concepts = q.shape
        self.dim = num_concepts
        self.raw_diff = Parameter("ex.raw_diff", rng.uniform(-0.01, 0.01, (num_exercises, num_concepts)))
        raw = _inv_softplus(disc_init) + rng.uniform(-0.01, 0.01, (num_exercises, 1))
        self.raw_disc = Parameter("ex.raw_disc", raw)
        widths = (num_concepts, *hidden, 1)
        self.layers = []
        for k in range(len(widths) - 1):
            # weights are v**2; start v near the positive fan-in scale
            v = np.sqrt(np.abs(_uniform_fan_in(rng, widths[k], (widths[k], widths[k + 1]))))
            W = Parameter(f"ncd.v{k}", v)
            b = Parameter(f"ncd.b{k}", _uniform_fan_in(rng, widths[k], (1, widths[k + 1])))
            self.layers.append((W, b))

    def parameters(self):
        out = [self.raw_diff, self.raw_disc]
        for W, b in self.layers:
            out += [W, b]
        return out

    def forward(self, tape, theta, exercise_ids):
        if theta.shape[1] != self.dim:
            raise ValueError(f"ncd: proficiency dim {theta.shape[1]} != concept count {self.dim}")
        ids = np.asarray(exercise_ids, dtype=np.int64).reshape(-1)
        q = tape.const(self.q[ids])
        h_diff = tape.sigmoid(tape.lookup(self.raw_diff, ids))
        disc = tape.softplus(tape.lookup(self.raw_disc, ids))
        x = tape.mul(tape.mul(q, tape.sub(theta, h_diff)), disc)
        for v, b in self.layers:
            vn = tape.param(v)
            x = tape.sigmoid(tape.affine(x, tape.mul(vn, vn), b))
        return x


def build_backbone(
    name: str,
    num_exercises: int,
    rng: np.random.Generator,
    latent_dim: int = 8,
    qmatrix: np.ndarray | None = None,
) -> Backbone:
    if name == "irt":
        return IRT(num_exercises, rng)
    if name == "mirt":
        return MIRT(num_exercises, latent_dim, rng)
    if name == "ncd":
        if qmatrix is None:
            raise ValueError("ncd backbone requires a Q-matrix")
        return NCD(qmatrix, rng)
    raise ValueError(f"unknown backbone {name!r}; expected one of {BACKBONES}")


def irt_forward(theta: float, difficulty: float, discrimination: float) -> float:
    """Closed-form 2PL probability for an already-positive discrimination."""
    return float(1.0 / (1.0 + np.exp(-discrimination * (theta - difficulty))))
