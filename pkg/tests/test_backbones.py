import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fair_diag.backbones import IRT, MIRT, NCD, build_backbone, irt_forward
from fair_diag.gradengine import Tape, grad_check


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_irt_symmetry():
    assert irt_forward(0.4, 0.4, 3.0) == 0.5


def test_irt_worked_example():
    assert irt_forward(0.8, 0.3, 2.0) == pytest.approx(0.7311, abs=1e-4)


def test_irt_limit_monotone():
    probs = [irt_forward(t, 0.0, 50.0) for t in np.linspace(0.5, 0.999, 20)]
    assert all(b >= a for a, b in zip(probs, probs[1:]))
    assert probs[-1] > 1 - 1e-15


def test_irt_module_matches_closed_form():
    rng = np.random.default_rng(0)
    model = IRT(4, rng)
    theta = np.array([[0.2], [0.6], [0.9], [0.5]])
    ids = np.array([3, 0, 2, 2])
    got = model.predict(theta, ids)
    disc = np.log1p(np.exp(model.raw_disc.value[ids, 0]))
    for k in range(4):
        want = irt_forward(theta[k, 0], model.difficulty.value[ids[k], 0], disc[k])
        assert got[k] == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("scale", [0.1, 1.0, 7.5])
def test_irt_argmax_invariant_to_disc_scale(scale):
    grid = np.linspace(0.01, 0.99, 99)
    base = [irt_forward(t, 0.3, 1.3) for t in grid]
    scaled = [irt_forward(t, 0.3, 1.3 * scale) for t in grid]
    assert np.argmax(base) == np.argmax(scaled)


def test_mirt_zero_disc_ignores_theta():
    model = MIRT(1, 3, np.random.default_rng(0))
    model.disc.value[:] = 0.0
    model.difficulty.value[:] = 0.7
    theta = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
    np.testing.assert_allclose(model.predict(theta, [0, 0]), _sigmoid(-0.7), rtol=0, atol=1e-16)


def test_mirt_worked_example():
    model = MIRT(1, 2, np.random.default_rng(0))
    model.disc.value[:] = 1.0
    model.difficulty.value[:] = 1.0
    assert model.predict(np.array([[0.5, 0.5]]), [0])[0] == pytest.approx(0.5, abs=1e-15)


def test_mirt_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    model = MIRT(5, 3, rng)
    theta = rng.uniform(0, 1, (6, 3))
    ids = rng.integers(0, 5, 6)
    got = model.predict(theta, ids)
    for r in range(6):
        z = -model.difficulty.value[ids[r], 0]
        for k in range(3):
            z += model.disc.value[ids[r], k] * theta[r, k]
        assert got[r] == pytest.approx(1.0 / (1.0 + np.exp(-z)), abs=1e-14)


def test_mirt_dim_mismatch():
    model = MIRT(2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="dim"):
        model.predict(np.zeros((1, 2)), [0])


Q3 = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1]])


def test_ncd_zero_input_gives_network_constant():
    model = NCD(Q3, np.random.default_rng(4))
    h = _sigmoid(model.raw_diff.value)
    p = model.predict(h, [0, 1, 2])
    x = np.zeros((1, 3))
    for v, b in model.layers:
        x = _sigmoid(x @ (v.value**2) + b.value)
    np.testing.assert_allclose(p, x[0, 0], rtol=0, atol=1e-15)


def test_ncd_golden():
    model = NCD(Q3, np.random.default_rng(2024))
    theta = np.array([[0.2, 0.7, 0.55], [0.9, 0.1, 0.4]])
    np.testing.assert_allclose(
        model.predict(theta, [0, 2]), [0.7677188785389047, 0.793572349624949], rtol=0, atol=1e-12
    )


def test_ncd_rejects_empty_q_row():
    with pytest.raises(ValueError, match="at least one concept"):
        NCD(np.array([[1, 0], [0, 0]]), np.random.default_rng(0))


def test_ncd_monotone_in_covered_concepts():
    rng = np.random.default_rng(0)
    for draw in range(100):
        model = NCD(Q3, np.random.default_rng(draw))
        for v, b in model.layers:
            v.value[:] = rng.normal(0, 1.5, v.value.shape)
            b.value[:] = rng.normal(0, 1.0, b.value.shape)
        model.raw_diff.value[:] = rng.normal(0, 2.0, model.raw_diff.value.shape)
        theta = rng.uniform(0, 0.99, (1, 3))
        for e in range(3):
            p0 = model.predict(theta, [e])[0]
            for k in np.flatnonzero(Q3[e]):
                up = theta.copy()
                up[0, k] += 0.01
                assert model.predict(up, [e])[0] >= p0


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from(["irt", "mirt", "ncd"]),
    st.integers(0, 1000),
    st.lists(st.floats(0.001, 0.999), min_size=3, max_size=3),
)
def test_outputs_in_open_unit_interval(name, seed, point):
    rng = np.random.default_rng(seed)
    model = build_backbone(name, 3, rng, latent_dim=3, qmatrix=Q3)
    theta = np.array([point[: model.dim]])
    p = model.predict(np.repeat(theta, 3, axis=0), [0, 1, 2])
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("name", ["irt", "mirt", "ncd"])
def test_backbone_gradients(name):
    rng = np.random.default_rng(1)
    model = build_backbone(name, 3, rng, latent_dim=3, qmatrix=Q3)
    theta = rng.uniform(0.2, 0.8, (5, model.dim))
    ids = np.array([0, 1, 2, 1, 0])
    y = np.array([[1], [0], [1], [1], [0]])
    err = grad_check(lambda t: t.bce(model.forward(t, t.const(theta), ids), y), model.parameters())
    assert err < 1e-6


def test_build_backbone_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="unknown backbone"):
        build_backbone("dina", 2, rng)
    with pytest.raises(ValueError, match="Q-matrix"):
        build_backbone("ncd", 2, rng)


def test_forward_is_pure():
    model = build_backbone("ncd", 3, np.random.default_rng(3), qmatrix=Q3)
    theta = np.full((3, 3), 0.5)
    tape = Tape()
    a = model.forward(tape, tape.const(theta), [0, 1, 2]).value
    b = model.predict(theta, [0, 1, 2])
    assert a.reshape(-1).tobytes() == b.tobytes()
