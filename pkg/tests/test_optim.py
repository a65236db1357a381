import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpscale.optim import (LionState, SgdMomentumState, clip_global_norm, global_norm, lion_step, param_group,
                            sgd_momentum_step)
from mlpscale.tensor import make_rng


def test_lion_hand_example():
    params = {"w": np.array([1.0])}
    state = LionState(lr=1e-4, beta1=0.9, beta2=0.99)
    lion_step(params, {"w": np.array([0.5])}, state)
    assert params["w"][0] == pytest.approx(0.9999, abs=1e-15)
    assert state.momentum["w"][0] == pytest.approx(0.005, abs=1e-15)


def test_lion_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    lion_step(params, {"w": np.zeros(2)}, LionState(lr=0.1))
    assert params["w"].tolist() == [1.0, -2.0]


def test_lion_step_magnitude(rng):
    theta = rng.standard_normal(50)
    params = {"w": theta.copy()}
    g = rng.standard_normal(50)
    g[::7] = 0.0
    lion_step(params, {"w": g}, LionState(lr=0.01))
    moved = np.abs(params["w"] - theta)
    assert np.allclose(moved[g != 0], 0.01, rtol=0, atol=1e-15)
    assert not moved[g == 0].any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_lion_gradient_scale_invariance(seed, scale):
    rng = make_rng(seed)
    theta = rng.standard_normal(20)
    g = rng.standard_normal(20)
    a, b = {"w": theta.copy()}, {"w": theta.copy()}
    lion_step(a, {"w": g}, LionState(lr=0.05))
    lion_step(b, {"w": g * scale}, LionState(lr=0.05))
    assert np.array_equal(a["w"], b["w"])


def test_lion_decoupled_decay_contracts():
    params = {"w": np.array([2.0, -4.0])}
    state = LionState(lr=0.1, weight_decay=0.5)
    for _ in range(3):
        lion_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(params["w"], np.array([2.0, -4.0]) * (1 - 0.05) ** 3, rtol=1e-15)


def test_lion_rejects_bad_shapes_and_names():
    with pytest.raises(ValueError):
        lion_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, LionState())
    with pytest.raises(KeyError):
        lion_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, LionState())
    with pytest.raises(ValueError):
        LionState(beta1=1.0)


def test_sgd_plain_when_no_momentum(rng):
    theta = rng.standard_normal(5)
    g = rng.standard_normal(5)
    params = {"blocks.0.W": theta.copy()}
    sgd_momentum_step(params, {"blocks.0.W": g}, SgdMomentumState(lr=0.3, momentum=0.0))
    assert np.array_equal(params["blocks.0.W"], theta - 0.3 * g)


def test_sgd_two_step_hand_example():
    params = {"w": np.array([0.0])}
    state = SgdMomentumState(lr=0.1, momentum=0.9)
    sgd_momentum_step(params, {"w": np.array([1.0])}, state)
    assert state.velocity["w"][0] == 1.0 and params["w"][0] == pytest.approx(-0.1, abs=1e-15)
    sgd_momentum_step(params, {"w": np.array([1.0])}, state)
    assert state.velocity["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert params["w"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_group_rates_ratio():
    params = {"head.W": np.zeros(3), "blocks.0.W": np.zeros(3)}
    g = np.array([1.0, -2.0, 0.5])
    sgd_momentum_step(params, {"head.W": g, "blocks.0.W": g}, SgdMomentumState())
    np.testing.assert_allclose(params["head.W"] / params["blocks.0.W"], 10.0, rtol=1e-12)


def test_unknown_group_rejected():
    with pytest.raises(KeyError):
        sgd_momentum_step({"head.W": np.zeros(1)}, {"head.W": np.ones(1)}, SgdMomentumState(lr={"body": 0.1}))


def test_groups():
    assert param_group("head.W") == "head" and param_group("head.b") == "head"
    assert {param_group(n) for n in ("emb.W", "blocks.3.We", "blocks.0.ln.g")} == {"body"}


def test_optimizers_deterministic(rng):
    theta = rng.standard_normal((4, 4))
    grads = [rng.standard_normal((4, 4)) for _ in range(3)]
    for make in (lambda: LionState(lr=0.01, weight_decay=0.1), lambda: SgdMomentumState(lr=0.01)):
        runs = []
        for _ in range(2):
            p, s = {"w": theta.copy()}, make()
            step = lion_step if isinstance(s, LionState) else sgd_momentum_step
            for g in grads:
                step(p, {"w": g}, s)
            runs.append(p["w"].tobytes())
        assert runs[0] == runs[1]


def test_clip_below_threshold_unchanged():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(g, 1.0)["a"].tolist() == [0.3, 0.4]


def test_clip_hand_example():
    out = clip_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.8], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 10.0), st.floats(1e-2, 1e3))
def test_clip_bound_holds(seed, max_norm, scale):
    rng = make_rng(seed)
    grads = {"a": rng.standard_normal((3, 4)) * scale, "b": rng.standard_normal(5) * scale}
    assert global_norm(clip_global_norm(grads, max_norm)) <= max_norm + 1e-6


def test_clip_names_non_finite_tensor():
    with pytest.raises(FloatingPointError, match="'b'"):
        clip_global_norm({"a": np.ones(2), "b": np.array([1.0, np.nan])}, 1.0)
    with pytest.raises(ValueError):
        clip_global_norm({"a": np.ones(2)}, 0.0)
