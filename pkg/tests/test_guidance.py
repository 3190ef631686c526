import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedit.codec import CodecConfig, decode, init_codec
from guidedit.guidance import (
    GuidanceConfig, compose, compose_null_anchor, compose_src_anchor, gate, noise_cond, objective_value,
    perceptual_objective, perceptual_update,
)
from guidedit.perceptual import init_perceptual
from guidedit.schedule import make_schedule, tweedie_z0
from guidedit.tensor import ShapeError, Tensor, check_gradient, no_grad

SCHED = make_schedule(1000)
CODEC = init_codec(CodecConfig())
PERC = init_perceptual(seed=0)


def triple(seed, shape=(2, 4, 8, 8)):
    r = np.random.default_rng(seed)
    return [Tensor(r.normal(size=shape)) for _ in range(3)]


def random_state(seed):
    r = np.random.default_rng(seed)
    zt = Tensor(r.normal(size=(4, 8, 8)))
    eps = Tensor(r.normal(size=(4, 8, 8)))
    x_src = Tensor(r.uniform(0, 1, size=(1, 16, 16)))
    return zt, int(r.integers(0, 1000)), eps, x_src


def test_src_anchor_hand_value():
    n, s, e = Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), Tensor([0.0, 1.0])
    np.testing.assert_allclose(compose_src_anchor(n, s, e, 2.0, 1.5).data, [0.5, 1.5], atol=1e-15)


def test_null_anchor_hand_value():
    n, s, e = Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), Tensor([0.0, 1.0])
    np.testing.assert_allclose(compose_null_anchor(n, s, e, 2.0, 1.5).data, [2.0, 1.5], atol=1e-15)


def test_source_collapse_is_exact():
    n, s, e = triple(0)
    assert np.array_equal(compose_src_anchor(n, s, e, 1.0, 0.0).data, s.data)
    assert np.array_equal(compose_null_anchor(n, s, e, 1.0, 0.0).data, s.data)


def test_null_anchor_unit_scales():
    n, s, e = triple(1)
    np.testing.assert_allclose(compose_null_anchor(n, s, e, 1.0, 1.0).data, (s.data + e.data - n.data), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 20), st.floats(0, 20))
def test_guidance_algebra(seed, g, b):
    n, s, e = triple(seed, (3, 5))
    # telescoping: equal scales collapse to plain guidance on the edit prompt
    np.testing.assert_allclose(compose_src_anchor(n, s, e, g, g).data, n.data + g * (e.data - n.data),
                               rtol=0, atol=1e-12 * max(1.0, g))
    # both anchors agree exactly when the edit term is off
    assert np.array_equal(compose_src_anchor(n, s, e, g, 0.0).data, compose_null_anchor(n, s, e, g, 0.0).data)
    # identical source and edit predictions cancel the edit term in the source-anchored form
    np.testing.assert_allclose(compose_src_anchor(n, s, s, g, b).data, noise_cond(n, s, g).data, rtol=0, atol=1e-12)
    # linearity in the three predictions
    c = 1.7
    for fn in (compose_src_anchor, compose_null_anchor):
        np.testing.assert_allclose(fn(n * c, s * c, e * c, g, b).data, c * fn(n, s, e, g, b).data,
                                   rtol=1e-12, atol=1e-12 * max(1.0, g, b))


def test_compose_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        compose_src_anchor(Tensor(np.ones(2)), Tensor(np.ones(2)), Tensor(np.ones(3)), 1.0, 1.0)
    with pytest.raises(ShapeError):
        compose_null_anchor(Tensor(np.ones(3)), Tensor(np.ones(2)), Tensor(np.ones(2)), 1.0, 1.0)


def test_compose_dispatches_on_variant():
    n, s, e = triple(2)
    a = compose(n, s, e, GuidanceConfig(gamma=3.0, beta=2.0))
    b = compose(n, s, e, GuidanceConfig(gamma=3.0, beta=2.0, variant="null_anchor"))
    assert np.array_equal(a.data, compose_src_anchor(n, s, e, 3.0, 2.0).data)
    assert np.array_equal(b.data, compose_null_anchor(n, s, e, 3.0, 2.0).data)


def test_gate_examples():
    cfg = GuidanceConfig(text_range=(0, 19), perceptual_range=None)
    assert gate(5, cfg).text_active
    assert not any(gate(k, cfg).perceptual_active for k in range(50))
    cfg = GuidanceConfig(text_range=(0, 19), perceptual_range=(20, 49))
    assert gate(19, cfg) == (True, False)
    assert gate(20, cfg) == (False, True)
    assert gate(49, cfg).perceptual_active


def test_default_ranges_split_forty_sixty():
    cfg = GuidanceConfig.default_for(50)
    assert cfg.text_range == (0, 19) and cfg.perceptual_range == (20, 49)
    assert GuidanceConfig.default_for(10).text_range == (0, 3)


@pytest.mark.parametrize("kwargs", [{"gamma": -1.0}, {"beta": -0.1}, {"lam": -1.0}, {"inner_iters": -1},
                                    {"variant": "other"}, {"text_range": (5, 2)}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GuidanceConfig(**kwargs)


def test_range_must_fit_step_count():
    with pytest.raises(ValueError):
        GuidanceConfig(perceptual_range=(20, 49)).validate_steps(30)


@pytest.mark.parametrize("cfg", [GuidanceConfig(lam=0.0), GuidanceConfig(inner_iters=0)])
def test_perceptual_update_noop(cfg):
    zt, t, eps, x = random_state(0)
    out = perceptual_update(zt, t, eps, x, CODEC, PERC, SCHED, cfg)
    assert out.data.tobytes() == zt.data.tobytes()


def test_perceptual_update_at_minimum_does_not_move():
    zt, t, eps, _ = random_state(1)
    with no_grad():
        x = decode(tweedie_z0(zt, eps, t, SCHED), CODEC)
    out = perceptual_update(zt, t, eps, x, CODEC, PERC, SCHED, GuidanceConfig(lam=1.0))
    assert np.max(np.abs(out.data - zt.data)) < 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_perceptual_update_never_increases_objective(seed):
    zt, t, eps, x = random_state(100 + seed)
    cfg = GuidanceConfig(lam=5.0, inner_iters=3)
    before = objective_value(zt, t, eps, x, CODEC, PERC, SCHED)
    after = objective_value(perceptual_update(zt, t, eps, x, CODEC, PERC, SCHED, cfg), t, eps, x, CODEC, PERC, SCHED)
    assert after[0] <= before[0]


def test_perceptual_update_records_diagnostics_and_handles_batches():
    states = [random_state(s) for s in (7, 8, 9)]
    zt = Tensor(np.stack([s[0].data for s in states]))
    eps = Tensor(np.stack([s[2].data for s in states]))
    x = Tensor(np.stack([s[3].data for s in states]))
    diags = []
    out = perceptual_update(zt, 500, eps, x, CODEC, PERC, SCHED, GuidanceConfig(lam=1.0), diags)
    assert out.shape == zt.shape
    (rec,) = diags
    assert rec["t"] == 500 and not rec["aborted"]
    assert np.all(rec["after"] <= rec["before"])


def test_objective_gradient_matches_fd():
    zt, t, eps, x = random_state(3)
    f = lambda z: perceptual_objective(z, t, eps, x, CODEC, PERC, SCHED).sum()  # noqa: E731
    assert check_gradient(f, zt) < 1e-4
