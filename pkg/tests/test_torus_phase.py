import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwfloer.torus_phase import (FourierTerm, HamiltonianSpec, cutoff_parts, energy_and_grad, eval_H,
                                 grad_H, hess_H, pendulum, product_cosine, smooth_step)

SPECS = [pendulum(), product_cosine(),
         HamiltonianSpec(1, (FourierTerm((1,), 1, 0.07, 0.3), FourierTerm((2,), 0, 0.05, 1.1)), 1.0, 1.0)]


def _point(rng, d, scale=3.0):
    return rng.uniform(0, 1), rng.uniform(-1, 2, d), rng.uniform(-scale, scale, d)


@pytest.mark.parametrize("spec", SPECS)
def test_gradient_matches_central_differences(spec):
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(50):
        t, q, p = _point(rng, spec.d)
        gq, gp = grad_H(spec, t, q, p)
        for a in range(spec.d):
            e = np.eye(spec.d)[a] * h
            fd_q = (eval_H(spec, t, q + e, p) - eval_H(spec, t, q - e, p)) / (2 * h)
            fd_p = (eval_H(spec, t, q, p + e) - eval_H(spec, t, q, p - e)) / (2 * h)
            assert fd_q == pytest.approx(gq[a], rel=1e-6, abs=1e-8)
            assert fd_p == pytest.approx(gp[a], rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("spec", SPECS)
def test_fused_energy_and_gradient(spec):
    rng = np.random.default_rng(1)
    t = 0.37
    q = rng.uniform(0, 1, (40, spec.d))
    p = rng.uniform(-6, 6, (40, spec.d))
    H, gq, gp = energy_and_grad(spec, t, q, p)
    gq2, gp2 = grad_H(spec, t, q, p)
    np.testing.assert_allclose(H, eval_H(spec, t, q, p), atol=1e-13)
    np.testing.assert_allclose(gq, gq2, atol=1e-13)
    np.testing.assert_allclose(gp, gp2, atol=1e-13)


def test_hessian_symmetric():
    rng = np.random.default_rng(2)
    spec = product_cosine()
    t, q, p = _point(rng, 2)
    Hm = hess_H(spec, t, q, p)
    np.testing.assert_allclose(Hm, np.swapaxes(Hm, -1, -2), atol=1e-14)


def test_cutoff_gradient_and_support():
    spec = pendulum()
    rng = np.random.default_rng(3)
    R = 2.0
    h = 1e-6
    for _ in range(20):
        q = rng.uniform(0, 1, (1, 1))
        p = rng.uniform(-4, 4, (1, 1))
        val, gq, gp, _ = cutoff_parts(spec, 0.2, q, p, R)
        fd = (cutoff_parts(spec, 0.2, q, p + h, R)[0] - cutoff_parts(spec, 0.2, q, p - h, R)[0]) / (2 * h)
        assert fd[0] == pytest.approx(gp[0, 0], rel=1e-6, abs=1e-8)
    val, gq, gp, H = cutoff_parts(spec, 0.0, np.array([[0.1]]), np.array([[R + 1.01]]), R)
    assert val[0] == 0 and gq[0, 0] == 0 and gp[0, 0] == 0


@given(x=st.floats(-2, 3))
def test_smooth_step_range(x):
    y = float(smooth_step(x))
    assert 0.0 <= y <= 1.0
    if x <= 0:
        assert y == 0.0
    if x >= 1:
        assert y == 1.0


def test_smooth_step_monotone():
    x = np.linspace(-0.5, 1.5, 2001)
    assert np.all(np.diff(smooth_step(x)) >= 0)


def test_spec_roundtrip_and_digest():
    for spec in SPECS:
        back = HamiltonianSpec.from_json(spec.to_json())
        assert back == spec
        assert back.digest() == spec.digest()
    assert pendulum().digest() != pendulum(0.2).digest()


def test_free_spec_flags():
    free = HamiltonianSpec(1)
    assert free.is_free and free.time_independent
    assert not pendulum().is_free
    assert eval_H(free, 0.0, np.array([0.3]), np.array([2.0])) == pytest.approx(2.0)
