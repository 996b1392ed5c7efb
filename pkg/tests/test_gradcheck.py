import numpy as np
import pytest

from fgdet.gradcheck import (
    central_difference,
    check_activation,
    relative_error,
    run_gradcheck,
)


def test_central_difference_on_quadratic():
    g = central_difference(lambda x: float(x @ x), np.array([1.0, -2.0, 3.0]), 1e-3)
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0], rtol=1e-9)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9, floor=1e-6) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


def test_full_run_passes_and_is_seeded():
    a = run_gradcheck(samples=200, seed=4)
    b = run_gradcheck(samples=200, seed=4)
    assert a.passed
    assert a.max_rel_err < 1e-4
    assert a.to_dict() == b.to_dict()
    assert len(a.results) == 7
    assert "worst relative error" in a.to_text()


def test_broken_gradient_is_caught(monkeypatch):
    from fgdet import activations

    real = activations.activate_grad
    monkeypatch.setattr(activations, "activate_grad", lambda k, x: real(k, x) * 1.01)
    res = check_activation("mish", 50, np.random.default_rng(0))
    assert not res.passed


@pytest.mark.parametrize("samples", [0, -3])
def test_invalid_samples(samples):
    with pytest.raises(ValueError):
        run_gradcheck(samples)
