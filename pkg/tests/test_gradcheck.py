import numpy as np
import pytest

from coarsefine import autodiff as ad
from coarsefine import fusion as fz
from coarsefine import gradcheck as gc


def _bad_mul(a, b):
    """Multiplication whose backward is off by ten percent."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    return ad._make(a.values * b.values, (a, b),
                    lambda g: (ad._unbroadcast(1.1 * g * b.values, a.shape), ad._unbroadcast(g * a.values, b.shape)),
                    "mul")


@pytest.fixture
def corrupted_fuse(monkeypatch):
    monkeypatch.setattr(fz, "mul", _bad_mul)


class TestHarness:
    def test_all_operators_pass(self):
        results = gc.run(seeds=10)
        assert [r.name for r in results] == list(gc.OPERATORS)
        for r in results:
            assert r.passed, r
            assert r.seeds == 10

    def test_corrupted_backward_names_the_operator(self, corrupted_fuse):
        results = {r.name: r for r in gc.run(["fuse", "calibrate"], seeds=2)}
        assert not results["fuse"].passed
        assert results["fuse"].worst_input == "x"
        assert results["calibrate"].passed
        assert "fuse," in gc.report(results.values()) and ",FAIL" in gc.report(results.values())

    def test_injected_operator(self):
        def case(rng):
            return {"x": rng.normal(size=(3,))}, lambda t: _bad_mul(t["x"], t["x"])
        (r,) = gc.run(["square"], seeds=1, extra={"square": case})
        assert r.name == "square" and not r.passed

    def test_unknown_operator(self):
        with pytest.raises(KeyError):
            gc.run(["nope"])

    def test_non_finite_error_fails(self):
        r = gc.CheckResult("x", float("nan"), 1, 0, "x", 0.0)
        assert not r.passed
