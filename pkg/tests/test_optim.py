"""AdamW against a transliterated reference loop and its stated
decoupled-decay semantics."""

import numpy as np

from qser.nnbase import Param
from qser.optim import AdamW


def reference_adamw(theta0, grads, lr, b1, b2, eps, wd):
    """Straight-line reimplementation used as the oracle."""
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        theta = theta * (1.0 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


class TestAgainstReference:
    def test_100_steps_quadratic_bowl(self):
        # minimize 0.5*||x - target||^2, gradient x - target
        lr, wd = 0.05, 0.01
        target = np.array([1.0, -2.0, 0.5])
        p = Param(np.array([5.0, 5.0, 5.0]))
        opt = AdamW({"x": p}, lr=lr, weight_decay=wd)
        ref_grads = []
        ref_theta = np.array([5.0, 5.0, 5.0])
        for _ in range(100):
            g = p.value - target
            ref_grads.append(g.copy())
            p.grad[:] = g
            opt.step()
            p.zero_grad()
        ref = reference_adamw(np.array([5.0, 5.0, 5.0]), ref_grads,
                              lr, 0.9, 0.999, 1e-8, wd)
        np.testing.assert_allclose(p.value, ref, atol=1e-10)

    def test_converges_toward_minimum(self):
        p = Param(np.array([5.0]))
        opt = AdamW({"x": p}, lr=0.1)
        for _ in range(500):
            p.grad[:] = p.value - 2.0
            opt.step()
            p.zero_grad()
        assert abs(p.value[0] - 2.0) < 1e-3


class TestDecoupledDecay:
    def test_zero_grad_still_decays(self):
        p = Param(np.array([4.0]))
        opt = AdamW({"x": p}, lr=0.1, weight_decay=0.5)
        opt.step()  # gradient is zero
        np.testing.assert_allclose(p.value, [4.0 * (1 - 0.1 * 0.5)])

    def test_no_decay_when_zero(self):
        p = Param(np.array([4.0]))
        opt = AdamW({"x": p}, lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_allclose(p.value, [4.0])


class TestDeterminism:
    def test_sorted_param_order(self):
        def run(names):
            params = {n: Param(np.ones(2) * (i + 1))
                      for i, n in enumerate(sorted(names))}
            opt = AdamW(params, lr=0.01, weight_decay=0.1)
            for _ in range(3):
                for n, p in params.items():
                    p.grad[:] = 0.3 * p.value
                opt.step()
                opt.zero_grad()
            return {n: p.value.copy() for n, p in params.items()}
        a = run(["b", "a", "c"])
        b = run(["a", "c", "b"])
        for n in a:
            np.testing.assert_array_equal(a[n], b[n])
