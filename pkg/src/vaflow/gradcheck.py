"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward


def finite_diff_check(f, x, h=1e-6, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  The
    error at each coordinate is ``|analytic - fd| / max(1, |analytic|)``;
    the max over checked coordinates is returned.  ``max_coords`` optionally
    subsamples coordinates (seeded via ``rng``) to keep large checks cheap.

    Run this in float64; central differences at h=1e-6 drown in float32 noise.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base, requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("finite_diff_check: f returned a non-finite value")
    backward(y)
    analytic = xt.grad.reshape(-1)

    n = base.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)

    flat = base.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("finite_diff_check: f returned a non-finite value")
        fd = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def check_composition(f, g, x, h=1e-6, seeds=5):
    """Verify the chain rule f(g(x)) against finite differences on random seeds."""
    worst = 0.0
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    for s in range(seeds):
        rng = np.random.default_rng(s)
        xt = base + 0.05 * rng.standard_normal(base.shape)
        worst = max(worst, finite_diff_check(lambda t: f(g(t)), Tensor(xt), h=h))
    return worst
