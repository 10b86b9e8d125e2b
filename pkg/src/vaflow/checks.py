"""Registered finite-difference checks over every differentiable building block.

Each entry perturbs float64 inputs with central differences (h = 1e-6) and
compares against the reverse-mode gradient, avoiding kinks of relu/abs by
construction.  ``run_all`` returns one row per check for the CLI table and
the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dit import DiTConfig, DiTModel, attention, rmsnorm, swiglu_ffn, velocity_loss
from .gradcheck import finite_diff_check
from .tokenizer import Posterior, kl_loss
from .vfloss import FeatureMap, LatentMap, Margins, Projection, mcos_loss, mdms_loss, vf_loss_total

H = 1e-6
DEFAULT_TOL = 1e-4
DIT_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _mcos_inputs(seed=0, m1=0.5, h=4, w=4, d=8, exclusion=10 * H):
    """Maps whose per-location cosines sit clear of the margin kink."""
    for s in range(seed, seed + 500):
        rng = np.random.default_rng(s)
        zp = rng.standard_normal((h, w, d))
        f = rng.standard_normal((h, w, d))
        zn = zp / np.linalg.norm(zp, axis=-1, keepdims=True)
        fn = f / np.linalg.norm(f, axis=-1, keepdims=True)
        cos = np.einsum("hwd,hwd->hw", zn, fn)
        if np.all(np.abs(1.0 - m1 - cos) > exclusion):
            return zp, f
    raise RuntimeError("no kink-free mcos sample found")


def _mdms_inputs(seed=1000, m2=0.25, exclusion=10 * H):
    """Maps whose pairwise cosine gaps avoid both the abs and relu kinks."""
    for s in range(seed, seed + 500):
        rng = np.random.default_rng(s)
        z = rng.standard_normal((2, 2, 4))
        f = rng.standard_normal((2, 2, 6))
        zn = z.reshape(4, 4) / np.linalg.norm(z.reshape(4, 4), axis=-1, keepdims=True)
        fn = f.reshape(4, 6) / np.linalg.norm(f.reshape(4, 6), axis=-1, keepdims=True)
        delta = np.abs(zn @ zn.T - fn @ fn.T)
        off = ~np.eye(4, dtype=bool)
        if np.all(delta[off] > exclusion) and np.all(np.abs(delta[off] - m2) > exclusion):
            return z, f
    raise RuntimeError("no kink-free mdms sample found")


def check_mcos(max_coords=64):
    zp, f = _mcos_inputs()
    fm = FeatureMap(Tensor(f[None]))

    def loss(zt):
        return mcos_loss(LatentMap(ad.reshape(zt, (1, 4, 4, 8))), fm, 0.5)

    return finite_diff_check(loss, Tensor(zp), h=H, max_coords=max_coords)


def check_mdms(max_coords=None):
    z, f = _mdms_inputs()
    fm = FeatureMap(Tensor(f[None]))

    def loss(zt):
        return mdms_loss(LatentMap(ad.reshape(zt, (1, 2, 2, 4))), fm, 0.25)

    return finite_diff_check(loss, Tensor(z), h=H, max_coords=max_coords)


def check_vf_total(max_coords=48):
    zp, fv = _mcos_inputs(seed=50)
    fm = FeatureMap(Tensor(fv[None]))
    rng = np.random.default_rng(51)
    w0 = rng.standard_normal((8, 8)) / np.sqrt(8)
    anchor = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    l_rec = ad.tsum(ad.mul(anchor, anchor))

    def loss(zt):
        z = LatentMap(ad.reshape(zt, (1, 4, 4, 8)))
        _, term = vf_loss_total(z, fm, Projection(Tensor(w0, requires_grad=True)), Margins(),
                                l_rec, anchor, frozen_adaptive=2.5)
        return term

    err_z = finite_diff_check(loss, Tensor(zp), h=H, max_coords=max_coords)

    def loss_w(wt):
        z = LatentMap(Tensor(zp[None]))
        _, term = vf_loss_total(z, fm, Projection(wt), Margins(), l_rec, anchor, frozen_adaptive=2.5)
        return term

    err_w = finite_diff_check(loss_w, Tensor(w0), h=H, max_coords=max_coords)
    return max(err_z, err_w)


def check_kl(max_coords=None):
    rng = np.random.default_rng(7)
    mean = rng.standard_normal((1, 2, 2, 3))
    logvar = rng.standard_normal((1, 2, 2, 3))

    def wrt_mean(m):
        return kl_loss(Posterior(m, Tensor(logvar)))

    def wrt_logvar(lv):
        return kl_loss(Posterior(Tensor(mean), lv))

    return max(
        finite_diff_check(wrt_mean, Tensor(mean), h=H, max_coords=max_coords),
        finite_diff_check(wrt_logvar, Tensor(logvar), h=H, max_coords=max_coords),
    )


def check_velocity(max_coords=None):
    rng = np.random.default_rng(8)
    target = rng.standard_normal((1, 2, 2, 4))

    def loss(p):
        return velocity_loss(p, target, lambda_dir=1.0)

    return finite_diff_check(loss, Tensor(rng.standard_normal((1, 2, 2, 4))), h=H, max_coords=max_coords)


def check_swiglu(max_coords=48):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 6))
    wg = rng.standard_normal((6, 16))
    wv = rng.standard_normal((6, 16))
    wo = rng.standard_normal((16, 6))

    def wrt_x(xt):
        return ad.tsum(ad.tanh(swiglu_ffn(xt, Tensor(wg), Tensor(wv), Tensor(wo))))

    def wrt_gate(w):
        return ad.tsum(ad.tanh(swiglu_ffn(Tensor(x), w, Tensor(wv), Tensor(wo))))

    return max(
        finite_diff_check(wrt_x, Tensor(x), h=H, max_coords=max_coords),
        finite_diff_check(wrt_gate, Tensor(wg), h=H, max_coords=max_coords),
    )


def check_rmsnorm(max_coords=None):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 6))
    gain = rng.standard_normal(6) + 1.0

    def wrt_x(xt):
        return ad.tsum(ad.silu(rmsnorm(xt, Tensor(gain))))

    def wrt_gain(g):
        return ad.tsum(ad.silu(rmsnorm(Tensor(x), g)))

    return max(
        finite_diff_check(wrt_x, Tensor(x), h=H, max_coords=max_coords),
        finite_diff_check(wrt_gain, Tensor(gain), h=H, max_coords=max_coords),
    )


def check_attention(max_coords=48):
    rng = np.random.default_rng(11)
    q = rng.standard_normal((1, 2, 5, 4))
    k = rng.standard_normal((1, 2, 5, 4))
    v = rng.standard_normal((1, 2, 5, 4))

    def wrt_q(qt):
        return ad.tsum(ad.tanh(attention(qt, Tensor(k), Tensor(v))))

    def wrt_v(vt):
        return ad.tsum(ad.tanh(attention(Tensor(q), Tensor(k), vt)))

    return max(
        finite_diff_check(wrt_q, Tensor(q), h=H, max_coords=max_coords),
        finite_diff_check(wrt_v, Tensor(v), h=H, max_coords=max_coords),
    )


def check_conv2d(max_coords=40):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((5, 3, 3, 3))
    b = rng.standard_normal(5)

    def wrt_x(xt):
        return ad.tsum(ad.silu(ad.conv2d(xt, Tensor(w), bias=Tensor(b), stride=2, padding=1)))

    def wrt_w(wt):
        return ad.tsum(ad.silu(ad.conv2d(Tensor(x), wt, bias=Tensor(b), stride=2, padding=1)))

    return max(
        finite_diff_check(wrt_x, Tensor(x), h=H, max_coords=max_coords),
        finite_diff_check(wrt_w, Tensor(w), h=H, max_coords=max_coords),
    )


def check_group_norm(max_coords=40):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 3, 4))
    gamma = rng.standard_normal(4) + 1.5
    beta = rng.standard_normal(4)

    def wrt_x(xt):
        return ad.tsum(ad.silu(ad.group_norm(xt, Tensor(gamma), Tensor(beta), groups=2)))

    return finite_diff_check(wrt_x, Tensor(x), h=H, max_coords=max_coords)


def check_dit_full(max_coords=20):
    """Tiny full transformer (depth 1, width 16, 2x2 grid) against FD."""
    cfg = DiTConfig(depth=1, heads=2, width=16, patch=1, grid_h=2, grid_w=2,
                    d_z=3, num_classes=3, dtype="float64")
    model = DiTModel.create(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(14)
    for p in model.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, 2, 2, 3))
    t = np.array([0.3, 0.7])
    labels = np.array([0, 1])
    target = rng.standard_normal((2, 2, 2, 3))

    def loss_for(pname):
        def f(pt):
            saved = model.params[pname]
            model.params[pname] = pt
            try:
                return velocity_loss(model.forward(x, t, labels), target, lambda_dir=1.0)
            finally:
                model.params[pname] = saved

        return f

    worst = 0.0
    for pname in model.params:
        worst = max(worst, finite_diff_check(loss_for(pname), model.params[pname], h=H,
                                             max_coords=max_coords, rng=np.random.default_rng(15)))
    return worst


REGISTRY = [
    ("mcos_loss", check_mcos, DEFAULT_TOL),
    ("mdms_loss", check_mdms, DEFAULT_TOL),
    ("vf_loss_total", check_vf_total, DEFAULT_TOL),
    ("kl_loss", check_kl, DEFAULT_TOL),
    ("velocity_loss", check_velocity, DEFAULT_TOL),
    ("swiglu_ffn", check_swiglu, DEFAULT_TOL),
    ("rmsnorm", check_rmsnorm, DEFAULT_TOL),
    ("attention", check_attention, DEFAULT_TOL),
    ("conv2d", check_conv2d, DEFAULT_TOL),
    ("group_norm", check_group_norm, DEFAULT_TOL),
    ("dit_full", check_dit_full, DIT_TOL),
]


def run_all():
    return [CheckResult(name, float(fn()), tol) for name, fn, tol in REGISTRY]
