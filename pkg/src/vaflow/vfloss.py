"""Foundation-alignment losses for latent maps.

The alignment objective has two marginal terms -- a per-location cosine
similarity loss and a pairwise distance-matrix similarity loss -- combined
with a gradient-norm adaptive weight so the sum-scale reconstruction loss
and the mean-scale alignment loss pull on the encoder with comparable force:

    total = w_hyper * w_adaptive * (L_mcos + L_mdms)

Margins make near-aligned pairs free: a margin of 1 grants full slack and
switches its term off exactly (see ``vf_loss_total``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ZERO_NORM_THRESHOLD = 1e-8
ADAPTIVE_CLAMP = (1e-4, 1e4)
DEAD_GRAD_THRESHOLD = 1e-12


class ZeroNormError(ValueError):
    """A per-location vector has (numerically) zero length; cosines are undefined."""


@dataclass
class LatentMap:
    """A latent grid: (h, w, d_z) values, or (batch, h, w, d_z)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim == 3:
            self.values = ad.reshape(self.values, (1,) + self.values.shape)
        if self.values.ndim != 4:
            raise ValueError(f"LatentMap values must be (h, w, d) or (b, h, w, d), got {self.values.shape}")
        if self.grid_size < 1:
            raise ValueError("LatentMap needs at least one grid cell")
        if not np.isfinite(self.values.data).all():
            raise ValueError("LatentMap values must be finite")

    @property
    def h(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]

    @property
    def d(self):
        return self.values.shape[3]

    @property
    def grid_size(self):
        return self.values.shape[1] * self.values.shape[2]


@dataclass
class FeatureMap:
    """Frozen foundation features on the same grid as a paired LatentMap."""

    values: Tensor
    source_tag: str = "unknown"

    def __post_init__(self):
        if isinstance(self.values, np.ndarray):
            self.values = Tensor(self.values)
        if self.values.ndim == 3:
            self.values = ad.reshape(self.values, (1,) + self.values.shape)
        if self.values.ndim != 4:
            raise ValueError(f"FeatureMap values must be (h, w, d) or (b, h, w, d), got {self.values.shape}")
        # frozen by definition: never part of the gradient tape
        self.values = self.values.detach()

    @property
    def h(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]

    @property
    def d(self):
        return self.values.shape[3]


@dataclass
class Projection:
    """Trainable (d_f, d_z) matrix mapping latent channels onto feature channels."""

    weight: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError(f"Projection weight must be 2D (d_f, d_z), got {self.weight.shape}")

    @classmethod
    def create(cls, d_f, d_z, rng, dtype=np.float64):
        w = rng.standard_normal((d_f, d_z)) / np.sqrt(d_z)
        return cls(Tensor(w.astype(dtype), requires_grad=True))


@dataclass
class Margins:
    """Slack parameters of the alignment losses; all in [0, 1]."""

    m1: float = 0.5
    m2: float = 0.25
    w_hyper: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.m1 <= 1.0 and 0.0 <= self.m2 <= 1.0):
            raise ValueError(f"margins must lie in [0, 1], got m1={self.m1}, m2={self.m2}")
        if self.w_hyper < 0:
            raise ValueError("w_hyper must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar loss terms and weights for one training step."""

    l_rec: float = 0.0
    l_kl: float = 0.0
    l_mcos: float = 0.0
    l_mdms: float = 0.0
    l_vf: float = 0.0
    w_adaptive: float = 1.0
    w_hyper: float = 0.1
    m1: float = 0.5
    m2: float = 0.25

    def as_dict(self):
        return {
            "l_rec": self.l_rec,
            "l_kl": self.l_kl,
            "l_mcos": self.l_mcos,
            "l_mdms": self.l_mdms,
            "l_vf": self.l_vf,
            "w_adaptive": self.w_adaptive,
        }


ABLATIONS = ("full", "mcos_only", "mdms_only", "no_margin")


def _guard_norms(values, what):
    data = values.data
    sq = np.einsum("bhwd,bhwd->bhw", data, data)
    lowest = float(np.sqrt(sq.min()))
    if lowest < ZERO_NORM_THRESHOLD:
        raise ZeroNormError(f"{what} contains a vector with norm {lowest:.3e} (< {ZERO_NORM_THRESHOLD})")


def _check_grids(z, f, op):
    if (z.h, z.w) != (f.h, f.w):
        raise ad.ShapeError(op, (z.h, z.w), (f.h, f.w))
    if z.values.shape[0] != f.values.shape[0]:
        raise ad.ShapeError(op + " (batch)", z.values.shape, f.values.shape)


def project_latent(z: LatentMap, p: Projection) -> LatentMap:
    """Apply the channel projection at every grid location (z' = W z)."""
    if p.weight.shape[1] != z.d:
        raise ad.ShapeError("project_latent", p.weight.shape, z.values.shape)
    out = ad.matmul(z.values, ad.transpose(p.weight))
    return LatentMap(out)


def mcos_loss(z_proj: LatentMap, f: FeatureMap, m1: float) -> Tensor:
    """Mean over grid locations of ReLU(1 - m1 - cos(z'_ij, f_ij))."""
    _check_grids(z_proj, f, "mcos_loss")
    if z_proj.d != f.d:
        raise ad.ShapeError("mcos_loss (channels)", z_proj.values.shape, f.values.shape)
    _guard_norms(z_proj.values, "projected latents")
    _guard_norms(f.values, "features")
    cos = ad.cosine_similarity(z_proj.values, f.values, axis=-1)
    return ad.tmean(ad.relu((1.0 - m1) - cos))


def _unit_rows(values):
    flat = ad.reshape(values, (values.shape[0], -1, values.shape[-1]))
    norms = ad.l2_norm(flat, axis=-1, keepdims=True)
    return ad.div(flat, ad.expand(norms, flat.shape))


def mdms_loss(z: LatentMap, f: FeatureMap, m2: float) -> Tensor:
    """Mean over all N^2 location pairs of ReLU(|cos(z_i,z_j) - cos(f_i,f_j)| - m2).

    Each map's cosine matrix is computed within itself, so channel counts may
    differ; by default this sees the *unprojected* latents.
    """
    _check_grids(z, f, "mdms_loss")
    _guard_norms(z.values, "latents")
    _guard_norms(f.values, "features")
    zn = _unit_rows(z.values)
    fn = _unit_rows(f.values)
    cz = ad.matmul(zn, ad.transpose(zn, (0, 2, 1)))
    cf = ad.matmul(fn, ad.transpose(fn, (0, 2, 1)))
    return ad.tmean(ad.relu(ad.absolute(ad.sub(cz, cf)) - m2))


def adaptive_weight(l_vf_raw: Tensor, l_rec: Tensor, anchor: Tensor, rec_grad_norm: float | None = None) -> float:
    """Gradient-norm ratio ||grad L_rec|| / ||grad L_vf|| at the anchor tensor.

    Returned as a plain float (a constant for the rest of the step), clamped
    to ``ADAPTIVE_CLAMP``.  A vanishing alignment gradient signals a dead
    loss; that returns the upper clamp with a warning.  ``rec_grad_norm``
    skips the reconstruction probe when the caller already ran that backward
    pass this step.
    """
    if rec_grad_norm is None:
        g_rec, = ad.grad_table(l_rec, [anchor])
        n_rec = float(np.linalg.norm(g_rec))
    else:
        n_rec = float(rec_grad_norm)
    g_vf, = ad.grad_table(l_vf_raw, [anchor])
    n_vf = float(np.linalg.norm(g_vf))
    if n_vf < DEAD_GRAD_THRESHOLD:
        warnings.warn("alignment loss gradient vanished at the anchor; using the upper clamp", RuntimeWarning)
        return ADAPTIVE_CLAMP[1]
    return float(np.clip(n_rec / n_vf, *ADAPTIVE_CLAMP))


def vf_loss_total(
    z: LatentMap,
    f: FeatureMap,
    p: Projection,
    m: Margins,
    l_rec: Tensor,
    anchor: Tensor,
    ablation: str = "full",
    frozen_adaptive: float | None = None,
    mdms_on_projected: bool = False,
    rec_grad_norm: float | None = None,
):
    """Combined alignment loss with adaptive weighting.

    Returns ``(breakdown, term)`` where ``term`` is the differentiable total
    (already scaled by both weights) to add to the training objective.

    Ablations mirror the loss-formulation study: ``mcos_only``/``mdms_only``
    drop the other term and halve ``w_hyper`` for a fair comparison;
    ``no_margin`` sets both margins to zero.  A margin of exactly 1 grants
    the maximum allowed slack and is treated as that term being disabled,
    so ``m1 = m2 = 1`` makes the whole loss identically zero.

    ``frozen_adaptive`` bypasses the gradient probe with a fixed weight
    (used by gradient checks, where the weight must be a constant).
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    m1, m2, w_hyper = m.m1, m.m2, m.w_hyper
    use_mcos, use_mdms = True, True
    if ablation == "mcos_only":
        use_mdms = False
        w_hyper = w_hyper / 2.0
    elif ablation == "mdms_only":
        use_mcos = False
        w_hyper = w_hyper / 2.0
    elif ablation == "no_margin":
        m1, m2 = 0.0, 0.0
    if m1 >= 1.0:
        use_mcos = False
    if m2 >= 1.0:
        use_mdms = False

    terms = []
    l_mcos_val = 0.0
    l_mdms_val = 0.0
    if use_mcos:
        l_mcos = mcos_loss(project_latent(z, p), f, m1)
        l_mcos_val = float(l_mcos.data)
        terms.append(l_mcos)
    if use_mdms:
        l_mdms = mdms_loss(project_latent(z, p) if mdms_on_projected else z, f, m2)
        l_mdms_val = float(l_mdms.data)
        terms.append(l_mdms)

    breakdown = LossBreakdown(
        l_rec=float(l_rec.data), l_mcos=l_mcos_val, l_mdms=l_mdms_val,
        w_hyper=w_hyper, m1=m1, m2=m2,
    )

    if not terms:
        breakdown.w_adaptive = 1.0
        breakdown.l_vf = 0.0
        return breakdown, Tensor(np.zeros((), dtype=z.values.dtype))

    raw = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    if frozen_adaptive is not None:
        w_adaptive = float(frozen_adaptive)
    elif not raw.requires_grad:
        w_adaptive = 1.0
    else:
        w_adaptive = adaptive_weight(raw, l_rec, anchor, rec_grad_norm=rec_grad_norm)
    term = ad.mul(raw, w_hyper * w_adaptive)
    breakdown.w_adaptive = w_adaptive
    breakdown.l_vf = float(term.data)
    return breakdown, term
