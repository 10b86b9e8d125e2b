"""Patch-size-1 diffusion transformer trained by rectified flow.

Architecture per block: RMSNorm -> multi-head attention with 2D rotary
embeddings -> RMSNorm -> SwiGLU feed-forward, every sublayer modulated by
AdaLN (scale, shift, gate) computed from the summed timestep and class
embeddings.  Gates and the output head start at zero so the model begins
as the identity map predicting zero velocity.

Training draws interpolation times from a logit-normal, builds the straight
interpolant between a data latent and Gaussian noise, and regresses the
constant target velocity with an MSE plus angular penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .optim import Adam

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


def rmsnorm(x, gain, eps=RMS_EPS):
    """x / rms(x) * gain over the channel axis."""
    return ad.rms_norm(x, gain, eps=eps)


def swiglu_hidden(width, multiple=8):
    """Default SwiGLU hidden width: (8/3) * width rounded to a multiple of 8."""
    return max(multiple, int(round(width * 8.0 / 3.0 / multiple)) * multiple)


def swiglu_ffn(x, w_gate, w_val, w_out):
    """W_out (silu(x W_gate) * (x W_val)); no biases."""
    return ad.matmul(ad.mul(ad.silu(ad.matmul(x, w_gate)), ad.matmul(x, w_val)), w_out)


def rope_tables(grid_h, grid_w, head_dim, base=ROPE_BASE, dtype=np.float64):
    """Pairwise cos/sin tables for 2D rotary embeddings on an h*w token grid.

    The head dimension splits in half: the first half rotates with the row
    position, the second half with the column position (1D rotary per axis).
    Requires head_dim divisible by 4.
    """
    if head_dim % 4:
        raise ValueError(f"head_dim must be divisible by 4 for the 2D axis split, got {head_dim}")
    pairs_per_axis = head_dim // 4
    freqs = base ** (-np.arange(pairs_per_axis, dtype=np.float64) * 4.0 / head_dim)
    rows = np.repeat(np.arange(grid_h), grid_w).astype(np.float64)
    cols = np.tile(np.arange(grid_w), grid_h).astype(np.float64)
    angles = np.concatenate([rows[:, None] * freqs[None, :], cols[:, None] * freqs[None, :]], axis=1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x, cos, sin):
    """Rotate (..., T, head_dim) query/key channels by the table angles."""
    return ad.rope_apply(x, cos, sin)


def rope_2d(x, rows, cols, base=ROPE_BASE):
    """Rotary embedding for explicit per-token (row, col) positions.

    ``x`` is (..., T, head_dim); ``rows``/``cols`` are length-T position
    arrays.  Convenience form of ``rope_tables`` + ``apply_rope`` for
    irregular grids.
    """
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise ValueError(f"head_dim must be divisible by 4, got {head_dim}")
    pairs = head_dim // 4
    freqs = base ** (-np.arange(pairs, dtype=np.float64) * 4.0 / head_dim)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    angles = np.concatenate([rows[:, None] * freqs, cols[:, None] * freqs], axis=1)
    dtype = x.dtype if isinstance(x, Tensor) else np.float64
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return ad.rope_apply(x, np.cos(angles).astype(dtype), np.sin(angles).astype(dtype))


def attention(q, k, v, return_weights=False):
    """Scaled dot-product attention over (B, heads, T, head_dim) tensors."""
    dh = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def timestep_features(t, width, scale=1000.0):
    """Sinusoidal features of t in [0, 1]; plain ndarray (no gradient)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * scale * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


@dataclass
class DiTConfig:
    depth: int = 4
    heads: int = 4
    width: int = 128
    patch: int = 1
    grid_h: int = 4
    grid_w: int = 4
    d_z: int = 16
    num_classes: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % (4 * self.heads):
            raise ValueError(
                f"width must be divisible by 4*heads for the rotary axis split, got {self.width}/{self.heads}"
            )
        if self.grid_h % self.patch or self.grid_w % self.patch:
            raise ValueError("grid sides must be divisible by the patch size")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def tokens(self):
        return (self.grid_h // self.patch) * (self.grid_w // self.patch)

    @property
    def token_dim(self):
        return self.d_z * self.patch * self.patch

    @property
    def hidden(self):
        return swiglu_hidden(self.width)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def null_class(self):
        return self.num_classes  # last embedding row = unconditional token


class DiTModel:
    """Transformer over latent-grid tokens; predicts velocity per token."""

    def __init__(self, config: DiTConfig, params: dict):
        self.config = config
        self.params = params
        self._cos, self._sin = rope_tables(
            config.grid_h // config.patch, config.grid_w // config.patch,
            config.head_dim, dtype=config.np_dtype,
        )

    @classmethod
    def create(cls, config: DiTConfig, rng):
        dt = config.np_dtype
        w, hidden = config.width, config.hidden
        p = {}

        def linear(name, d_in, d_out, bias=True, zero=False):
            scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
            p[f"{name}.w"] = Tensor((rng.standard_normal((d_in, d_out)) * scale).astype(dt), requires_grad=True)
            if bias:
                p[f"{name}.b"] = Tensor(np.zeros(d_out, dt), requires_grad=True)

        linear("in", config.token_dim, w)
        # zero start, and the unconditional entry stays a pinned zero vector:
        # a class row that is never drawn cannot drift away from it
        p["cls.table"] = Tensor(np.zeros((config.num_classes, w), dt), requires_grad=True)
        linear("t.0", w, w)
        linear("t.1", w, w)
        for i in range(config.depth):
            p[f"blk.{i}.norm1"] = Tensor(np.ones(w, dt), requires_grad=True)
            p[f"blk.{i}.norm2"] = Tensor(np.ones(w, dt), requires_grad=True)
            linear(f"blk.{i}.q", w, w)
            linear(f"blk.{i}.k", w, w)
            linear(f"blk.{i}.v", w, w)
            linear(f"blk.{i}.o", w, w)
            linear(f"blk.{i}.ffn_gate", w, hidden, bias=False)
            linear(f"blk.{i}.ffn_val", w, hidden, bias=False)
            linear(f"blk.{i}.ffn_out", hidden, w, bias=False)
            linear(f"blk.{i}.ada", w, 6 * w, zero=True)  # zero gates: block starts as identity
        p["final.norm"] = Tensor(np.ones(w, dt), requires_grad=True)
        linear("final.ada", w, 2 * w, zero=True)
        linear("final.out", w, config.token_dim, zero=True)
        return cls(config, p)

    def parameters(self):
        return list(self.params.values())

    def _tokens(self, x):
        cfg = self.config
        b = x.shape[0]
        if cfg.patch == 1:
            return ad.reshape(x, (b, cfg.tokens, cfg.d_z))
        hp, wp = cfg.grid_h // cfg.patch, cfg.grid_w // cfg.patch
        x = ad.reshape(x, (b, hp, cfg.patch, wp, cfg.patch, cfg.d_z))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, cfg.tokens, cfg.token_dim))

    def _untokens(self, x):
        cfg = self.config
        b = x.shape[0]
        if cfg.patch == 1:
            return ad.reshape(x, (b, cfg.grid_h, cfg.grid_w, cfg.d_z))
        hp, wp = cfg.grid_h // cfg.patch, cfg.grid_w // cfg.patch
        x = ad.reshape(x, (b, hp, wp, cfg.patch, cfg.patch, cfg.d_z))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, cfg.grid_h, cfg.grid_w, cfg.d_z))

    def _linear(self, name, x):
        p = self.params
        out = ad.matmul(x, p[f"{name}.w"])
        if f"{name}.b" in p:
            b = p[f"{name}.b"]
            out = ad.add(out, ad.expand(ad.reshape(b, (1,) * (out.ndim - 1) + b.shape), out.shape))
        return out

    def _class_embedding(self, labels):
        """Rows of the class table; the unconditional index maps to fixed zeros."""
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > cfg.null_class:
            raise ValueError(f"labels must lie in [0, {cfg.null_class}] (last = unconditional)")
        real = labels < cfg.num_classes
        emb = ad.gather_rows(self.params["cls.table"], np.where(real, labels, 0))
        mask = Tensor(real.astype(cfg.np_dtype)[:, None])
        return ad.mul(emb, ad.expand(mask, emb.shape))

    def _condition(self, t, labels):
        cfg = self.config
        tfeat = Tensor(timestep_features(t, cfg.width).astype(cfg.np_dtype))
        temb = self._linear("t.1", ad.silu(self._linear("t.0", tfeat)))
        return ad.silu(ad.add(temb, self._class_embedding(labels)))

    @staticmethod
    def _modulate(x, shift, scale):
        b, tkn, w = x.shape
        scale1 = ad.expand(ad.reshape(scale, (b, 1, w)), (b, tkn, w))
        shift1 = ad.expand(ad.reshape(shift, (b, 1, w)), (b, tkn, w))
        return ad.add(ad.mul(x, ad.add(scale1, 1.0)), shift1)

    @staticmethod
    def _gate(x, gate):
        b, tkn, w = x.shape
        return ad.mul(x, ad.expand(ad.reshape(gate, (b, 1, w)), (b, tkn, w)))

    def forward(self, x_t, t, labels):
        """Velocity prediction for (B, h, w, d_z) interpolants at times t."""
        cfg = self.config
        p = self.params
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t), dtype=cfg.np_dtype)
        b = x_t.shape[0]
        cond = self._condition(t, labels)

        x = self._linear("in", self._tokens(x_t))
        for i in range(cfg.depth):
            mods = self._linear(f"blk.{i}.ada", cond)
            w = cfg.width
            shift1, scale1, gate1, shift2, scale2, gate2 = (
                ad.narrow(mods, 1, k * w, w) for k in range(6)
            )
            h = self._modulate(rmsnorm(x, p[f"blk.{i}.norm1"]), shift1, scale1)
            q = self._split_heads(self._linear(f"blk.{i}.q", h))
            k = self._split_heads(self._linear(f"blk.{i}.k", h))
            v = self._split_heads(self._linear(f"blk.{i}.v", h))
            q = apply_rope(q, self._cos, self._sin)
            k = apply_rope(k, self._cos, self._sin)
            att = self._merge_heads(attention(q, k, v))
            x = ad.add(x, self._gate(self._linear(f"blk.{i}.o", att), gate1))

            h = self._modulate(rmsnorm(x, p[f"blk.{i}.norm2"]), shift2, scale2)
            ffn = swiglu_ffn(h, p[f"blk.{i}.ffn_gate.w"], p[f"blk.{i}.ffn_val.w"], p[f"blk.{i}.ffn_out.w"])
            x = ad.add(x, self._gate(ffn, gate2))

        mods = self._linear("final.ada", cond)
        shift, scale = ad.narrow(mods, 1, 0, cfg.width), ad.narrow(mods, 1, cfg.width, cfg.width)
        x = self._modulate(rmsnorm(x, p["final.norm"]), shift, scale)
        return self._untokens(self._linear("final.out", x))

    def _split_heads(self, x):
        cfg = self.config
        b, tkn, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, tkn, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        cfg = self.config
        b = x.shape[0]
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, cfg.tokens, cfg.width))

    # -- persistence -----------------------------------------------------------

    def save(self, path, extra=None):
        cfg = self.config
        tensors = {
            "meta.depth": np.array([cfg.depth], np.float32),
            "meta.heads": np.array([cfg.heads], np.float32),
            "meta.width": np.array([cfg.width], np.float32),
            "meta.patch": np.array([cfg.patch], np.float32),
            "meta.grid": np.array([cfg.grid_h, cfg.grid_w], np.float32),
            "meta.d_z": np.array([cfg.d_z], np.float32),
            "meta.num_classes": np.array([cfg.num_classes], np.float32),
        }
        for name, tns in self.params.items():
            tensors[name] = tns.data
        for name, arr in (extra or {}).items():
            tensors[name] = arr
        container.save_tensors(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = container.load_tensors(path)
        cfg = DiTConfig(
            depth=int(tensors["meta.depth"][0]),
            heads=int(tensors["meta.heads"][0]),
            width=int(tensors["meta.width"][0]),
            patch=int(tensors["meta.patch"][0]),
            grid_h=int(tensors["meta.grid"][0]),
            grid_w=int(tensors["meta.grid"][1]),
            d_z=int(tensors["meta.d_z"][0]),
            num_classes=int(tensors["meta.num_classes"][0]),
        )
        params = {
            name: Tensor(arr, requires_grad=True)
            for name, arr in tensors.items()
            if not name.startswith(("meta.", "extra."))
        }
        extra = {name: arr for name, arr in tensors.items() if name.startswith("extra.")}
        return cls(cfg, params), extra


# -- rectified flow ------------------------------------------------------------


@dataclass
class FlowState:
    """Straight interpolant between a data latent x0 and noise x1 at times t."""

    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray

    @classmethod
    def make(cls, x0, x1, t):
        x0 = np.asarray(x0)
        x1 = np.asarray(x1)
        t = np.asarray(t, dtype=x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
        return cls(t=t.reshape(-1), x_t=(1.0 - t) * x0 + t * x1, v_target=x1 - x0)


def lognorm_sample_t(rng, size=None):
    """Timestep draw: sigmoid of a standard normal, strictly inside (0, 1)."""
    return 1.0 / (1.0 + np.exp(-rng.standard_normal(size)))


DEAD_TARGET_NORM = 1e-12


def velocity_loss(v_pred: Tensor, v_target, lambda_dir=1.0):
    """MSE plus angular penalty lambda_dir * (1 - cos) over flattened velocities."""
    if not isinstance(v_target, Tensor):
        v_target = Tensor(np.asarray(v_target), dtype=v_pred.dtype)
    if v_pred.shape != v_target.shape:
        raise ad.ShapeError("velocity_loss", v_pred.shape, v_target.shape)
    diff = ad.sub(v_pred, v_target)
    mse = ad.tmean(ad.mul(diff, diff))
    if lambda_dir == 0.0:
        return mse
    if float(np.linalg.norm(v_target.data)) < DEAD_TARGET_NORM:
        warnings.warn("zero-norm velocity target; direction term skipped", RuntimeWarning)
        return mse
    flat_p = ad.reshape(v_pred, (1, -1))
    flat_t = ad.reshape(v_target, (1, -1))
    direction = 1.0 - ad.tsum(ad.cosine_similarity(flat_p, flat_t, axis=-1))
    return ad.add(mse, ad.mul(direction, lambda_dir))


@dataclass
class DiTTrainConfig:
    depth: int = 4
    heads: int = 4
    width: int = 128
    patch: int = 1
    num_classes: int = 4
    lambda_dir: float = 1.0
    label_dropout: float = 0.1
    lognorm: bool = True
    lognorm_until_step: int | None = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    dtype: str = "float32"


def eval_velocity_loss(model, norm_stats, latents, labels, lambda_dir=1.0, seed=123, draws=8):
    """Deterministic low-variance velocity loss on a fixed probe set.

    Draws ``draws`` (t, noise) pairs from a seeded stream and averages the
    loss; per-step training losses are single-sample estimates and far too
    noisy to compare models with.
    """
    mean, std = norm_stats
    norm = ((np.asarray(latents, dtype=np.float64) - mean) / std).astype(model.config.np_dtype)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        t = lognorm_sample_t(rng, len(norm))
        x1 = rng.standard_normal(norm.shape).astype(model.config.np_dtype)
        state = FlowState.make(norm, x1, t.astype(model.config.np_dtype))
        with ad.no_grad():
            v = model.forward(state.x_t, state.t, labels)
        total += float(velocity_loss(v, state.v_target, lambda_dir=lambda_dir).data)
    return total / draws


def normalize_latents(latents):
    """Per-channel standardization stats over a (n, h, w, d_z) latent set."""
    mean = latents.mean(axis=(0, 1, 2))
    std = latents.std(axis=(0, 1, 2))
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def train_dit(latents, labels, cfg: DiTTrainConfig, log_every=50):
    """Train on pre-extracted latents (n, h, w, d_z) with integer labels.

    Latents are standardized per channel (stats stored with the model for
    sampling).  Returns (model, norm_stats, loss_log) where loss_log holds
    (step, loss) pairs including step 0 and the final step.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4 or len(latents) < 1:
        raise ValueError("latents must be a nonempty (n, h, w, d_z) array")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(latents),):
        raise ValueError("labels must be one integer per latent")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")

    mean, std = normalize_latents(latents)
    norm = ((latents - mean) / std)

    model_cfg = DiTConfig(
        depth=cfg.depth, heads=cfg.heads, width=cfg.width, patch=cfg.patch,
        grid_h=latents.shape[1], grid_w=latents.shape[2], d_z=latents.shape[3],
        num_classes=cfg.num_classes, dtype=cfg.dtype,
    )
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_model, rng_steps = (np.random.default_rng(s) for s in seeds)
    model = DiTModel.create(model_cfg, rng_model)
    dt = model_cfg.np_dtype
    norm = norm.astype(dt)

    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    n = len(norm)
    log = []
    for step in range(cfg.steps):
        idx = rng_steps.integers(0, n, size=min(cfg.batch_size, n))
        x0 = norm[idx]
        lab = labels[idx].copy()
        drop = rng_steps.random(len(lab)) < cfg.label_dropout
        lab[drop] = model_cfg.null_class
        use_lognorm = cfg.lognorm and (cfg.lognorm_until_step is None or step < cfg.lognorm_until_step)
        t = lognorm_sample_t(rng_steps, len(lab)) if use_lognorm else rng_steps.random(len(lab))
        x1 = rng_steps.standard_normal(x0.shape).astype(dt)
        state = FlowState.make(x0, x1, t.astype(dt))

        v_pred = model.forward(state.x_t, state.t, lab)
        loss = velocity_loss(v_pred, state.v_target, lambda_dir=cfg.lambda_dir)
        value = float(loss.data)
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite velocity loss at step {step}; aborting")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if step % log_every == 0 or step == cfg.steps - 1:
            log.append((step, value))
    return model, (mean, std), log


# -- sampling ----------------------------------------------------------------------


def timestep_shift(t, s):
    """Warp t -> s*t / (1 + (s-1)*t); identity at s=1, endpoints fixed."""
    t = np.asarray(t, dtype=np.float64)
    return s * t / (1.0 + (s - 1.0) * t)


def euler_sample(velocity, x1, steps, shift_s=1.0, t_eval=None):
    """Integrate dx/dt = v(x, t) from t=1 (noise) down to t=0 on a shifted grid.

    ``velocity`` maps (x, t) -> ndarray.  The uniform grid t_k = 1 - k/steps
    is warped by ``timestep_shift``; Euler steps use the warped increments.
    """
    if steps < 1:
        raise ValueError("need at least one integration step")
    if shift_s <= 0:
        raise ValueError("shift must be positive")
    x = np.array(x1, dtype=np.float64, copy=True)
    grid = timestep_shift(1.0 - np.arange(steps + 1) / steps, shift_s)
    for k in range(steps):
        t_cur, t_next = grid[k], grid[k + 1]
        x += velocity(x, t_cur) * (t_next - t_cur)
    return x


def guided_velocity(model, norm_stats, cfg_scale=1.0, cfg_interval=(0.0, 1.0), labels=None):
    """Classifier-free-guided velocity field of a trained model (normalized space).

    Guidance blends conditional and unconditional predictions only when t
    falls inside ``cfg_interval``; outside it the conditional field is used.
    """
    lo, hi = cfg_interval
    if lo > hi:
        raise ValueError(f"invalid cfg interval [{lo}, {hi}]")
    null = np.full(len(labels), model.config.null_class, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)

    def velocity(x, t):
        ts = np.full(len(x), t)
        with ad.no_grad():
            v_c = model.forward(x.astype(model.config.np_dtype), ts, labels).data.astype(np.float64)
            if cfg_scale == 1.0 or not (lo <= t <= hi):
                return v_c
            v_u = model.forward(x.astype(model.config.np_dtype), ts, null).data.astype(np.float64)
        return v_u + cfg_scale * (v_c - v_u)

    return velocity


def sample_latents(model, norm_stats, labels, steps=250, cfg_scale=1.0,
                   cfg_interval=(0.0, 1.0), shift_s=1.0, rng=None, x1=None):
    """Draw latents for the given labels; returns a (b, h, w, d_z) array.

    Deterministic given (weights, labels, steps, rng seed).  ``x1`` overrides
    the initial noise (normalized space) when supplied.
    """
    cfg = model.config
    labels = np.asarray(labels, dtype=np.int64)
    if x1 is None:
        rng = rng or np.random.default_rng(0)
        x1 = rng.standard_normal((len(labels), cfg.grid_h, cfg.grid_w, cfg.d_z))
    velocity = guided_velocity(model, norm_stats, cfg_scale, cfg_interval, labels)
    x0 = euler_sample(velocity, x1, steps, shift_s=shift_s)
    mean, std = norm_stats
    return x0 * std + mean
