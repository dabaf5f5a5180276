"""Asymmetric masked encoder/decoder with hand-written reverse-mode gradients.

The network is a deliberately small transformer: single-head attention, no
layer norm, residual branches rescaled by 1/sqrt(2), fixed 2-D sin/cos
position codes. Only visible patches enter the encoder; the decoder sees
the full sequence with a learned mask token at masked positions. The output
image keeps the original pixels at visible patches ("pasting"), so gradients
reach the network only through predicted masked patches.

All training math runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .patchmask import PatchGrid, ShapeMismatch, patchify, unpatchify
from .tensorio import InvariantViolation, MaskPattern, read_params, write_params

_R2 = 1.0 / math.sqrt(2.0)
_GELU_C = math.sqrt(2.0 / math.pi)


class NoRecordedForward(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    d_enc: int = 64
    d_dec: int = 32
    enc_depth: int = 2
    dec_depth: int = 1
    mlp_ratio: int = 2
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.d_enc < 4 or self.d_dec < 4:
            raise InvariantViolation("d_enc and d_dec must be >= 4")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise InvariantViolation("enc_depth and dec_depth must be >= 1")
        if self.patch_size < 1 or self.channels < 1 or self.mlp_ratio < 1:
            raise InvariantViolation("patch_size, channels and mlp_ratio must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def save(self, path) -> None:
        out = {f"cfg.{f.name}": np.array(float(getattr(self.cfg, f.name))) for f in fields(ModelConfig)}
        out.update(self.tensors)
        write_params(out, path)

    @classmethod
    def load(cls, path) -> "ModelParams":
        raw = read_params(path)
        try:
            cfg = ModelConfig(**{f.name: int(raw.pop(f"cfg.{f.name}")) for f in fields(ModelConfig)})
        except KeyError as exc:
            raise InvariantViolation(f"checkpoint lacks config entry {exc}") from None
        expected = init_params(cfg).tensors
        if set(raw) != set(expected):
            raise InvariantViolation(
                f"checkpoint tensors do not match config: missing {sorted(set(expected) - set(raw))}, "
                f"unexpected {sorted(set(raw) - set(expected))}")
        for name, arr in raw.items():
            if arr.shape != expected[name].shape:
                raise InvariantViolation(f"tensor {name} has shape {arr.shape}, expected {expected[name].shape}")
        return cls(cfg, {name: raw[name] for name in expected})


def _block_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.wq", (d, d)),
        (f"{prefix}.wk", (d, d)),
        (f"{prefix}.wv", (d, d)),
        (f"{prefix}.wo", (d, d)),
        (f"{prefix}.mlp1.w", (d, hidden)),
        (f"{prefix}.mlp1.b", (hidden,)),
        (f"{prefix}.mlp2.w", (hidden, d)),
        (f"{prefix}.mlp2.b", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    p, de, dd = cfg.patch_dim, cfg.d_enc, cfg.d_dec
    shapes = [("patch_embed.w", (p, de)), ("patch_embed.b", (de,))]
    for i in range(cfg.enc_depth):
        shapes += _block_shapes(f"enc{i}", de, cfg.mlp_ratio * de)
    shapes += [("proj.w", (de, dd)), ("proj.b", (dd,)), ("mask_token", (dd,))]
    for i in range(cfg.dec_depth):
        shapes += _block_shapes(f"dec{i}", dd, cfg.mlp_ratio * dd)
    shapes += [("head.w", (dd, p)), ("head.b", (p,))]
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    """Gaussian weights scaled by 1/sqrt(fan_in); biases and mask token start at zero."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg):
        if len(shape) == 2:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """(rows*cols, dim) fixed position codes; first half encodes row, second half column."""
    quarter = dim // 4
    out = np.zeros((rows * cols, dim))
    if quarter == 0:
        return out
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
    r = np.repeat(np.arange(rows), cols)[:, None] * omega
    c = np.tile(np.arange(cols), rows)[:, None] * omega
    out[:, :4 * quarter] = np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
    return out


def _gelu_tanh(u):
    u2 = u * u
    return np.tanh(_GELU_C * u * (1.0 + 0.044715 * u2))


def gelu(u, t=None):
    """tanh-approximated GELU; ``t`` may carry a precomputed inner tanh."""
    t = _gelu_tanh(u) if t is None else t
    return 0.5 * u * (1.0 + t)


def gelu_grad(u, t=None):
    t = _gelu_tanh(u) if t is None else t
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def _mm_grad(x, dy):
    """Weight gradient of y = x @ w summed over every leading axis."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def block_forward(t: dict, prefix: str, x: np.ndarray):
    d = x.shape[-1]
    q = x @ t[f"{prefix}.wq"]
    k = x @ t[f"{prefix}.wk"]
    v = x @ t[f"{prefix}.wv"]
    a = softmax(q @ k.swapaxes(-1, -2) / math.sqrt(d))
    o = a @ v
    h1 = (x + o @ t[f"{prefix}.wo"]) * _R2
    u = h1 @ t[f"{prefix}.mlp1.w"] + t[f"{prefix}.mlp1.b"]
    th = _gelu_tanh(u)
    g = gelu(u, th)
    h2 = (h1 + g @ t[f"{prefix}.mlp2.w"] + t[f"{prefix}.mlp2.b"]) * _R2
    return h2, (x, q, k, v, a, o, h1, u, th, g)


def block_backward(t: dict, prefix: str, cache, dh2: np.ndarray, grads: dict) -> np.ndarray:
    x, q, k, v, a, o, h1, u, th, g = cache
    d = x.shape[-1]
    dm = dh2 * _R2
    grads[f"{prefix}.mlp2.w"] = _mm_grad(g, dm)
    grads[f"{prefix}.mlp2.b"] = dm.sum(axis=(0, 1))
    du = (dm @ t[f"{prefix}.mlp2.w"].T) * gelu_grad(u, th)
    grads[f"{prefix}.mlp1.w"] = _mm_grad(h1, du)
    grads[f"{prefix}.mlp1.b"] = du.sum(axis=(0, 1))
    dh1 = dh2 * _R2 + du @ t[f"{prefix}.mlp1.w"].T

    datt = dh1 * _R2
    grads[f"{prefix}.wo"] = _mm_grad(o, datt)
    do = datt @ t[f"{prefix}.wo"].T
    da = do @ v.swapaxes(-1, -2)
    dv = a.swapaxes(-1, -2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(d)
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    grads[f"{prefix}.wq"] = _mm_grad(x, dq)
    grads[f"{prefix}.wk"] = _mm_grad(x, dk)
    grads[f"{prefix}.wv"] = _mm_grad(x, dv)
    return (dh1 * _R2 + dq @ t[f"{prefix}.wq"].T + dk @ t[f"{prefix}.wk"].T
            + dv @ t[f"{prefix}.wv"].T)


@dataclass
class Trace:
    """Activations recorded by :func:`forward_batch` for one backward pass."""

    grid: PatchGrid
    mask: np.ndarray
    vis_idx: np.ndarray
    x_vis: np.ndarray
    enc_caches: list = field(default_factory=list)
    h_enc: np.ndarray | None = None
    dec_caches: list = field(default_factory=list)
    h_dec: np.ndarray | None = None


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    return images


def forward_batch(params: ModelParams, images: np.ndarray, patterns: Sequence[MaskPattern]):
    """Reconstruct a batch (B, H, W, C); returns (reconstruction, trace).

    Every pattern in the batch must mask the same number of patches.
    """
    cfg, t = params.cfg, params.tensors
    images = _as_batch(images)
    b, h, w, c = images.shape
    if c != cfg.channels:
        raise ShapeMismatch(f"model expects {cfg.channels} channels, image has {c}")
    if len(patterns) != b:
        raise ShapeMismatch(f"{b} images but {len(patterns)} mask patterns")
    grid = PatchGrid.for_image(h, w, cfg.patch_size)
    tokens = patchify(images, cfg.patch_size)
    mask = np.zeros((b, grid.n_patches), dtype=bool)
    for i, pat in enumerate(patterns):
        if pat.n_patches != grid.n_patches:
            raise ShapeMismatch(f"pattern covers {pat.n_patches} patches, image has {grid.n_patches}")
        mask[i] = pat.as_bool()
    n_vis = (~mask).sum(axis=1)
    if np.any(n_vis != n_vis[0]):
        raise ShapeMismatch("patterns in one batch must share the visible-patch count")
    vis_idx = np.argsort(mask, axis=1, kind="stable")[:, : n_vis[0]]
    rows = np.arange(b)[:, None]

    x_vis = tokens[rows, vis_idx]
    trace = Trace(grid, mask, vis_idx, x_vis)
    hcur = x_vis @ t["patch_embed.w"] + t["patch_embed.b"] + sincos_2d(grid.rows, grid.cols, cfg.d_enc)[vis_idx]
    for i in range(cfg.enc_depth):
        hcur, cache = block_forward(t, f"enc{i}", hcur)
        trace.enc_caches.append(cache)
    trace.h_enc = hcur

    full = np.broadcast_to(t["mask_token"], (b, grid.n_patches, cfg.d_dec)).copy()
    full[rows, vis_idx] = hcur @ t["proj.w"] + t["proj.b"]
    hcur = full + sincos_2d(grid.rows, grid.cols, cfg.d_dec)
    for i in range(cfg.dec_depth):
        hcur, cache = block_forward(t, f"dec{i}", hcur)
        trace.dec_caches.append(cache)
    trace.h_dec = hcur

    pred = hcur @ t["head.w"] + t["head.b"]
    out = np.where(mask[..., None], pred, tokens)
    return unpatchify(out, grid.rows, grid.cols, cfg.patch_size), trace


def forward(params: ModelParams, image: np.ndarray, pattern: MaskPattern) -> np.ndarray:
    """Reconstruct one (H, W, C) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    recon, _ = forward_batch(params, image[None], [pattern])
    return recon[0]


def backward(params: ModelParams, trace: Trace | None, d_recon: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter, given dLoss/dReconstruction."""
    if trace is None or trace.h_dec is None:
        raise NoRecordedForward("backward() needs the trace of a recorded forward pass")
    cfg, t = params.cfg, params.tensors
    grid = trace.grid
    grads: dict[str, np.ndarray] = {}
    dout = patchify(_as_batch(d_recon), cfg.patch_size)
    dpred = dout * trace.mask[..., None]
    grads["head.w"] = _mm_grad(trace.h_dec, dpred)
    grads["head.b"] = dpred.sum(axis=(0, 1))
    dh = dpred @ t["head.w"].T
    for i in reversed(range(cfg.dec_depth)):
        dh = block_backward(t, f"dec{i}", trace.dec_caches[i], dh, grads)

    grads["mask_token"] = (dh * trace.mask[..., None]).sum(axis=(0, 1))
    rows = np.arange(dh.shape[0])[:, None]
    dz = dh[rows, trace.vis_idx]
    grads["proj.w"] = _mm_grad(trace.h_enc, dz)
    grads["proj.b"] = dz.sum(axis=(0, 1))
    dh = dz @ t["proj.w"].T
    for i in reversed(range(cfg.enc_depth)):
        dh = block_backward(t, f"enc{i}", trace.enc_caches[i], dh, grads)
    grads["patch_embed.w"] = _mm_grad(trace.x_vis, dh)
    grads["patch_embed.b"] = dh.sum(axis=(0, 1))
    return {name: grads[name] for name in t}


def _pixel_mask(patterns: Sequence[MaskPattern], shape, s: int) -> np.ndarray:
    b, h, w, c = shape
    grid = PatchGrid.for_image(h, w, s)
    tok = np.stack([pat.as_bool() for pat in patterns])[..., None]
    tok = np.broadcast_to(tok, (b, grid.n_patches, s * s * c))
    return unpatchify(tok, grid.rows, grid.cols, s)


def mse_loss(recon, images, patterns: Sequence[MaskPattern], s: int) -> float:
    """Mean squared error over masked-patch pixels of the whole batch."""
    recon, images = _as_batch(recon), _as_batch(images)
    if recon.shape != images.shape:
        raise ShapeMismatch("reconstruction and target differ in shape")
    m = _pixel_mask(patterns, images.shape, s)
    count = m.sum()
    if count == 0:
        return 0.0
    diff = (recon - images)[m]
    return float(diff @ diff / count)


def mse_loss_grad(recon, images, patterns: Sequence[MaskPattern], s: int) -> np.ndarray:
    recon, images = _as_batch(recon), _as_batch(images)
    m = _pixel_mask(patterns, images.shape, s)
    count = m.sum()
    if count == 0:
        return np.zeros_like(recon)
    return np.where(m, 2.0 * (recon - images) / count, 0.0)


# --- optimizer ----------------------------------------------------------

@dataclass
class OptimState:
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_epochs: float = 0.0
    total_epochs: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim(params: ModelParams | dict, **kwargs) -> OptimState:
    tensors = params.tensors if isinstance(params, ModelParams) else params
    opt = OptimState(**kwargs)
    opt.m = {k: np.zeros_like(v) for k, v in tensors.items()}
    opt.v = {k: np.zeros_like(v) for k, v in tensors.items()}
    return opt


def lr_at(opt: OptimState, epoch: float) -> float:
    """Linear warmup to base_lr, then half-cosine decay reaching 0 at total_epochs."""
    if epoch < opt.warmup_epochs:
        return opt.base_lr * epoch / opt.warmup_epochs
    span = opt.total_epochs - opt.warmup_epochs
    if span <= 0:
        return opt.base_lr
    progress = min(1.0, (epoch - opt.warmup_epochs) / span)
    return opt.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def opt_step(params, grads: dict, opt: OptimState, epoch: float):
    """One AdamW update in place; weight decay touches matrices only. Returns params."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    lr = lr_at(opt, epoch)
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if p.ndim >= 2 and opt.weight_decay:
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return params
