"""Trainable 3D U-Net with analytic gradients.

Architecture, fixed by configuration: an encoder of num_levels+1 stages of
two 3x3x3 conv + leaky-ReLU blocks (the first conv of stages 1..L
downsamples with stride 2), a decoder that nearest-upsamples, concatenates
the same-resolution encoder output, and applies two more conv blocks, and
a final 1x1x1 classification head. Channel widths double per level, capped
at 8x the base width.

Training math: softmax over the last axis; loss = voxel-mean cross-entropy
plus soft-Dice over foreground classes pooled across the batch
(epsilon 1e-5); gradients are derived by hand and checked against central
finite differences in float64 (see ``gradient_check``).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError, ValidationError
from ..seeds import make_rng
from . import ops

DICE_EPS = 1e-5
WIDTH_CAP_FACTOR = 8


@dataclass(frozen=True)
class UNetConfig:
    patch_size: tuple[int, int, int]
    num_levels: int
    base_channels: int
    num_classes: int
    in_channels: int = 1
    leaky_slope: float = ops.LEAKY_SLOPE

    def __post_init__(self) -> None:
        if self.num_levels < 0 or self.num_levels > 5:
            raise ValidationError(f"num_levels must be in [0, 5], got {self.num_levels}")
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        step = 2 ** self.num_levels
        if any(p % step or p < step for p in self.patch_size):
            raise ValidationError(
                f"patch {self.patch_size} incompatible with {self.num_levels} levels"
            )

    def channels(self) -> tuple[int, ...]:
        cap = WIDTH_CAP_FACTOR * self.base_channels
        return tuple(
            min(self.base_channels * 2 ** i, cap) for i in range(self.num_levels + 1)
        )

    @staticmethod
    def from_plan(plan) -> "UNetConfig":
        return UNetConfig(
            patch_size=tuple(plan.patch_size),
            num_levels=plan.num_levels,
            base_channels=plan.base_channels,
            num_classes=plan.num_classes,
        )


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int  # 3 or 1
    stride: int


def conv_layers(cfg: UNetConfig) -> list[LayerSpec]:
    """The full ordered conv-layer table for a config."""
    ch = cfg.channels()
    layers: list[LayerSpec] = []
    for i in range(cfg.num_levels + 1):
        c_in = cfg.in_channels if i == 0 else ch[i - 1]
        stride = 1 if i == 0 else 2
        layers.append(LayerSpec(f"enc{i}a", c_in, ch[i], 3, stride))
        layers.append(LayerSpec(f"enc{i}b", ch[i], ch[i], 3, 1))
    for i in range(cfg.num_levels - 1, -1, -1):
        layers.append(LayerSpec(f"dec{i}a", ch[i + 1] + ch[i], ch[i], 3, 1))
        layers.append(LayerSpec(f"dec{i}b", ch[i], ch[i], 3, 1))
    layers.append(LayerSpec("head", ch[0], cfg.num_classes, 1, 1))
    return layers


@dataclass
class ParamStore:
    """Named parameter tensors in a fixed order."""

    tensors: dict[str, np.ndarray]
    order: list[str]

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, list(self.order))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(
            {k: v.astype(dtype) for k, v in self.tensors.items()}, list(self.order)
        )

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]


def expected_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in conv_layers(cfg):
        if layer.kernel == 3:
            shapes[f"{layer.name}.w"] = (3, 3, 3, layer.c_in, layer.c_out)
        else:
            shapes[f"{layer.name}.w"] = (layer.c_in, layer.c_out)
        shapes[f"{layer.name}.b"] = (layer.c_out,)
    return shapes


def init_params(cfg: UNetConfig, seed: int, dtype=np.float32) -> ParamStore:
    """He-style fan-in scaled normal weights, zero biases.

    Each tensor gets its own derived stream, so adding or removing layers
    elsewhere never shifts another layer's draw.
    """
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for layer in conv_layers(cfg):
        fan_in = layer.c_in * layer.kernel ** 3
        std = math.sqrt(2.0 / fan_in)
        rng = make_rng(seed, "init", layer.name)
        shape = expected_shapes(cfg)[f"{layer.name}.w"]
        tensors[f"{layer.name}.w"] = (rng.normal(0.0, std, size=shape)).astype(dtype)
        tensors[f"{layer.name}.b"] = np.zeros(layer.c_out, dtype=dtype)
        order += [f"{layer.name}.w", f"{layer.name}.b"]
    return ParamStore(tensors, order)


@dataclass
class ForwardCache:
    layer_inputs: dict[str, tuple]  # name -> (x_shape, cols or x)
    preacts: dict[str, np.ndarray]  # name -> z before activation
    skip_names: list[str]
    logits: np.ndarray


def _conv_block(params: ParamStore, name: str, x: np.ndarray, stride: int,
                cache: ForwardCache | None):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    z, cols = ops.conv3_forward(x, w, b, stride)
    h = ops.leaky_forward(z)
    if cache is not None:
        cache.layer_inputs[name] = (x.shape, cols)
        cache.preacts[name] = z
    return h


def forward(cfg: UNetConfig, params: ParamStore, x: np.ndarray,
            want_cache: bool = False):
    """Run the network. x: (B, D, H, W, in_channels) float array.

    Returns logits (B, D, H, W, num_classes), plus the cache when asked.
    """
    if x.ndim != 5 or x.shape[-1] != cfg.in_channels:
        raise ValidationError(f"bad input shape {x.shape}")
    step = 2 ** cfg.num_levels
    if any(s % step for s in x.shape[1:4]):
        raise ValidationError(
            f"spatial shape {x.shape[1:4]} not divisible by 2**{cfg.num_levels}"
        )
    cache = ForwardCache({}, {}, [], np.empty(0)) if want_cache else None
    skips: list[np.ndarray] = []
    h = x
    for i in range(cfg.num_levels + 1):
        h = _conv_block(params, f"enc{i}a", h, 1 if i == 0 else 2, cache)
        h = _conv_block(params, f"enc{i}b", h, 1, cache)
        if i < cfg.num_levels:
            skips.append(h)
            if cache is not None:
                cache.skip_names.append(f"enc{i}b")
    for i in range(cfg.num_levels - 1, -1, -1):
        h = ops.upsample2_forward(h)
        h = np.concatenate([h, skips[i]], axis=-1)
        h = _conv_block(params, f"dec{i}a", h, 1, cache)
        h = _conv_block(params, f"dec{i}b", h, 1, cache)
    if cache is not None:
        cache.layer_inputs["head"] = (h.shape, h)
    logits = ops.conv1_forward(h, params["head.w"], params["head.b"])
    if cache is not None:
        cache.logits = logits
        return logits, cache
    return logits


def backward(cfg: UNetConfig, params: ParamStore, cache: ForwardCache,
             grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients for every parameter given dLoss/dlogits."""
    grads: dict[str, np.ndarray] = {}
    head_in = cache.layer_inputs["head"][1]
    g, gw, gb = ops.conv1_backward(grad_logits, head_in, params["head.w"])
    grads["head.w"], grads["head.b"] = gw, gb

    ch = cfg.channels()

    def back_block(name: str, g: np.ndarray, stride: int) -> np.ndarray:
        g = ops.leaky_backward(g, cache.preacts[name])
        x_shape, cols = cache.layer_inputs[name]
        gx, gw, gb = ops.conv3_backward(g, x_shape, cols, params[f"{name}.w"], stride)
        grads[f"{name}.w"], grads[f"{name}.b"] = gw, gb
        return gx

    skip_grads: dict[int, np.ndarray] = {}
    for i in range(cfg.num_levels):  # decoder blocks, deepest-first was built last
        g = back_block(f"dec{i}b", g, 1)
        g = back_block(f"dec{i}a", g, 1)
        up_c = ch[i + 1]
        g_up, g_skip = g[..., :up_c], g[..., up_c:]
        skip_grads[i] = g_skip
        g = ops.upsample2_backward(g_up)

    for i in range(cfg.num_levels, -1, -1):
        if i < cfg.num_levels:
            g = g + skip_grads[i]
        g = back_block(f"enc{i}b", g, 1)
        g = back_block(f"enc{i}a", g, 1 if i == 0 else 2)
    return grads


@dataclass(frozen=True)
class LossValues:
    total: float
    cross_entropy: float
    dice_term: float


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    idx = np.indices(labels.shape)
    out[(*idx, labels)] = 1
    return out


def _check_batch(cfg: UNetConfig, x: np.ndarray, labels: np.ndarray) -> None:
    if labels.shape != x.shape[:4]:
        raise ValidationError("labels must match the batch's spatial shape")
    if labels.max(initial=0) >= cfg.num_classes:
        raise ValidationError("label id outside the class range")


def _loss_from_logits(cfg: UNetConfig, logits: np.ndarray, labels: np.ndarray):
    """Returns (LossValues, grad wrt logits)."""
    dtype = logits.dtype
    probs = ops.softmax_lastaxis(logits)
    n_vox = int(np.prod(labels.shape))
    onehot = _one_hot(labels, cfg.num_classes, dtype)

    # cross-entropy, mean over voxels
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)
    ce = float(-np.log(np.maximum(p_true, np.finfo(dtype).tiny)).mean())

    # soft-Dice over foreground classes, pooled across batch and space
    eps = dtype.type(DICE_EPS)
    fg = list(range(1, cfg.num_classes))
    flat_p = probs.reshape(-1, cfg.num_classes)
    flat_y = onehot.reshape(-1, cfg.num_classes)
    inter = (flat_p * flat_y).sum(axis=0)
    den = flat_p.sum(axis=0) + flat_y.sum(axis=0) + eps
    dice = (2 * inter + eps) / den
    dice_term = float(np.mean([1.0 - dice[c] for c in fg]))

    # gradient wrt probabilities from the dice term
    dprobs = np.zeros_like(flat_p)
    inv = 1.0 / (den * len(fg))
    for c in fg:
        dprobs[:, c] = -(2 * flat_y[:, c] - dice[c]) * inv[c]
    # softmax backward plus the cross-entropy shortcut
    dot = (dprobs * flat_p).sum(axis=1, keepdims=True)
    grad_logits = flat_p * (dprobs - dot)
    grad_logits += (flat_p - flat_y) / dtype.type(n_vox)
    return LossValues(ce + dice_term, ce, dice_term), grad_logits.reshape(logits.shape)


def loss_value(cfg: UNetConfig, params: ParamStore, x: np.ndarray,
               labels: np.ndarray) -> LossValues:
    """Loss only, no gradients (used by finite-difference checking)."""
    _check_batch(cfg, x, labels)
    logits = forward(cfg, params, x)
    values, _ = _loss_from_logits(cfg, logits, labels)
    return values


def loss_and_grad(cfg: UNetConfig, params: ParamStore, x: np.ndarray,
                  labels: np.ndarray):
    """Loss (cross-entropy + soft-Dice) and all parameter gradients.

    labels: (B, D, H, W) integer classes. Dice pools over the whole batch
    per foreground class; absent classes are tempered by the epsilon.
    Returns (LossValues, grads dict).
    """
    _check_batch(cfg, x, labels)
    logits, cache = forward(cfg, params, x, want_cache=True)
    values, grad_logits = _loss_from_logits(cfg, logits, labels)
    grads = backward(cfg, params, cache, grad_logits)
    return values, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if lr < 0:
        raise ValidationError(f"negative learning rate {lr}")
    for name in params.order:
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name in params.order:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr != 0.0:
            mhat = m / b1t
            vhat = v / b2t
            params.tensors[name] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(
                params[name].dtype
            )


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    per_tensor: dict[str, float]
    n_params: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


KINK_MARGIN = 5e-3


def _smallest_clear_shift(vals: np.ndarray, margin: float) -> float:
    """Smallest |delta| such that every |vals + delta| >= margin."""
    # only values that a small shift could bring near zero matter
    reach = margin + 0.25
    near = vals[np.abs(vals) < reach]
    if near.size == 0 or np.abs(vals).min() >= margin:
        return 0.0
    cands = np.concatenate(([0.0], -near - margin, -near + margin))
    cands = cands[np.abs(cands) <= 0.25]
    dist = np.abs(cands[:, None] + near[None, :]).min(axis=1)
    feasible = cands[dist >= margin - 1e-12]
    if feasible.size == 0:
        raise TrainingError("no kink-free bias shift within search range")
    return float(feasible[np.argmin(np.abs(feasible))])


def _shift_biases_off_kinks(cfg: UNetConfig, params: ParamStore,
                            x: np.ndarray, margin: float) -> None:
    """Nudge biases so no preactivation sits within `margin` of zero.

    The leaky nonlinearity is not differentiable at zero, so a finite
    difference that steps a preactivation across it measures a blend of
    the two slopes rather than the gradient. Layers are fixed in forward
    order; a layer's shift only moves its own and deeper preactivations.
    """
    for spec in conv_layers(cfg):
        if spec.name == "head":
            continue
        _, cache = forward(cfg, params, x, want_cache=True)
        z = cache.preacts[spec.name]
        bias = params.tensors[spec.name + ".b"]
        for c in range(z.shape[-1]):
            bias[c] += _smallest_clear_shift(z[..., c].ravel(), margin)


def gradient_check(
    cfg: UNetConfig | None = None,
    seed: int = 0,
    step: float = 1e-4,
) -> GradCheckReport:
    """Central-difference check of every parameter gradient in float64.

    The default config is a small but complete two-level net so the check
    exercises every op (strided conv, upsample, concat, head) in seconds.
    The check point is nudged off nonlinearity kinks first; see
    _shift_biases_off_kinks.
    """
    if cfg is None:
        cfg = UNetConfig(patch_size=(8, 8, 8), num_levels=2, base_channels=2,
                         num_classes=3)
    t0 = time.perf_counter()
    params = init_params(cfg, seed, dtype=np.float64)
    rng = make_rng(seed, "gradcheck")
    x = rng.normal(size=(1, *cfg.patch_size, cfg.in_channels))
    labels = rng.integers(0, cfg.num_classes, size=(1, *cfg.patch_size))
    _shift_biases_off_kinks(cfg, params, x, margin=KINK_MARGIN)
    _, grads = loss_and_grad(cfg, params, x, labels)

    def loss_at() -> float:
        return loss_value(cfg, params, x, labels).total

    per_tensor: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for name in params.order:
        tensor = params.tensors[name]
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_at()
            flat[i] = orig - step
            lo = loss_at()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            denom = max(abs(numeric), abs(gflat[i]), 1e-3)
            err = max(err, abs(numeric - gflat[i]) / denom)
        per_tensor[name] = err
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(
        max_rel_err=worst,
        worst_tensor=worst_name,
        per_tensor=per_tensor,
        n_params=params.n_params(),
        seconds=time.perf_counter() - t0,
    )
