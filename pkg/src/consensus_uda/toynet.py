"""Tiny two-headed segmentation network with hand-written backprop and Adam.

Architecture (all "same" zero padding)::

    x  = rgb / 127.5 - 1
    h1 = relu(conv3x3(x,  conv1))          # 3 -> H
    h2 = relu(conv3x3(h1, conv2))          # H -> H
    primary = softmax(h2 @ head_w + head_b)
    aux     = softmax(h1 @ aux_w  + aux_b) # taps the earlier representation

Training minimizes the rectified loss on pseudo-labels (see ``uda_loss``).
Forward and backward run in the dtype of the parameters handed to them;
``train`` keeps float64 master weights and computes in ``TrainConfig.precision``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import uda_loss
from .errors import FormatError, NonFiniteGradientError, ShapeError
from .metrics import ConfusionMatrix, summarize
from .rng import Stream, derive_seed
from .taxonomy import IGNORE_ID

log = logging.getLogger(__name__)

TNET_MAGIC = b"TNET1"
_TNET_HEADER = struct.Struct("<5sIII")
_TAG_INIT = 0x1417
_TAG_SHUFFLE = 0x5F1E


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # (3, 3, 3, H)   [ky, kx, in, out]
    conv1_b: np.ndarray  # (H,)
    conv2_w: np.ndarray  # (3, 3, H, H)
    conv2_b: np.ndarray  # (H,)
    head_w: np.ndarray   # (H, C)
    head_b: np.ndarray   # (C,)
    aux_w: np.ndarray    # (H, C)
    aux_b: np.ndarray    # (C,)

    @property
    def hidden(self) -> int:
        return self.conv1_w.shape[-1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[-1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.astype(dtype) for k, v in self.blocks().items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.blocks().values())


def param_shapes(hidden: int, n_classes: int) -> dict[str, tuple[int, ...]]:
    h, c = hidden, n_classes
    return {
        "conv1_w": (3, 3, 3, h), "conv1_b": (h,),
        "conv2_w": (3, 3, h, h), "conv2_b": (h,),
        "head_w": (h, c), "head_b": (c,),
        "aux_w": (h, c), "aux_b": (c,),
    }


_FAN_IN = {"conv1": lambda h: 27, "conv2": lambda h: 9 * h, "head": lambda h: h, "aux": lambda h: h}


def init_params(hidden: int, n_classes: int, seed: int = 0) -> ModelParams:
    """Uniform in [-a, a], a = sqrt(1 / fan_in), drawn block by block in declaration order."""
    rng = Stream(derive_seed(seed, _TAG_INIT))
    blocks = {}
    for name, shape in param_shapes(hidden, n_classes).items():
        a = math.sqrt(1.0 / _FAN_IN[name.split("_")[0]](hidden))
        n = int(np.prod(shape))
        blocks[name] = ((rng.uniform(n) * 2.0 - 1.0) * a).reshape(shape)
    return ModelParams(**blocks)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(**{k: np.zeros_like(v) for k, v in params.blocks().items()})


# --- forward / backward ---------------------------------------------------------


def preprocess(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) / 127.5 - 1.0).astype(dtype, copy=False)


def _shifts(h, w):
    for dy in range(3):
        for dx in range(3):
            yield dy, dx, slice(dy, dy + h), slice(dx, dx + w)


def _conv3x3(x, w, b):
    """Same-padded 3x3 convolution as nine shifted matmuls; also returns the padded input."""
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, h, wd, w.shape[-1]), dtype=x.dtype)
    out[...] = b
    for dy, dx, ys, xs in _shifts(h, wd):
        out += xp[:, ys, xs, :] @ w[dy, dx]
    return out, xp


def _conv3x3_cols(x, w, b):
    """im2col variant for few input channels: (N*H*W, 9*Cin) patches times the kernel."""
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, wd, 9, cin), dtype=x.dtype)
    for dy, dx, ys, xs in _shifts(h, wd):
        cols[:, :, :, 3 * dy + dx, :] = xp[:, ys, xs, :]
    cols = cols.reshape(-1, 9 * cin)
    out = cols @ w.reshape(9 * cin, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv3x3_cols_backward(dout, cols, w):
    flat_out = dout.reshape(-1, dout.shape[-1])
    return (cols.T @ flat_out).reshape(w.shape), flat_out.sum(axis=0)


def _conv3x3_backward(dout, xp, w):
    n, h, wd, cout = dout.shape
    cin = xp.shape[-1]
    flat_out = dout.reshape(-1, cout)
    dw = np.empty_like(w)
    for dy, dx, ys, xs in _shifts(h, wd):
        dw[dy, dx] = xp[:, ys, xs, :].reshape(-1, cin).T @ flat_out
    db = flat_out.sum(axis=0)
    # input gradient is a correlation of dout with the spatially flipped kernel
    dp = np.pad(dout, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dx_ = np.zeros((n, h, wd, cin), dtype=dout.dtype)
    for dy, dx, _, _ in _shifts(h, wd):
        dx_ += dp[:, 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + wd, :] @ w[dy, dx].T
    return dx_, dw, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Cache:
    x_cols: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    h1_pad: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    primary: np.ndarray
    aux: np.ndarray


def _forward_batch(params: ModelParams, images: np.ndarray) -> _Cache:
    # computes in the parameters' dtype
    x = preprocess(images, params.conv1_w.dtype)
    pre1, x_cols = _conv3x3_cols(x, params.conv1_w, params.conv1_b)
    h1 = np.maximum(pre1, 0.0)
    pre2, h1_pad = _conv3x3(h1, params.conv2_w, params.conv2_b)
    h2 = np.maximum(pre2, 0.0)
    primary = _softmax(h2 @ params.head_w + params.head_b)
    aux = _softmax(h1 @ params.aux_w + params.aux_b)
    return _Cache(x_cols, pre1, h1, h1_pad, pre2, h2, primary, aux)


def forward(params: ModelParams, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Primary and auxiliary class-probability maps, each (H, W, C)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ShapeError(f"expected a non-empty (H, W, 3) image, got {image.shape}")
    cache = _forward_batch(params, image[None])
    return cache.primary[0], cache.aux[0]


def backward_batch(
    params: ModelParams, images: np.ndarray, pseudo: np.ndarray, weights=None
) -> tuple[ModelParams, uda_loss.LossBreakdown]:
    """Gradient of the rectified loss summed over a batch (N, H, W, 3)."""
    images = np.asarray(images)
    pseudo = np.asarray(pseudo)
    if images.shape[:3] != pseudo.shape:
        raise ShapeError(f"images {images.shape[:3]} and pseudo-labels {pseudo.shape} disagree")
    cache = _forward_batch(params, images)
    loss, dz, du = uda_loss.rectified_loss_grads(cache.primary, cache.aux, pseudo, weights)
    dz = dz.astype(cache.h2.dtype, copy=False)
    du = du.astype(cache.h2.dtype, copy=False)

    h = params.hidden
    dz2 = dz.reshape(-1, dz.shape[-1])
    du2 = du.reshape(-1, du.shape[-1])
    g = {
        "head_w": cache.h2.reshape(-1, h).T @ dz2,
        "head_b": dz2.sum(axis=0),
        "aux_w": cache.h1.reshape(-1, h).T @ du2,
        "aux_b": du2.sum(axis=0),
    }
    dpre2 = (dz @ params.head_w.T) * (cache.pre2 > 0)
    dh1, g["conv2_w"], g["conv2_b"] = _conv3x3_backward(dpre2, cache.h1_pad, params.conv2_w)
    dh1 = dh1 + du @ params.aux_w.T
    dpre1 = dh1 * (cache.pre1 > 0)
    g["conv1_w"], g["conv1_b"] = _conv3x3_cols_backward(dpre1, cache.x_cols, params.conv1_w)
    return ModelParams(**g), loss


def backward(params, image, pseudo, weights=None):
    """Single-image version of :func:`backward_batch`."""
    return backward_batch(params, np.asarray(image)[None], np.asarray(pseudo)[None], weights)


# --- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 0.0005) -> "AdamState":
        zeros = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, lr=lr)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new objects, inputs are untouched."""
    gblocks = grads.blocks()
    for name, g in gblocks.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(f"non-finite gradient in block {name} ({bad} of {g.size} entries)")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.blocks().items():
        g = gblocks[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient block {name} has shape {g.shape}, parameter {p.shape}")
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**t)
        v_hat = v[name] / (1.0 - b2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(**new_params), replace(state, m=m, v=v, t=t)


# --- training / inference -------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.0005
    seed: int = 0
    weights_mode: str = "none"  # "none" | "freq"
    hidden: int = 16
    # forward/backward precision; Adam keeps float64 master weights either way
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.weights_mode not in ("none", "freq"):
            raise ValueError(f"unknown weights_mode {self.weights_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_miou: float | None = None

    def line(self) -> str:
        s = f"epoch={self.epoch} loss={self.loss:.6f}"
        if self.val_miou is not None:
            s += f" val_miou={self.val_miou:.4f}"
        return s


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)
    weights: np.ndarray | None = None


def train(
    config: TrainConfig,
    images: Sequence[np.ndarray],
    pseudo: Sequence[np.ndarray],
    n_classes: int,
    val: tuple[Sequence[np.ndarray], Sequence[np.ndarray]] | None = None,
    eval_classes: Sequence[int] | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Train on (image, pseudo-label) pairs with Adam on the summed rectified loss.

    The logged loss is the epoch's rectified loss per labeled pixel,
    measured on each batch before its update.
    """
    if len(images) == 0:
        raise ShapeError("empty training set")
    if len(images) != len(pseudo):
        raise ShapeError(f"{len(images)} images but {len(pseudo)} pseudo-label maps")
    x = np.stack([np.asarray(im) for im in images])
    y = np.stack([np.asarray(p) for p in pseudo])
    if x.shape[:3] != y.shape:
        raise ShapeError(f"image stack {x.shape[:3]} does not match label stack {y.shape}")

    weights = None
    if config.weights_mode == "freq":
        weights = uda_loss.class_frequency_weights(list(y), n_classes)
    params = init.copy() if init is not None else init_params(config.hidden, n_classes, config.seed)
    state = AdamState.fresh(params, lr=config.lr)
    shuffle = Stream(derive_seed(config.seed, _TAG_SHUFFLE))
    result = TrainResult(params, weights=weights)

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, loss = backward_batch(params.astype(config.precision), x[idx], y[idx], weights)
            total += loss.total
            count += loss.pixel_count
            params, state = adam_step(params, grads, state)
        entry = EpochLog(epoch, total / count if count else 0.0)
        if val is not None:
            entry.val_miou = evaluate(params, val[0], val[1], n_classes, eval_classes)
        log.debug(entry.line())
        result.log.append(entry)
    result.params = params
    return result


def infer(params: ModelParams, image: np.ndarray, return_probs: bool = False):
    """Argmax of the primary branch; optionally also its probabilities."""
    primary, _ = forward(params, image)
    labels = np.argmax(primary, axis=-1).astype(np.uint8)
    return (labels, primary) if return_probs else labels


def evaluate(params, images, gts, n_classes, eval_classes=None) -> float:
    cm = ConfusionMatrix(n_classes)
    for im, gt in zip(images, gts):
        cm.accumulate(gt, infer(params, im))
    return summarize(cm, range(n_classes) if eval_classes is None else eval_classes)[1]


# --- model files ----------------------------------------------------------------


def save_model(params: ModelParams, path):
    """TNET1: magic, uint32 in_channels/hidden/classes, then float32 LE blocks in declaration order."""
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.blocks().values())
    Path(path).write_bytes(_TNET_HEADER.pack(TNET_MAGIC, 3, params.hidden, params.n_classes) + body)


def load_model(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _TNET_HEADER.size:
        raise FormatError(f"{path}: truncated TNET1 header")
    magic, cin, hidden, n_classes = _TNET_HEADER.unpack_from(data)
    if magic != TNET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if cin != 3 or hidden == 0 or n_classes == 0:
        raise FormatError(f"{path}: unsupported dimensions in={cin} hidden={hidden} classes={n_classes}")
    shapes = param_shapes(hidden, n_classes)
    expected = _TNET_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for hidden={hidden} classes={n_classes}, got {len(data)}")
    offset = _TNET_HEADER.size
    blocks = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        blocks[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * n
    return ModelParams(**blocks)


def expected_param_count(hidden: int, n_classes: int) -> int:
    h, c = hidden, n_classes
    return 3 * 3 * 3 * h + h + 3 * 3 * h * h + h + h * c + c + h * c + c


# --- gradient check -------------------------------------------------------------


@dataclass
class GradcheckReport:
    seed: int
    max_rel_error: dict[str, float]
    skipped: int
    attempts: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def gradcheck(
    seed: int = 0,
    size: int = 8,
    hidden: int = 16,
    n_classes: int = 4,
    step: float = 1e-3,
    min_preact: float = 1e-4,
    ignore_fraction: float = 0.2,
) -> GradcheckReport:
    """Compare analytic gradients with central differences on a seeded instance.

    Instances with a pre-activation closer than ``min_preact`` to the ReLU
    kink are redrawn. Coordinates whose +/- probe flips any ReLU are skipped
    and counted. The error for a block is
    ``max |analytic - numeric| / max(max |analytic|, max |numeric|)``.
    """
    attempts = 0
    while True:
        rng = Stream(derive_seed(seed, 0x6C, attempts))
        attempts += 1
        params = init_params(hidden, n_classes, derive_seed(seed, attempts))
        image = rng.integers(0, 256, size * size * 3).reshape(1, size, size, 3).astype(np.uint8)
        labels = rng.integers(0, n_classes, size * size).reshape(1, size, size)
        drop = rng.uniform(size * size).reshape(1, size, size) < ignore_fraction
        pseudo = np.where(drop, IGNORE_ID, labels).astype(np.uint8)
        cache = _forward_batch(params, image)
        if min(np.abs(cache.pre1).min(), np.abs(cache.pre2).min()) >= min_preact:
            break

    base_masks = (cache.pre1 > 0, cache.pre2 > 0)
    analytic, _ = backward_batch(params, image, pseudo)

    def loss_and_masks(p):
        c = _forward_batch(p, image)
        return uda_loss.rectified_loss(c.primary, c.aux, pseudo).total, (c.pre1 > 0, c.pre2 > 0)

    errors = {}
    skipped = 0
    for name, block in params.blocks().items():
        numeric = np.zeros_like(block)
        usable = np.ones(block.shape, dtype=bool)
        flat = block.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, m_plus = loss_and_masks(params)
            flat[i] = orig - step
            minus, m_minus = loss_and_masks(params)
            flat[i] = orig
            flipped = any(
                not np.array_equal(base, probe)
                for masks in (m_plus, m_minus)
                for base, probe in zip(base_masks, masks)
            )
            if flipped:
                usable.reshape(-1)[i] = False
                skipped += 1
                continue
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
        a = getattr(analytic, name)[usable]
        n = numeric[usable]
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        errors[name] = float(np.abs(a - n).max(initial=0.0) / scale) if scale > 0 else 0.0
    return GradcheckReport(seed, errors, skipped, attempts)
