"""Sparse universal feature-space noise: channel selection and projected
gradient ascent.

Phase 1 scores the 16 channels feeding the injection tap and keeps the
top fraction as a binary mask. Phase 2 optimizes a static additive noise
tensor on the masked channels to maximize classification loss on a small
calibration set, clamped to an L-infinity budget.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import NumericalError, ShapeError, UsageError

F32 = np.float32

CHANNELS = 16
NOISE_SHAPE = (16, 14, 14)  # feature-map shape at the injection tap

CRITERIA = ("weight-grad", "weight-norm", "taylor", "random")


@dataclass
class ChannelScore:
    scores: np.ndarray  # [16]
    criterion: str
    calibration_fingerprint: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (CHANNELS,):
            raise ShapeError(f"scores must be [{CHANNELS}], got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise NumericalError("channel scores contain non-finite values")


@dataclass
class ChannelMask:
    mask: np.ndarray  # [16] of 0/1
    ratio: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=F32)

    @property
    def k(self):
        return int(self.mask.sum())

    def channels(self):
        return np.nonzero(self.mask)[0].tolist()


@dataclass
class GsuapNoise:
    values: np.ndarray  # [16,14,14]
    epsilon: float
    mask: ChannelMask
    method: str  # gsuap | suap | gaussian
    loss_log: list = field(default_factory=list)  # per-step batch losses
    initial_loss: float = float("nan")  # full calibration set, before/after
    final_loss: float = float("nan")

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=F32)
        if self.values.shape != NOISE_SHAPE:
            raise ShapeError(f"noise must be {NOISE_SHAPE}, got {self.values.shape}")


@dataclass
class PgaConfig:
    step_size: float = 0.1
    steps: int = 300
    epsilon: float = 2.0
    batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise UsageError("step size must be > 0")
        if self.epsilon <= 0:
            raise UsageError("epsilon must be > 0")


def _fingerprint(images):
    return hashlib.sha256(np.ascontiguousarray(images, dtype=F32).tobytes()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# phase 1: channel scoring


def score_channels(backbone, calibration, criterion, batch_size=64, seed=0):
    """Importance scores for the conv channels feeding the injection tap.

    weight-grad: mean L2 norm of the loss gradient on each output-channel
    kernel slice; taylor: mean |sum(activation * gradient)| per channel at
    the tap; weight-norm: L2 norm of the kernel slice (data-free);
    random: seeded uniform draws.
    """
    if criterion not in CRITERIA:
        raise UsageError(f"unknown criterion {criterion!r}; options: {CRITERIA}")
    if criterion == "weight-norm":
        w = backbone.conv2_k.data
        scores = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
        return ChannelScore(scores, criterion, "data-free")
    if criterion == "random":
        rng = np.random.default_rng(seed)
        return ChannelScore(rng.uniform(size=CHANNELS), criterion, f"seed={seed}")
    if len(calibration) == 0:
        raise UsageError("calibration set is empty")
    images, labels = calibration.images, calibration.labels
    totals = np.zeros(CHANNELS, dtype=np.float64)
    batches = 0
    tape = T.GradTape()
    for start in range(0, len(images), batch_size):
        x = T.tensor(images[start : start + batch_size])
        y = labels[start : start + batch_size]
        tape.reset()
        with tape:
            logits, taps = backbone._run(x, "infer", want_taps=(nn.INJECT_TAP,))
            loss = T.softmax_crossentropy(logits, y)
        tap = T.retain_grad(taps[nn.INJECT_TAP])
        tape.backward(loss)
        if criterion == "weight-grad":
            g = backbone.conv2_k.grad.astype(np.float64)
            totals += np.sqrt((g**2).sum(axis=(1, 2, 3)))
        else:  # taylor
            prod = tap.data.astype(np.float64) * tap.grad.astype(np.float64)
            totals += np.abs(prod.sum(axis=(0, 2, 3)))
        for p in backbone.parameters():
            p.grad = None
        batches += 1
    return ChannelScore(totals / batches, criterion, _fingerprint(images))


def build_mask(scores, ratio):
    """Top-k channels by score, k = floor(ratio * 16); ties break toward
    the lower channel index."""
    if not 0 < ratio <= 1:
        raise UsageError(f"ratio must be in (0, 1], got {ratio}")
    k = int(np.floor(ratio * CHANNELS))
    if k == 0:
        raise UsageError(f"ratio {ratio} selects zero channels")
    order = np.argsort(-scores.scores, kind="stable")
    mask = np.zeros(CHANNELS, dtype=F32)
    mask[order[:k]] = 1
    return ChannelMask(mask, float(ratio))


# ---------------------------------------------------------------------------
# phase 2: noise optimization


def inject(feature_map, noise_values, mask, lam):
    """F + lam * (mask ⊙ noise), mask broadcast over spatial positions.

    Plain-array helper; the differentiable path inside optimization uses
    the add_map op directly. lam == 0 returns the input bit-for-bit.
    """
    feature_map = np.asarray(feature_map, dtype=F32)
    if feature_map.shape[-3:] != NOISE_SHAPE:
        raise ShapeError(
            f"feature map {feature_map.shape} does not match noise {NOISE_SHAPE}"
        )
    if lam == 0:
        return feature_map.copy()
    masked = noise_values * mask.mask[:, None, None]
    return feature_map + F32(lam) * masked


def _masked(values, mask):
    return values * mask.mask[:, None, None]


def _clamp(values, epsilon):
    return np.clip(values, -epsilon, epsilon).astype(F32)


def _injection_loss(backbone, images, labels, delta_tensor, mask_arr):
    """Forward with noise injected at the tap; returns the CE loss tensor."""

    def transform(tap):
        masked = T.mul(delta_tensor, T.tensor(np.broadcast_to(mask_arr[:, None, None], NOISE_SHAPE)))
        return T.add_map(tap, masked)

    logits, _ = backbone._run(
        T.tensor(images), "infer", transforms={nn.INJECT_TAP: transform}
    )
    return T.softmax_crossentropy(logits, labels)


def _calibration_loss(backbone, images, labels, values, mask_arr, batch_size=256):
    total = 0.0
    n = 0
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        delta = T.tensor(values)
        loss = _injection_loss(backbone, x, y, delta, mask_arr)
        total += loss.item() * len(x)
        n += len(x)
    return total / n


def optimize_noise(backbone, mask, calibration, config, method="gsuap"):
    """Projected gradient ascent on the injected noise.

    Maximizes cross-entropy against the true calibration labels with the
    backbone frozen. gsuap injects and updates under the mask every step;
    suap optimizes a dense tensor with dense injection and masks once at
    the end (its final loss may therefore dip below the ascent trace).
    """
    if method not in ("gsuap", "suap"):
        raise UsageError(f"optimize_noise handles gsuap|suap, not {method!r}")
    images, labels = calibration.images, calibration.labels
    if len(images) == 0:
        raise UsageError("calibration set is empty")
    rng = np.random.default_rng(config.seed)
    eps = F32(config.epsilon)
    alpha = F32(config.step_size)
    mask_arr = mask.mask if method == "gsuap" else np.ones(CHANNELS, dtype=F32)
    values = np.zeros(NOISE_SHAPE, dtype=F32)
    loss_log = []
    tape = T.GradTape()
    order = rng.permutation(len(images))
    cursor = 0
    initial = _calibration_loss(
        backbone, images, labels, _masked(values, mask), mask.mask
    )
    frozen = [(p, p.requires_grad) for p in backbone.parameters()]
    for p, _ in frozen:
        p.requires_grad = False
    try:
        for step in range(config.steps):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(images))
                cursor = 0
            idx = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size
            delta = T.tensor(values, requires_grad=True)
            tape.reset()
            with tape:
                loss = _injection_loss(
                    backbone, images[idx], labels[idx], delta, mask_arr
                )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericalError(f"noise optimization diverged at step {step}")
            tape.backward(loss)
            loss_log.append(loss_val)
            stepped = values + alpha * np.sign(delta.grad).astype(F32)
            if method == "gsuap":
                stepped = _masked(stepped, mask)
            values = _clamp(stepped, eps)
    finally:
        for p, flag in frozen:
            p.requires_grad = flag
    values = _clamp(_masked(values, mask), eps)
    final = _calibration_loss(backbone, images, labels, values, mask.mask)
    if method == "gsuap" and final < initial - 1e-4:
        raise NumericalError(
            f"ascent lost ground: calibration loss {final:.4f} < initial {initial:.4f}"
        )
    return GsuapNoise(
        values, float(config.epsilon), mask, method, loss_log,
        initial_loss=initial, final_loss=final,
    )


def make_baseline(kind, mask, epsilon, backbone=None, calibration=None, config=None):
    """Gaussian or SUAP noise under the same mask and budget."""
    if kind == "gaussian":
        cfg_seed = config.seed if config is not None else 0
        rng = np.random.default_rng(cfg_seed)
        raw = rng.normal(0.0, epsilon / 2.0, size=NOISE_SHAPE).astype(F32)
        values = _masked(_clamp(raw, F32(epsilon)), mask)
        return GsuapNoise(values, float(epsilon), mask, "gaussian")
    if kind == "suap":
        if backbone is None or calibration is None or config is None:
            raise UsageError("suap baseline needs backbone, calibration, and config")
        return optimize_noise(backbone, mask, calibration, config, method="suap")
    raise UsageError(f"unknown baseline kind {kind!r}")
