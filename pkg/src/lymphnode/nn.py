"""DeskCNN backbone: a small MNIST-scale classifier with named feature taps.

Architecture (fixed): Conv(1->8, 3x3, pad 1) -> BN -> ReLU -> MaxPool2 ->
Conv(8->16, 3x3, pad 1) -> BN -> ReLU -> MaxPool2 -> Flatten ->
Linear(784->10).

Two taps are exposed: ``verify`` is the raw first-conv output (bias added,
before batch norm), ``inject`` is the standardized output of the second
batch norm, taken before its learned scale/shift so the tap lives in a
unit-scale space regardless of how far gamma/beta drift during training.
Reading a tap never changes the logits.
"""

from dataclasses import dataclass, field

import numpy as np

from . import serialize
from . import tensor as T
from .errors import FormatError, NumericalError, UsageError

F32 = np.float32

VERIFY_TAP = "verify"
INJECT_TAP = "inject"
TAP_NAMES = (VERIFY_TAP, INJECT_TAP)

ARCH_ID = "deskcnn-v1"
BN_EPS = 1e-5

# (out_ch, in_ch) for the two conv blocks; fc dims derived: 16 * 7 * 7 = 784
_CONV1 = (8, 1)
_CONV2 = (16, 8)
_FC_IN = 16 * 7 * 7
_CLASSES = 10


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(F32)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("learning rate must be > 0")


@dataclass
class TrainResult:
    epoch_accuracy: list
    final_accuracy: float
    loss_trace: list = field(default_factory=list)


class Backbone:
    """The desk-scale CNN with its parameters and BN running buffers."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        o1, c1 = _CONV1
        o2, c2 = _CONV2
        self.conv1_k = T.tensor(_kaiming_uniform(rng, (o1, c1, 3, 3), c1 * 9), True)
        self.conv1_b = T.tensor(
            rng.uniform(-1, 1, o1).astype(F32) / np.sqrt(F32(c1 * 9)), True
        )
        self.bn1_gamma = T.tensor(np.ones(o1), True)
        self.bn1_beta = T.tensor(np.zeros(o1), True)
        self.bn1_mean = np.zeros(o1, dtype=F32)
        self.bn1_var = np.ones(o1, dtype=F32)
        self.conv2_k = T.tensor(_kaiming_uniform(rng, (o2, c2, 3, 3), c2 * 9), True)
        self.conv2_b = T.tensor(
            rng.uniform(-1, 1, o2).astype(F32) / np.sqrt(F32(c2 * 9)), True
        )
        self.bn2_gamma = T.tensor(np.ones(o2), True)
        self.bn2_beta = T.tensor(np.zeros(o2), True)
        self.bn2_mean = np.zeros(o2, dtype=F32)
        self.bn2_var = np.ones(o2, dtype=F32)
        self.fc_w = T.tensor(_kaiming_uniform(rng, (_FC_IN, _CLASSES), _FC_IN), True)
        self.fc_b = T.tensor(
            rng.uniform(-1, 1, _CLASSES).astype(F32) / np.sqrt(F32(_FC_IN)), True
        )
        # constant gamma/beta for the normalize-only half of the second BN
        self._unit = T.tensor(np.ones(o2))
        self._zero = T.tensor(np.zeros(o2))

    # ------------------------------------------------------------------

    def parameters(self):
        return [
            self.conv1_k,
            self.conv1_b,
            self.bn1_gamma,
            self.bn1_beta,
            self.conv2_k,
            self.conv2_b,
            self.bn2_gamma,
            self.bn2_beta,
            self.fc_w,
            self.fc_b,
        ]

    def param_dict(self):
        names = [
            "conv1.kernel",
            "conv1.bias",
            "bn1.gamma",
            "bn1.beta",
            "conv2.kernel",
            "conv2.bias",
            "bn2.gamma",
            "bn2.beta",
            "fc.weight",
            "fc.bias",
        ]
        return dict(zip(names, self.parameters()))

    def buffers(self):
        return {
            "bn1.running_mean": self.bn1_mean,
            "bn1.running_var": self.bn1_var,
            "bn2.running_mean": self.bn2_mean,
            "bn2.running_var": self.bn2_var,
        }

    # ------------------------------------------------------------------

    def _run(self, x, mode, want_taps=(), transforms=None):
        """Forward pass. ``transforms`` maps tap name -> fn(Tensor) -> Tensor,
        applied at the tap point; taps listed in ``want_taps`` are collected
        before any transform so observation never perturbs the pipeline."""
        transforms = transforms or {}
        for name in list(want_taps) + list(transforms):
            if name not in TAP_NAMES:
                raise UsageError(f"unknown tap {name!r}; taps are {TAP_NAMES}")
        taps = {}
        h = T.add_channel_bias(T.conv2d(x, self.conv1_k, padding=1), self.conv1_b)
        if VERIFY_TAP in want_taps:
            taps[VERIFY_TAP] = h
        if VERIFY_TAP in transforms:
            h = transforms[VERIFY_TAP](h)
        h = T.batchnorm2d(
            h, self.bn1_gamma, self.bn1_beta, self.bn1_mean, self.bn1_var, mode, BN_EPS
        )
        h = T.maxpool2d(T.relu(h))
        h = T.add_channel_bias(T.conv2d(h, self.conv2_k, padding=1), self.conv2_b)
        h = T.batchnorm2d(
            h, self._unit, self._zero, self.bn2_mean, self.bn2_var, mode, BN_EPS
        )
        if INJECT_TAP in want_taps:
            taps[INJECT_TAP] = h
        if INJECT_TAP in transforms:
            h = transforms[INJECT_TAP](h)
        h = T.add_channel_bias(T.mul_channel(h, self.bn2_gamma), self.bn2_beta)
        h = T.maxpool2d(T.relu(h))
        h = T.reshape(h, (x.shape[0], _FC_IN))
        logits = T.linear(h, self.fc_w, self.fc_b)
        return logits, taps

    def forward(self, x, mode="infer"):
        logits, _ = self._run(x, mode)
        return logits

    def forward_with_taps(self, x):
        """Inference forward returning (logits, {tap name: Tensor})."""
        return self._run(x, "infer", want_taps=TAP_NAMES)

    def predict(self, images, batch_size=512):
        """Class predictions for a plain [N,1,28,28] array."""
        out = np.empty(len(images), dtype=np.int64)
        for i in range(0, len(images), batch_size):
            logits = self.forward(T.tensor(images[i : i + batch_size]))
            out[i : i + len(logits.data)] = logits.data.argmax(axis=1)
        return out

    # ------------------------------------------------------------------

    def state_tensors(self):
        state = {name: t.data for name, t in self.param_dict().items()}
        state.update(self.buffers())
        return state

    def load_state(self, tensors):
        for name, t in self.param_dict().items():
            if name not in tensors:
                raise FormatError(f"model file missing tensor {name}")
            if tensors[name].shape != t.data.shape:
                raise FormatError(
                    f"tensor {name}: shape {tensors[name].shape} != {t.data.shape}"
                )
            t.data = np.ascontiguousarray(tensors[name], dtype=F32)
        for name in self.buffers():
            if name not in tensors:
                raise FormatError(f"model file missing buffer {name}")
        self.bn1_mean = np.ascontiguousarray(tensors["bn1.running_mean"], dtype=F32)
        self.bn1_var = np.ascontiguousarray(tensors["bn1.running_var"], dtype=F32)
        self.bn2_mean = np.ascontiguousarray(tensors["bn2.running_mean"], dtype=F32)
        self.bn2_var = np.ascontiguousarray(tensors["bn2.running_var"], dtype=F32)

    def clone(self):
        twin = Backbone(self.seed)
        twin.load_state({k: v.copy() for k, v in self.state_tensors().items()})
        return twin


def save_model(backbone, path):
    meta = {
        "arch": ARCH_ID,
        "bn_epsilon": BN_EPS,
        "training_seed": backbone.seed,
    }
    serialize.write_container(path, meta, backbone.state_tensors())


def load_model(path):
    meta, tensors, _ = serialize.read_container(path)
    if meta.get("arch") != ARCH_ID:
        raise FormatError(f"unsupported architecture {meta.get('arch')!r}")
    backbone = Backbone(seed=meta.get("training_seed", 0))
    backbone.load_state(tensors)
    return backbone


# ---------------------------------------------------------------------------
# training


def evaluate(backbone, images, labels, batch_size=512):
    preds = backbone.predict(images, batch_size)
    return float((preds == np.asarray(labels)).mean())


def train(backbone, train_images, train_labels, config, test_images=None, test_labels=None):
    """SGD-with-momentum training; returns a TrainResult with the accuracy trace.

    Shuffling and everything downstream is fully determined by config.seed.
    BN running statistics update during training and are frozen afterwards.
    """
    rng = np.random.default_rng(config.seed)
    params = backbone.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n = len(train_images)
    labels = np.asarray(train_labels, dtype=np.int64)
    epoch_accuracy = []
    loss_trace = []
    tape = T.GradTape()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # BN needs more than one row; tail batch this small is dropped
            x = T.tensor(train_images[idx])
            tape.reset()
            with tape:
                logits = backbone.forward(x, mode="train")
                loss = T.softmax_crossentropy(logits, labels[idx])
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericalError(f"training diverged (loss NaN) at epoch {epoch}")
            tape.backward(loss)
            loss_trace.append(loss_val)
            for p, v in zip(params, velocity):
                v *= F32(config.momentum)
                v += p.grad
                p.data -= F32(config.lr) * v
                p.grad = None
        if test_images is not None:
            epoch_accuracy.append(evaluate(backbone, test_images, test_labels))
    final = epoch_accuracy[-1] if epoch_accuracy else float("nan")
    return TrainResult(epoch_accuracy, final, loss_trace)
