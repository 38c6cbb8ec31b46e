"""The runtime checkpoint: per-sample verification, default-deny noise
injection, and the sealed bundle artifact.

Every query pays the same constant extra work: N carrier-bit reads at the
verify tap plus one masked add at the injection tap (skipped entirely for
authorized samples and at scale zero, which keeps the authorized path
bit-for-bit identical to the clean model).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import credential as credmod
from . import gsuap
from . import nn
from . import serialize
from . import tensor as T
from .errors import FormatError, UsageError

F32 = np.float32

BUNDLE_VERSION = 1


@dataclass
class InferenceOutcome:
    logits: np.ndarray  # [B,10]
    authorized: np.ndarray  # [B] bool
    predicted: np.ndarray  # [B] int64
    ops_added: int  # constant per query, independent of content


@dataclass
class PluginBundle:
    backbone: "nn.Backbone"
    spec: "credmod.CredentialSpec"
    mask: "gsuap.ChannelMask"
    noise: "gsuap.GsuapNoise"
    lam: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")
        if self.noise.values.shape[0] != self.mask.mask.shape[0]:
            raise UsageError(
                f"noise channels {self.noise.values.shape[0]} != mask {self.mask.mask.shape[0]}"
            )

    def masked_noise(self):
        return self.noise.values * self.mask.mask[:, None, None]

    def ops_per_query(self):
        """Arithmetic added per query: N fixed-coordinate bit extractions
        plus one fused add over the masked noise elements."""
        inject_ops = 0 if self.lam == 0 else int(self.mask.k * 14 * 14)
        return self.spec.total_bits + inject_ops


def protect(backbone, spec, mask, noise, lam=1.0, meta=None):
    """Seal a bundle around a copy of the backbone; the original model is
    left untouched."""
    if noise.values.shape != gsuap.NOISE_SHAPE:
        raise UsageError(f"noise shape {noise.values.shape} != {gsuap.NOISE_SHAPE}")
    if np.abs(noise.values).max() > noise.epsilon + 1e-6:
        raise UsageError("noise violates its own budget")
    return PluginBundle(
        backbone=backbone.clone(),
        spec=spec,
        mask=mask,
        noise=noise,
        lam=float(lam),
        meta=dict(meta or {}),
    )


def set_lambda(bundle, lam):
    """New bundle with a different noise scale; nothing is re-optimized."""
    if lam < 0:
        raise UsageError("lambda must be >= 0")
    return PluginBundle(
        backbone=bundle.backbone,
        spec=bundle.spec,
        mask=bundle.mask,
        noise=bundle.noise,
        lam=float(lam),
        meta=dict(bundle.meta),
    )


def protected_forward(bundle, batch):
    """Default-deny inference.

    Per sample: read the carrier bits at the verify tap; authorized
    samples bypass the injection entirely (bitwise-clean path), all
    others get lam * (mask ⊙ noise) added at the injection tap.
    """
    x = batch if isinstance(batch, T.Tensor) else T.tensor(batch)
    if x.data.ndim != 4 or x.data.shape[1:] != (1, 28, 28):
        raise UsageError(f"batch must be [B,1,28,28], got {x.data.shape}")
    authorized = np.zeros(len(x.data), dtype=bool)

    def gate(tap):
        flags = credmod.verify(tap.data, bundle.spec)
        authorized[:] = flags
        return tap

    transforms = {nn.VERIFY_TAP: gate}
    if bundle.lam != 0:
        addend = (F32(bundle.lam) * bundle.masked_noise()).astype(F32)

        def deny(tap):
            out = tap.data.copy()
            out[~authorized] += addend[None]
            return T.Tensor(out)

        transforms[nn.INJECT_TAP] = deny
    logits, _ = bundle.backbone._run(x, "infer", transforms=transforms)
    return InferenceOutcome(
        logits=logits.data,
        authorized=authorized.copy(),
        predicted=logits.data.argmax(axis=1),
        ops_added=bundle.ops_per_query(),
    )


def protected_predict(bundle, images, batch_size=512):
    preds = np.empty(len(images), dtype=np.int64)
    flags = np.empty(len(images), dtype=bool)
    for i in range(0, len(images), batch_size):
        out = protected_forward(bundle, images[i : i + batch_size])
        preds[i : i + len(out.predicted)] = out.predicted
        flags[i : i + len(out.predicted)] = out.authorized
    return preds, flags


# ---------------------------------------------------------------------------
# bundle serialization (LYMF container with plugin sections)


def export_bundle(bundle, path):
    meta = {
        "arch": nn.ARCH_ID,
        "bn_epsilon": nn.BN_EPS,
        "training_seed": bundle.backbone.seed,
        "bundle_version": BUNDLE_VERSION,
        "lambda": bundle.lam,
        "noise_epsilon": bundle.noise.epsilon,
        "noise_method": bundle.noise.method,
        "mask_ratio": bundle.mask.ratio,
    }
    tensors = dict(bundle.backbone.state_tensors())
    tensors["plugin.noise"] = bundle.noise.values
    sections = {
        "MASK": (bundle.mask.mask.astype(np.uint8).tobytes(), False),
        "SPEC": (bundle.spec.to_json().encode("utf-8"), True),
        "META": (json.dumps(bundle.meta, sort_keys=True).encode("utf-8"), False),
    }
    serialize.write_container(path, meta, tensors, sections)


def import_bundle(path):
    meta, tensors, sections = serialize.read_container(path)
    if meta.get("arch") != nn.ARCH_ID:
        raise FormatError(f"unsupported architecture {meta.get('arch')!r}")
    if meta.get("bundle_version") != BUNDLE_VERSION:
        raise FormatError(
            f"unsupported bundle version {meta.get('bundle_version')!r}"
        )
    if "SPEC" not in sections:
        raise FormatError("bundle lacks credential spec")
    if "plugin.noise" not in tensors:
        raise FormatError("bundle lacks noise tensor")
    if "MASK" not in sections:
        raise FormatError("bundle lacks channel mask")
    backbone = nn.Backbone(seed=meta.get("training_seed", 0))
    backbone.load_state(tensors)
    spec = credmod.CredentialSpec.from_json(sections["SPEC"].decode("utf-8"))
    mask_bytes = np.frombuffer(sections["MASK"], dtype=np.uint8)
    if mask_bytes.shape != (gsuap.CHANNELS,):
        raise FormatError(f"mask section has {mask_bytes.size} entries")
    mask = gsuap.ChannelMask(mask_bytes.astype(F32), float(meta.get("mask_ratio", 1.0)))
    noise = gsuap.GsuapNoise(
        tensors["plugin.noise"],
        float(meta.get("noise_epsilon", 0.0)),
        mask,
        meta.get("noise_method", "gsuap"),
    )
    extra = json.loads(sections.get("META", b"{}").decode("utf-8") or "{}")
    return PluginBundle(
        backbone=backbone,
        spec=spec,
        mask=mask,
        noise=noise,
        lam=float(meta.get("lambda", 1.0)),
        meta=extra,
    )
