"""Feature-domain credentials: key generation, bit extraction, watermark
synthesis, verification, and compression-robust embedding.

A credential spec picks v carrier kernels of the first conv layer and h
interior spatial locations whose 3x3 receptive fields are pairwise
disjoint. Each (kernel, location) coordinate carries one key bit: the
s-th fractional bit of the absolute feature value. A watermark is a
per-image pixel perturbation, confined to the h patches, that forces all
N = v*h carrier bits to match the secret key.
"""

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import nn
from . import tensor as T
from .errors import FormatError, NumericalError, UsageError

F32 = np.float32

KERNEL_COUNT = 8  # first-layer channels
INTERIOR = (1, 26)  # patch centers with fully interior receptive fields

# fraction of a bit step that synthesized bits must keep clear of the
# boundary, so float noise between the search arithmetic and the real
# conv cannot flip an accepted bit
GUARD_LO = 0.05
GUARD_HI = 0.95

# post-distortion features are often pinned to a handful of quantized
# values, so their bits only need clearance at the ulp level
DISTORT_GUARD_LO = 0.002
DISTORT_GUARD_HI = 0.998

DELTA_CAP = 16.0 / 255.0


def default_delta(s):
    # the candidate box must let a 3x3 patch move a feature across one
    # bit step of width 2^-s; the tuned 4/255 anchor at s = 6 scales
    # geometrically for coarser bit depths
    return max(4.0 / 255.0, (4.0 / 255.0) * 2.0 ** (6 - s))


@dataclass
class CredentialSpec:
    total_bits: int
    kernel_carriers: int  # v
    locations_per_kernel: int  # h
    bit_depth: int  # s
    carrier_kernels: list
    carrier_locations: list  # h (row, col) pairs, shared across kernels
    key_bits: np.ndarray  # [N] uint8, kernel-major order
    seed: int

    def __post_init__(self):
        if self.total_bits != self.kernel_carriers * self.locations_per_kernel:
            raise UsageError("total bits must equal kernels x locations")
        self.key_bits = np.asarray(self.key_bits, dtype=np.uint8)

    def support_mask(self, shape=(1, 28, 28)):
        mask = np.zeros(shape, dtype=bool)
        for r, c in self.carrier_locations:
            mask[..., r - 1 : r + 2, c - 1 : c + 2] = True
        return mask

    def location_key_bits(self, j):
        """Key bits at location j, one per carrier kernel."""
        h = self.locations_per_kernel
        return self.key_bits[[i * h + j for i in range(self.kernel_carriers)]]

    def to_json(self):
        return json.dumps(
            {
                "total_bits": self.total_bits,
                "kernel_carriers": self.kernel_carriers,
                "locations_per_kernel": self.locations_per_kernel,
                "bit_depth": self.bit_depth,
                "carrier_kernels": list(map(int, self.carrier_kernels)),
                "carrier_locations": [[int(r), int(c)] for r, c in self.carrier_locations],
                "key_bits": "".join(str(int(b)) for b in self.key_bits),
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        try:
            obj = json.loads(text)
            return cls(
                total_bits=obj["total_bits"],
                kernel_carriers=obj["kernel_carriers"],
                locations_per_kernel=obj["locations_per_kernel"],
                bit_depth=obj["bit_depth"],
                carrier_kernels=obj["carrier_kernels"],
                carrier_locations=[tuple(p) for p in obj["carrier_locations"]],
                key_bits=np.array([int(c) for c in obj["key_bits"]], dtype=np.uint8),
                seed=obj["seed"],
            )
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid credential spec: {exc}") from exc


@dataclass
class Credential:
    watermark: np.ndarray  # [1,28,28] float32, zero outside the patches
    spec: CredentialSpec
    trials: int
    iterations: int = 1

    def apply(self, image):
        return datamod.apply_watermark(
            np.asarray(image, dtype=F32).reshape(1, 28, 28),
            self.watermark,
            self.spec.support_mask(),
        )

    def to_json(self):
        mask = self.spec.support_mask()
        coords = np.argwhere(mask[0])
        deltas = self.watermark[0][mask[0]].astype("<f4")
        return json.dumps(
            {
                "spec_id": spec_id(self.spec),
                "coords": coords.astype(int).tolist(),
                "deltas": base64.b64encode(deltas.tobytes()).decode("ascii"),
                "trials": self.trials,
                "iterations": self.iterations,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text, spec):
        try:
            obj = json.loads(text)
            if obj["spec_id"] != spec_id(spec):
                raise FormatError("credential was issued for a different spec")
            coords = np.asarray(obj["coords"], dtype=int)
            deltas = np.frombuffer(
                base64.b64decode(obj["deltas"]), dtype="<f4"
            ).astype(F32)
            w = np.zeros((1, 28, 28), dtype=F32)
            w[0, coords[:, 0], coords[:, 1]] = deltas
            return cls(w, spec, obj.get("trials", 0), obj.get("iterations", 1))
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid credential file: {exc}") from exc


def spec_id(spec):
    """Public identifier that does not leak key bits."""
    payload = json.dumps(
        {
            "kernels": list(map(int, spec.carrier_kernels)),
            "locations": [[int(r), int(c)] for r, c in spec.carrier_locations],
            "s": spec.bit_depth,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# spec generation


def _patches_disjoint(a, b):
    return abs(a[0] - b[0]) >= 3 or abs(a[1] - b[1]) >= 3


def _compression_block(coord):
    # 8x8 block index of a patch center under the channel's 2-pixel padding;
    # valid only for centers whose whole patch stays inside one block
    return ((coord[0] + 1) // 8, (coord[1] + 1) // 8)


def _patch_within_one_block(coord):
    r, c = coord
    return (r + 1) // 8 == (r + 3) // 8 and (c + 1) // 8 == (c + 3) // 8


def generate_spec(seed, total_bits=32, kernel_carriers=4, bit_depth=6):
    """Draw carrier kernels, disjoint locations, and key bits from the seed.

    Each location's receptive field is kept inside a single 8x8 block of
    the compression channel, and no two locations share a block. This
    guarantees pixel-domain disjointness and keeps the carriers
    independent under block quantization, which the robust embedding
    loop relies on.
    """
    if total_bits % kernel_carriers:
        raise UsageError(
            f"total bits {total_bits} not divisible by kernel count {kernel_carriers}"
        )
    if kernel_carriers > KERNEL_COUNT:
        raise UsageError(f"at most {KERNEL_COUNT} carrier kernels available")
    h = total_bits // kernel_carriers
    if h > 16:  # one patch per 8x8 block, 4x4 blocks cover the image
        raise UsageError(f"cannot place {h} block-disjoint patches in a 28x28 image")
    rng = np.random.default_rng(seed)
    kernels = sorted(rng.choice(KERNEL_COUNT, size=kernel_carriers, replace=False))
    lo, hi = INTERIOR
    locations = []
    used_blocks = set()
    attempts = 0
    while len(locations) < h:
        attempts += 1
        if attempts > 50000:
            raise UsageError(f"cannot place {h} disjoint patches (gave up)")
        cand = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        if not _patch_within_one_block(cand):
            continue
        block = _compression_block(cand)
        if block in used_blocks:
            continue
        used_blocks.add(block)
        locations.append(cand)
    key_bits = rng.integers(0, 2, size=total_bits).astype(np.uint8)
    return CredentialSpec(
        total_bits=total_bits,
        kernel_carriers=kernel_carriers,
        locations_per_kernel=h,
        bit_depth=bit_depth,
        carrier_kernels=[int(k) for k in kernels],
        carrier_locations=locations,
        key_bits=key_bits,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# bit extraction and verification


def extract_bit(y, s):
    """b = floor(|y| * 2^s) mod 2, computed in float64 from float32 values."""
    if s < 1:
        raise UsageError("bit depth s must be >= 1")
    y64 = np.abs(np.asarray(y, dtype=F32).astype(np.float64))
    return (np.floor(y64 * float(2**s)) % 2).astype(np.uint8)


def _bit_fractions(y, s):
    y64 = np.abs(np.asarray(y, dtype=F32).astype(np.float64))
    scaled = y64 * float(2**s)
    return scaled - np.floor(scaled)


def read_bits(verify_tap, spec):
    """Carrier bits per batch item, kernel-major: [B, N] uint8."""
    tap = np.asarray(verify_tap, dtype=F32)
    single = tap.ndim == 3
    if single:
        tap = tap[None]
    if tap.ndim != 4 or tap.shape[1] != KERNEL_COUNT:
        raise UsageError(f"verify tap must be [B,{KERNEL_COUNT},H,W], got {tap.shape}")
    rows = [r for r, _ in spec.carrier_locations]
    cols = [c for _, c in spec.carrier_locations]
    if max(rows) >= tap.shape[2] or max(cols) >= tap.shape[3]:
        raise UsageError("carrier location outside the feature map")
    vals = tap[:, spec.carrier_kernels][:, :, rows, cols]  # [B, v, h]
    bits = extract_bit(vals, spec.bit_depth)
    out = bits.reshape(tap.shape[0], spec.total_bits)
    return out[0] if single else out


def verify(verify_tap, spec):
    """True per batch item iff every carrier bit equals the key bit."""
    bits = read_bits(verify_tap, spec)
    if bits.ndim == 1:
        return bool((bits == spec.key_bits).all())
    return (bits == spec.key_bits).all(axis=1)


def verify_image(image, spec, backbone):
    """Run the backbone's verify tap on one image and check the key."""
    x = T.tensor(np.asarray(image, dtype=F32).reshape(1, 1, 28, 28))
    _, taps = backbone.forward_with_taps(x)
    return bool(verify(taps[nn.VERIFY_TAP].data, spec)[0])


def collision_probability(total_bits):
    if total_bits < 1:
        raise UsageError("total bits must be >= 1")
    return 2.0 ** (-total_bits)


# ---------------------------------------------------------------------------
# watermark synthesis

_SEARCH_BATCH = 192


def _location_search(orig_patch, weights, bias, target_bits, s, delta, max_trials, rng,
                     distort_predict=None):
    """Find a patch near orig_patch whose carrier bits match target_bits.

    weights: [v,3,3] first-conv slices of the carrier kernels; bias: [v].
    Candidates are uniform in a +-delta box, clamped to [0,1]; the first
    candidate is the unmodified patch. Accepted bits must sit inside the
    guard band; with distort_predict set (robust embedding) the bits of
    the post-quantization patch must match as well.

    Returns (patch, trials_used, fallback_patch, best_matched); patch is
    None when the budget is exhausted. The fallback is the candidate whose
    wrong bits sit closest to a feasible cell, so iterative callers can
    ratchet toward feasibility round over round.
    """
    target = np.asarray(target_bits, dtype=np.uint8)
    trials = 0
    best_patch = orig_patch
    best_score = -np.inf
    best_matched = -1
    while trials < max_trials:
        batch = min(_SEARCH_BATCH, max_trials - trials)
        deltas = rng.uniform(-delta, delta, size=(batch, 3, 3))
        cands = np.clip(orig_patch[None] + deltas.astype(F32), 0.0, 1.0).astype(F32)
        if trials == 0:
            cands[0] = orig_patch
        # snap to the 8-bit export grid so the values survive delta storage,
        # apply_watermark, and PGM round-trips to within one ulp, which the
        # guard band absorbs; off-grid values would shift by up to 0.5/255
        # on export and shatter the carrier bits
        cands = (np.rint(cands * F32(255)) / F32(255)).astype(F32)
        feats = np.einsum("bij,vij->bv", cands, weights, dtype=F32) + bias[None]
        bits = extract_bit(feats, s)
        frac = _bit_fractions(feats, s)
        ok = (bits == target[None]) & (frac >= GUARD_LO) & (frac <= GUARD_HI)
        wrong = bits != target[None]
        gap = np.where(wrong, np.minimum(frac, 1.0 - frac), 0.0).sum(axis=1)
        if distort_predict is not None:
            dpatches = distort_predict(cands)
            dfeats = np.einsum("bij,vij->bv", dpatches, weights, dtype=F32) + bias[None]
            dbits = extract_bit(dfeats, s)
            dfrac = _bit_fractions(dfeats, s)
            dok = (
                (dbits == target[None])
                & (dfrac >= DISTORT_GUARD_LO)
                & (dfrac <= DISTORT_GUARD_HI)
            )
            ok = ok & dok
            dwrong = dbits != target[None]
            gap = gap + np.where(dwrong, np.minimum(dfrac, 1.0 - dfrac), 0.0).sum(axis=1)
        trials += batch
        hits = np.nonzero(ok.all(axis=1))[0]
        if hits.size:
            used = trials - batch + int(hits[0]) + 1
            return cands[hits[0]], used, None, len(target)
        matched = ok.sum(axis=1)
        score = matched.astype(np.float64) - gap  # higher is closer to feasible
        top = int(score.argmax())
        if score[top] > best_score:
            best_score = float(score[top])
            best_matched = int(matched[top])
            best_patch = cands[top]
    return None, trials, best_patch, best_matched


def _carrier_weights(backbone, spec):
    w = backbone.conv1_k.data[spec.carrier_kernels, 0]  # [v,3,3]
    b = backbone.conv1_b.data[spec.carrier_kernels]
    return w, b


def synthesize_watermark(image, spec, backbone, max_trials_per_location=4096,
                         rng=None, delta=None):
    """Random-search a pixel watermark that sets all N carrier bits.

    Each of the h locations is searched independently; the receptive
    fields are disjoint so the joint problem factorizes and the expected
    cost per location is about 2^v candidate patches.
    """
    rng = np.random.default_rng(rng)
    image = np.asarray(image, dtype=F32).reshape(1, 28, 28)
    if image.min() < 0 or image.max() > 1:
        raise UsageError("image values must lie in [0, 1]")
    if delta is None:
        delta = default_delta(spec.bit_depth)
    weights, bias = _carrier_weights(backbone, spec)
    watermark = np.zeros_like(image)
    total_trials = 0
    for j, (r, c) in enumerate(spec.carrier_locations):
        orig = image[0, r - 1 : r + 2, c - 1 : c + 2]
        patch, used, _, _ = _location_search(
            orig,
            weights,
            bias,
            spec.location_key_bits(j),
            spec.bit_depth,
            delta,
            max_trials_per_location,
            rng,
        )
        total_trials += used
        if patch is None:
            raise NumericalError(
                f"unsatisfiable location {j} at ({r},{c}): "
                f"no candidate matched in {max_trials_per_location} trials"
            )
        watermark[0, r - 1 : r + 2, c - 1 : c + 2] = patch - orig
    cred = Credential(watermark, spec, total_trials, iterations=1)
    if not verify_image(cred.apply(image), spec, backbone):
        raise NumericalError("synthesized watermark failed its own verification")
    return cred


# ---------------------------------------------------------------------------
# compression-robust synthesis


def _padded_copies(image_coord):
    """Padded-array coordinates holding a given image pixel, including the
    edge-replicated border copies the channel's padding creates."""
    vals = [image_coord + 2]
    if image_coord == 0:
        vals += [0, 1]
    if image_coord == 27:
        vals += [30, 31]
    return vals


def _block_predictor(base, location, qtable):
    """Exact per-candidate prediction of the distortion channel's effect on
    one receptive-field patch.

    The channel is blockwise, so only the 8x8 blocks holding the patch
    pixels (or their edge-replicated copies) matter; everything else in
    those blocks comes from the fixed base image. Returns a function
    mapping candidate patches [B,3,3] to their post-distortion values.
    """
    r, c = location
    padded = np.pad(base.reshape(28, 28).astype(np.float64) * 255.0 - 128.0, 2, mode="edge")
    write_coords = []  # (padded y, padded x, source pixel index 0..8)
    read_coords = []  # canonical padded coords of the 9 patch pixels
    for src, (iy, ix) in enumerate(
        (iy, ix) for iy in range(r - 1, r + 2) for ix in range(c - 1, c + 2)
    ):
        read_coords.append((iy + 2, ix + 2))
        for py in _padded_copies(iy):
            for px in _padded_copies(ix):
                write_coords.append((py, px, src))
    blocks_needed = sorted({(py // 8, px // 8) for py, px, _ in write_coords})
    block_pixels = np.stack(
        [padded[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8] for by, bx in blocks_needed]
    )  # [nb,8,8]
    index = {blk: i for i, blk in enumerate(blocks_needed)}
    wslots = np.array(
        [(index[(py // 8, px // 8)], py % 8, px % 8, src) for py, px, src in write_coords]
    )
    rslots = np.array(
        [(index[(py // 8, px // 8)], py % 8, px % 8) for py, px in read_coords]
    )
    dct = datamod._DCT

    def predict(cands):
        b = len(cands)
        blocks = np.repeat(block_pixels[None], b, axis=0)  # [B,nb,8,8]
        flat = cands.reshape(b, 9).astype(np.float64) * 255.0 - 128.0
        blocks[:, wslots[:, 0], wslots[:, 1], wslots[:, 2]] = flat[:, wslots[:, 3]]
        coeffs = np.einsum("ux,bnxy,vy->bnuv", dct, blocks, dct)
        quant = np.round(coeffs / qtable) * qtable
        recon = np.einsum("ux,bnuv,vy->bnxy", dct, quant, dct)
        vals = recon[:, rslots[:, 0], rslots[:, 1], rslots[:, 2]]
        return np.clip((vals + 128.0) / 255.0, 0.0, 1.0).astype(F32).reshape(b, 3, 3)

    return predict


def synthesize_robust(image, spec, backbone, channel, iterations=10,
                      max_trials_per_location=4096, rng=None, sweeps=1):
    """Iterative embedding that survives the lossy-compression channel.

    Each round re-embeds every location against an exact per-block
    prediction of the channel (locations occupy distinct blocks, so they
    are independent), then checks the genuinely distorted image. On
    failure the next round starts from the distorted-then-corrected
    image (channel damage outside the patches undone) with a doubled
    search box.

    The returned credential verifies both before and after the channel.
    """
    rng = np.random.default_rng(rng)
    image = np.asarray(image, dtype=F32).reshape(1, 28, 28)
    weights, bias = _carrier_weights(backbone, spec)
    support = spec.support_mask()
    is_identity = channel.kind == "identity"
    qtable = None if is_identity else datamod.quantization_table(channel.quality)
    delta = default_delta(spec.bit_depth)
    base = image.copy()
    total_trials = 0
    best_overall = -1
    for round_idx in range(1, iterations + 1):
        working = base.copy()
        for _ in range(sweeps):
            for j, (r, c) in enumerate(spec.carrier_locations):
                orig = working[0, r - 1 : r + 2, c - 1 : c + 2]
                predictor = (
                    None if is_identity else _block_predictor(working[0], (r, c), qtable)
                )
                patch, used, fallback, _ = _location_search(
                    orig,
                    weights,
                    bias,
                    spec.location_key_bits(j),
                    spec.bit_depth,
                    delta,
                    max_trials_per_location,
                    rng,
                    distort_predict=predictor,
                )
                total_trials += used
                # a failed location still carries its best attempt so the
                # next round's corrected base lands in a fresh neighborhood
                working[0, r - 1 : r + 2, c - 1 : c + 2] = (
                    patch if patch is not None else fallback
                )
            if is_identity:
                break
        x_auth = working
        distorted = datamod.distort(x_auth, channel)
        if verify_image(distorted, spec, backbone) and verify_image(
            x_auth, spec, backbone
        ):
            total = (x_auth - image).astype(F32)
            total[~support] = 0.0
            return Credential(total, spec, total_trials, iterations=round_idx)
        x = T.tensor(distorted.reshape(1, 1, 28, 28))
        _, taps = backbone.forward_with_taps(x)
        bits = read_bits(taps[nn.VERIFY_TAP].data, spec)
        best_overall = max(best_overall, int((bits == spec.key_bits).sum()))
        # correct the channel's damage outside the credential's support
        base = image.copy()
        base[support] = distorted[support]
        delta = min(delta * 2.0, DELTA_CAP)
    raise NumericalError(
        f"robust embedding failed after {iterations} rounds; "
        f"best {best_overall}/{spec.total_bits} bits survived"
    )


# ---------------------------------------------------------------------------
# linear-residual forgery (attack primitive)


def forge_linear(pairs):
    """Mean residual of (plain, authorized) image pairs; the attacker's
    static additive estimate of the watermark."""
    if len(pairs) < 1:
        raise UsageError("need at least one pair")
    residuals = [
        np.asarray(auth, dtype=F32).reshape(1, 28, 28)
        - np.asarray(plain, dtype=F32).reshape(1, 28, 28)
        for plain, auth in pairs
    ]
    return np.mean(residuals, axis=0, dtype=np.float64).astype(F32)
