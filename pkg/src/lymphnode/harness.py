"""Evaluation and adaptive-attack studies for protected models.

Each study is a pure function of (model artifacts, dataset, seed) and
returns plain dataclasses; CSV emission is separate so callers can
compose studies without touching the filesystem. Protocols follow the
same shape throughout: split a held-out set, issue per-image credentials
for the authorized half, compare protected behavior against the clean
model.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import credential as credmod
from . import gsuap
from . import nn
from . import plugin as pluginmod
from . import tensor as T
from .errors import EvalFailure, UsageError

F32 = np.float32


# ---------------------------------------------------------------------------
# report types


@dataclass
class EffectivenessRow:
    ratio: float
    method: str
    lam: float
    a_unauth: float
    a_auth: float
    fooling_rate: float
    clean_acc_unauth_split: float
    clean_acc_auth_split: float
    n_unauth: int
    n_auth: int


@dataclass
class EfficiencyPoint:
    ratio: float
    method: str
    efficiency: float


@dataclass
class OverheadReport:
    params_added: int
    spec_bytes: int
    latency_clean_b1_ms: float
    latency_protected_b1_ms: float
    latency_clean_b64_ms: float
    latency_protected_b64_ms: float
    ops_added_unique: list
    bundle_bytes: int
    model_bytes: int


@dataclass
class AttackReport:
    kind: str  # extract | forge | finetune
    rows: list = field(default_factory=list)
    forgery_success_rate: float = float("nan")
    control_success_rate: float = float("nan")


# ---------------------------------------------------------------------------
# shared protocol helpers


def issue_credentials(images, spec, backbone, seed):
    """Per-image watermarks; returns the authorized images [N,1,28,28]."""
    out = np.empty((len(images), 1, 28, 28), dtype=F32)
    for i, img in enumerate(images):
        cred = credmod.synthesize_watermark(img, spec, backbone, rng=seed + i)
        out[i] = cred.apply(img)
    return out


def _split_protocol(test_ds, seed, n_each):
    if len(test_ds) == 0:
        raise EvalFailure("evaluation split is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(test_ds))
    need = 2 * n_each
    if len(order) < need:
        n_each = len(order) // 2
        if n_each == 0:
            raise EvalFailure("evaluation split too small to halve")
    plain_idx = order[:n_each]
    auth_idx = order[n_each : 2 * n_each]
    return plain_idx, auth_idx


def fooling_rate(clean_preds, protected_preds, labels):
    """Among clean-correct samples, the fraction the protected model flips."""
    clean_correct = clean_preds == labels
    n_correct = int(clean_correct.sum())
    if n_correct == 0:
        return 0.0
    flipped = clean_correct & (protected_preds != clean_preds)
    return float(flipped.sum() / n_correct)


def eval_effectiveness(bundle, test_ds, seed=0, n_each=1000, auth_images=None):
    """The 2000-sample protocol: half plain (unauthorized), half carrying
    per-image credentials (authorized)."""
    plain_idx, auth_idx = _split_protocol(test_ds, seed, n_each)
    plain_images = test_ds.images[plain_idx]
    plain_labels = test_ds.labels[plain_idx]
    auth_labels = test_ds.labels[auth_idx]
    clean_preds_plain = bundle.backbone.predict(plain_images)
    clean_preds_auth = bundle.backbone.predict(test_ds.images[auth_idx])
    if auth_images is None:
        auth_images = issue_credentials(
            test_ds.images[auth_idx], bundle.spec, bundle.backbone, seed=seed * 100003
        )
    prot_preds, prot_flags = pluginmod.protected_predict(bundle, plain_images)
    auth_preds, auth_flags = pluginmod.protected_predict(bundle, auth_images)
    if not auth_flags.all():
        raise EvalFailure(
            f"{int((~auth_flags).sum())} credentialed samples failed verification"
        )
    return EffectivenessRow(
        ratio=bundle.mask.ratio,
        method=bundle.noise.method,
        lam=bundle.lam,
        a_unauth=float((prot_preds == plain_labels).mean()),
        a_auth=float((auth_preds == auth_labels).mean()),
        fooling_rate=fooling_rate(clean_preds_plain, prot_preds, plain_labels),
        clean_acc_unauth_split=float((clean_preds_plain == plain_labels).mean()),
        clean_acc_auth_split=float((clean_preds_auth == auth_labels).mean()),
        n_unauth=len(plain_idx),
        n_auth=len(auth_idx),
    )


def eval_efficiency(rows):
    """E = (A_auth - A_unauth) / ratio, straight from the report rows."""
    points = []
    for row in rows:
        if row.ratio <= 0:
            raise UsageError("ratio must be positive")
        points.append(
            EfficiencyPoint(
                ratio=row.ratio,
                method=row.method,
                efficiency=(row.a_auth - row.a_unauth) / row.ratio,
            )
        )
    return points


# ---------------------------------------------------------------------------
# overhead


def _median_latency(fn, batch, n_queries, warmup=5):
    for _ in range(warmup):
        fn(batch)
    samples = []
    for _ in range(n_queries):
        start = time.perf_counter()
        fn(batch)
        samples.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(samples))


def eval_overhead(bundle, n_queries=50, seed=0, workdir=None):
    rng = np.random.default_rng(seed)
    b1 = rng.random((1, 1, 28, 28), dtype=np.float32)
    b64 = rng.random((64, 1, 28, 28), dtype=np.float32)
    clean = bundle.backbone

    lat_c1 = _median_latency(lambda b: clean.forward(T.tensor(b)), b1, n_queries)
    lat_p1 = _median_latency(lambda b: pluginmod.protected_forward(bundle, b), b1, n_queries)
    lat_c64 = _median_latency(lambda b: clean.forward(T.tensor(b)), b64, n_queries)
    lat_p64 = _median_latency(lambda b: pluginmod.protected_forward(bundle, b), b64, n_queries)

    ops = set()
    for _ in range(100):
        out = pluginmod.protected_forward(bundle, rng.random((1, 1, 28, 28), dtype=np.float32))
        ops.add(out.ops_added)

    spec_bytes = len(bundle.spec.to_json().encode())
    params_added = bundle.noise.values.size + bundle.mask.mask.size

    model_bytes = bundle_bytes = 0
    if workdir is not None:
        mpath = os.path.join(workdir, "clean.lymf")
        bpath = os.path.join(workdir, "bundle.lymf")
        nn.save_model(clean, mpath)
        pluginmod.export_bundle(bundle, bpath)
        model_bytes = os.path.getsize(mpath)
        bundle_bytes = os.path.getsize(bpath)

    return OverheadReport(
        params_added=int(params_added),
        spec_bytes=spec_bytes,
        latency_clean_b1_ms=lat_c1,
        latency_protected_b1_ms=lat_p1,
        latency_clean_b64_ms=lat_c64,
        latency_protected_b64_ms=lat_p64,
        ops_added_unique=sorted(ops),
        bundle_bytes=bundle_bytes,
        model_bytes=model_bytes,
    )


# ---------------------------------------------------------------------------
# selector ablation and noise-scale sweep


def build_protected(backbone, spec, calibration, ratio, cfg, criterion="weight-grad",
                    method="gsuap", lam=1.0, selector_seed=0):
    """Score -> mask -> optimize -> seal, the standard build chain."""
    scores = gsuap.score_channels(backbone, calibration, criterion, seed=selector_seed)
    mask = gsuap.build_mask(scores, ratio)
    if method == "gaussian":
        noise = gsuap.make_baseline("gaussian", mask, cfg.epsilon, config=cfg)
    elif method == "suap":
        noise = gsuap.make_baseline(
            "suap", mask, cfg.epsilon, backbone=backbone, calibration=calibration, config=cfg
        )
    else:
        noise = gsuap.optimize_noise(backbone, mask, calibration, cfg)
    return pluginmod.protect(backbone, spec, mask, noise, lam=lam)


@dataclass
class AblationRow:
    criterion: str
    ratio: float
    gap: float
    a_unauth: float
    a_auth: float
    fooling_rate: float


def ablate_selectors(backbone, spec, calibration, test_ds, ratios, cfg,
                     criteria=gsuap.CRITERIA, seed=0, n_each=500, auth_images=None,
                     auth_labels=None):
    """Accuracy gap per (criterion, ratio) under an identical PGA config."""
    plain_idx, auth_idx = _split_protocol(test_ds, seed, n_each)
    plain_images = test_ds.images[plain_idx]
    plain_labels = test_ds.labels[plain_idx]
    clean_preds = backbone.predict(plain_images)
    if auth_images is None:
        auth_images = issue_credentials(
            test_ds.images[auth_idx], spec, backbone, seed=seed * 7919
        )
        auth_labels = test_ds.labels[auth_idx]
    rows = []
    for criterion in criteria:
        for ratio in ratios:
            bundle = build_protected(
                backbone, spec, calibration, ratio, cfg,
                criterion=criterion, selector_seed=seed,
            )
            preds, _ = pluginmod.protected_predict(bundle, plain_images)
            apreds, _ = pluginmod.protected_predict(bundle, auth_images)
            a_unauth = float((preds == plain_labels).mean())
            a_auth = float((apreds == auth_labels).mean())
            rows.append(
                AblationRow(
                    criterion=criterion,
                    ratio=float(ratio),
                    gap=a_auth - a_unauth,
                    a_unauth=a_unauth,
                    a_auth=a_auth,
                    fooling_rate=fooling_rate(clean_preds, preds, plain_labels),
                )
            )
    return rows


@dataclass
class LambdaPoint:
    lam: float
    acc_unauth: float
    acc_auth: float
    auth_logits_digest: str


def sweep_lambda(bundle, test_ds, grid, seed=0, n_each=500, auth_images=None,
                 auth_labels=None):
    """Unauthorized/authorized accuracy across the noise-scale grid."""
    plain_idx, auth_idx = _split_protocol(test_ds, seed, n_each)
    plain_images = test_ds.images[plain_idx]
    plain_labels = test_ds.labels[plain_idx]
    if auth_images is None:
        auth_images = issue_credentials(
            test_ds.images[auth_idx], bundle.spec, bundle.backbone, seed=seed * 104729
        )
        auth_labels = test_ds.labels[auth_idx]
    points = []
    for lam in grid:
        scaled = pluginmod.set_lambda(bundle, float(lam))
        preds, _ = pluginmod.protected_predict(scaled, plain_images)
        out_auth = pluginmod.protected_forward(scaled, auth_images)
        digest = hashlib.sha256(out_auth.logits.tobytes()).hexdigest()[:16]
        points.append(
            LambdaPoint(
                lam=float(lam),
                acc_unauth=float((preds == plain_labels).mean()),
                acc_auth=float((out_auth.predicted == auth_labels).mean()),
                auth_logits_digest=digest,
            )
        )
    return points


# ---------------------------------------------------------------------------
# attacks


def _oracle_probs(oracle, images, batch=512):
    """Soft labels from a bundle (protected) or a bare backbone (clean)."""
    probs = np.empty((len(images), 10), dtype=F32)
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        if isinstance(oracle, pluginmod.PluginBundle):
            logits = pluginmod.protected_forward(oracle, chunk).logits
        else:
            logits = oracle.forward(T.tensor(chunk)).data
        probs[i : i + len(chunk)] = T.softmax(logits)
    return probs


def _train_surrogate(images, probs, seed, epochs=4, lr=0.05, batch_size=64):
    surrogate = nn.Backbone(seed=seed)
    rng = np.random.default_rng(seed)
    params = surrogate.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    tape = T.GradTape()
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            tape.reset()
            with tape:
                logits = surrogate.forward(T.tensor(images[idx]), mode="train")
                loss = T.softmax_crossentropy_soft(logits, probs[idx])
            tape.backward(loss)
            for p, v in zip(params, velocity):
                v *= F32(0.9)
                v += p.grad
                p.data -= F32(lr) * v
                p.grad = None
    return surrogate


def attack_extract(oracle, pool_ds, test_ds, budgets, seed=0, epochs=4):
    """KnockoffNets-style distillation: query the oracle with pool images,
    train a fresh surrogate on the soft labels, report test accuracy."""
    rows = []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool_ds))
    for budget in budgets:
        if budget > len(pool_ds):
            raise EvalFailure(
                f"budget {budget} exceeds query pool of {len(pool_ds)}"
            )
        if budget == 0:
            surrogate = nn.Backbone(seed=seed)
        else:
            idx = order[:budget]
            images = pool_ds.images[idx]
            probs = _oracle_probs(oracle, images)
            surrogate = _train_surrogate(images, probs, seed=seed, epochs=epochs)
        acc = nn.evaluate(surrogate, test_ds.images, test_ds.labels)
        rows.append({"budget": int(budget), "surrogate_accuracy": acc})
    return AttackReport(kind="extract", rows=rows)


def attack_finetune(bundle, train_ds, test_ds, data_fraction=0.1, epochs=10,
                    lr=0.01, seed=0, n_eval=1000):
    """Gray-box fine-tuning: the adversary trains every backbone weight of
    the fused (always-injected) graph on a clean data slice; the noise
    tensor itself is frozen and the verification logic is unknown."""
    rng = np.random.default_rng(seed)
    n = max(2, int(len(train_ds) * data_fraction))
    idx = rng.permutation(len(train_ds))[:n]
    images, labels = train_ds.images[idx], train_ds.labels[idx]
    victim = bundle.backbone.clone()
    addend = (F32(bundle.lam) * bundle.masked_noise()).astype(F32)

    def fused_transform(tap):
        return T.add_map(tap, T.tensor(addend))

    eval_images = test_ds.images[:n_eval]
    eval_labels = test_ds.labels[:n_eval]

    def fused_accuracy():
        preds = np.empty(len(eval_images), dtype=np.int64)
        for i in range(0, len(eval_images), 512):
            logits, _ = victim._run(
                T.tensor(eval_images[i : i + 512]),
                "infer",
                transforms={nn.INJECT_TAP: fused_transform},
            )
            preds[i : i + len(logits.data)] = logits.data.argmax(axis=1)
        return float((preds == eval_labels).mean())

    rows = [{"epoch": 0, "unauth_accuracy": fused_accuracy()}]
    params = victim.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    tape = T.GradTape()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, 64):
            bidx = order[start : start + 64]
            if len(bidx) < 2:
                continue
            tape.reset()
            with tape:
                logits, _ = victim._run(
                    T.tensor(images[bidx]),
                    "train",
                    transforms={nn.INJECT_TAP: fused_transform},
                )
                loss = T.softmax_crossentropy(logits, labels[bidx])
            tape.backward(loss)
            for p, v in zip(params, velocity):
                v *= F32(0.9)
                v += p.grad
                p.data -= F32(lr) * v
                p.grad = None
        rows.append({"epoch": epoch, "unauth_accuracy": fused_accuracy()})
    return AttackReport(kind="finetune", rows=rows)


def attack_forge(bundle, test_ds, n_pairs=500, n_trials=200, seed=0):
    """Linear-residual forgery: average intercepted (plain, authorized)
    residuals and replay the estimate on fresh images."""
    if n_pairs + n_trials > len(test_ds):
        raise EvalFailure("not enough images for pairs and trials")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(test_ds))
    pair_idx = order[:n_pairs]
    trial_idx = order[n_pairs : n_pairs + n_trials]
    pairs = []
    for k, i in enumerate(pair_idx):
        plain = test_ds.images[i]
        cred = credmod.synthesize_watermark(
            plain, bundle.spec, bundle.backbone, rng=seed * 31 + k
        )
        pairs.append((plain.reshape(1, 28, 28), cred.apply(plain)))
    estimate = credmod.forge_linear(pairs)
    forged_hits = 0
    control_hits = 0
    for k, i in enumerate(trial_idx):
        fresh = test_ds.images[i].reshape(1, 28, 28)
        forged = np.clip(fresh + estimate, 0.0, 1.0).astype(F32)
        out = pluginmod.protected_forward(bundle, forged.reshape(1, 1, 28, 28))
        forged_hits += int(out.authorized[0])
        cred = credmod.synthesize_watermark(
            fresh, bundle.spec, bundle.backbone, rng=seed * 77 + k
        )
        out = pluginmod.protected_forward(
            bundle, cred.apply(fresh).reshape(1, 1, 28, 28)
        )
        control_hits += int(out.authorized[0])
    return AttackReport(
        kind="forge",
        rows=[{"n_pairs": n_pairs, "n_trials": n_trials}],
        forgery_success_rate=forged_hits / n_trials,
        control_success_rate=control_hits / n_trials,
    )


# ---------------------------------------------------------------------------
# calibration-size and cross-domain studies


@dataclass
class DataSizeRow:
    size: int
    ratio: float
    gap: float
    a_unauth: float
    fooling_rate: float


def study_data_size(backbone, spec, train_ds, test_ds, sizes, ratio, cfg, seed=0,
                    n_each=500):
    plain_idx, auth_idx = _split_protocol(test_ds, seed, n_each)
    plain_images = test_ds.images[plain_idx]
    plain_labels = test_ds.labels[plain_idx]
    clean_preds = backbone.predict(plain_images)
    auth_images = issue_credentials(
        test_ds.images[auth_idx], spec, backbone, seed=seed * 271
    )
    auth_labels = test_ds.labels[auth_idx]
    rows = []
    rng = np.random.default_rng(seed)
    for size in sizes:
        calib_idx = rng.permutation(len(train_ds))[:size]
        calibration = train_ds.subset(calib_idx)
        bundle = build_protected(backbone, spec, calibration, ratio, cfg)
        preds, _ = pluginmod.protected_predict(bundle, plain_images)
        apreds, _ = pluginmod.protected_predict(bundle, auth_images)
        a_unauth = float((preds == plain_labels).mean())
        a_auth = float((apreds == auth_labels).mean())
        rows.append(
            DataSizeRow(
                size=int(size),
                ratio=float(ratio),
                gap=a_auth - a_unauth,
                a_unauth=a_unauth,
                fooling_rate=fooling_rate(clean_preds, preds, plain_labels),
            )
        )
    return rows


@dataclass
class CrossDomainRow:
    ratio: float
    gap: float
    a_unauth: float
    fooling_rate: float


def study_cross_domain(target_backbone, target_spec, source_calibration,
                       target_test, ratios, cfg, seed=0, n_each=500):
    """Noise optimized on source-domain data against the target model,
    evaluated on the target domain."""
    plain_idx, auth_idx = _split_protocol(target_test, seed, n_each)
    plain_images = target_test.images[plain_idx]
    plain_labels = target_test.labels[plain_idx]
    clean_preds = target_backbone.predict(plain_images)
    auth_images = issue_credentials(
        target_test.images[auth_idx], target_spec, target_backbone, seed=seed * 37
    )
    auth_labels = target_test.labels[auth_idx]
    rows = []
    for ratio in ratios:
        bundle = build_protected(
            target_backbone, target_spec, source_calibration, ratio, cfg
        )
        preds, _ = pluginmod.protected_predict(bundle, plain_images)
        apreds, _ = pluginmod.protected_predict(bundle, auth_images)
        a_unauth = float((preds == plain_labels).mean())
        a_auth = float((apreds == auth_labels).mean())
        rows.append(
            CrossDomainRow(
                ratio=float(ratio),
                gap=a_auth - a_unauth,
                a_unauth=a_unauth,
                fooling_rate=fooling_rate(clean_preds, preds, plain_labels),
            )
        )
    return rows


@dataclass
class PruningReport:
    overlap: float
    clean_accuracy: float
    pruned_accuracy: float
    accuracy_drop: float


def study_pruning_coupling(backbone, scores, mask, test_ds, n_eval=1000):
    """Jaccard overlap between the protection mask and the top-k saliency
    channels, plus the accuracy cost of zeroing those channels."""
    k = mask.k
    top = set(np.argsort(-scores.scores, kind="stable")[:k].tolist())
    chosen = set(mask.channels())
    overlap = len(top & chosen) / len(top | chosen)
    images = test_ds.images[:n_eval]
    labels = test_ds.labels[:n_eval]
    clean_acc = nn.evaluate(backbone, images, labels)
    keep = (1.0 - mask.mask).astype(F32)

    def zero_masked(tap):
        return T.Tensor(tap.data * keep[None, :, None, None])

    preds = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), 512):
        logits, _ = backbone._run(
            T.tensor(images[i : i + 512]),
            "infer",
            transforms={nn.INJECT_TAP: zero_masked},
        )
        preds[i : i + len(logits.data)] = logits.data.argmax(axis=1)
    pruned_acc = float((preds == labels).mean())
    return PruningReport(
        overlap=float(overlap),
        clean_accuracy=clean_acc,
        pruned_accuracy=pruned_acc,
        accuracy_drop=clean_acc - pruned_acc,
    )


# ---------------------------------------------------------------------------
# CSV and manifest output


def write_csv(path, rows, columns):
    """Atomic CSV write with a mandatory header row."""
    lines = [",".join(columns)]
    for row in rows:
        record = asdict(row) if hasattr(row, "__dataclass_fields__") else row
        lines.append(",".join(_format_cell(record[c]) for c in columns))
    payload = "\n".join(lines) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_manifest(path, files, config):
    """Manifest of produced artifacts keyed by a hash of the resolved
    config; the timestamp is excluded from the hash."""
    config_text = json.dumps(config, sort_keys=True)
    manifest = {
        "config": config,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest()[:16],
        "files": [os.path.basename(f) for f in files],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)
    return path
