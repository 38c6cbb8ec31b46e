"""Command-line front end for the full lifecycle: train -> calibrate ->
optimize-noise -> issue -> protect -> infer / eval / attack.

Every subcommand is deterministic given its inputs and seeds, writes its
fully-resolved parameters next to its outputs, and exits with a stable
code per failure class (0 ok, 2 usage, 3 I/O, 4 format, 5 numerical,
6 eval/attack protocol failure).
"""

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import credential as credmod
from . import data as datamod
from . import gsuap
from . import harness
from . import nn
from . import plugin as pluginmod
from . import serialize
from . import tensor as T
from .errors import DataIOError, FormatError, LymphError, UsageError

F32 = np.float32


def _write_resolved_config(out_path, stage, params):
    target = out_path + ".config.json"
    payload = {"stage": stage, "params": params}
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return target


def _load_config_overrides(parser, args, stage):
    """Apply config-file values for flags the command line left at default."""
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            blocks = json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc}") from exc
    block = blocks.get(stage, {})
    known = set(vars(args))
    sub = parser._command_parsers[args.command]
    for key, value in block.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for stage {stage!r}")
        default = sub.get_default(dest)
        if getattr(args, dest) == default:
            setattr(args, dest, value)
    return args


def _save_mask(path, mask, scores):
    payload = {
        "mask": [int(m) for m in mask.mask],
        "ratio": mask.ratio,
        "criterion": scores.criterion,
        "scores": [float(s) for s in scores.scores],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _load_mask(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        mask = gsuap.ChannelMask(np.array(payload["mask"], dtype=F32), payload["ratio"])
        scores = gsuap.ChannelScore(
            np.array(payload["scores"]), payload["criterion"], "from-file"
        )
        return mask, scores
    except OSError as exc:
        raise DataIOError(f"cannot read mask {path}: {exc}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid mask file: {exc}") from exc


def _save_noise(path, noise):
    meta = {
        "kind": "gsuap-noise",
        "epsilon": noise.epsilon,
        "method": noise.method,
        "mask_ratio": noise.mask.ratio,
    }
    serialize.write_container(
        path,
        meta,
        {"noise": noise.values, "mask": noise.mask.mask},
    )


def _load_noise(path):
    meta, tensors, _ = serialize.read_container(path)
    if meta.get("kind") != "gsuap-noise":
        raise FormatError("not a noise container")
    mask = gsuap.ChannelMask(tensors["mask"], float(meta.get("mask_ratio", 1.0)))
    return gsuap.GsuapNoise(
        tensors["noise"], float(meta["epsilon"]), mask, meta.get("method", "gsuap")
    )


def _load_spec(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return credmod.CredentialSpec.from_json(fh.read())
    except OSError as exc:
        raise DataIOError(f"cannot read spec {path}: {exc}") from exc


def _require_file(path, what):
    if not os.path.exists(path):
        raise DataIOError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_train(parser, args):
    args = _load_config_overrides(parser, args, "train")
    train_ds, test_ds = datamod.resolve_dataset(args.data)
    backbone = nn.Backbone(seed=args.seed)
    config = nn.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed
    )
    result = nn.train(
        backbone, train_ds.images, train_ds.labels, config,
        test_ds.images, test_ds.labels,
    )
    nn.save_model(backbone, args.out)
    _write_resolved_config(args.out, "train", {
        "data": args.data, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "seed": args.seed,
    })
    print(f"accuracy_trace={','.join(f'{a:.4f}' for a in result.epoch_accuracy)}")
    print(f"final_accuracy={result.final_accuracy:.4f}")
    print(f"artifact={args.out}")
    return 0


def cmd_calibrate(parser, args):
    args = _load_config_overrides(parser, args, "calibrate")
    backbone = nn.load_model(_require_file(args.model, "model"))
    train_ds, _ = datamod.resolve_dataset(args.data)
    calibration = train_ds.take(args.samples)
    scores = gsuap.score_channels(
        backbone, calibration, args.selector, seed=args.seed
    )
    mask = gsuap.build_mask(scores, args.ratio)
    _save_mask(args.out_mask, mask, scores)
    _write_resolved_config(args.out_mask, "calibrate", {
        "model": args.model, "data": args.data, "samples": args.samples,
        "selector": args.selector, "ratio": args.ratio, "seed": args.seed,
    })
    print(f"selected_channels={mask.channels()}")
    print(f"artifact={args.out_mask}")
    return 0


def cmd_optimize_noise(parser, args):
    args = _load_config_overrides(parser, args, "optimize-noise")
    backbone = nn.load_model(_require_file(args.model, "model"))
    mask, _ = _load_mask(_require_file(args.mask, "mask"))
    train_ds, _ = datamod.resolve_dataset(args.data)
    calibration = train_ds.take(args.samples)
    cfg = gsuap.PgaConfig(
        step_size=args.alpha, steps=args.steps, epsilon=args.eps,
        batch_size=args.batch_size, seed=args.seed,
    )
    if args.method == "gaussian":
        noise = gsuap.make_baseline("gaussian", mask, args.eps, config=cfg)
    elif args.method == "suap":
        noise = gsuap.make_baseline(
            "suap", mask, args.eps, backbone=backbone, calibration=calibration, config=cfg
        )
    else:
        noise = gsuap.optimize_noise(backbone, mask, calibration, cfg)
    _save_noise(args.out_noise, noise)
    _write_resolved_config(args.out_noise, "optimize-noise", {
        "model": args.model, "mask": args.mask, "data": args.data,
        "samples": args.samples, "eps": args.eps, "alpha": args.alpha,
        "steps": args.steps, "method": args.method, "seed": args.seed,
    })
    if not math.isnan(noise.initial_loss):
        print(f"loss_initial={noise.initial_loss:.4f}")
        print(f"loss_final={noise.final_loss:.4f}")
    print(f"artifact={args.out_noise}")
    return 0


def cmd_issue(parser, args):
    args = _load_config_overrides(parser, args, "issue")
    backbone = nn.load_model(_require_file(args.model, "model"))
    if args.bits % args.kernels:
        raise UsageError(
            f"bits {args.bits} not divisible by kernels {args.kernels}"
        )
    os.makedirs(args.out_dir, exist_ok=True)
    if args.spec:
        spec = _load_spec(args.spec)
    else:
        spec = credmod.generate_spec(
            args.seed, total_bits=args.bits, kernel_carriers=args.kernels,
            bit_depth=args.bit_depth,
        )
    spec_path = os.path.join(args.out_dir, "spec.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())
    train_ds, test_ds = datamod.resolve_dataset(args.images)
    pool = test_ds if len(test_ds) >= args.count else train_ds
    if len(pool) < args.count:
        raise UsageError(f"dataset provides {len(pool)} images < count {args.count}")
    channel = None
    if args.robust_quality is not None:
        channel = datamod.DistortionChannel(quality=args.robust_quality)
    written = []
    for i in range(args.count):
        image = pool.images[i]
        if channel is None:
            cred = credmod.synthesize_watermark(
                image, spec, backbone, rng=args.seed * 1000 + i
            )
        else:
            cred = credmod.synthesize_robust(
                image, spec, backbone, channel,
                iterations=args.robust_iters, rng=args.seed * 1000 + i,
            )
        cred_path = os.path.join(args.out_dir, f"credential_{i:05d}.json")
        with open(cred_path, "w", encoding="utf-8") as fh:
            fh.write(cred.to_json())
        datamod.write_pgm(
            os.path.join(args.out_dir, f"authorized_{i:05d}.pgm"), cred.apply(image)
        )
        written.append(cred_path)
    _write_resolved_config(spec_path, "issue", {
        "model": args.model, "bits": args.bits, "kernels": args.kernels,
        "bit_depth": args.bit_depth, "count": args.count, "images": args.images,
        "seed": args.seed, "robust_quality": args.robust_quality,
        "robust_iters": args.robust_iters,
    })
    print(f"spec={spec_path}")
    print(f"credentials={len(written)}")
    print(f"artifact={args.out_dir}")
    return 0


def cmd_protect(parser, args):
    args = _load_config_overrides(parser, args, "protect")
    backbone = nn.load_model(_require_file(args.model, "model"))
    mask, _ = _load_mask(_require_file(args.mask, "mask"))
    noise = _load_noise(_require_file(args.noise, "noise"))
    spec = _load_spec(_require_file(args.spec, "spec"))
    bundle = pluginmod.protect(backbone, spec, mask, noise, lam=args.lam)
    pluginmod.export_bundle(bundle, args.out_bundle)
    _write_resolved_config(args.out_bundle, "protect", {
        "model": args.model, "mask": args.mask, "noise": args.noise,
        "spec": args.spec, "lambda": args.lam,
    })
    print(f"artifact={args.out_bundle}")
    return 0


def cmd_infer(parser, args):
    args = _load_config_overrides(parser, args, "infer")
    bundle = pluginmod.import_bundle(_require_file(args.bundle, "bundle"))
    image = datamod.read_pgm(_require_file(args.image, "image"))
    if args.credential:
        with open(args.credential, "r", encoding="utf-8") as fh:
            cred = credmod.Credential.from_json(fh.read(), bundle.spec)
        image = cred.apply(image)
    out = pluginmod.protected_forward(bundle, image.reshape(1, 1, 28, 28))
    print(f"predicted={int(out.predicted[0])}")
    print(f"authorized={'true' if out.authorized[0] else 'false'}")
    return 0


# ---------------------------------------------------------------------------
# eval subcommands


def _read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def cmd_eval(parser, args):
    args = _load_config_overrides(parser, args, f"eval-{args.study}")
    study = args.study
    out = args.out_csv
    params = {k: v for k, v in vars(args).items() if k not in ("func", "config")}

    if study == "effectiveness":
        bundle = pluginmod.import_bundle(_require_file(args.bundle, "bundle"))
        _, test_ds = datamod.resolve_dataset(args.data)
        row = harness.eval_effectiveness(bundle, test_ds, seed=args.seed, n_each=args.samples)
        harness.write_csv(out, [row], [
            "ratio", "method", "lam", "a_unauth", "a_auth", "fooling_rate",
            "clean_acc_unauth_split", "clean_acc_auth_split", "n_unauth", "n_auth",
        ])
    elif study == "efficiency":
        rows = _read_csv(_require_file(args.in_csv, "effectiveness csv"))
        points = [
            harness.EfficiencyPoint(
                ratio=float(r["ratio"]),
                method=r["method"],
                efficiency=(float(r["a_auth"]) - float(r["a_unauth"])) / float(r["ratio"]),
            )
            for r in rows
        ]
        harness.write_csv(out, points, ["ratio", "method", "efficiency"])
    elif study == "overhead":
        bundle = pluginmod.import_bundle(_require_file(args.bundle, "bundle"))
        report = harness.eval_overhead(
            bundle, n_queries=args.queries, seed=args.seed,
            workdir=os.path.dirname(os.path.abspath(out)),
        )
        rows = [{"metric": k, "value": v if not isinstance(v, list) else ";".join(map(str, v))}
                for k, v in asdict_flat(report)]
        harness.write_csv(out, rows, ["metric", "value"])
    elif study == "ablation":
        backbone = nn.load_model(_require_file(args.model, "model"))
        spec = _load_spec(_require_file(args.spec, "spec"))
        train_ds, test_ds = datamod.resolve_dataset(args.data)
        cfg = gsuap.PgaConfig(step_size=args.alpha, steps=args.steps,
                              epsilon=args.eps, seed=args.seed)
        rows = harness.ablate_selectors(
            backbone, spec, train_ds.take(args.samples), test_ds,
            [float(r) for r in args.ratios.split(",")], cfg, seed=args.seed,
        )
        harness.write_csv(out, rows, [
            "criterion", "ratio", "gap", "a_unauth", "a_auth", "fooling_rate",
        ])
    elif study == "lambda-sweep":
        bundle = pluginmod.import_bundle(_require_file(args.bundle, "bundle"))
        _, test_ds = datamod.resolve_dataset(args.data)
        lo, hi, step = (float(v) for v in args.grid.split(":"))
        grid = np.arange(lo, hi + step / 2, step)
        points = harness.sweep_lambda(bundle, test_ds, grid, seed=args.seed)
        harness.write_csv(out, points, [
            "lam", "acc_unauth", "acc_auth", "auth_logits_digest",
        ])
    elif study == "imperceptibility":
        backbone = nn.load_model(_require_file(args.model, "model"))
        spec = _load_spec(_require_file(args.spec, "spec"))
        _, test_ds = datamod.resolve_dataset(args.data)
        rows = []
        for i in range(args.count):
            image = test_ds.images[i]
            cred = credmod.synthesize_watermark(image, spec, backbone, rng=args.seed + i)
            marked = cred.apply(image)
            rows.append({
                "index": i,
                "psnr_db": datamod.psnr(image.reshape(28, 28), marked.reshape(28, 28)),
                "ssim": datamod.ssim(image, marked),
            })
        harness.write_csv(out, rows, ["index", "psnr_db", "ssim"])
    elif study == "collision":
        backbone = nn.load_model(_require_file(args.model, "model"))
        _, test_ds = datamod.resolve_dataset(args.data)
        rows = []
        for bits in (int(b) for b in args.bits_list.split(",")):
            spec = credmod.generate_spec(args.seed, total_bits=bits,
                                         kernel_carriers=args.kernels)
            hits = empirical_collisions(backbone, spec, test_ds, args.trials, args.seed)
            rows.append({
                "bits": bits,
                "trials": args.trials,
                "collisions": hits,
                "theoretical_probability": credmod.collision_probability(bits),
            })
        harness.write_csv(out, rows, [
            "bits", "trials", "collisions", "theoretical_probability",
        ])
    elif study == "data-size":
        backbone = nn.load_model(_require_file(args.model, "model"))
        spec = _load_spec(_require_file(args.spec, "spec"))
        train_ds, test_ds = datamod.resolve_dataset(args.data)
        cfg = gsuap.PgaConfig(step_size=args.alpha, steps=args.steps,
                              epsilon=args.eps, seed=args.seed)
        rows = harness.study_data_size(
            backbone, spec, train_ds, test_ds,
            [int(s) for s in args.sizes.split(",")], args.ratio, cfg, seed=args.seed,
        )
        harness.write_csv(out, rows, ["size", "ratio", "gap", "a_unauth", "fooling_rate"])
    elif study == "cross-domain":
        backbone = nn.load_model(_require_file(args.model, "model"))
        spec = _load_spec(_require_file(args.spec, "spec"))
        source_train, _ = datamod.resolve_dataset(args.source_data)
        _, target_test = datamod.resolve_dataset(args.target_data)
        cfg = gsuap.PgaConfig(step_size=args.alpha, steps=args.steps,
                              epsilon=args.eps, seed=args.seed)
        rows = harness.study_cross_domain(
            backbone, spec, source_train.take(args.samples), target_test,
            [float(r) for r in args.ratios.split(",")], cfg, seed=args.seed,
        )
        harness.write_csv(out, rows, ["ratio", "gap", "a_unauth", "fooling_rate"])
    elif study == "pruning":
        backbone = nn.load_model(_require_file(args.model, "model"))
        train_ds, test_ds = datamod.resolve_dataset(args.data)
        scores = gsuap.score_channels(
            backbone, train_ds.take(args.samples), "weight-grad"
        )
        mask = gsuap.build_mask(scores, args.ratio)
        report = harness.study_pruning_coupling(backbone, scores, mask, test_ds)
        rows = [{"metric": k, "value": v} for k, v in asdict_flat(report)]
        harness.write_csv(out, rows, ["metric", "value"])
    else:
        raise UsageError(f"unknown eval study {study!r}")
    harness.write_manifest(out + ".manifest.json", [out], params)
    print(f"artifact={out}")
    return 0


def asdict_flat(report):
    return sorted(asdict(report).items())


def empirical_collisions(backbone, spec, test_ds, trials, seed):
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        n = min(2048, trials - done)
        use_natural = len(test_ds) and done % 2 == 0
        if use_natural:
            idx = rng.integers(0, len(test_ds), size=n)
            batch = test_ds.images[idx]
        else:
            batch = rng.random((n, 1, 28, 28), dtype=np.float32)
        _, taps = backbone.forward_with_taps(T.tensor(batch))
        flags = credmod.verify(taps[nn.VERIFY_TAP].data, spec)
        hits += int(flags.sum())
        done += n
    return hits


# ---------------------------------------------------------------------------
# attack subcommands


def cmd_attack(parser, args):
    args = _load_config_overrides(parser, args, f"attack-{args.kind}")
    bundle = pluginmod.import_bundle(_require_file(args.bundle, "bundle"))
    train_ds, test_ds = datamod.resolve_dataset(args.data)
    out = args.out_csv
    params = {k: v for k, v in vars(args).items() if k not in ("func", "config")}

    if args.kind == "extract":
        budgets = [int(b) for b in args.budgets.split(",")]
        oracle = bundle.backbone if args.clean_oracle else bundle
        report = harness.attack_extract(
            oracle, train_ds, test_ds, budgets, seed=args.seed, epochs=args.epochs
        )
        harness.write_csv(out, report.rows, ["budget", "surrogate_accuracy"])
    elif args.kind == "forge":
        report = harness.attack_forge(
            bundle, test_ds, n_pairs=args.pairs, n_trials=args.trials, seed=args.seed
        )
        rows = [{
            "n_pairs": args.pairs,
            "n_trials": args.trials,
            "forgery_success_rate": report.forgery_success_rate,
            "control_success_rate": report.control_success_rate,
        }]
        harness.write_csv(out, rows, [
            "n_pairs", "n_trials", "forgery_success_rate", "control_success_rate",
        ])
    elif args.kind == "finetune":
        report = harness.attack_finetune(
            bundle, train_ds, test_ds, data_fraction=args.fraction,
            epochs=args.epochs, lr=args.lr, seed=args.seed,
        )
        harness.write_csv(out, report.rows, ["epoch", "unauth_accuracy"])
    else:
        raise UsageError(f"unknown attack {args.kind!r}")
    harness.write_manifest(out + ".manifest.json", [out], params)
    print(f"artifact={out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lymphnode",
        description="Active access control for a desk-scale CNN: train, "
        "calibrate, optimize noise, issue credentials, protect, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="train the backbone")
    p.add_argument("--data", required=True, help="dataset dir or spec string")
    p.add_argument("--epochs", type=int, default=3, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="SGD batch size")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="score channels and build the mask")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--data", required=True, help="dataset dir or spec string")
    p.add_argument("--samples", type=int, default=100, help="calibration sample count")
    p.add_argument("--selector", default="weight-grad", help="channel scoring criterion",
                   choices=["weight-grad", "weight-norm", "taylor", "random"])
    p.add_argument("--ratio", type=float, default=0.6, help="channel ratio")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-mask", required=True, help="output mask JSON path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("optimize-noise", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="run projected gradient ascent")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--mask", required=True, help="mask JSON file")
    p.add_argument("--data", required=True, help="dataset dir or spec string")
    p.add_argument("--samples", type=int, default=100, help="calibration sample count")
    p.add_argument("--eps", type=float, default=2.0, help="L-infinity noise budget")
    p.add_argument("--alpha", type=float, default=0.1, help="ascent step size")
    p.add_argument("--steps", type=int, default=300, help="ascent steps")
    p.add_argument("--batch-size", type=int, default=50, help="ascent batch size")
    p.add_argument("--method", default="gsuap", choices=["gsuap", "suap", "gaussian"], help="noise construction")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-noise", required=True, help="output noise container path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_optimize_noise)

    p = sub.add_parser("issue", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="generate a spec and per-image credentials")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--bits", type=int, default=32, help="key bits N")
    p.add_argument("--kernels", type=int, default=4, help="carrier kernels v")
    p.add_argument("--bit-depth", type=int, default=6, help="fractional bit depth s")
    p.add_argument("--count", type=int, default=10, help="credentials to issue")
    p.add_argument("--images", required=True, help="dataset dir or spec string")
    p.add_argument("--spec", help="reuse an existing spec file")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--robust-quality", type=int, default=None, help="harden against this channel quality")
    p.add_argument("--robust-iters", type=int, default=10, help="robust embedding rounds")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_issue)

    p = sub.add_parser("protect", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="seal a protected bundle")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--mask", required=True, help="mask JSON file")
    p.add_argument("--noise", required=True, help="noise container file")
    p.add_argument("--spec", required=True, help="credential spec JSON (secret)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="noise scale")
    p.add_argument("--out-bundle", required=True, help="output bundle path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("infer", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="run one image through a bundle")
    p.add_argument("--bundle", required=True, help="protected bundle file")
    p.add_argument("--image", required=True, help="P5 PGM file")
    p.add_argument("--credential", help="credential JSON to apply first")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="run an evaluation study")
    p.add_argument("study", choices=[
        "effectiveness", "efficiency", "overhead", "ablation", "lambda-sweep",
        "imperceptibility", "collision", "data-size", "cross-domain", "pruning",
    ])
    p.add_argument("--bundle", help="protected bundle file")
    p.add_argument("--model", help="trained model file")
    p.add_argument("--spec", help="credential spec JSON")
    p.add_argument("--data", help="dataset dir or spec string")
    p.add_argument("--source-data", help="source-domain dataset")
    p.add_argument("--target-data", help="target-domain dataset")
    p.add_argument("--in-csv", help="effectiveness CSV to derive from")
    p.add_argument("--samples", type=int, default=500, help="samples per evaluation group")
    p.add_argument("--count", type=int, default=100, help="images to measure")
    p.add_argument("--trials", type=int, default=100000, help="Monte-Carlo trials")
    p.add_argument("--queries", type=int, default=50, help="timing queries")
    p.add_argument("--ratio", type=float, default=0.6, help="channel ratio")
    p.add_argument("--ratios", default="0.25,0.5,0.75", help="comma-separated ratios")
    p.add_argument("--sizes", default="10,50,100,500", help="calibration sizes")
    p.add_argument("--bits-list", default="8,32", help="key sizes for collision study")
    p.add_argument("--kernels", type=int, default=4, help="carrier kernels v")
    p.add_argument("--grid", default="0.0:2.0:0.1", help="lambda grid lo:hi:step")
    p.add_argument("--eps", type=float, default=2.0, help="L-infinity noise budget")
    p.add_argument("--alpha", type=float, default=0.1, help="ascent step size")
    p.add_argument("--steps", type=int, default=150, help="ascent steps per build")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-csv", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="run an adaptive attack")
    p.add_argument("kind", choices=["extract", "forge", "finetune"])
    p.add_argument("--bundle", required=True, help="protected bundle file")
    p.add_argument("--data", required=True, help="dataset dir or spec string")
    p.add_argument("--budgets", default="1000,5000,20000", help="query budgets")
    p.add_argument("--clean-oracle", action="store_true",
                   help="query the unprotected backbone instead")
    p.add_argument("--pairs", type=int, default=500, help="intercepted image pairs")
    p.add_argument("--trials", type=int, default=200, help="forgery attempts")
    p.add_argument("--fraction", type=float, default=0.1, help="clean data fraction")
    p.add_argument("--epochs", type=int, default=10, help="fine-tuning epochs")
    p.add_argument("--lr", type=float, default=0.01, help="fine-tuning learning rate")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-csv", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON config file with per-stage blocks")
    p.set_defaults(func=cmd_attack)

    parser._command_parsers = {
        name: sp for name, sp in sub.choices.items()
    }
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except LymphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
