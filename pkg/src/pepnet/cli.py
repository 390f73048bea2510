"""Command-line front end: data generation, the three training variants,
evaluation, the k sweep, qualitative sampling and a standalone PCA fit.

Option precedence is flags > JSON config file > built-in defaults, and
the resolved options are echoed to ``resolved-config.json`` in every
output directory. Exit codes: 0 success, 2 usage error, 1 runtime
error. All randomness flows from ``--seed``, so identical invocations
produce byte-identical outputs.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SynthParams,
    generate_dataset,
    read_dataset,
    read_pgm,
    write_dataset,
    write_pgm,
)
from .metrics import prediction_maps
from .train import (
    PCA_FEATURES,
    TrainConfig,
    Trainer,
    evaluate,
    fit_pca_phase,
    write_training_log,
)

# variant name -> (fit_pca, use_ilsr)
VARIANTS = {
    "pep": (True, True),
    "pep-no-ilsr": (True, False),
    "prob-unet": (False, True),
}

GENERATE_DEFAULTS = {
    "n": 512,
    "seed": 0,
    "size": 32,
    "raters": 4,
    "p_absent": 0.25,
    "jitter": 1,
    "noise": 0.05,
}

TRAIN_DEFAULTS = {
    f.name: f.default
    for f in fields(TrainConfig)
    if f.name not in ("use_ilsr", "fit_pca")
}
TRAIN_DEFAULTS["variant"] = "pep"

EVAL_DEFAULTS = {"samples": 16, "seed": 0, "against": "raters"}

SWEEP_DEFAULTS = dict(TRAIN_DEFAULTS, ks="2,3,4", samples=16)
del SWEEP_DEFAULTS["k"]  # swept, not fixed
del SWEEP_DEFAULTS["variant"]  # the sweep compares k within the full variant

SAMPLE_DEFAULTS = {"samples": 16, "seed": 0, "threshold": 0.5}

PCA_FIT_DEFAULTS = {"batch_size": 8, "pca_feature": "posterior_mean", "seed": 0}


class UsageError(ValueError):
    """Bad arguments or config values; maps to exit code 2."""


def _resolved_options(args, defaults: dict) -> dict:
    """Merge defaults, then JSON config entries, then explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"{config_path}: unknown config keys {unknown}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(out_dir: str, command: str, resolved: dict, extra: dict) -> None:
    payload = {"command": command, **resolved, **extra}
    path = os.path.join(out_dir, "resolved-config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_samples(path: str):
    samples = read_dataset(path)
    print(f"loaded {len(samples)} samples from {path}")
    return samples


def _check_image_size(model, samples, what: str) -> None:
    size = model.config.image_size
    shape = samples[0].image.shape
    if shape != (size, size):
        raise ValueError(
            f"{what} images are {shape[0]}x{shape[1]} but the checkpoint "
            f"expects {size}x{size}"
        )


# -- subcommands -------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    resolved = _resolved_options(args, GENERATE_DEFAULTS)
    try:
        params = SynthParams(
            image_size=resolved["size"],
            num_raters=resolved["raters"],
            p_absent=resolved["p_absent"],
            boundary_jitter=resolved["jitter"],
            noise_sigma=resolved["noise"],
            seed=resolved["seed"],
        )
        if resolved["n"] < 1:
            raise ValueError(f"n must be >= 1, got {resolved['n']}")
    except ValueError as e:
        raise UsageError(str(e)) from None
    samples = generate_dataset(params, resolved["n"])
    out = _ensure_out(args.out)
    write_dataset(samples, out)
    _echo_config(out, "generate-data", resolved, {"out": args.out})
    print(f"wrote {len(samples)} samples to {out} (seed {resolved['seed']})")
    return 0


def _train_config_from(resolved: dict, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise UsageError(f"variant must be one of {sorted(VARIANTS)}, got {variant!r}")
    fit_pca, use_ilsr = VARIANTS[variant]
    kwargs = {k: v for k, v in resolved.items() if k in TrainConfig.__dataclass_fields__}
    try:
        return TrainConfig(**kwargs, use_ilsr=use_ilsr, fit_pca=fit_pca)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _run_training(config: TrainConfig, samples, out: str) -> Trainer:
    trainer = Trainer(config, samples)
    model = trainer.train()
    write_training_log(trainer.log_rows, os.path.join(out, "train_log.csv"))
    save_checkpoint(model, os.path.join(out, "checkpoint"))
    if trainer.pca_eigenvalues is not None:
        _write_json(
            os.path.join(out, "pca.json"),
            {
                "eigenvalues": [float(v) for v in trainer.pca_eigenvalues],
                "captured_fraction": float(trainer.pca_captured),
                "k": model.config.k,
            },
        )
        print(
            f"pca: k={model.config.k} captures "
            f"{100.0 * trainer.pca_captured:.1f}% of posterior-mean variance"
        )
    last = trainer.log_rows[-1]
    print(
        f"trained {config.epochs} epochs (stage {last['stage']}); "
        f"final loss {last['loss']:.4f}"
    )
    return trainer


def cmd_train(args) -> int:
    resolved = _resolved_options(args, TRAIN_DEFAULTS)
    config = _train_config_from(resolved, resolved["variant"])
    samples = _load_samples(args.data)
    out = _ensure_out(args.out)
    _run_training(config, samples, out)
    _echo_config(out, "train", resolved, {"data": args.data, "out": args.out})
    return 0


def cmd_eval(args) -> int:
    resolved = _resolved_options(args, EVAL_DEFAULTS)
    if resolved["samples"] < 1:
        raise UsageError(f"samples must be >= 1, got {resolved['samples']}")
    if resolved["against"] not in ("raters", "majority"):
        raise UsageError(f"against must be raters or majority, got {resolved['against']!r}")
    model = load_checkpoint(args.checkpoint)
    samples = _load_samples(args.data)
    _check_image_size(model, samples, "dataset")
    report = evaluate(
        model,
        samples,
        m=resolved["samples"],
        seed=resolved["seed"],
        against=resolved["against"],
    )
    out = _ensure_out(args.out)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="ascii") as f:
        f.write(report.to_csv())
    with open(os.path.join(out, "metrics.json"), "w", encoding="ascii") as f:
        f.write(report.to_json())
    _echo_config(
        out, "eval", resolved, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out}
    )
    print(
        f"iou={report.iou:.4f} ged={report.ged:.4f} nll={report.nll:.4f} "
        f"brier={report.brier:.4f} ece={report.ece:.4f} (M={report.num_pred_samples})"
    )
    return 0


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in str(text).split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(f"cannot parse k list {text!r}") from None
    if not ks:
        raise UsageError("k list is empty")
    return ks


def cmd_sweep_k(args) -> int:
    resolved = _resolved_options(args, SWEEP_DEFAULTS)
    ks = _parse_ks(resolved["ks"])
    for k in ks:
        if not 1 <= k <= resolved["d"]:
            raise UsageError(f"k={k} outside [1, d={resolved['d']}]")
    train_samples = _load_samples(args.data)
    eval_samples = _load_samples(args.eval_data)
    out = _ensure_out(args.out)

    rows = []
    for k in ks:
        config = _train_config_from(dict(resolved, k=k), "pep")
        arm_dir = _ensure_out(os.path.join(out, f"k_{k}"))
        trainer = _run_training(config, train_samples, arm_dir)
        report = evaluate(
            trainer.model, eval_samples, m=resolved["samples"], seed=resolved["seed"]
        )
        with open(os.path.join(arm_dir, "metrics.csv"), "w", encoding="ascii") as f:
            f.write(report.to_csv())
        rows.append((k, report.iou, report.ged))
        print(f"k={k}: iou={report.iou:.4f} ged={report.ged:.4f}")

    with open(os.path.join(out, "sweep.csv"), "w", encoding="ascii") as f:
        f.write("k,iou,ged\n")
        for k, iou_v, ged_v in rows:
            f.write(f"{k},{iou_v},{ged_v}\n")
    _echo_config(
        out, "sweep-k", resolved, {"data": args.data, "eval_data": args.eval_data, "out": args.out}
    )
    return 0


def cmd_sample(args) -> int:
    resolved = _resolved_options(args, SAMPLE_DEFAULTS)
    if resolved["samples"] < 1:
        raise UsageError(f"samples must be >= 1, got {resolved['samples']}")
    model = load_checkpoint(args.checkpoint)
    image = read_pgm(args.image).astype(np.float32) / np.float32(255.0)
    size = model.config.image_size
    if image.shape != (size, size):
        raise ValueError(
            f"image is {image.shape[0]}x{image.shape[1]} but the checkpoint "
            f"expects {size}x{size}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(resolved["seed"]))
    maps = prediction_maps(model, image, resolved["samples"], rng)
    out = _ensure_out(args.out)
    for j, prob in enumerate(maps):
        mask = (prob >= resolved["threshold"]).astype(np.uint8) * np.uint8(255)
        write_pgm(os.path.join(out, f"sample_{j:02d}.pgm"), mask)
    mean = np.mean(maps, axis=0)
    write_pgm(
        os.path.join(out, "mean_probability.pgm"),
        np.round(mean * 255.0).astype(np.uint8),
    )
    _echo_config(
        out, "sample", resolved, {"checkpoint": args.checkpoint, "image": args.image, "out": args.out}
    )
    print(f"wrote {len(maps)} sampled masks and the mean map to {out}")
    return 0


def cmd_pca_fit(args) -> int:
    resolved = _resolved_options(args, PCA_FIT_DEFAULTS)
    model = load_checkpoint(args.checkpoint)
    if model.projection_frozen:
        raise ValueError("checkpoint already has a frozen projection")
    samples = _load_samples(args.data)
    _check_image_size(model, samples, "dataset")
    projection, eigenvalues, captured = fit_pca_phase(
        model,
        samples,
        resolved["batch_size"],
        feature=resolved["pca_feature"],
        noise_rng=np.random.default_rng(np.random.SeedSequence(resolved["seed"])),
    )
    out = _ensure_out(args.out)
    save_checkpoint(model, os.path.join(out, "checkpoint"))
    _write_json(
        os.path.join(out, "pca.json"),
        {
            "eigenvalues": [float(v) for v in eigenvalues],
            "captured_fraction": float(captured),
            "k": projection.k,
        },
    )
    _echo_config(
        out, "pca-fit", resolved, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out}
    )
    print(f"froze k={projection.k} projection capturing {100.0 * captured:.1f}% variance")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_config_flag(p) -> None:
    p.add_argument("--config", help="JSON file of defaults (flags still win)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pepnet",
        description="Segmentation with a PCA-bottlenecked probabilistic U-Net",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic multi-rater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--raters", type=int)
    p.add_argument("--p-absent", dest="p_absent", type=float)
    p.add_argument("--jitter", type=int)
    p.add_argument("--noise", type=float)
    _add_config_flag(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run two-stage training on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    for name in ("epochs", "warmup-epochs", "batch-size", "step-size", "seed",
                 "d", "k", "image-size", "base-channels", "depth", "adapter-hidden"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
    for name in ("lr", "gamma", "beta", "grad-clip"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    p.add_argument("--pca-feature", dest="pca_feature", choices=PCA_FEATURES)
    p.add_argument(
        "--kl-full-space",
        dest="kl_in_full_space",
        action="store_true",
        default=None,
        help="diagnostic: compute the KL in the native space",
    )
    _add_config_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--against", choices=("raters", "majority"))
    _add_config_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="train and score one model per k")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", help="comma-separated k values, e.g. 2,3,4")
    for name in ("epochs", "warmup-epochs", "batch-size", "step-size", "seed",
                 "d", "image-size", "base-channels", "depth", "adapter-hidden",
                 "samples"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
    for name in ("lr", "gamma", "beta", "grad-clip"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)
    p.add_argument("--pca-feature", dest="pca_feature", choices=PCA_FEATURES)
    _add_config_flag(p)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sample", help="dump sampled segmentations for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    _add_config_flag(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pca-fit", help="fit and freeze the projection of a warm checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--pca-feature", dest="pca_feature", choices=PCA_FEATURES)
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=cmd_pca_fit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
