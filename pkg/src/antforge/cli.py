"""Command-line entry point.

Subcommands: train {vanilla,gnt,ant}, eval {corruptions,epsilon-star,pgd},
corrupt, report. Every run writes its resolved config next to its outputs so
it can be replayed from the artifacts alone. Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .data import Dataset, load_idx, synth_blobs, write_idx
from .errors import AntForgeError, ConfigError, DataError
from .evaluate import (EvalReport, clean_accuracy, corruption_accuracy,
                       epsilon_star, mce, pgd_accuracy)
from .nets import (Classifier, build_classifier, build_generator, load_checkpoint,
                   madry_mnist_spec, save_checkpoint, small_test_spec)
from .optim import Adam
from .perturb import CORRUPTION_KINDS, CorruptionSpec, GAUSSIAN_SIGMA_SET, corrupt
from .rng import Rng
from .train import (MetricsLog, TrainSettings, train_ant, train_gnt,
                    train_generator, train_vanilla)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _data_dir() -> Path:
    return Path(os.environ.get("ANTFORGE_DATA_DIR", "."))


def _load_dataset(cfg: Config, split: str) -> Dataset:
    kind = cfg.get("data", "dataset", "synthetic")
    if kind == "synthetic":
        n = cfg.get_int("data", f"{split}_size", 2000 if split == "train" else 500)
        return synth_blobs(
            n,
            classes=cfg.get_int("data", "classes", 10),
            image_size=cfg.get_int("data", "image_size", 28),
            noise=cfg.get_float("data", "noise", 0.1),
            seed=cfg.get_int("data", "data_seed", 1),
            noise_seed=cfg.get_int("data", "data_seed", 1)
            + (0 if split == "train" else 1),
            class_contrast=cfg.get_float("data", "class_contrast", 1.0),
            template_passes=cfg.get_int("data", "template_passes", 3),
            binarize=cfg.get_bool("data", "binarize", False),
        )
    if kind == "mnist":
        root = _data_dir()
        prefix = "train" if split == "train" else "t10k"
        return load_idx(root / f"{prefix}-images-idx3-ubyte",
                        root / f"{prefix}-labels-idx1-ubyte")
    raise ConfigError(f"unknown dataset {kind!r}")


def _arch_spec(cfg: Config, data: Dataset):
    name = cfg.get("model", "arch", "madry")
    in_shape = data.images.shape[1:]
    classes = int(data.labels.max()) + 1
    if name == "madry":
        return madry_mnist_spec(in_shape, classes)
    if name == "small":
        return small_test_spec(in_shape, classes)
    raise ConfigError(f"unknown model arch {name!r}")


def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, k = key.split(".", 1)
        cfg.set(section.strip(), k.strip(), value.strip())
    return cfg


def _prepare_run_dir(path: str, cfg: Config) -> Path:
    run_dir = Path(path)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.cfg").write_text(cfg.dump())
    (run_dir / "VERSION").write_text(f"antforge {__version__}\n")
    return run_dir


def _settings_from_config(cfg: Config) -> TrainSettings:
    s = TrainSettings()
    s.epochs = cfg.get_int("gnt", "epochs", None) or cfg.get_int("ant", "epochs", None) \
        or cfg.get_int("optim", "epochs", s.epochs)
    s.batch_size = cfg.get_int("optim", "batch_size", s.batch_size)
    s.lr = cfg.get_float("optim", "lr", s.lr)
    s.momentum = cfg.get_float("optim", "momentum", s.momentum)
    s.lr_decay_epoch = cfg.get_int("optim", "lr_decay_epoch", s.lr_decay_epoch)
    s.lr_decay_factor = cfg.get_float("optim", "lr_decay_factor", s.lr_decay_factor)
    sigmas = cfg.get_floats("gnt", "sigmas", None)
    if sigmas:
        s.sigmas = tuple(sigmas)
    s.eps = cfg.get_float("ant", "epsilon", s.eps)
    s.gen_lr = cfg.get_float("ant", "gen_lr", s.gen_lr)
    s.inner_steps = cfg.get_int("ant", "inner_steps", s.inner_steps)
    s.replay_capacity = cfg.get_int("ant", "replay_capacity", s.replay_capacity)
    s.snapshot_interval = cfg.get_int("ant", "snapshot_interval", s.snapshot_interval)
    s.restart_interval = cfg.get_int("ant", "restart_interval", s.restart_interval)
    s.restart_warmup = cfg.get_int("ant", "restart_warmup", s.restart_warmup)
    s.use_replay = cfg.get_bool("ant", "use_replay", s.use_replay)
    s.seed = cfg.get_int("seed", "master", s.seed)
    return s


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.sigma is not None:
        if args.sigma == "multi":
            sigmas = GAUSSIAN_SIGMA_SET
        else:
            try:
                sigmas = (float(args.sigma),)
            except ValueError:
                raise ConfigError(f"--sigma expects a number or 'multi', "
                                  f"got {args.sigma!r}") from None
        cfg.set("gnt", "sigmas", ",".join(str(s) for s in sigmas))
    if args.epsilon is not None:
        cfg.set("ant", "epsilon", args.epsilon)
    if args.seed is not None:
        cfg.set("seed", "master", args.seed)
    settings = _settings_from_config(cfg)

    data = _load_dataset(cfg, "train")
    spec = _arch_spec(cfg, data)
    if args.init_checkpoint:
        params = load_checkpoint(args.init_checkpoint, spec.fingerprint())
        clf = Classifier(spec, params)
    else:
        clf = build_classifier(spec, Rng(settings.seed, 0).derive("init"))

    run_dir = _prepare_run_dir(args.out, cfg)
    log = MetricsLog(run_dir / "metrics.csv")
    try:
        if args.mode == "vanilla":
            train_vanilla(clf, data, settings, log)
        elif args.mode == "gnt":
            train_gnt(clf, data, settings, log)
        else:
            clf, gen, _ = train_ant(clf, data, settings, log,
                                    gen_variant=cfg.get("ant", "variant", "k1"))
            save_checkpoint(gen.params, run_dir / "generator.ckpt")
    finally:
        log.close()
    save_checkpoint(clf.params, run_dir / "classifier.ckpt")
    print(f"run complete: {run_dir}")
    return EXIT_OK


def _load_classifier(cfg: Config, data: Dataset, checkpoint: str) -> Classifier:
    spec = _arch_spec(cfg, data)
    params = load_checkpoint(checkpoint, spec.fingerprint())
    return Classifier(spec, params)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    data = _load_dataset(cfg, "test")
    if args.limit:
        data = data.subset(slice(0, args.limit))
    clf = _load_classifier(cfg, data, args.checkpoint)
    run_dir = _prepare_run_dir(args.out, cfg)
    master_seed = cfg.get_int("seed", "master", 0)

    if args.what == "corruptions":
        report = corruption_accuracy(clf, data, master_seed=master_seed)
        with open(run_dir / "corruptions.csv", "w", newline="") as f:
            csv.writer(f).writerows(report.to_csv_rows())
        extra = {}
        if args.mce_baseline:
            baseline = _read_error_table(args.mce_baseline)
            ces, mean_mce = mce(report.errors(), baseline)
            extra = {"ce_per_kind": ces, "mce": mean_mce}
        (run_dir / "summary.json").write_text(report.summary_json(extra))
        print((run_dir / "summary.json").read_text())
    elif args.what == "epsilon-star":
        source = args.direction
        if source == "adversarial":
            gen = build_generator("k1", data.images.shape[1],
                                  Rng(master_seed, 0).derive("probe-init"), 0.5)
            opt = Adam(gen.params.tensors(), lr=1e-3, maximize=True)
            train_generator(clf, gen, data, args.eps_sphere, args.probe_steps,
                            opt, Rng(master_seed, 0).derive("probe-train"))
            source = gen
        result = epsilon_star(clf, data, source, tol=args.tol,
                              rng=Rng(master_seed, 0).derive("eps-star"))
        payload = {"family": result.family, "median": result.median,
                   "samples": result.sample_count,
                   "finite_fraction": float(np.isfinite(result.norms).mean())}
        (run_dir / "epsilon_star.json").write_text(json.dumps(payload, indent=2))
        print(json.dumps(payload, indent=2))
    else:  # pgd
        acc = pgd_accuracy(clf, data, args.norm, args.eps, args.step, args.iters)
        payload = {"norm": args.norm, "eps": args.eps, "step": args.step,
                   "iters": args.iters, "adversarial_accuracy": acc,
                   "clean_accuracy": clean_accuracy(clf, data)}
        (run_dir / "pgd.json").write_text(json.dumps(payload, indent=2))
        print(json.dumps(payload, indent=2))
    return EXIT_OK


def _read_error_table(path) -> dict:
    table: dict[str, list] = {}
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                table.setdefault(row["kind"], []).append(float(row["error"]))
    except OSError as e:
        raise DataError(f"cannot read baseline table {path}: {e}") from None
    except KeyError:
        raise DataError(f"{path}: expected columns kind,severity,error") from None
    return table


def cmd_corrupt(args) -> int:
    cfg = _resolve_config(args)
    data = _load_dataset(cfg, "test")
    if args.limit:
        data = data.subset(slice(0, args.limit))
    kinds = args.kinds.split(",") if args.kinds else list(CORRUPTION_KINDS)
    severities = [int(s) for s in args.severities.split(",")] if args.severities \
        else [1, 2, 3, 4, 5]
    run_dir = _prepare_run_dir(args.out, cfg)
    base = Rng(args.seed, 0)
    manifest = {"seed": args.seed, "count": len(data), "files": []}
    for kind in kinds:
        for sev in severities:
            corrupted = np.stack([
                corrupt(data.images[i],
                        CorruptionSpec(kind, sev, base.derive("sample", i).stream))
                for i in range(len(data))])
            ds = Dataset(corrupted, data.labels, f"corrupted:{kind}")
            img_path = run_dir / f"{kind}-s{sev}-images-idx3-ubyte"
            lbl_path = run_dir / f"{kind}-s{sev}-labels-idx1-ubyte"
            write_idx(ds, img_path, lbl_path)
            manifest["files"].append({
                "kind": kind, "severity": sev,
                "images": img_path.name, "labels": lbl_path.name,
                "sha256": hashlib.sha256(img_path.read_bytes()).hexdigest(),
            })
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(manifest['files'])} dataset pairs to {run_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Merge corruption CSVs into one Markdown table (kinds x runs)."""
    tables = {}
    for path in args.csvs:
        name = Path(path).stem
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        per_kind: dict[str, list] = {}
        for row in rows:
            per_kind.setdefault(row["kind"], []).append(float(row["accuracy"]))
        tables[name] = {k: float(np.mean(v)) for k, v in per_kind.items()}
    kinds = sorted({k for t in tables.values() for k in t})
    lines = ["| model | mean | " + " | ".join(kinds) + " |",
             "|---" * (len(kinds) + 2) + "|"]
    for name, t in tables.items():
        mean = np.mean([t[k] for k in kinds if k in t])
        cells = [f"{100 * t.get(k, float('nan')):.1f}" for k in kinds]
        lines.append(f"| {name} | {100 * mean:.1f} | " + " | ".join(cells) + " |")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antforge",
                                description="Noise-robustness training lab")
    p.add_argument("--version", action="version", version=f"antforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--set", action="append", metavar="section.key=value",
                        help="override a config entry")
        sp.add_argument("--out", default="run", help="output directory")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker cap (results are identical regardless)")

    pt = sub.add_parser("train", help="train a classifier")
    pt.add_argument("mode", choices=["vanilla", "gnt", "ant"])
    common(pt)
    pt.add_argument("--sigma", help="GNT sigma, or 'multi' for the preset set")
    pt.add_argument("--epsilon", type=float, help="ANT sphere radius")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--init-checkpoint", help="start from a pretrained checkpoint")
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("what", choices=["corruptions", "epsilon-star", "pgd"])
    pe.add_argument("checkpoint")
    common(pe)
    pe.add_argument("--limit", type=int, help="cap the number of test images")
    pe.add_argument("--mce", dest="mce_baseline",
                    help="baseline error CSV for mCE (columns kind,severity,error)")
    pe.add_argument("--direction", default="gaussian",
                    choices=["gaussian", "uniform", "adversarial"])
    pe.add_argument("--tol", type=float, default=1e-3)
    pe.add_argument("--probe-steps", type=int, default=300,
                    help="training budget of the adversarial probe generator")
    pe.add_argument("--eps-sphere", type=float, default=10.0,
                    help="sphere radius used while training the probe generator")
    pe.add_argument("--norm", default="linf", choices=["linf", "l2"])
    pe.add_argument("--eps", type=float, default=0.1)
    pe.add_argument("--step", type=float, default=0.01)
    pe.add_argument("--iters", type=int, default=100)
    pe.set_defaults(fn=cmd_eval)

    pc = sub.add_parser("corrupt", help="emit corrupted IDX datasets")
    common(pc)
    pc.add_argument("--kinds", help="comma-separated corruption kinds")
    pc.add_argument("--severities", help="comma-separated severities (1..5)")
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--limit", type=int)
    pc.set_defaults(fn=cmd_corrupt)

    pr = sub.add_parser("report", help="merge corruption CSVs into Markdown")
    pr.add_argument("csvs", nargs="+")
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AntForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
