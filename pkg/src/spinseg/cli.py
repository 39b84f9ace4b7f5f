"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 runtime/numeric failure.
Every output file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError, atomic_write_bytes
from .config import ConfigError, TrainConfig, parse_kv
from .data.split import build_split, read_manifest, write_manifest
from .data.synthetic import SynthSpec, generate_corpus
from .data.volume import Volume, normalize_volume, read_volume, write_volume
from .evaluate import evaluate_predictions, format_table, predict_volume, run_ablation
from .gradcheck import gradcheck
from .imageio import write_feature_grid, write_overlay
from .model import SpinModel
from .tensor import Tensor, no_grad
from .train import TrainingError, train, write_loss_curve

log = logging.getLogger("spinseg")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shape(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("shape must be C,H,W")
    return tuple(parts)


def _sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> TrainConfig:
    base = parse_kv(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    base.update(_sets(getattr(args, "set", None)))
    return TrainConfig.from_dict(base)


def load_dataset(directory, normalize: bool = True) -> list[Volume]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    files = sorted(directory.glob("*.spv"))
    if not files:
        raise FileNotFoundError(f"no .spv volumes in {directory}")
    vols = [read_volume(f) for f in files]
    return [normalize_volume(v) for v in vols] if normalize else vols


def _provenance(path: Path, lines: dict) -> None:
    atomic_write_bytes(path, "".join(f"{k}={v}\n" for k, v in lines.items()).encode())


def _run_config_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".config")


def load_run(ckpt) -> tuple[SpinModel, TrainConfig, float]:
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    side = _run_config_path(ckpt)
    if not side.exists():
        raise FileNotFoundError(f"checkpoint config not found: {side}")
    kv = parse_kv(side.read_text())
    if "mu" not in kv:
        raise ConfigError("mu", f"missing from {side}")
    mu = float(kv.pop("mu"))
    kv.pop("steps", None)
    cfg = TrainConfig.from_dict(kv)
    params, _ = checkpoint.load(ckpt)
    model = SpinModel(cfg.model_config(), seed=cfg.seed)
    model.load_state_dict(params)
    return model, cfg, mu


# ----------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    spec = SynthSpec(
        shape=args.shape,
        lesions_per_slice=args.lesions_per_slice,
        lesion_slice_fraction=args.lesion_slice_fraction,
        small_lesion_fraction=args.small_lesion_fraction,
    )
    vols = generate_corpus(args.volumes, spec, args.seed)
    out = Path(args.out)
    for v in vols:
        write_volume(out / f"{v.id}.spv", v)
    _provenance(out / "provenance.txt", {"command": "synth", "seed": args.seed, **{
        k: getattr(spec, k) for k in spec.__dataclass_fields__}})
    log.info("wrote %d volumes to %s", len(vols), out)
    return EXIT_OK


def cmd_split(args) -> int:
    vols = load_dataset(args.data, normalize=False)
    m = build_split(vols, np.random.default_rng(args.seed), args.test_fraction)
    write_manifest(args.out, m)
    log.info("train=%d test=%d small-lesion images=%d", len(m.train_ids), len(m.test_ids), len(m.small_lesion_images))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    vols = load_dataset(args.data)
    if args.manifest:
        ids = set(read_manifest(args.manifest).train_ids)
        missing = sorted(ids - {v.id for v in vols})
        if missing:
            raise FileNotFoundError(f"volumes missing from {args.data}: {', '.join(missing)}")
        vols = [v for v in vols if v.id in ids]
    log.info("config:\n%s", cfg.to_text())
    out = Path(args.out)
    res = train(vols, cfg, checkpoint_path=out)
    _provenance(_run_config_path(out), {**parse_kv(cfg.to_text()), "mu": repr(res.mu), "steps": len(res.losses)})
    if args.loss_curve:
        write_loss_curve(args.loss_curve, res.losses)
    print(f"trained {len(res.losses)} steps; final loss {res.losses[-1][1]:.6g}; checkpoint {out}")
    return EXIT_OK


def _oracle_predict(v: Volume) -> tuple[np.ndarray, np.ndarray]:
    lab = v.labels if v.labels is not None else np.zeros(v.shape, np.uint8)
    return lab.astype(np.float32), lab.astype(np.uint8)


def cmd_predict(args) -> int:
    vols = load_dataset(args.data)
    if args.manifest:
        ids = set(read_manifest(args.manifest).test_ids)
        vols = [v for v in vols if v.id in ids]
    if args.oracle:
        model, mu = None, 0.0
    else:
        if not args.checkpoint:
            raise UsageError("predict: --checkpoint is required unless --oracle is given")
        model, _, mu = load_run(args.checkpoint)
    out = Path(args.out)
    for v in vols:
        conf, mask = _oracle_predict(v) if model is None else predict_volume(model, v, mu)
        write_volume(out / f"{v.id}.conf.spv", Volume(v.id, conf))
        write_volume(out / f"{v.id}.mask.spv", Volume(v.id, mask.astype(np.float32), mask))
        if args.overlay_dir:
            for t in range(v.num_slices):
                write_overlay(Path(args.overlay_dir) / f"{v.id}_{t:03d}.ppm", v.intensities[t], mask[t], v.labels[t] if v.labels is not None else None)
        if args.dump_features and model is not None:
            _dump_features(model, v, mu, Path(args.dump_features))
    _provenance(out / "provenance.txt", {"command": "predict", "checkpoint": args.checkpoint or "oracle"})
    log.info("predicted %d volumes into %s", len(vols), out)
    return EXIT_OK


def _dump_features(model: SpinModel, v: Volume, mu: float, directory: Path) -> None:
    from .data.windows import iter_windows

    for w in iter_windows(v, model.config.input_slices, mu):
        with no_grad():
            o = model(w.x[None])
        stem = directory / f"{v.id}_{w.center_index:03d}"
        write_feature_grid(f"{stem}_g.pgm", o.g.data[0])
        write_feature_grid(f"{stem}_f0.pgm", o.f0.data[0])
        write_feature_grid(f"{stem}_h.pgm", o.h.data[0])
        if "embed2x" in o.features:
            write_feature_grid(f"{stem}_spg.pgm", o.features["embed2x"].data[0])


def cmd_eval(args) -> int:
    vols = load_dataset(args.data)
    m = read_manifest(args.manifest)
    by_id = {v.id: v for v in vols}
    missing = [i for i in m.test_ids if i not in by_id]
    if missing:
        raise FileNotFoundError(f"volumes missing from {args.data}: {', '.join(missing)}")
    preds = {}
    for vid in m.test_ids:
        p = Path(args.predictions) / f"{vid}.mask.spv"
        if not p.exists():
            raise FileNotFoundError(f"prediction not found: {p}")
        pv = read_volume(p)
        preds[vid] = pv.labels if pv.labels is not None else (pv.intensities > 0.5).astype(np.uint8)
    rep = evaluate_predictions(args.method, preds, {i: by_id[i] for i in m.test_ids}, m.small_lesion_images,
                               config_text=f"predictions={args.predictions}\nmanifest={args.manifest}\n")
    atomic_write_bytes(args.out, rep.to_text().encode())
    print(format_table([rep]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    vols = load_dataset(args.data)
    m = read_manifest(args.manifest)
    arms = args.arms.split(",") if args.arms else None
    reports = run_ablation(vols, m, cfg, arms=arms, on_arm=lambda a, r: log.info("arm %s done", a))
    text = format_table(reports) + "\n[config]\n" + cfg.to_text()
    atomic_write_bytes(args.out, text.encode())
    print(format_table(reports), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    model = SpinModel(cfg.model_config(), seed=cfg.seed, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[:] = rng.normal(0, 0.1, size=p.shape)
    x = Tensor(rng.random((1, cfg.input_slices, args.size, args.size)))
    y = (rng.random((1, 1, args.size, args.size)) > 0.5).astype(np.float64)
    from .losses import LOSSES

    loss_fn = LOSSES[cfg.loss]
    report = gradcheck(lambda: loss_fn(model(x).f, y), model.params, tolerance=args.tolerance,
                       max_checks=args.max_checks or None, rng=rng)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_param_count(args) -> int:
    cfg = _config(args)
    counts = SpinModel(cfg.model_config(), seed=cfg.seed).count_parameters()
    for k, v in counts.items():
        print(f"{k}\t{v}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spinseg", description="Subpixel-embedding lesion segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic SPV1 volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--volumes", type=int, default=8)
    s.add_argument("--shape", type=_shape, default=(16, 64, 64))
    s.add_argument("--lesions-per-slice", type=int, default=1)
    s.add_argument("--lesion-slice-fraction", type=float, default=0.5)
    s.add_argument("--small-lesion-fraction", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("split", help="write a train/test manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_split)

    def model_opts(s):
        s.add_argument("--config", help="key=value training/model config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--loss-curve")
    model_opts(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="predict confidence and mask volumes")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", help="restrict to the test split")
    s.add_argument("--out", required=True)
    s.add_argument("--oracle", action="store_true", help="emit ground-truth labels as predictions")
    s.add_argument("--overlay-dir")
    s.add_argument("--dump-features", metavar="DIR")
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("eval", help="score predictions against labels")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="spin")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train and evaluate every ablation arm")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--arms", help="comma-separated subset of arms")
    model_opts(s)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model at 64-bit")
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.add_argument("--max-checks", type=int, default=8, help="elements probed per tensor (0 = all)")
    model_opts(s)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("param-count", help="per-submodule parameter counts")
    model_opts(s)
    s.set_defaults(fn=cmd_param_count)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("command=%s args=%s", args.command, {k: v for k, v in vars(args).items() if k != "fn"})
    try:
        return args.fn(args)
    except (UsageError, ConfigError, FileNotFoundError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
