"""Command-line entry point: phantom, simulate, train, eval, plot.

Exit codes: 0 success, 1 validation error (nothing written), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_schema, load_config
from .metrics import EvalReport, aggregate, evaluate, ssim
from .models import CheckpointError, build_model, load_checkpoint
from .motion import MotionConfig, corrupt_volume, subject_seed
from .priors import PriorMode, SliceLoader, build_samples, save_samples
from .training import TrainHistory, TrainingError, predict_samples, train
from .volume import (
    Contrast,
    DatasetManifest,
    VolumeIOError,
    build_manifest,
    generate_phantom,
    normalize,
    read_volume,
    split_subjects,
    write_volume,
)

log = logging.getLogger("moco_priors")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.to_json())


def _load_manifest(cfg: RunConfig) -> DatasetManifest:
    root = Path(cfg.data.root)
    path = root / cfg.data.manifest
    manifest = DatasetManifest.load(path) if path.is_file() else build_manifest(root)
    if not manifest.entries:
        raise ValidationFailure(f"no volumes found under {root}")
    return manifest


def _split(cfg: RunConfig, manifest: DatasetManifest) -> DatasetManifest:
    if manifest.split:
        return manifest
    need = [c.value for c in Contrast] if cfg.prior.kind == "contrasts" else [cfg.prior.target_contrast]
    try:
        return split_subjects(manifest, cfg.data.split, cfg.seed, require_contrasts=need)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None


def _loader(cfg: RunConfig, manifest: DatasetManifest) -> SliceLoader:
    d = cfg.data
    return SliceLoader(manifest, d.slice_axis, d.normalization, d.p_lo, d.p_hi)


def _samples(cfg: RunConfig, loader: SliceLoader, split: str, mode: PriorMode, epoch: int = 0):
    d = cfg.data
    return build_samples(loader, loader.manifest.subjects_in(split), cfg.motion, mode, epoch=epoch,
                         slice_fraction=d.slice_fraction, min_foreground=d.min_foreground,
                         foreground_threshold=d.foreground_threshold,
                         redraw_motion=d.redraw_motion_each_epoch and split == "train")


def _method_label(model_cfg, prior: dict | None) -> str:
    kind = (prior or {}).get("kind", "none")
    label = f"{model_cfg.arch}-{model_cfg.injection}"
    if model_cfg.injection == "dualbranch":
        label += f"-{model_cfg.fusion}"
    if model_cfg.injection != "baseline":
        label += f"-{kind}"
    return label


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, out: Path) -> int:
    ph = cfg.phantom
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i in range(ph.n_subjects):
        sid = f"PH{i:03d}"
        vols = generate_phantom(subject_seed(cfg.seed, sid), ph.size, ph.n_shapes, subject_id=sid, texture=ph.texture)
        entries[sid] = {}
        for contrast, v in vols.items():
            name = f"{sid}-SYN-{i:04d}-{contrast.value}.nii"
            write_volume(v, out / name)
            entries[sid][contrast.value] = name
    DatasetManifest(entries=entries).save(out / "manifest.json")
    _write_config(cfg, out)
    log.info("wrote %d phantom subjects to %s", ph.n_subjects, out)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    manifest = _load_manifest(cfg)
    target = cfg.prior.target_contrast
    subjects = [s for s in manifest.subjects if target in manifest.entries[s]]
    if not subjects:
        raise ValidationFailure(f"no {target} volumes to corrupt")
    (out / "corrupted").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    d = cfg.data
    worst = 0.0
    for sid in subjects:
        src = manifest.path(sid, target)
        v = read_volume(src, contrast=target, subject_id=sid)
        if not v.normalized:
            v = normalize(v, d.normalization, d.p_lo, d.p_hi)
        mcfg = MotionConfig(**{**asdict(cfg.motion), "seed": subject_seed(cfg.seed, sid), "slice_axis": d.slice_axis})
        corrupted, traces = corrupt_volume(v, mcfg)
        name = src.name if src.name.endswith((".nii", ".nii.gz", ".raw")) else f"{sid}-{target}.nii"
        write_volume(corrupted, out / "corrupted" / name)
        doc = {"subject": sid, "contrast": target, "source": str(src), "slice_axis": d.slice_axis,
               "traces": [t.to_dict() for t in traces]}
        (out / "traces" / f"{sid}.json").write_text(json.dumps(doc, indent=1) + "\n")
        worst = max(worst, float(np.abs(corrupted.data - v.data).max()))
    lo, hi = cfg.motion.rot_range_deg
    if lo == hi == 0:
        level = logging.WARNING
        log.log(level, "rotation range is (0, 0): output equals input (max abs difference %.2e)", worst)
    _write_config(cfg, out)
    log.info("corrupted %d volumes into %s", len(subjects), out)
    return EXIT_OK


def _prepare_training(cfg: RunConfig, resume: Path | None):
    manifest = _split(cfg, _load_manifest(cfg))
    for name in ("train", "val"):
        if not manifest.subjects_in(name):
            raise ValidationFailure(f"the {name} split is empty")
    if resume is not None and not resume.is_file():
        raise ValidationFailure(f"checkpoint to resume from not found: {resume}")
    return manifest


def cmd_train(cfg: RunConfig, out: Path, resume: Path | None = None) -> int:
    manifest = _prepare_training(cfg, resume)
    loader = _loader(cfg, manifest)
    mode = cfg.prior
    val = _samples(cfg, loader, "val", mode)
    first = _samples(cfg, loader, "train", mode, epoch=1)
    if not first or not val:
        raise ValidationFailure("no usable slices in the train or val split")
    f = cfg.model.downsample_factor
    h, w = first[0].target.shape
    if h % f or w % f:
        raise ValidationFailure(f"slice size {h}x{w} not divisible by {f} for this model")

    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    manifest.save(out / "manifest.json")

    start_epoch, optim_state, best = 0, None, -np.inf
    if resume is not None:
        model, meta, optim_state = load_checkpoint(resume)
        if asdict(model.cfg) != asdict(cfg.model):
            raise ValidationFailure("resume checkpoint was trained with a different model config")
        start_epoch = int(meta.get("epoch", 0))
        best = float(meta.get("best_val_ssim", meta.get("val_ssim", -np.inf)))
        hist = out / "history.csv"
        if hist.exists():
            best = max([best, *TrainHistory.read_csv(hist).val_ssim])
    else:
        model = build_model(cfg.model, seed=cfg.seed)

    cache = {1: first}

    def train_set(epoch):
        redraw = cfg.data.redraw_motion_each_epoch or (mode.kind == "similar_slices" and mode.redraw_each_epoch)
        if not redraw:
            return first
        if epoch not in cache:
            cache.clear()
            cache[epoch] = _samples(cfg, loader, "train", mode, epoch=epoch)
        return cache[epoch]

    meta = {"prior": asdict(mode) | {"contrasts": list(mode.contrasts)}, "label": _method_label(cfg.model, asdict(mode)),
            "seed": cfg.seed}
    final, history = train(model, train_set, val, cfg.train, out, start_epoch=start_epoch, optimizer_state=optim_state,
                           best_val=best, ssim_params=cfg.ssim, meta=meta)
    log.info("trained %d epochs; final val SSIM %.4f; checkpoint %s", len(history), history.val_ssim[-1], final)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoints) -> int:
    checkpoints = [Path(c) for c in checkpoints]
    missing = [str(c) for c in checkpoints if not c.is_file()]
    if missing:
        raise ValidationFailure(f"checkpoint(s) not found: {', '.join(missing)}")
    manifest = _split(cfg, _load_manifest(cfg))
    loader = _loader(cfg, manifest)
    split = cfg.eval.split
    models = []
    for path in checkpoints:
        try:
            model, meta, _ = load_checkpoint(path)
        except CheckpointError as exc:
            raise ValidationFailure(str(exc)) from None
        prior = meta.get("prior") or {"kind": "none"}
        mode = PriorMode(**{**prior, "contrasts": tuple(prior.get("contrasts", ("T1", "PD")))})
        if model.cfg.injection != "baseline" and mode.n_prior != model.cfg.n_prior:
            raise ValidationFailure(f"{path}: stored prior mode does not match the model's prior channels")
        models.append((path, model, mode, meta.get("label") or path.stem))

    base = _samples(cfg, loader, split, PriorMode(kind="none", target_contrast=cfg.prior.target_contrast))
    if not base:
        raise ValidationFailure(f"no usable slices in the {split} split")
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    _write_config(cfg, out)
    save_samples(base, out / "samples")

    reports = [evaluate(None, base, cfg.ssim, label="corrupted")]
    panel = {"clean": base[cfg.eval.panel_index % len(base)].target,
             "corrupted": base[cfg.eval.panel_index % len(base)].corrupted}
    seen = {"corrupted"}
    for path, model, mode, label in models:
        while label in seen:
            label = f"{label}+{path.stem}"
        seen.add(label)
        samples = base if mode.kind == "none" else _samples(cfg, loader, split, mode)
        preds = predict_samples(model, samples, cfg.eval.batch_size)
        lookup = {id(s): p for s, p in zip(samples, preds)}
        reports.append(evaluate(lambda s: lookup[id(s)], samples, cfg.ssim, label=label))
        panel[label] = preds[cfg.eval.panel_index % len(preds)]

    for r in reports:
        (out / "reports" / f"{_safe(r.label)}.json").write_text(r.to_json())
    table = aggregate(reports)
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.json").write_text(table.to_json())
    _render_boxplot(reports, out / "boxplot.png")
    _render_panel(panel, out / "example_panel.png")
    for row in table.rows:
        log.info("%-40s median SSIM %.4f", row["method"], row["median"])
    return EXIT_OK


def cmd_plot(reports_dir: Path, out: Path) -> int:
    files = sorted(reports_dir.glob("*.json"))
    if not files:
        raise ValidationFailure(f"no report JSON files in {reports_dir}")
    reports = [EvalReport.from_dict(json.loads(f.read_text())) for f in files]
    reports.sort(key=lambda r: (r.label != "corrupted", r.label))
    out.mkdir(parents=True, exist_ok=True)
    _render_boxplot(reports, out / "boxplot.png")
    (out / "comparison.csv").write_text(aggregate(reports).to_csv())
    return EXIT_OK


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_+" else "_" for ch in label)


def _render_boxplot(reports, path: Path) -> None:
    # best effort: the CSV is the contract
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping %s", path.name)
        return
    fig, ax = plt.subplots(figsize=(1.6 * len(reports) + 2, 4))
    ax.boxplot([r.ssim_output for r in reports])
    ax.set_xticks(range(1, len(reports) + 1), [r.label for r in reports], rotation=30, ha="right")
    ax.set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _render_panel(images: dict, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping %s", path.name)
        return
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    clean = images["clean"]
    for ax, (name, img) in zip(np.atleast_1d(axes), images.items()):
        ax.imshow(np.asarray(img).T, cmap="gray", vmin=0, vmax=1, origin="lower")
        title = name if name == "clean" else f"{name}\n{ssim(img, clean)[0]:.3f}"
        ax.set_title(title, fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.epochs=5 (repeatable)")
    common.add_argument("--out", type=Path, help="output directory (overrides config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="moco-priors", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("phantom", parents=[common], help="write a synthetic multi-contrast dataset")
    sp.add_argument("--n-subjects", type=int)
    sp.add_argument("--size", type=int, nargs=3, metavar=("H", "W", "D"))
    sp = sub.add_parser("simulate", parents=[common], help="corrupt target-contrast volumes with motion")
    sp.add_argument("--in", dest="in_dir", type=Path, help="input dataset directory (overrides data.root)")
    sp = sub.add_parser("train", parents=[common], help="train a correction network")
    sp.add_argument("--resume", type=Path, help="continue from a checkpoint written by train")
    sp = sub.add_parser("eval", parents=[common], help="evaluate checkpoints against the corrupted baseline")
    sp.add_argument("checkpoints", nargs="*", type=Path)
    sp = sub.add_parser("plot", parents=[common], help="re-render the box plot from saved reports")
    sp.add_argument("reports", type=Path, help="directory of report JSON files (eval's reports/)")
    sub.add_parser("schema", help="print the JSON schema of the run config")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK

    overrides = list(args.overrides)
    if args.command == "phantom":
        if args.n_subjects is not None:
            overrides.append(f"phantom.n_subjects={args.n_subjects}")
        if args.size is not None:
            overrides.append(f"phantom.size={json.dumps(args.size)}")
    if args.command == "simulate" and args.in_dir is not None:
        overrides.append(f"data.root={json.dumps(str(args.in_dir))}")
    try:
        cfg = load_config(args.config, overrides, seed=args.seed,
                          output_dir=str(args.out) if args.out is not None else None)
        cfg.validate(args.command)
        out = Path(cfg.output_dir)
        if args.command == "phantom":
            return cmd_phantom(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoints)
        return cmd_plot(args.reports, out)
    except (ConfigError, ValidationFailure) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (TrainingError, VolumeIOError, CheckpointError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
