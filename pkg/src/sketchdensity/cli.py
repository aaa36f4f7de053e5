"""Command-line entry point.

Subcommands: ``prepare-data``, ``train --phase``, ``eval``, ``grid`` and
``edit-apply``. Relative paths in the config resolve against the output root
(``$SKD_OUTPUT_ROOT``, default the working directory). Exit codes: 0 success,
1 usage, 2 data or configuration error, 3 training error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import load_config
from .errors import ConfigurationError, InputError, TrainingError

OUTPUT_ROOT_ENV = "SKD_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3
PHASE_ROUTES = {
    "pretrain-mdtn": "pretrain_mdtn",
    "train-mdsg": "train_mdsg",
    "finetune": "joint_finetune",
}
CHECKPOINT_NAMES = {
    "pretrain_mdtn": "mdtn.ckpt",
    "train_mdsg": "mdsg.ckpt",
    "joint_finetune": "finetune.ckpt",
}

log = logging.getLogger("sketchdensity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")).resolve()


def _resolve(path):
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Audit record written once per command invocation."""

    def __init__(self, command, cfg, run_dir):
        self.data = {"command": command, "config_hash": cfg.digest(), "seed": cfg.run.seed,
                     "dataset_id": None, "start_time": _now(), "end_time": None,
                     "outputs": {}, "checkpoint_digests": {}}
        self.path = Path(run_dir) / f"{command}.manifest.json"

    def output(self, name, path):
        self.data["outputs"][name] = str(path)

    def checkpoint(self, name, path):
        self.output(name, path)
        self.data["checkpoint_digests"][name] = ckpt.file_digest(path)

    def write(self):
        self.data["end_time"] = _now()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        return self.path


def _dataset_id(root):
    from .dataset import dataset_digest
    try:
        return dataset_digest(root)
    except ConfigurationError:
        return None


def _checkpoint_path(cfg, phase, override=None):
    if override:
        return _resolve(override)
    return _resolve(cfg.run.output_dir) / CHECKPOINT_NAMES[phase]


# --------------------------------------------------------------------------- commands

def cmd_prepare_data(args, cfg):
    from .dataset import ingest_external, prepare_synthetic
    root = _resolve(args.out or cfg.data.root)
    man = RunManifest("prepare-data", cfg, _resolve(cfg.run.output_dir))
    if cfg.data.source == "synthetic":
        digest = prepare_synthetic(root, cfg.data.num_train, cfg.data.num_eval,
                                   cfg.model.resolution, cfg.data.seed,
                                   (cfg.data.texture_min, cfg.data.texture_max))
    else:
        digest = ingest_external(_resolve(cfg.data.source), root)
    man.data["dataset_id"] = digest
    man.output("dataset", root)
    print(f"dataset {root} digest {digest}")
    return man


def cmd_train(args, cfg):
    from . import training
    phase = PHASE_ROUTES[args.phase]
    data_root = _resolve(cfg.data.root)
    out = _checkpoint_path(cfg, phase, args.checkpoint)
    resume = _resolve(args.resume_from) if args.resume_from else None
    run_dir = _resolve(cfg.run.output_dir)
    man = RunManifest(f"train-{args.phase}", cfg, run_dir)
    man.data["dataset_id"] = _dataset_id(data_root)
    if phase == "pretrain_mdtn":
        res = training.pretrain_mdtn(cfg, data_root, out, variant=args.variant,
                                     resume_from=resume, stop_after_steps=args.stop_after)
    elif phase == "train_mdsg":
        res = training.train_mdsg(cfg, data_root, out, resume_from=resume,
                                  stop_after_steps=args.stop_after)
    else:
        mdsg = _checkpoint_path(cfg, "train_mdsg", args.mdsg)
        mdtn = _checkpoint_path(cfg, "pretrain_mdtn", args.mdtn)
        for p in (mdsg, mdtn):
            if not p.is_file():
                raise ConfigurationError(f"checkpoint not found: {p}")
        res = training.joint_finetune(cfg, mdsg, mdtn, data_root, out, resume_from=resume,
                                      stop_after_steps=args.stop_after)
    man.checkpoint(phase, res.checkpoint)
    loss_csv = res.checkpoint.with_suffix(".losses.csv")
    man.output("loss_csv", loss_csv)
    if res.history:
        from .plotting import plot_loss_history
        man.output("loss_plot", plot_loss_history(
            res.history, res.columns, res.checkpoint.with_suffix(".losses.png"), phase))
    print(f"{phase}: {res.checkpoint} sha256 {res.digest}")
    return man


def cmd_eval(args, cfg):
    from . import evaluation as ev
    from .dataset import load_split
    from .plotting import plot_linearity, plot_metric_bars
    from .training import load_mdsg, load_mdtn
    data_root = _resolve(cfg.data.root)
    run_dir = _resolve(cfg.run.output_dir)
    report_dir = _resolve(args.out) if args.out else run_dir / "eval"
    man = RunManifest("eval", cfg, run_dir)
    man.data["dataset_id"] = _dataset_id(data_root)
    data = load_split(data_root, "eval", cfg.run.eval_limit or None)
    mdtn_path = _checkpoint_path(cfg, "pretrain_mdtn", args.mdtn)
    if not mdtn_path.is_file():
        raise ConfigurationError(f"checkpoint not found: {mdtn_path}")
    model, meta = load_mdtn(mdtn_path)
    man.checkpoint("mdtn", mdtn_path)
    per = ev.evaluate_mdtn(model, data, args.density)
    corpus = (man.data["dataset_id"] or "")[:16]
    variant = meta.get("variant", "full")
    records = [
        ev.MetricsRecord(variant, corpus, cfg.run.seed, mode="reconstruction",
                         ssim=float(np.mean([p["ssim"] for p in per])),
                         recon_l1=float(np.mean([p["recon_l1"] for p in per])),
                         edge_iou=float(np.mean([p["edge_iou"] for p in per]))),
        ev.MetricsRecord(variant, corpus, cfg.run.seed, mode="transfer",
                         edge_iou=float(np.mean([p["transfer_edge_iou"] for p in per])),
                         style_distance=float(np.mean([p["style_distance"] for p in per]))),
    ]
    mdsg_path = _checkpoint_path(cfg, "train_mdsg", args.mdsg)
    if mdsg_path.is_file():
        g_c, _, _ = load_mdsg(mdsg_path)
        man.checkpoint("mdsg", mdsg_path)
        scales = ev.DEFAULT_LINEARITY_SCALES
        r2 = ev.linearity_score(g_c, data.images, scales)
        records.append(ev.MetricsRecord("mdsg", corpus, cfg.run.seed, mode="linearity",
                                        linearity_r2=r2))
        scores = ev.pc1_scores(g_c, data.images, scales)
        man.output("linearity_plot", plot_linearity(scores, scales, report_dir / "linearity.png"))
    variants = [v for v in (args.variants or "").split(",") if v]
    settings = [s for s in (args.mdsg_settings or "").split(",") if s]
    if variants or settings:
        records += ev.run_ablation(variants, data_root, cfg, run_dir / "ablation", settings,
                                   cfg.run.eval_limit or None)
        for metric in ("edge_iou", "style_distance", "linearity_r2"):
            man.output(f"{metric}_plot",
                       plot_metric_bars(records, metric, report_dir / f"{metric}.png"))
    ev.write_records(records, report_dir / "metrics.csv", report_dir / "metrics.json")
    (report_dir / "per_scene.json").write_text(json.dumps(per, indent=1))
    report = {"config_hash": cfg.digest(), "checkpoints": man.data["checkpoint_digests"],
              "dataset_id": man.data["dataset_id"], "modes": ["reconstruction", "transfer"],
              "records": len(records)}
    (report_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    for name in ("metrics.csv", "metrics.json", "per_scene.json", "report.json"):
        man.output(name, report_dir / name)
    print(f"wrote {len(records)} metric records to {report_dir}")
    return man


def _load_pair(cfg, args):
    from .training import load_mdsg, load_mdtn
    mdsg_path = _checkpoint_path(cfg, "train_mdsg", args.mdsg)
    mdtn_path = _checkpoint_path(cfg, "pretrain_mdtn", args.mdtn)
    for p in (mdsg_path, mdtn_path):
        if not p.is_file():
            raise ConfigurationError(f"checkpoint not found: {p}")
    g_c, _, _ = load_mdsg(mdsg_path)
    model, _ = load_mdtn(mdtn_path)
    return g_c, model, mdsg_path, mdtn_path


def _record(data_root, record_id):
    from .dataset import read_image, read_manifest
    from .errors import DataError
    ids = {r["id"] for r in read_manifest(data_root)}
    if record_id not in ids:
        raise DataError(record_id, "no such record in the dataset")
    return read_image(Path(data_root) / "images" / f"{record_id}.png")


def parse_scale_range(text):
    """``"0.1:0.8:0.1"`` -> (0.1, 0.2, ..., 0.8); a comma list is also accepted."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0 or hi < lo:
            raise InputError(f"bad scale range {text!r}")
        n = int(round((hi - lo) / step)) + 1
        return tuple(round(lo + i * step, 6) for i in range(n))
    return tuple(float(v) for v in text.split(","))


def cmd_grid(args, cfg):
    from . import evaluation as ev
    from .dataset import write_png
    from .plotting import plot_interpolation_grid
    data_root = _resolve(cfg.data.root)
    g_c, model, mdsg_path, mdtn_path = _load_pair(cfg, args)
    image = _record(data_root, args.image_id)
    reference = _record(data_root, args.reference_id or args.image_id)
    scales = parse_scale_range(args.scales)
    grid, cells = ev.interpolation_grid(g_c, model, image, reference, scales)
    out = _resolve(args.out) if args.out else _resolve(cfg.run.output_dir) / f"grid_{args.image_id}.png"
    write_png(out, np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8))
    man = RunManifest("grid", cfg, _resolve(cfg.run.output_dir))
    man.data["dataset_id"] = _dataset_id(data_root)
    man.checkpoint("mdsg", mdsg_path)
    man.checkpoint("mdtn", mdtn_path)
    man.output("grid", out)
    man.output("grid_figure", plot_interpolation_grid(grid, cells, out.with_suffix(".figure.png")))
    cells_path = out.with_suffix(".cells.json")
    cells_path.write_text(json.dumps(cells, indent=1))
    man.output("cells", cells_path)
    print(f"grid {out} ({len(cells)} columns)")
    return man


def cmd_edit_apply(args, cfg):
    import torch
    from .dataset import read_sketch, write_png
    from .mdsg import make_density_mask
    from .training import load_mdtn
    make_density_mask(args.density, 1, 1)  # validates the range
    data_root = _resolve(cfg.data.root)
    mdtn_path = _checkpoint_path(cfg, "pretrain_mdtn", args.mdtn)
    if not mdtn_path.is_file():
        raise ConfigurationError(f"checkpoint not found: {mdtn_path}")
    model, _ = load_mdtn(mdtn_path)
    sketch_path = _resolve(args.sketch)
    if not sketch_path.is_file():
        raise ConfigurationError(f"sketch not found: {sketch_path}")
    sketch = read_sketch(sketch_path)
    r = model.config.resolution
    if sketch.shape != (r, r):
        raise InputError(f"edited sketch is {sketch.shape[1]}x{sketch.shape[0]}, model expects {r}x{r}")
    reference = _record(data_root, args.reference_id)
    with torch.no_grad():
        model.eval()
        out = model(torch.from_numpy(sketch)[None, None],
                    torch.from_numpy(reference.transpose(2, 0, 1).copy())[None])
    image = out[0].permute(1, 2, 0).numpy()
    dest = _resolve(args.out) if args.out else _resolve(cfg.run.output_dir) / "edit.png"
    write_png(dest, np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    man = RunManifest("edit-apply", cfg, _resolve(cfg.run.output_dir))
    man.data["dataset_id"] = _dataset_id(data_root)
    man.data["density"] = float(args.density)
    man.checkpoint("mdtn", mdtn_path)
    man.output("image", dest)
    print(f"wrote {dest}")
    return man


# --------------------------------------------------------------------------- wiring

def build_parser():
    p = _Parser(prog="sketchdensity", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file (defaults apply when omitted)")
        return sp

    sp = common(sub.add_parser("prepare-data", help="materialise the key-density dataset"))
    sp.add_argument("--out", help="dataset directory (overrides data.root)")
    sp.set_defaults(func=cmd_prepare_data)

    sp = common(sub.add_parser("train", help="run one training phase"))
    sp.add_argument("--phase", required=True, choices=sorted(PHASE_ROUTES))
    sp.add_argument("--resume-from")
    sp.add_argument("--checkpoint", help="output checkpoint path")
    sp.add_argument("--variant", choices=["full", "no_skip", "no_multi_style"])
    sp.add_argument("--mdsg", help="MDSG checkpoint (finetune)")
    sp.add_argument("--mdtn", help="MDTN checkpoint (finetune)")
    sp.add_argument("--stop-after", type=int, help="stop after this many steps")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="metrics, ablations and report"))
    sp.add_argument("--mdtn")
    sp.add_argument("--mdsg")
    sp.add_argument("--density", type=float, default=0.8)
    sp.add_argument("--variants", help="comma list of MDTN variants to train and compare")
    sp.add_argument("--mdsg-settings", help="comma list among recon, recon+scale, recon+scale+afd")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("grid", help="density interpolation grid"))
    sp.add_argument("--mdsg")
    sp.add_argument("--mdtn")
    sp.add_argument("--image-id", required=True)
    sp.add_argument("--reference-id")
    sp.add_argument("--scales", default="0.1:0.8:0.1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_grid)

    sp = common(sub.add_parser("edit-apply", help="translate an edited sketch"))
    sp.add_argument("--mdtn")
    sp.add_argument("--sketch", required=True)
    sp.add_argument("--reference-id", required=True)
    sp.add_argument("--density", type=float, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_edit_apply)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_resolve(args.config) if args.config else None)
        manifest = args.func(args, cfg)
        manifest.write()
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigurationError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
