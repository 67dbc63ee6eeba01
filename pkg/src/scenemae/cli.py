"""``scenemae`` command line.

One YAML config file feeds every command; each command reads its own section
(``synth``, ``pretrain``, ``probe``, ``ablate``, ``inspect-masks``) and flags
override file values. Every command writes ``run_manifest.json`` next to its
outputs.

Exit codes: 0 ok, 2 configuration error, 3 I/O or container error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import export_encoder
from .masking import plan_counts
from .model import PROFILES
from .pipeline import PROBE_TASKS, ObjectiveSettings, plan_for
from .synthgen import SynthConfig, generate_scene
from .teacher import ContainerError, load_dataset, read_dataset_index, save_scene, write_dataset_index
from .trainkit import (
    ABLATION_ROWS,
    PROBE_STEPS,
    NumericAbortError,
    OracleFeatures,
    TrainConfig,
    ablate,
    desk_config,
    linear_probe,
    prepare_all,
    pretrain,
    tiny_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"
PRESETS = {"base": TrainConfig, "desk": desk_config, "tiny": tiny_config}

log = logging.getLogger("scenemae")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return data


def section(config: dict, name: str) -> dict:
    sec = config.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(sec)


def synth_config(config: dict, seed=None) -> SynthConfig:
    sec = section(config, "synth")
    if seed is not None:
        sec["seed"] = seed
    return SynthConfig.from_dict(sec)


def train_config(sec: dict, **overrides) -> TrainConfig:
    """Build a TrainConfig from a ``preset`` (base/desk/tiny) plus field overrides."""
    sec = dict(sec)
    preset = sec.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if isinstance(sec.get("model"), str) and sec["model"] not in PROFILES:
        raise ConfigError(f"unknown model profile {sec['model']!r}")
    sec.update({k: v for k, v in overrides.items() if v is not None})
    base = PRESETS[preset]().to_dict()
    base.update(sec)
    return TrainConfig.from_dict(base)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(directory, command, args, effective, seeds, paths, started):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": effective,
        "config_hash": config_hash(effective),
        "seeds": seeds,
        "paths": {k: str(v) for k, v in paths.items()},
        "versions": {
            "scenemae": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": time.time() - started,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args, config, started):
    cfg = synth_config(config, args.seed)
    sec = section(config, "gen-synthetic")
    n = args.n_scenes if args.n_scenes is not None else int(sec.get("n_scenes", 200))
    first = int(sec.get("first_scene", 0))
    if n < 1:
        raise ConfigError("--n-scenes must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("scene_*"):
        shutil.rmtree(old)
    dirs = []
    for i in range(first, first + n):
        rec = generate_scene(cfg, i)
        d = out / f"scene_{i:05d}"
        save_scene(rec, d)
        dirs.append(d)
    write_dataset_index(out, dirs, cfg.label_names, {"D_img": cfg.d_img, "D_txt": cfg.d_txt},
                        extra={"synth_config": cfg.to_dict(), "scene_seeds": list(range(first, first + n))})
    write_manifest(out, "gen-synthetic", args, {"synth": cfg.to_dict(), "n_scenes": n, "first_scene": first},
                   {"synth_seed": cfg.seed}, {"out": out}, started)
    print(f"wrote {n} scenes to {out}")


def _n_labels(data) -> int:
    return len(read_dataset_index(data)["label_vocab"])


def cmd_pretrain(args, config, started):
    cfg = train_config(section(config, "pretrain"), epochs=args.epochs, max_steps=args.max_steps, seed=args.seed,
                       dataset=str(args.data) if args.data else None)
    if cfg.dataset is None:
        raise ConfigError("pretrain needs --data or pretrain.dataset in the config")
    out = Path(args.out)
    res = pretrain(cfg, out_dir=out, resume=args.resume)
    last = res.metrics[-1] if res.metrics else {}
    write_manifest(out, "pretrain", args, {"pretrain": cfg.to_dict()}, {"seed": cfg.seed},
                   {"data": cfg.dataset, "out": out, "checkpoint": res.checkpoint, "resume": args.resume}, started)
    print(json.dumps({"steps": res.steps, "checkpoint": str(res.checkpoint),
                      "final": {k: last.get(k) for k in ("l_mae", "l_scene", "l_object", "l_total")}}))


def cmd_probe(args, config, started):
    sec = section(config, "probe")
    task = args.task or sec.get("task", "patch-label")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    steps = args.steps if args.steps is not None else int(sec.get("steps", PROBE_STEPS))
    lr = float(sec.get("lr", 1e-2))
    frac = float(sec.get("train_fraction", 0.7))
    n_labels = _n_labels(args.data)
    scenes = load_dataset(args.data)
    if args.encoder == "oracle":
        encoder = OracleFeatures(task, n_labels)
    else:
        encoder = Path(args.encoder)
        if not (encoder / "manifest.json").exists():
            raise FileNotFoundError(f"{encoder} is not a checkpoint directory")
    result = linear_probe(encoder, scenes, task, n_labels, seed=seed, train_fraction=frac, steps=steps, lr=lr)
    report = {"task": task, "accuracy": result.accuracy, "train_accuracy": result.train_accuracy,
              "n_train": result.n_train, "n_test": result.n_test, "encoder": str(args.encoder)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(report, indent=1) + "\n")
    write_manifest(out, "probe", args, {"probe": {"task": task, "seed": seed, "steps": steps, "lr": lr,
                                                  "train_fraction": frac}},
                   {"seed": seed}, {"data": args.data, "encoder": args.encoder, "out": out}, started)
    print(f"accuracy {result.accuracy:.4f}")


def cmd_ablate(args, config, started):
    sec = section(config, "ablate")
    cfg = train_config(section(config, "pretrain"), epochs=args.epochs)
    seeds = [int(s) for s in (args.seeds.split(",") if args.seeds else sec.get("seeds", [0, 1, 2]))]
    task = args.task or sec.get("task", "patch-label")
    wanted = sec.get("rows")
    rows = [r for r in ABLATION_ROWS if wanted is None or r[0] in wanted]
    probe_data = args.probe_data or sec.get("probe_data")
    scenes = load_dataset(args.data)
    probe_scenes = load_dataset(probe_data) if probe_data else scenes
    out = Path(args.out)
    table = ablate(cfg, scenes, probe_scenes, rows=rows, seeds=seeds, task=task, n_labels=_n_labels(args.data),
                   out_dir=out, include_random_init=bool(sec.get("include_random_init", True)),
                   probe_steps=int(section(config, "probe").get("steps", PROBE_STEPS)))
    write_manifest(out, "ablate", args, {"pretrain": cfg.to_dict(), "ablate": {"seeds": seeds, "task": task,
                                                                                "rows": [r[0] for r in rows]}},
                   {"seeds": seeds}, {"data": args.data, "probe_data": probe_data, "out": out}, started)
    for row in table:
        print(f"{row['row']:<24} {row['mean_accuracy']:.4f}")


def _parse_ratios(text):
    try:
        r_w, r_f, r_d = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--ratios expects r_w,r_f,r_d, got {text!r}") from exc
    return r_w, r_f, r_d


def inspect_scene(scene, settings: ObjectiveSettings, seed) -> dict:
    plan = plan_for(scene, settings, seed)
    fg = scene.semantics.is_foreground
    n_fg, n_bg = int(fg.sum()), int((~fg).sum())
    real = plan.realized_counts()
    r_w, r_f, r_d = settings.ratios()
    expected = plan_counts(n_fg, n_bg, r_w, r_f, r_d, settings.ratio_over)
    remaining = real.n_total - real.n_dropped
    return {
        "scene_id": scene.scene_id,
        "n_points": scene.n_points,
        "n_patches": real.n_total,
        "n_foreground_patches": n_fg,
        "foreground_patch_fraction": n_fg / real.n_total,
        "n_dropped": real.n_dropped,
        "n_masked_fg": real.n_masked_fg,
        "n_masked_bg": real.n_masked_bg,
        "n_visible": real.n_visible,
        "realized_r_w": (real.n_masked_fg + real.n_masked_bg) / remaining if remaining else 0.0,
        "realized_r_f": real.n_masked_fg / n_fg if n_fg else 0.0,
        "realized_r_d": real.n_dropped / n_bg if n_bg else 0.0,
        "matches_closed_form": real == expected,
    }


def render_overlay(record, scene, plan, path):
    """Instance mask image with projected patch centers coloured by plan state."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .correspondence import project_points

    fig, ax = plt.subplots(figsize=(6, 4.5))
    pm = record.masks.pixel_mask.astype(float)
    pm[pm < 0] = np.nan
    ax.imshow(pm, cmap="tab20", interpolation="nearest")
    proj = project_points(scene.centers, record.camera)
    colours = {0: "white", 1: "red", 2: "black"}
    for state, colour in colours.items():
        sel = proj.valid & (plan.state == state)
        ax.scatter(proj.pixels[sel, 0], proj.pixels[sel, 1], s=14, c=colour, edgecolors="k", linewidths=0.3,
                   label=["visible", "masked", "dropped"][state])
    ax.set_title(record.scene_id)
    ax.legend(loc="lower right", fontsize=7)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_inspect_masks(args, config, started):
    sec = section(config, "inspect-masks")
    r_w, r_f, r_d = _parse_ratios(args.ratios) if args.ratios else (
        float(sec.get("r_w", 0.7)), float(sec.get("r_f", 0.8)), float(sec.get("r_d", 0.4)))
    settings = ObjectiveSettings(r_w=r_w, r_f=r_f, r_d=r_d, ratio_over=sec.get("ratio_over", "remaining"))
    profile = sec.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown model profile {profile!r}")
    mcfg = PROFILES[profile]
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    records = load_dataset(args.data)
    scenes = prepare_all(records, mcfg)
    rows = [inspect_scene(s, settings, [seed, i]) for i, s in enumerate(scenes)]
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "ratios": {"r_w": r_w, "r_f": r_f, "r_d": r_d, "ratio_over": settings.ratio_over},
        "profile": profile,
        "scenes": rows,
        "all_match_closed_form": all(r["matches_closed_form"] for r in rows),
        "mean_foreground_patch_fraction": float(np.mean([r["foreground_patch_fraction"] for r in rows])),
    }
    report.write_text(json.dumps(summary, indent=1) + "\n")
    paths = {"data": args.data, "report": report}
    if args.render:
        render_dir = Path(args.render)
        render_dir.mkdir(parents=True, exist_ok=True)
        for i, (rec, s) in enumerate(zip(records[:args.render_limit], scenes)):
            render_overlay(rec, s, plan_for(s, settings, [seed, i]), render_dir / f"{s.scene_id}.png")
        paths["render"] = render_dir
    write_manifest(report.parent, "inspect-masks", args, {"inspect-masks": summary["ratios"], "profile": profile},
                   {"seed": seed}, paths, started)
    print(f"{len(rows)} scenes; closed-form counts match: {summary['all_match_closed_form']}")


def cmd_export_encoder(args, config, started):
    out = export_encoder(args.checkpoint, args.out)
    write_manifest(out, "export-encoder", args, {}, {}, {"checkpoint": args.checkpoint, "out": out}, started)
    print(f"encoder written to {out}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenemae", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="YAML config file with per-command sections")
        sp.set_defaults(func=func)
        return sp

    g = add("gen-synthetic", cmd_gen_synthetic, "Generate a synthetic labeled scene dataset.")
    g.add_argument("--out", required=True, help="dataset directory to (over)write")
    g.add_argument("--n-scenes", type=int, help="number of scenes (default 200)")
    g.add_argument("--seed", type=int, help="generator seed (overrides synth.seed)")

    t = add("pretrain", cmd_pretrain, "Pre-train the masked autoencoder with distillation.")
    t.add_argument("--data", help="dataset directory (overrides pretrain.dataset)")
    t.add_argument("--out", required=True, help="run directory for metrics.jsonl and checkpoints/")
    t.add_argument("--resume", help="full checkpoint directory to resume from")
    t.add_argument("--epochs", type=int, help="override pretrain.epochs")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--seed", type=int, help="override pretrain.seed")

    pr = add("probe", cmd_probe, "Linear-probe a frozen encoder on per-patch labels.")
    pr.add_argument("--encoder", required=True, help="checkpoint directory, or 'oracle' for ground-truth features")
    pr.add_argument("--data", required=True, help="probe dataset directory")
    pr.add_argument("--task", choices=PROBE_TASKS, help="probe target (default patch-label)")
    pr.add_argument("--out", default="runs/probe", help="directory for probe.json (default runs/probe)")
    pr.add_argument("--seed", type=int, help="probe seed")
    pr.add_argument("--steps", type=int, help="optimizer steps for the linear classifier")

    a = add("ablate", cmd_ablate, "Pre-train and probe each ablation row.")
    a.add_argument("--data", required=True, help="pre-training dataset directory")
    a.add_argument("--probe-data", help="probe dataset directory (default: --data)")
    a.add_argument("--out", required=True, help="directory for per-row runs and ablation.json")
    a.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    a.add_argument("--task", choices=PROBE_TASKS, help="probe target")
    a.add_argument("--epochs", type=int, help="override pretrain.epochs")

    m = add("inspect-masks", cmd_inspect_masks, "Report realized masking statistics per scene.")
    m.add_argument("--data", required=True, help="dataset directory")
    m.add_argument("--ratios", help="r_w,r_f,r_d (default 0.7,0.8,0.4)")
    m.add_argument("--report", required=True, help="output JSON report path")
    m.add_argument("--render", help="directory for mask-overlay PNGs (optional)")
    m.add_argument("--render-limit", type=int, default=8, help="scenes to render (default 8)")
    m.add_argument("--seed", type=int, help="masking seed")

    e = add("export-encoder", cmd_export_encoder, "Strip decoder and heads from a full checkpoint.")
    e.add_argument("--checkpoint", required=True, help="full checkpoint directory")
    e.add_argument("--out", required=True, help="encoder checkpoint directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.time()
    try:
        config = load_config(args.config)
        args.func(args, config, started)
    except NumericAbortError as exc:
        print(f"numeric abort: {exc} (snapshot: {exc.snapshot_path})", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
