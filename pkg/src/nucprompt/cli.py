"""Command-line entry point: ``python -m nucprompt {generate,train,predict,eval,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, NucPromptError

log = logging.getLogger("nucprompt")


class UsageError(Exception):
    """Bad flags, config keys or paths; reported with exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as exc:  # both parsers raise their own error families
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping at top level")
    return data


def model_config(args, **forced):
    """ModelConfig from defaults, then the config file, then explicit flags."""
    from .pipeline import ModelConfig

    data = _load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "tau": getattr(args, "tau", None),
        "augment": True if getattr(args, "augment", False) else None,
        "checkpoint_every": getattr(args, "checkpoint_every", None),
        "embedding_file": getattr(args, "embedding_file", None),
        "seed": getattr(args, "seed", None),
    }
    if getattr(args, "no_dgpom", False):
        flags["use_dgpom"] = False
    if getattr(args, "no_cksim", False):
        flags["use_cksim"] = False
    if getattr(args, "descriptions", None):
        from .cksim import read_descriptions

        flags["descriptions"] = read_descriptions(args.descriptions)
    data.update({k: v for k, v in flags.items() if v is not None})
    data.update(forced)
    try:
        return ModelConfig.from_json(data)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _existing_dir(path, what) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"{what} {p} is not a dataset directory (no manifest.json)")
    return p


def _segmenter(args, train_scenes=None):
    from .segmenter import BaselineSegmenter, ExternalSegmenter, median_equivalent_radius

    if args.segmenter_cmd:
        return ExternalSegmenter(shlex.split(args.segmenter_cmd))
    radius = args.seg_radius
    if radius is None:
        radius = median_equivalent_radius(train_scenes) if train_scenes else 5.0
    return BaselineSegmenter(radius=radius, fg_threshold=args.fg_threshold)


def _scene_ids(root):
    from .synthdata import read_manifest

    return [e["id"] for e in read_manifest(root).entries]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    from .synthdata import SceneConfig, generate_scene, write_dataset

    try:
        cfg = SceneConfig(height=args.size, width=args.size, n_classes=args.classes,
                          count_range=tuple(args.count), size_range=tuple(args.radius_range))
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    scenes = [generate_scene(cfg, args.seed * 100003 + i) for i in range(args.scenes)]
    manifest = write_dataset(scenes, args.out, n_classes=args.classes, seed=args.seed)
    n_nuclei = sum(s.n for s in scenes)
    print(f"wrote {len(manifest.entries)} scenes to {args.out}: C={manifest.n_classes}, seed={args.seed}, "
          f"{n_nuclei} nuclei, {args.size}x{args.size}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import train
    from .synthdata import read_dataset, read_manifest

    root = _existing_dir(args.data, "--data")
    n_classes = read_manifest(root).n_classes
    cfg = model_config(args, n_classes=n_classes)
    result = train(read_dataset(root), cfg, args.out, log_every=args.log_every)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} steps, final total loss {last.get('total', float('nan')):.6g}; "
          f"wrote {Path(args.out) / 'model.ckpt'} and {Path(args.out) / 'loss.csv'}")
    return 0


def _load_model(args):
    from .pipeline import load_checkpoint

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    if args.tau is not None:
        model.config = replace(model.config, tau=args.tau)
    return model


def cmd_predict(args) -> int:
    from .pipeline import predict
    from .synthdata import read_dataset

    root = _existing_dir(args.data, "--data")
    model = _load_model(args)
    segmenter = _segmenter(args)
    out = Path(args.out)
    for sub in ("prompts", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scenes = read_dataset(root)
    for sid, scene in zip(_scene_ids(root), scenes):
        prompts = predict(model, scene).prompts
        prompts.save(out / "prompts" / f"{sid}.json")
        segmenter(scene.image, prompts).save(out / "masks" / f"{sid}.png", out / "masks" / f"{sid}.json")
    print(f"wrote prompts and instance maps for {len(scenes)} scenes to {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import write_report
    from .pipeline import evaluate, gt_prompts, run_ablation, write_ablation_table
    from .synthdata import read_dataset, read_manifest

    root = _existing_dir(args.data, "--data")
    n_classes = read_manifest(root).n_classes
    scenes = read_dataset(root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.ablate:
        if not args.train_data:
            raise UsageError("--ablate needs --train-data")
        train_scenes = read_dataset(_existing_dir(args.train_data, "--train-data"))
        cfg = model_config(args, n_classes=n_classes)
        rows = run_ablation(train_scenes, scenes, cfg, seeds=tuple(args.seeds),
                            segmenter=_segmenter(args, train_scenes), radius=args.match_radius,
                            out_dir=out / "runs")
        write_ablation_table(rows, out / "ablation.csv")
        (out / "ablation.json").write_text(json.dumps(rows, indent=1))
        for row in rows:
            print(f"dgpom={int(row['use_dgpom'])} cksim={int(row['use_cksim'])} "
                  f"cls_f={row['cls_f']:.4f} det_r={row['det_r']:.4f} pq={row['pq']:.4f}")
        return 0

    if args.prompts == "gt":
        source = gt_prompts
    else:
        source = _load_model(args)
    train_scenes = read_dataset(_existing_dir(args.train_data, "--train-data")) if args.train_data else scenes
    evals = evaluate(scenes, source, _segmenter(args, train_scenes), n_classes=n_classes,
                     radius=args.match_radius)
    summary = write_report(evals, out, _scene_ids(root))
    print(" ".join(f"{k}={summary[k]:.4f}" for k in ("det_f", "cls_f", "dice", "aji", "pq", "mpq")))
    return 0


def cmd_plot(args) -> int:
    from . import plots

    written = []
    if args.loss:
        written += plots.plot_loss_curves(args.loss, args.out)
    if args.metrics:
        written += plots.plot_class_pq(args.metrics, args.out)
    if args.overlay:
        if not args.data:
            raise UsageError("--overlay needs --data")
        root = _existing_dir(args.data, "--data")
        written += plots.plot_overlays(root, args.overlay, args.out, ids=args.ids)
    if not (args.loss or args.metrics or args.overlay):
        raise UsageError("nothing to plot: give --loss, --metrics or --overlay")
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="YAML or JSON file of model settings; flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--epochs", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--augment", action="store_true")
    model.add_argument("--no-dgpom", action="store_true", help="disable distribution-guided proposal offsets")
    model.add_argument("--no-cksim", action="store_true", help="disable class-knowledge injection")
    model.add_argument("--embedding-file", help="class embedding matrix (header 'C C_k' + float32 rows)")
    model.add_argument("--descriptions", help="UTF-8 file, one class description per line")

    seg = argparse.ArgumentParser(add_help=False)
    seg.add_argument("--tau", type=float, help="prompt score threshold")
    seg.add_argument("--seg-radius", type=float, help="baseline segmenter disk radius "
                     "(default: median equivalent radius of the training scenes)")
    seg.add_argument("--fg-threshold", type=float, help="baseline segmenter foreground gray threshold")
    seg.add_argument("--segmenter-cmd", help="external adapter: CMD IMAGE PROMPTS OUT_MASK OUT_CLASSES")

    parser = argparse.ArgumentParser(prog="nucprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--count", type=int, nargs=2, default=(10, 20), metavar=("MIN", "MAX"))
    p.add_argument("--radius-range", type=float, nargs=2, default=(3.0, 8.0), metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common, model], help="train a prompt model")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common, seg], help="write prompts and instance maps")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common, model, seg], help="metrics report or ablation table")
    p.add_argument("--data", required=True, help="evaluation split")
    p.add_argument("--train-data", help="training split (segmenter radius; required by --ablate)")
    p.add_argument("--checkpoint")
    p.add_argument("--prompts", choices=("model", "gt"), default="model")
    p.add_argument("--ablate", action="store_true", help="train and score the four on/off configurations")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--match-radius", type=float, default=12.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="loss curves, per-class PQ bars, overlays")
    p.add_argument("--loss", help="loss.csv from train")
    p.add_argument("--metrics", help="metrics.csv from eval")
    p.add_argument("--overlay", help="predict output directory")
    p.add_argument("--data", help="dataset the overlay predictions belong to")
    p.add_argument("--ids", nargs="+", help="scene ids to overlay (default: first four)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nucprompt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NucPromptError, OSError, RuntimeError) as exc:
        print(f"nucprompt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
