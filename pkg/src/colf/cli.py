"""Command line: make-scene, train, render, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import csv
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import _jit
from .geometry import Camera
from .metrics import average_2term, psnr, report, ssim
from .scene import PRESETS, DatasetError, load_dataset, load_png, make_scene, save_dataset, save_png, write_depth
from .trainer import (ABLATIONS, SceneContext, TrainConfig, Trainer, ablation_config, load_checkpoint,
                      render_view, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# flags that are spelled differently from the config field they set
ALIASES = {"iterations": "iters", "n_source_views": "views", "learning_rate": "lr"}


def _add_train_flags(p):
    """One flag per TrainConfig field (config-file key = flag name with underscores)."""
    for f in fields(TrainConfig):
        name = ALIASES.get(f.name, f.name)
        kind = _bool if f.type in (bool, "bool") else type(f.default)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None,
                       help=f"(default {f.default})")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None,
                   help="preset feature/regulariser switches (default full)")


def _config_from_args(args):
    cfg = TrainConfig()
    if args.ablation:
        cfg = ablation_config(args.ablation, cfg)
    over = {}
    for f in fields(TrainConfig):
        v = getattr(args, ALIASES.get(f.name, f.name), None)
        if v is not None:
            over[f.name] = v
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser():
    p = _Parser(prog="colf", description="Few-view radiance fields with cross-view fusion and ray regularisers.")
    p.add_argument("--threads", type=int, default=None, help="cap worker threads (env COLF_THREADS)")
    p.add_argument("--config", default=None, help="JSON file whose keys are flag names; flags override it")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("make-scene", help="render a synthetic posed dataset")
    s.add_argument("--preset", default="tri-sphere", choices=sorted(PRESETS))
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--sources", type=int, default=3)
    s.add_argument("--test", type=int, default=0, help="number of held-out views (last ones)")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layout", default="ring", choices=["ring", "hemisphere"])
    s.add_argument("--samples", type=int, default=512, help="oracle quadrature samples per ray")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train (or resume) a model")
    t.add_argument("--scenes", nargs="+", required=True)
    t.add_argument("--out", default="run", help="output directory (checkpoint + metrics.csv)")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--verbose", action="store_true")
    _add_train_flags(t)

    r = sub.add_parser("render", help="render views of a scene with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True, help="scene providing source views (and target poses)")
    r.add_argument("--views", default="test", help="'test', 'target', 'all', or comma-separated indices")
    r.add_argument("--poses", default=None, help="JSON list of camera records to render instead")
    r.add_argument("--depth", action="store_true", help="also write depth images and f64 sidecars")
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="PSNR / SSIM / Average(2-term) of renders against ground truth")
    e.add_argument("--scene", required=True)
    e.add_argument("--renders", default=None, help="directory of view_XXX.png produced by render")
    e.add_argument("--checkpoint", default=None, help="render held-out views from this checkpoint instead")
    e.add_argument("--views", default="test")
    e.add_argument("--csv", default=None)

    a = sub.add_parser("ablate", help="train and evaluate every ablation row")
    a.add_argument("--scenes", nargs="+", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    a.add_argument("--rows", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    a.add_argument("--out", default="ablation")
    a.add_argument("--verbose", action="store_true")
    _add_train_flags(a)
    return p


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from --config (keys = flag dest names)."""
    args = parser.parse_args(argv)
    if not args.config or not args.command:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config file {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    doc = {ALIASES.get(k, k): v for k, v in doc.items()}
    unknown = sorted(set(doc) - dests)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    sub.set_defaults(**doc)
    return parser.parse_args(argv)


def _view_list(ds, spec):
    if spec in ("test", "target", "source"):
        return ds.indices(spec)
    if spec == "all":
        return list(range(len(ds)))
    try:
        idx = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad view list {spec!r}") from None
    for i in idx:
        if not 0 <= i < len(ds):
            raise UsageError(f"view {i} out of range (scene has {len(ds)} views)")
    return idx


# ----------------------------------------------------------------- commands
def cmd_make_scene(args):
    if args.views < 2:
        raise UsageError("--views must be >= 2")
    if args.size < 2 or args.sources < 1 or args.test < 0:
        raise UsageError("--size must be >= 2, --sources >= 1, --test >= 0")
    fld = PRESETS[args.preset](args.seed)
    ds = make_scene(fld, args.views, size=args.size, seed=args.seed, layout=args.layout,
                    n_source=args.sources, n_test=args.test, n_samples=args.samples, name=args.preset)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} views to {args.out}")


def _load_scenes(paths):
    out = []
    for p in paths:
        if not (Path(p) / "scene.json").exists():
            raise FileNotFoundError(f"scene {p} not found (no scene.json)")
        out.append(load_dataset(p))
    return out


def cmd_train(args):
    cfg = _config_from_args(args)
    scenes = _load_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    if args.resume:
        tr = load_checkpoint(args.resume, scenes, cfg)
        remaining = max(cfg.iterations - tr.iteration, 0)
    else:
        tr = Trainer(cfg, scenes)
        remaining = cfg.iterations
    tr.train(remaining, log_path=out / "metrics.csv", checkpoint_path=ckpt, verbose=args.verbose)
    print(f"checkpoint {ckpt} at iteration {tr.iteration}")


def _render_cameras(args, ds):
    if args.poses:
        recs = json.loads(Path(args.poses).read_text())
        return [(f"pose_{i:03d}", Camera.from_dict(c)) for i, c in enumerate(recs)]
    return [(f"view_{i:03d}", ds.cameras[i]) for i in _view_list(ds, args.views)]


def cmd_render(args):
    ds = load_dataset(args.scene)
    tr = load_checkpoint(args.checkpoint, [ds])
    ctx = SceneContext(ds, tr.config.n_source_views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cam in _render_cameras(args, ds):
        img, depth, _ = render_view(tr.model, tr.config, ctx, cam)
        save_png(out / f"{name}.png", img)
        if args.depth:
            write_depth(out / f"{name}.depth", depth)
            lo, hi = ds.near, ds.far
            save_png(out / f"{name}_depth.png", np.repeat(((depth - lo) / (hi - lo))[..., None], 3, axis=-1))
        print(f"rendered {name}")


def cmd_eval(args):
    ds = load_dataset(args.scene)
    views = _view_list(ds, args.views)
    if not views:
        raise UsageError(f"scene has no {args.views!r} views to evaluate")
    if args.checkpoint:
        tr = load_checkpoint(args.checkpoint, [ds])
        ctx = SceneContext(ds, tr.config.n_source_views)
        rendered = [render_view(tr.model, tr.config, ctx, ds.cameras[i])[0] for i in views]
    elif args.renders:
        rendered = []
        for i in views:
            f = Path(args.renders) / f"view_{i:03d}.png"
            if not f.exists():
                raise FileNotFoundError(f"missing render {f}")
            rendered.append(load_png(f))
    else:
        raise UsageError("eval needs --renders or --checkpoint")
    rows, mean = report(rendered, [ds.images[i] for i in views])
    print(f"{'view':>6} {'PSNR':>8} {'SSIM':>8} {'Average(2-term)':>16}")
    for v, r in zip(views, rows):
        print(f"{v:>6} {r['psnr']:8.3f} {r['ssim']:8.4f} {r['average']:16.5f}")
    print(f"{'mean':>6} {mean['psnr']:8.3f} {mean['ssim']:8.4f} {mean['average']:16.5f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim", "average_2term"])
            for v, r in zip(views, rows):
                w.writerow([v, r["psnr"], r["ssim"], r["average"]])
            w.writerow(["mean", mean["psnr"], mean["ssim"], mean["average"]])
    return mean


def heldout_metrics(trainer):
    """Mean PSNR / SSIM / Average(2-term) over every scene's held-out views."""
    ps, ss = [], []
    for ctx in trainer.contexts:
        for v in ctx.test:
            img = render_view(trainer.model, trainer.config, ctx, ctx.dataset.cameras[v])[0]
            ps.append(psnr(img, ctx.dataset.images[v]))
            ss.append(ssim(img, ctx.dataset.images[v]))
    if not ps:
        raise DatasetError("no held-out ('test') views to evaluate")
    p, s = float(np.mean(ps)), float(np.mean(ss))
    return p, s, average_2term(p, s)


def cmd_ablate(args):
    base = _config_from_args(args)
    scenes = _load_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "seed", "psnr", "ssim", "average_2term"])
        for row in args.rows:
            for seed in args.seeds:
                cfg = replace(ablation_config(row, base), seed=seed)
                tr = Trainer(cfg, scenes)
                run = out / f"{row}_seed{seed}"
                run.mkdir(exist_ok=True)
                tr.train(log_path=run / "metrics.csv", verbose=args.verbose)
                save_checkpoint(run / "model.ckpt", tr)
                p, s, a = heldout_metrics(tr)
                w.writerow([row, seed, p, s, a])
                fh.flush()
                print(f"{row:>9} seed {seed}: PSNR {p:.3f} SSIM {s:.4f} Average(2-term) {a:.5f}", flush=True)
    print(f"wrote {table}")


COMMANDS = {"make-scene": cmd_make_scene, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _jit.tune_allocator()
        threads = args.threads if args.threads is not None else os.environ.get("COLF_THREADS")
        if threads not in (None, ""):
            try:
                _jit.set_threads(int(threads))
            except ValueError:
                raise UsageError(f"bad thread count {threads!r}") from None
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"colf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"colf: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
