"""Command-line entry point: ``cfn {generate,train,eval,gradcheck,inspect-grid}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 internal invariant violation.  ``CFN_LOG`` selects the log level
(``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cf
from . import gradcheck as gc
from .backbone import ClipTooLong, ConfigError, Model, NetworkConfig, build, forward
from .dataio import CheckpointError, FormatError, InfeasibleSpec, generate, load_buffers, load_checkpoint, \
    load_dataset, read_manifest, save_checkpoint, save_dataset
from .fusion import map_to_fine
from .gridpool import GridSpec, InvariantError
from .losseval import EVAL_MODES, evaluate
from .train import SGD, EpochRecord, NonFiniteLoss, fit, overfit

log = logging.getLogger("coarsefine")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4
METRICS_SCHEMA = "cfn-metrics-v1"
OVERFIT_SCHEMA = "cfn-overfit-v1"
GRID_SCHEMA = "cfn-grid-v1"
DUMP_SCHEMA = "cfn-grid-dump-v1"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class InputError(ValueError):
    """A command was pointed at missing or unusable input."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    name = os.environ.get("CFN_LOG", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"CFN_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    root = logging.getLogger("coarsefine")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS[name])
    root.propagate = False


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args: argparse.Namespace) -> cf.RunConfig:
    overrides = _parse_sets(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "mode", None):
        overrides["eval.mode"] = args.mode
    if getattr(args, "data", None):
        overrides["paths.data"] = args.data
    cfg = cf.load(args.config, args.preset, overrides)
    log.info("resolved config:\n%s", cfg.dumps().rstrip())
    return cfg


def _load_split(cfg: cf.RunConfig, split: str):
    root = Path(cfg.paths.data) / split
    if not (root / "manifest.json").exists():
        raise InputError(f"no {split} dataset at {root}; run 'cfn generate' first")
    clips = load_dataset(root)
    if not clips:
        raise InputError(f"the {split} dataset at {root} is empty")
    c, _, h, w = clips[0].features.shape
    if c != cfg.data.channels or h != cfg.data.spatial or w != cfg.data.spatial:
        raise InputError(f"dataset at {root} has clips of {c} channels and {h}x{w} pixels; "
                         f"the config expects {cfg.data.channels} and {cfg.data.spatial}x{cfg.data.spatial}")
    return clips


def _config_from_manifest(manifest: dict) -> NetworkConfig:
    raw = manifest["config"]
    return NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def _model_from_checkpoint(path: str) -> tuple[Model, dict]:
    if not (Path(path) / "manifest.json").exists():
        raise InputError(f"no checkpoint at {path}")
    model = build(_config_from_manifest(read_manifest(path)))
    manifest = load_checkpoint(model, path)
    return model, manifest


class _Csv:
    """A CSV file whose first line names its schema; appending checks that line and the column header."""

    def __init__(self, path: Path, schema: str, columns: Sequence[str]):
        self.path = Path(path)
        self.header = [f"# {schema}", ",".join(columns)]
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, encoding="utf-8") as fh:
                head = [fh.readline().rstrip("\n"), fh.readline().rstrip("\n")]
            if head != self.header:
                raise InputError(f"{self.path} has header {head}, expected {self.header}; refusing to append")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("\n".join(self.header) + "\n")

    def append(self, row: Sequence) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dump_grid(path: Path, err: NonFiniteLoss) -> None:
    """Write whatever is known about the sampling grid of the failing batch."""
    grid = err.grid
    rows = []
    if isinstance(grid, GridSpec):
        p, q, s = (np.atleast_2d(t.values) for t in (grid.p, grid.q, grid.s))
        for n in range(p.shape[0]):
            rows += [[n, t, p[n, t], q[n, t], s[n, t]] for t in range(p.shape[1])]
    elif grid is not None:
        p = np.atleast_2d(np.asarray(grid))
        for n in range(p.shape[0]):
            rows += [[n, t, p[n, t], "", ""] for t in range(p.shape[1])]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {DUMP_SCHEMA},step={err.step}\nbatch_index,t,p_t,q_t,s_t\n")
        csv.writer(fh, lineterminator="\n").writerows([[_fmt(float(v)) if isinstance(v, np.floating) else v
                                                         for v in r] for r in rows])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = Path(args.out or cfg.paths.data)
    meta = {k: cf.format_value(v) for k, v in cfg.to_flat().items() if k.startswith("data.") or k == "net.input_stride"}
    for split, spec in (("train", cfg.train_spec()), ("val", cfg.val_spec())):
        clips = generate(spec)
        save_dataset(clips, root / split, meta=meta)
        log.info("wrote %d %s clips to %s", len(clips), split, root / split)
    print(f"wrote {cfg.data.num_clips} train and {cfg.train.val_clips} val clips to {root}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.paths.out)
    train_clips = _load_split(cfg, "train")
    val_clips = _load_split(cfg, "val")
    model = build(cfg.network())
    opt = SGD(model, cfg.optim)
    start = 0
    if args.checkpoint:
        if not (Path(args.checkpoint) / "manifest.json").exists():
            raise InputError(f"no checkpoint at {args.checkpoint}")
        manifest = load_checkpoint(model, args.checkpoint)
        opt.buffers.update(load_buffers(args.checkpoint))
        start = int(manifest.get("extra", {}).get("next_epoch", 0))
        log.info("resuming from %s at epoch %d", args.checkpoint, start)
    if args.init:
        if not (Path(args.init) / "manifest.json").exists():
            raise InputError(f"no checkpoint at {args.init}")
        load_checkpoint(model, args.init)
        log.info("initialized weights from %s", args.init)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    ckpt = out / "checkpoint"

    try:
        if cfg.train.overfit_steps:
            batch = train_clips[:cfg.train.batch_size]
            target = cfg.train.overfit_target or None
            losses = overfit(model, batch, cfg.optim, cfg.train.overfit_steps, cfg.seed, target)
            table = _Csv(out / "overfit.csv", OVERFIT_SCHEMA, ["step", "loss"])
            for i, v in enumerate(losses):
                table.append([i, float(v)])
            save_checkpoint(model, ckpt, extra={"next_epoch": start, "overfit_steps": len(losses)})
            print(f"overfit: {len(losses)} steps, final loss {losses[-1]:.6f}")
            return EXIT_OK

        table = _Csv(out / "metrics.csv", METRICS_SCHEMA, ["epoch", "train_loss", "val_map", "lr"])

        def on_epoch(rec: EpochRecord, o: SGD) -> None:
            table.append([rec.epoch, rec.train_loss, rec.val_map, rec.lr])
            save_checkpoint(model, ckpt, extra={"next_epoch": rec.epoch + 1}, buffers=o.buffers)

        remaining = max(0, cfg.train.epochs - start)
        history = fit(model, train_clips, val_clips, cfg.optim, remaining, cfg.train.batch_size, cfg.seed,
                      eval_mode="all-frames" if cfg.eval.mode == "all" else cfg.eval.mode,
                      start_epoch=start, opt=opt, on_epoch=on_epoch)
    except NonFiniteLoss as e:
        _dump_grid(out / "grid_dump.csv", e)
        raise
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train loss {last.train_loss:.5f}, val mAP {last.val_map:.4f}")
    else:
        print(f"nothing to do: the checkpoint already covers {cfg.train.epochs} epochs")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise InputError("eval needs --checkpoint")
    model, _ = _model_from_checkpoint(args.checkpoint)
    clips = _load_split(cfg, args.split)
    modes = EVAL_MODES if cfg.eval.mode == "all" else (cfg.eval.mode,)
    out = Path(args.out) if args.out else None
    for mode in modes:
        text = evaluate(model, clips, mode).to_csv()
        sys.stdout.write(text)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"eval-{mode}.csv").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gc.run(args.operator or None, seeds=args.seeds, base_seed=args.seed or 0)
    text = gc.report(results)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def grid_table(model: Model, clip) -> list[list]:
    """Rows ``clip_id, t, p_t, q_t, s_t, mu_t`` for one clip seen whole by the coarse stream."""
    cfg = model.config
    if cfg.pooling != "grid":
        raise ConfigError(f"inspect-grid needs a grid-pooling model, this one uses pooling={cfg.pooling}")
    feats = clip.features[None, :, ::cfg.input_stride]
    _, spec = forward(model, feats, None, return_grid=True)
    p, q, s = (t.values[0] for t in (spec.p, spec.q, spec.s))
    length = feats.shape[2]
    if cfg.fusion_centers == "uniform":
        s_mu = np.arange(len(s), dtype=np.float64) * cfg.ratio
    else:
        s_mu = s
    mu = map_to_fine(s_mu, length, length)
    return [[clip.clip_id, t, float(p[t]), float(q[t]), float(s[t]), float(mu[t])] for t in range(len(p))]


def cmd_inspect_grid(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.checkpoint:
        model, _ = _model_from_checkpoint(args.checkpoint)
    else:
        model = build(cfg.network())
    clips = _load_split(cfg, args.split)
    by_id = {c.clip_id: c for c in clips}
    clip_id = args.clip_id or clips[0].clip_id
    if clip_id not in by_id:
        raise InputError(f"clip {clip_id!r} is not in the {args.split} split")
    buf = io.StringIO()
    buf.write(f"# {GRID_SCHEMA}\nclip_id,t,p_t,q_t,s_t,mu_t\n")
    csv.writer(buf, lineterminator="\n").writerows([[_fmt(v) for v in r] for r in grid_table(model, by_id[clip_id])])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(cf.PRESETS), help="named override set applied before the file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="numeric library threads (default 1)")
    common.add_argument("--out", help="output location")
    common.add_argument("--data", help="dataset root (overrides paths.data)")

    parser = argparse.ArgumentParser(prog="cfn", description="Coarse-fine temporal detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic train and val splits")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model and append per-epoch metrics")
    t.add_argument("--checkpoint", help="resume from this checkpoint (weights, momentum and epoch)")
    t.add_argument("--init", help="load weights from this checkpoint (a partial one is allowed) and start at epoch 0")
    t.add_argument("--mode", choices=EVAL_MODES, help="validation scoring mode")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint directory")
    e.add_argument("--mode", choices=EVAL_MODES + ("all",), help="scoring mode; 'all' emits both")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    c.add_argument("--seeds", type=int, default=10, help="random instances per operator")
    c.add_argument("--operator", action="append", choices=sorted(gc.OPERATORS), help="restrict to this operator")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-grid", parents=[common], help="write the learned sampling grid of one clip")
    i.add_argument("--checkpoint", help="checkpoint directory (default: an untrained model from the config)")
    i.add_argument("--clip-id", help="clip to inspect (default: the first one)")
    i.add_argument("--split", default="val", choices=("train", "val"))
    i.set_defaults(func=cmd_inspect_grid)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT
    try:
        _setup_logging()
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        with threadpool_limits(args.threads):
            return args.func(args)
    except (NonFiniteLoss, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as e:
        print(f"error: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, InputError, FormatError, CheckpointError, InfeasibleSpec, ClipTooLong,
            FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001 - anything unexpected is a broken internal guarantee
        log.exception("unexpected failure")
        print(f"error: internal failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
