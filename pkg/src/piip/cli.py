"""``piip`` command line: build, flops, params, forward, gradcheck, train-toy, sweep.

Exit codes: 0 success, 1 usage or validation error, 2 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import struct
import sys
from pathlib import Path

import numpy as np

from .config import VIT_SIZES, PiipConfig, preset
from .config_io import load_config
from .cost import REFERENCE_COSTS, analyze, sweep, sweep_csv
from .errors import NumericError, PiipError
from .train import DivergenceError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _add_model_source(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default=None, help="named preset (default piip-micro)")
    g.add_argument("--config", type=Path, help="JSON config file")


def _model_cfg(args) -> PiipConfig:
    if getattr(args, "config", None):
        return load_config(args.config).model
    return preset(args.preset or "piip-micro")


def read_planar(path: Path) -> np.ndarray:
    """Raw image file: three little-endian u32 (C, H, W) then C*H*W float32 values."""
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise PiipError(f"{path}: image header truncated")
    c, h, w = struct.unpack("<3I", buf[:12])
    want = 12 + 4 * c * h * w
    if len(buf) != want:
        raise PiipError(f"{path}: expected {want} bytes for {c}x{h}x{w}, found {len(buf)}")
    return np.frombuffer(buf, "<f4", offset=12).reshape(c, h, w).astype(np.float32)


def write_planar(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    Path(path).write_bytes(struct.pack("<3I", *image.shape) + image.tobytes())


def _emit_csv(text: str, path: Path | None) -> None:
    if path:
        Path(path).write_text(text)


def cmd_build(args) -> int:
    from .model import build_model

    cfg = _model_cfg(args).validate()
    model = build_model(cfg, seed=args.seed)
    print(f"mode {cfg.mode}, {cfg.num_branches} branch(es), {cfg.interactions.count} interaction point(s)")
    for j, b in enumerate(cfg.branches, 1):
        print(f"  branch {j}: depth {b.depth}, dim {b.dim}, heads {b.heads}, patch {b.patch}, "
              f"resolution {b.resolution} (grid {b.grid}x{b.grid})")
    print(f"  interactions: {cfg.interactions.attention}, {cfg.interactions.direction}")
    print(f"parameters: {sum(p.size for p in model.parameters())}")
    return EXIT_OK


def _report(args) -> int:
    cfg = _model_cfg(args).validate()
    rep = analyze(cfg)
    print(rep.table())
    ref = REFERENCE_COSTS.get(args.preset or "")
    if ref:
        print("\nreference comparison")
        for row, (params, macs) in ref.items():
            op, om = rep.group(row)
            print(f"  {row:<14} params {op / 1e6:8.2f}M vs {params / 1e6:6.1f}M "
                  f"({100 * (op / params - 1):+.1f}%)   MACs {om / 1e9:7.2f}G vs "
                  f"{macs / 1e9:5.1f}G ({100 * (om / macs - 1):+.1f}%)")
    _emit_csv(rep.to_csv(), args.csv)
    return EXIT_OK


def cmd_forward(args) -> int:
    from .model import build_model, forward

    cfg = _model_cfg(args).validate()
    model = build_model(cfg, seed=args.seed)
    if args.image:
        image = read_planar(args.image)
    else:
        side = cfg.max_resolution
        image = np.random.default_rng(args.seed).standard_normal((3, side, side)).astype(np.float32)
    out = forward(model, image[None]).data
    if not np.isfinite(out).all():
        raise NumericError("forward produced non-finite output")
    digest = hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()[:16]
    print(f"output shape {tuple(out.shape)}")
    print(f"checksum sum={float(out.sum(dtype=np.float64)):.9e} sha256={digest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    res = run_suite(_model_cfg(args), coords_per_tensor=args.coords, directions=args.directions,
                    log=print)
    worst = max(res.values())
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_train_toy(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import train_toy

    settings = load_config(args.config).train if args.config else None
    cfg = _model_cfg(args)
    pick = lambda flag, name, default: flag if flag is not None else (  # noqa: E731
        getattr(settings, name) if settings else default)
    epochs = pick(args.epochs, "epochs", 30)
    lr = pick(args.lr, "lr", 0.1)
    batch = pick(args.batch, "batch", 16)
    seed = pick(args.seed, "seed", 0)

    def log(row):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.4f}  loss {row['train_loss']:.4f}  "
              f"train {row['train_acc']:.3f}  test {row['test_acc']:.3f}")

    try:
        result = train_toy(cfg, dataset_seed=args.dataset_seed, epochs=epochs, batch=batch, lr=lr,
                           seed=seed, log=log, return_model=bool(args.checkpoint))
    except DivergenceError as exc:
        print(f"diverged: non-finite loss at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit_csv(result.to_csv(), args.csv)
    if args.checkpoint:
        save_checkpoint(result.model, args.checkpoint)
    return EXIT_OK


def cmd_sweep(args) -> int:
    letters = args.menu.upper()
    if not letters or any(c not in VIT_SIZES for c in letters):
        raise PiipError(f"menu must be ViT size letters from {''.join(VIT_SIZES)}, got {args.menu!r}")
    grid = [int(v) for v in args.grid.split(",") if v.strip()]
    results = sweep(int(args.budget), [VIT_SIZES[c] for c in letters], grid, threads=args.threads)
    print(f"{len(results)} feasible configuration(s) under {args.budget:.3g} MACs")
    for cfg, rep in results[: args.top]:
        res = "/".join(str(b.resolution) for b in cfg.branches)
        print(f"  {res:<16} {rep.macs_total / 1e9:8.2f}G MACs  {rep.params_total / 1e6:8.1f}M params")
    _emit_csv(sweep_csv(results, len(letters)), args.csv)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="piip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="validate a config and print the model summary")
    _add_model_source(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build)

    for name in ("flops", "params"):
        p = sub.add_parser(name, help="print the per-module cost table")
        _add_model_source(p)
        p.add_argument("--csv", type=Path, help="also write the table as CSV")
        p.set_defaults(func=_report)

    p = sub.add_parser("forward", help="run one image and print output shape and checksum")
    _add_model_source(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", type=Path, help="raw planar float32 image (u32 C,H,W header)")
    src.add_argument("--synthetic", action="store_true", help="random image (default)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group (float64)")
    _add_model_source(p)
    p.add_argument("--coords", type=int, default=1, help="sampled coordinates per tensor")
    p.add_argument("--directions", type=int, default=1, help="random whole-tensor directions per tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on the synthetic 8-class texture set")
    _add_model_source(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-seed", type=int, default=0)
    p.add_argument("--csv", type=Path, help="per-epoch metrics CSV")
    p.add_argument("--checkpoint", type=Path, help="write the trained weights here")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("sweep", help="rank resolution assignments under a MAC budget")
    p.add_argument("--budget", type=float, required=True, help="MAC budget, e.g. 20e9")
    p.add_argument("--menu", default="BST", help="ViT sizes Branch 1 first, e.g. BST")
    p.add_argument("--grid", default=",".join(str(r) for r in range(96, 449, 16)))
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--threads", type=int, help="worker threads (default PIIP_THREADS or 1)")
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_sweep)
    return parser


def cli_main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PiipError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
