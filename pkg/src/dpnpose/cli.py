"""Command-line entry point: ``dpnpose <command> [--flag value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig

log = logging.getLogger("dpnpose")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _timing_spec(text: str) -> dict[str, int]:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        arch, _, t = item.partition("=")
        if arch not in ("dpn", "baseline") or not t.isdigit():
            raise argparse.ArgumentTypeError(f"expected arch=stages pairs, got {item!r}")
        out[arch] = int(t)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpnpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, seed=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--profile", choices=["default", "tiny"],
                       help="base defaults when no config file sets one")
        if seed:
            p.add_argument("--seed", type=int, help="seed for network init and scene generation")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train", help="train on synthetic scenes")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--log", help="tab-separated loss log output path")

    p = sub.add_parser("eval", help="PCK of a checkpoint on the synthetic eval split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--scales", type=_floats, default=[1.0])

    p = sub.add_parser("decode", help="decode poses from one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", type=int, help="synthetic scene index")
    src.add_argument("--image", help="binary PPM image")
    p.add_argument("--scales", type=_floats, default=[1.0])

    p = sub.add_parser("bench", help="model size table and forward timing")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--arch", choices=["dpn", "baseline", "both"], default="both")
    p.add_argument("--stages", type=_ints, default=[3, 4, 5, 6])
    p.add_argument("--input", type=_hw, default=(64, 64), help="timing input HxW")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--timing-stages", type=_timing_spec, default={"baseline": 6, "dpn": 3},
                   help="stage count per architecture for the timing table")
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out", help="prefix for .txt/.tsv copies of the tables")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--max-coords", type=int, default=12)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("render", help="dump synthetic scenes as PPM/PGM plus annotations")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    return parser


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if args.profile and args.profile != cfg.profile:
            raise ConfigError("--profile conflicts with the profile in --config")
    else:
        cfg = RunConfig.profile_defaults(args.profile or "default")
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, net=cfg.net.replace(seed=args.seed),
                      synth=replace(cfg.synth, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    return cfg


def cmd_train(args) -> int:
    from dataclasses import replace

    from .train import train_loop

    cfg = _load_config(args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    result = train_loop(cfg, checkpoint_path=args.checkpoint, log_path=args.log)
    first, last = result.log[0], result.log[-1]
    print(f"trained {result.step} steps: loss {first.total:.3f} -> {last.total:.3f}")
    if args.checkpoint:
        print(f"checkpoint written to {args.checkpoint}")
    return 0


def _load_network(path):
    from .train import load_checkpoint

    return load_checkpoint(path).build()


def cmd_eval(args) -> int:
    from .decode import evaluate
    from .synth import make_split

    cfg = _load_config(args)
    net = _load_network(args.checkpoint)
    n_eval = args.n_eval or cfg.train.n_eval
    _, eval_idx = make_split(cfg.synth, cfg.train.n_train, n_eval)
    score = evaluate(net, cfg.synth, eval_idx, alpha=args.alpha, scales=args.scales)
    print(f"PCK@{args.alpha:g} over {n_eval} eval scenes: {score:.4f}")
    return 0


def cmd_decode(args) -> int:
    from .decode import decode, multi_scale_infer
    from .synth import generate_scene, read_ppm

    cfg = _load_config(args)
    net = _load_network(args.checkpoint)
    if args.image:
        image = read_ppm(args.image)
    else:
        image, _ = generate_scene(cfg.synth, args.scene)
    S, L = multi_scale_infer(net, image, args.scales)
    poses = decode(S, L, cfg.synth.limbs, stride=net.stride)
    print("person\tkeypoint\tx\ty\tscore")
    for pid, pose in enumerate(poses):
        for k, c in pose.keypoints.items():
            print(f"{pid}\t{k}\t{c.x:.1f}\t{c.y:.1f}\t{c.score:.3f}")
    return 0


def cmd_bench(args) -> int:
    from .analyze import bench_forward, size_table, timing_table
    from .posenet import PoseNetwork

    base = RunConfig.load(args.config).net if args.config else RunConfig.profile_defaults().net
    archs = ["baseline", "dpn"] if args.arch == "both" else [args.arch]
    sizes = size_table(archs, args.stages, base)
    print("Model size (MB)")
    print(sizes.text())
    outputs = [("sizes", sizes)]
    if not args.no_timing:
        h, w = args.input
        if h % base.stride or w % base.stride:
            raise ValueError(f"--input {h}x{w} not divisible by stride {base.stride}")
        results = []
        for arch in archs:
            stages = args.timing_stages.get(arch, max(args.stages))
            net = PoseNetwork(base.replace(arch=arch, stages=stages))
            results.append(bench_forward(net, h, w, args.warmup, args.reps))
        timing = timing_table(results)
        print(f"\nForward time, single {h}x{w} frame ({args.reps} reps)")
        print(timing.text())
        outputs.append(("timing", timing))
    if args.out:
        for name, table in outputs:
            Path(f"{args.out}_{name}.txt").write_text(table.text() + "\n")
            Path(f"{args.out}_{name}.tsv").write_text(table.tsv())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, eps=args.eps, max_coords=args.max_coords)
    width = max(len(k) for k in results)
    for name, err in results.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    worst = max(results.values())
    print(f"worst relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


def cmd_render(args) -> int:
    from .synth import generate_scene, write_pnm
    from .targets import render_targets

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx in range(args.start, args.start + args.count):
        img, ann = generate_scene(cfg.synth, idx)
        write_pnm(out / f"scene{idx:05d}.ppm", img)
        ann.save(out / f"scene{idx:05d}.txt")
        tgt = render_targets(ann, cfg.net.stride, cfg.target.sigma, cfg.target.halfwidth(cfg.net.stride))
        write_pnm(out / f"scene{idx:05d}_heat.pgm", tgt.S_star[:-1].max(axis=0))
        paf_mag = np.sqrt((tgt.L_star.reshape(-1, 2, *tgt.L_star.shape[1:]) ** 2).sum(axis=1)).max(axis=0)
        write_pnm(out / f"scene{idx:05d}_paf.pgm", np.clip(paf_mag, 0, 1))
    print(f"wrote {args.count} scenes to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"dpnpose {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
