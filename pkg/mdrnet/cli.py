#!/usr/bin/env python
"""
mdrnet command line

    mdrnet voxelize --input scan.bin --out scan.svt [--config params.yml]
    mdrnet bench --grid 32x32x16 --sparsity 0.2 --channels 16 --reps 5 --out report.csv
    mdrnet gradcheck --size small --seed 0
    mdrnet heatmap --weights weights.txt --out heatmap.pgm
    mdrnet train --scenes 1 --steps 200 --seed 0 --out curve.csv [--weights-out w.txt] [--save-model m.krn]

Every subcommand returns 0 on success and 1 on an expected failure, which is logged.
"""
import argparse
import logging
import sys
from typing import List, Optional

import mdrnet
import mdrnet.raw_data_loaders as raw
from mdrnet import params
from mdrnet.backbone import build, forward_trace
from mdrnet.bench import bench_reductions, sdr_overhead
from mdrnet.errors import MdrnetError
from mdrnet.gradcheck import SIZES, run_suite
from mdrnet.heatmap import weights_to_image
from mdrnet.trainlite import loss_curve_frame, make_toy_tasks, train
from mdrnet.voxelizer import voxelize

log = logging.getLogger("mdrnet")


def _load_params(args) -> dict:
    return params.load_params_file(args.config)


def _parse_grid(text: str):
    try:
        dims = tuple(int(n) for n in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 32x32x16, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"grid must be three positive counts, got {text!r}")
    return dims


def cmd_voxelize(args) -> int:
    cfg = params.get_voxelize_config(_load_params(args))
    pc = raw.load_bin(args.input)
    t, stats = voxelize(pc, cfg, return_stats=True)
    raw.save_tensor(args.out, t)
    log.info(f"{args.input}: {stats['kept']} of {stats['input']} points kept, {len(t)} voxels written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    p = _load_params(args)
    reps = args.reps if args.reps is not None else p["bench"]["reps"]
    report = bench_reductions(args.grid, args.sparsity, args.channels, reps=reps, warmup=p["bench"]["warmup"],
                              seed=args.seed)
    raw.save_csv(args.out, report)
    print(report.to_string(index=False))
    print(f"SdrSoftmax / MeanPool time ratio: {sdr_overhead(report):.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, size=args.size)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        log.error(f"gradient check failed for: {', '.join(failed)}")
        return 1
    return 0


def cmd_heatmap(args) -> int:
    rows = raw.load_weights_text(args.weights)
    raw.write_pgm(args.out, weights_to_image(rows))
    log.info(f"heatmap of {rows.shape[0]} weights written to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.scenes < 1:
        log.error(f"--scenes must be >= 1, got {args.scenes}")
        return 1
    p = _load_params(args)
    vcfg = params.get_voxelize_config(p)
    bcfg = params.get_backbone_config(p, vcfg.geometry.extents)
    sgd = params.get_sgd_config(p, seed=args.seed, learning_rate=args.lr, steps=args.steps, momentum=args.momentum)
    tasks = make_toy_tasks(args.scenes, args.seed, vcfg, bcfg)
    state, curve = train(build(bcfg, seed=args.seed), tasks, sgd)
    raw.save_csv(args.out, loss_curve_frame(curve))
    if args.weights_out:
        trace = forward_trace(state, tasks[0].input)
        if trace.weights is None:
            log.error("stage 1 of this backbone produces no weights")
            return 1
        raw.save_weights_text(args.weights_out, trace.weights.to_lines())
    if args.save_model:
        raw.save_backbone(args.save_model, state)
    print(f"initial loss {curve[0]:.6g}, final loss {curve[-1]:.6g}")
    if not curve[-1] < curve[0]:
        log.error("training did not decrease the loss")
        return 1
    return 0


def get_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML parameter file, defaults to mdrnet_params.yml")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="mdrnet", description="Sparse voxel backbone toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {mdrnet.__version__}")
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    p = sub.add_parser("voxelize", parents=[common], help="voxelize a LiDAR .bin file")
    p.add_argument("--input", required=True, help="point file, float32 x y z intensity records")
    p.add_argument("--out", required=True, help="output tensor file")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("bench", parents=[common], help="benchmark the reduction operators")
    p.add_argument("--grid", type=_parse_grid, default=(32, 32, 16), help="NxxNyxNz, e.g. 32x32x16")
    p.add_argument("--sparsity", type=float, default=0.2, help="fraction of active cells, in (0, 1]")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--reps", type=int, default=None, help="timed repetitions, >= 5")
    p.add_argument("--out", required=True, help="CSV report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--size", choices=sorted(SIZES), default="small")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", parents=[common], help="PGM image of reduction weights")
    p.add_argument("--weights", required=True, help="text file of 'i j k weight' lines")
    p.add_argument("--out", required=True, help="output .pgm")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("train", parents=[common], help="toy training on synthetic scenes")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--steps", type=int, default=None, help="defaults to the train section of the params")
    p.add_argument("--lr", type=float, default=None, help="learning rate override")
    p.add_argument("--momentum", type=float, default=None, help="momentum override")
    p.add_argument("--out", required=True, help="loss curve CSV (step, loss)")
    p.add_argument("--weights-out", default=None, help="write the stage-1 weights of the trained model")
    p.add_argument("--save-model", default=None, help="write the trained kernels and a YAML manifest")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = get_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger("mdrnet").setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except (MdrnetError, OSError, ValueError) as e:
        log.error(f"{args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
