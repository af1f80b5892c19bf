"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")  # single-threaded BLAS keeps results reproducible

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from ..errors import PipelineError  # noqa: E402
from ..patcher import png_to_container  # noqa: E402
from . import pipeline as pl  # noqa: E402
from .config import load_config  # noqa: E402


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _grid(text: str) -> list:
    out = []
    for x in text.split(","):
        x = x.strip()
        try:
            out.append(json.loads(x))
        except json.JSONDecodeError:
            out.append(x)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pyramidcir", description="Toy composed image retrieval pipeline.")
    p.add_argument("--workdir", default="run", help="directory holding all stage outputs (default: run)")
    p.add_argument("--config", help="JSON config file; defaults apply when omitted")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus")
    t = sub.add_parser("train", help="train the matching model and pretrain the refinement backbone")
    t.add_argument("--only", choices=("matcher", "backbone"))
    sub.add_parser("index", help="index the candidate pool and rank every validation query")
    sub.add_parser("extract-rep", help="build per-layer steering vectors from reasoning paths")
    sub.add_parser("refine", help="rescore the top candidates and fuse scores")
    sub.add_parser("eval", help="write first-stage and refined metrics")
    s = sub.add_parser("sweep", help="sweep one parameter and write a CSV")
    s.add_argument("--param", required=True, choices=pl.SWEEP_PARAMS)
    s.add_argument("--grid", type=_grid, help="comma-separated values (default: from the config)")
    pr = sub.add_parser("project", help="write a 2-D projection of q, q+c and q+n representations")
    pr.add_argument("--samples", type=int, default=100)
    pr.add_argument("--layer", type=int, default=-1)
    c = sub.add_parser("cost", help="report stage timings by training paradigm")
    c.add_argument("--tr-queries", type=int, default=20, help="training queries timed for the ranker stub")
    c.add_argument("--scaling", type=_ints, default=[], help="top-N values to time, e.g. 10,50,100")
    cv = sub.add_parser("convert-png", help="convert a PNG file to the image container format")
    cv.add_argument("src")
    cv.add_argument("dst")
    return p


def run(args: argparse.Namespace) -> object:
    if args.command == "convert-png":
        img = png_to_container(args.src, args.dst)
        return {"written": args.dst, "shape": [img.H, img.W, img.C]}
    ws = pl.Workspace(args.workdir, load_config(args.config, args.overrides))
    cmd = args.command
    if cmd == "gen-data":
        c = pl.gen_data(ws)
        return {"train": len(c.train), "val": len(c.val), "pool": len(c.pool)}
    if cmd == "train":
        if args.only in (None, "matcher"):
            pl.train_matcher(ws)
        if args.only in (None, "backbone"):
            pl.pretrain_backbone(ws)
        return {"trained": args.only or "matcher+backbone"}
    if cmd == "index":
        return {"queries": len(pl.first_stage(ws))}
    if cmd == "extract-rep":
        rep = pl.extract_rep(ws)
        return {"layers": rep.n_layers, "D": rep.D, "samples": rep.sample_count}
    if cmd == "refine":
        return {"queries": len(pl.refine_stage(ws))}
    if cmd == "eval":
        return pl.eval_stage(ws)
    if cmd == "sweep":
        return {"written": str(pl.run_sweep(ws, args.param, args.grid))}
    if cmd == "project":
        return {"written": str(pl.write_projection(ws, args.samples, args.layer))}
    if cmd == "cost":
        return pl.cost_report(ws, args.tr_queries, args.scaling)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(out, sort_keys=True, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
