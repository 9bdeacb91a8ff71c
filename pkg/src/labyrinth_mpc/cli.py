"""Command line: ``labyrinth-mpc run | bench | anglemap | layout | config``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness
from .config import ConfigError, dump_config, load_config
from .estimation import AngleMap, AngleMapError
from .harness import CONTROLLERS, RunConfig
from .layout import LayoutError, bundled_layout, bundled_layout_path, check_invariants, load_layout, parse_layout

log = logging.getLogger("labyrinth_mpc")


def _layout(spec: str, validate: bool = True):
    """A file path, or the name of a bundled layout."""
    p = Path(spec)
    if not p.exists() and bundled_layout_path(spec).exists():
        p = bundled_layout_path(spec)
    return load_layout(p, validate=validate)


def _config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _controllers(text: str) -> list[str]:
    names = [harness.ALIASES.get(c.strip(), c.strip()) for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in CONTROLLERS]
    if bad:
        raise SystemExit(f"unknown controller(s): {', '.join(bad)}")
    return names


def cmd_run(args) -> int:
    layout = _layout(args.layout)
    cfg = _config(args.config)
    amap = AngleMap.load(args.anglemap) if args.anglemap else None
    sc = harness.seeded_sim_config(cfg.sim, args.seed, cfg.harness)
    t0 = time.perf_counter()
    rec = harness.run_once(layout, sc, args.controller, args.seed, args.cap, cfg, anglemap=amap)
    wall = time.perf_counter() - t0
    if args.log:
        Path(args.log).write_text(rec.log_text)
    hole = "" if rec.hole_id is None else f" (hole {rec.hole_id})"
    print(f"{rec.controller} seed {rec.seed}: {rec.outcome}{hole}, completion {100 * rec.fraction:.1f} %, "
          f"{rec.elapsed:.2f} s simulated, {wall:.1f} s wall")  # fmt: skip
    if rec.solve_times:
        st = np.asarray(rec.solve_times) * 1e3
        print(f"controller time per tick: median {np.median(st):.2f} ms, max {st.max():.2f} ms, "
              f"deadlines met {100 * rec.deadline_rate:.2f} %")  # fmt: skip
    if rec.hl_solves:
        print(f"HL solves {rec.hl_solves}, published {rec.hl_published}")
    if args.render:
        print(harness.render_ascii(layout, harness.trajectory_from_log(rec.log_text), width=args.width), end="")
    return 0


def cmd_bench(args) -> int:
    layout = _layout(args.layout)
    cfg = _config(args.config)
    ctrls = _controllers(args.controllers)
    workers = args.workers or os.cpu_count() or 1
    t0 = time.perf_counter()

    def progress(r):
        if args.verbose:
            print(f"  {r.controller:7s} seed {r.seed:3d} {r.outcome:9s} {100 * r.fraction:5.1f} %  {r.elapsed:6.1f} s", flush=True)

    if args.anglemap:
        amap = None if args.anglemap == "none" else AngleMap.load(args.anglemap)
    else:
        print("learning the board angle map ...", flush=True)
        amap = harness.board_anglemap(layout, cfg.sim, cfg)
    summary = harness.run_benchmark(layout, cfg.sim, ctrls, args.runs, config=cfg, anglemap=amap,
                                    workers=workers, progress=progress)  # fmt: skip
    print(summary.to_csv(), end="")
    print(f"total {time.perf_counter() - t0:.0f} s on {workers} worker(s)")
    out = Path(args.out)
    out.write_text(summary.to_csv())
    out.with_name(out.stem + "_runs.csv").write_text(summary.runs_csv())
    out.with_name(out.stem + "_hist.csv").write_text(summary.histogram_csv())
    return 0


def cmd_anglemap(args) -> int:
    if args.action == "learn":
        layout = _layout(args.layout)
        cfg = _config(args.config)
        truth = harness.board_tilt(cfg.harness)
        sc = cfg.sim.with_(tilt_field=truth)

        def report(i, m):
            level = lambda x, y: tuple(-v for v in truth(x, y))  # noqa: E731
            print(f"iteration {i + 1}: rms error {m.rms_error(level):.5f} rad", flush=True)

        amap = harness.learn_anglemap(layout, sc, args.controller, args.seed, args.iterations, cfg, on_iteration=report)
        amap.save(args.out)
        print(f"wrote {args.out}")
        return 0
    amap = AngleMap.load(args.file)
    if args.csv:
        sys.stdout.write(amap.to_csv())
    else:
        for comp, name in ((0, "alpha"), (1, "beta")):
            print(f"{name}:")
            sys.stdout.write(amap.ascii(comp))
    return 0


def cmd_layout(args) -> int:
    try:
        layout = _layout(args.file, validate=False)
    except LayoutError as exc:
        print(f"invalid: {exc}")
        return 1
    problems = check_invariants(layout)
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return 1
    print(f"ok: {len(layout.walls)} walls, {len(layout.holes)} holes, {len(layout.corner_path.corners)} corners, "
          f"path {layout.corner_path.total_length:.3f} m")  # fmt: skip
    if args.render:
        sys.stdout.write(harness.render_ascii(layout))
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(_config(args.config)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labyrinth-mpc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one run")
    r.add_argument("--controller", default="nlmpc", help="pid | linmpc | nlmpc")
    r.add_argument("--layout", default="brio_synthetic", help="layout file or bundled name")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config")
    r.add_argument("--cap", type=float, help="simulated-time cap, s")
    r.add_argument("--anglemap", help="feed-forward map file")
    r.add_argument("--log", help="write the trajectory CSV here")
    r.add_argument("--render", action="store_true", help="print an ASCII plot of the run")
    r.add_argument("--width", type=int, default=100)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="benchmark controllers")
    b.add_argument("--runs", type=int, default=25)
    b.add_argument("--controllers", default=",".join(CONTROLLERS))
    b.add_argument("--layout", default="brio_synthetic")
    b.add_argument("--config")
    b.add_argument("--anglemap", help="map file, or 'none'; learned on the board when omitted")
    b.add_argument("--workers", type=int, default=0, help="processes (default: all CPUs)")
    b.add_argument("--out", default="results.csv")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("anglemap", help="learn or show an angle map")
    asub = a.add_subparsers(dest="action", required=True)
    al = asub.add_parser("learn")
    al.add_argument("--layout", default="brio_synthetic")
    al.add_argument("--config")
    al.add_argument("--controller", default="pid")
    al.add_argument("--iterations", type=int, default=3)
    al.add_argument("--seed", type=int, default=0)
    al.add_argument("--out", default="anglemap.txt")
    ash = asub.add_parser("show")
    ash.add_argument("file")
    ash.add_argument("--csv", action="store_true")
    a.set_defaults(func=cmd_anglemap)

    lay = sub.add_parser("layout", help="layout tools")
    lsub = lay.add_subparsers(dest="action", required=True)
    lv = lsub.add_parser("validate")
    lv.add_argument("file", help="layout file or bundled name")
    lv.add_argument("--render", action="store_true")
    lay.set_defaults(func=cmd_layout)

    c = sub.add_parser("config", help="print the effective configuration")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LayoutError, AngleMapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
