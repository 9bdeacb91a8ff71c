"""Closed-loop experiments: simulator, estimator and controller wired at 55 Hz."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .baselines import LinearMpcController, LinMpcConfig, PidController, PidGains, WaypointFollower, make_waypoints
from .dynamics import EVENT_HOLE, IVX, IVY, IX, IY, SimConfig, Simulator, TiltField, TruthState, build_linear_model
from .estimation import (
    AngleMap,
    DisturbanceState,
    KalmanState,
    assert_observer_stable,
    default_measurement_noise,
    default_process_noise,
    kf_predict,
    kf_update,
    observer_step,
    wall_freeze_heuristic,
)
from .hl_planner import HlConfig, HlPlanner, ProgressLatch, latency_ticks
from .layout import CornerPath, LabyrinthLayout
from .ll_tracker import LlConfig, LlTracker

CONTROLLERS = ("pid", "linmpc", "nlmpc")
ALIASES = {"linear_mpc": "linmpc", "nonlinear_mpc": "nlmpc"}

COMPLETED, FELL, STALLED, TIMEOUT = "completed", "fell", "stalled", "timeout"
OUTCOMES = (COMPLETED, FELL, STALLED, TIMEOUT)


@dataclass
class EstimatorConfig:
    process_noise: Optional[tuple] = None  # diagonal of Q_kf
    measurement_noise: Optional[tuple] = None  # diagonal of R_kf
    freeze_proximity: Optional[float] = None  # default r_ball + 3 mm
    freeze_enabled: bool = True
    freeze_toward: bool = False  # False: freeze on corrections pointing away from the wall
    observer_enabled: bool = True


@dataclass
class HarnessConfig:
    period: float = 1.0 / 55.0
    cap: float = 180.0  # simulated seconds
    stall_time: float = 20.0
    arrive_radius: float = 0.007
    arrive_speed: float = 0.03
    hl_latency: Optional[float] = 0.1  # None: measured wall-clock solve time
    # tilt = fixed board field + per-seed perturbation; the board part is what
    # an angle map can learn
    seed_tilt: bool = True
    board_seed: int = 2024
    board_amplitude: float = 0.012  # rad
    seed_amplitude: float = 0.003  # rad


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    hl: HlConfig = field(default_factory=HlConfig)
    ll: LlConfig = field(default_factory=LlConfig)
    pid: PidGains = field(default_factory=PidGains)
    linmpc: LinMpcConfig = field(default_factory=LinMpcConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)


@dataclass
class RunRecord:
    controller: str
    seed: int
    outcome: str
    fraction: float
    elapsed: float  # simulated seconds
    hole_id: Optional[int] = None
    ticks: int = 0
    deadline_misses: int = 0
    solve_times: list = field(default_factory=list, repr=False)  # controller wall time per tick
    hl_solves: int = 0
    hl_published: int = 0
    fallbacks: int = 0
    mean_abs_d: float = 0.0
    log_text: str = field(default="", repr=False)

    def __post_init__(self):
        if self.outcome == COMPLETED and self.fraction != 1.0:
            raise ValueError("completed runs have fraction 1")
        if self.outcome == FELL and not self.fraction < 1.0:
            raise ValueError("a fall must happen before the end of the path")

    @property
    def deadline_rate(self) -> float:
        return 1.0 - self.deadline_misses / self.ticks if self.ticks else 1.0


def board_tilt(h: "HarnessConfig") -> TiltField:
    return TiltField.random(h.board_seed, amplitude=h.board_amplitude)


def seeded_sim_config(base: SimConfig, seed: int, h: Optional["HarnessConfig"] = None) -> SimConfig:
    """``base`` with the board tilt plus a seed-dependent perturbation."""
    h = h or HarnessConfig()
    if not h.seed_tilt:
        return base
    pert = TiltField.random(100_000 + seed, amplitude=h.seed_amplitude)
    return base.with_(tilt_field=board_tilt(h) + pert)


def reversed_layout(layout: LabyrinthLayout) -> LabyrinthLayout:
    return replace(layout, corner_path=CornerPath(tuple(reversed(layout.corner_path.corners))))


# --------------------------------------------------------------------------
# controller adapters


class _Agent:
    ref = -1
    fallback = False
    solve_time = 0.0

    def act(self, x_est, d, amap, now):
        raise NotImplementedError


class _WaypointAgent(_Agent):
    def __init__(self, layout, inner):
        self.follower = WaypointFollower(make_waypoints(layout.corner_path, layout))
        self.inner = inner

    def act(self, x_est, d, amap, now):
        wp = self.follower.update(x_est[[IX, IY]])
        self.ref = self.follower.index
        d_tot = d if amap is None else d + amap.query(x_est[[IX, IY]])
        t0 = time.perf_counter()
        u = self.inner.tick(x_est, wp, d_tot)
        self.solve_time = time.perf_counter() - t0
        self.fallback = bool(getattr(self.inner, "fallback", False))
        return u


class _NlmpcAgent(_Agent):
    def __init__(self, layout, cfg: RunConfig):
        h = cfg.harness
        self.hl = HlPlanner(layout, cfg.hl, h.period, h.hl_latency)
        self.ll = LlTracker(layout, cfg.ll)

    def act(self, x_est, d, amap, now):
        path = self.hl.tick(x_est, d, amap, now)
        r = self.ll.tick(x_est, d, path, amap)
        self.ref, self.fallback, self.solve_time = r.index, r.fallback, r.solve_time
        return r.u


def make_agent(name: str, layout: LabyrinthLayout, cfg: RunConfig) -> _Agent:
    name = ALIASES.get(name, name)
    if name == "pid":
        return _WaypointAgent(layout, PidController(cfg.pid, cfg.harness.period))
    if name == "linmpc":
        return _WaypointAgent(layout, LinearMpcController(cfg.linmpc))
    if name == "nlmpc":
        return _NlmpcAgent(layout, cfg)
    raise ValueError(f"unknown controller '{name}' (choose from {', '.join(CONTROLLERS)})")


# --------------------------------------------------------------------------
# single run

LOG_FIELDS = (
    "t", "x", "vx", "y", "vy", "alpha", "beta", "x_true", "y_true", "u1", "u2", "d1", "d2",
    "progress", "ref", "fallback", "freeze", "event",
)  # fmt: skip


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.9g}"


def run_once(
    layout: LabyrinthLayout,
    sim_config: SimConfig,
    controller: str,
    seed: int,
    cap: Optional[float] = None,
    config: Optional[RunConfig] = None,
    anglemap: Optional[AngleMap] = None,
    recorder: Optional[AngleMap] = None,
    keep_log: bool = True,
    start_state: Optional[TruthState] = None,
    on_tick: Optional[Callable] = None,
) -> RunRecord:
    """Simulate one run from the start corner until arrival, fall, stall or the cap.

    ``sim_config`` is used as given (seeding of the tilt field is the
    caller's business, see :func:`seeded_sim_config`); ``seed`` drives the
    plant and measurement noise.  Control logic sees simulated time only, so
    with synthetic HL latency the trajectory log is reproducible bit for bit.
    ``recorder`` collects the total disturbance estimate for angle-map
    learning.
    """
    cfg = config or RunConfig()
    h = cfg.harness
    cap = h.cap if cap is None else cap
    period = h.period
    model_p = build_linear_model(period)
    assert_observer_stable(model_p)
    est = cfg.estimator

    path = layout.corner_path
    truth = start_state or TruthState.at(path.start)
    sim = Simulator(sim_config, layout, truth, seed)
    agent = make_agent(controller, layout, cfg)
    latch = ProgressLatch(path)

    Q_kf = np.diag(est.process_noise) if est.process_noise else default_process_noise()
    R_kf = (
        np.diag(est.measurement_noise)
        if est.measurement_noise
        else default_measurement_noise(max(sim_config.pos_noise_std, 1e-5), max(sim_config.angle_noise_std, 1e-5))
    )
    ks = KalmanState.initial(sim.measure(), Q_kf=Q_kf, R_kf=R_kf)
    ds = DisturbanceState()
    u = np.zeros(2)

    buf = io.StringIO() if keep_log else None
    writer = csv.writer(buf, lineterminator="\n") if buf is not None else None
    if writer:
        writer.writerow(LOG_FIELDS)

    outcome, hole_id = TIMEOUT, None
    best_s, t_best = 0.0, 0.0
    misses = 0
    solve_times = []
    fallbacks = 0
    abs_d = 0.0
    n_ticks = int(math.floor(cap / period + 1e-9))
    tick = 0
    t = 0.0
    for tick in range(n_ticks):
        t = tick * period
        if tick > 0:
            ks = kf_update(ks, sim.measure())
        x_est = ks.mean
        pos = x_est[[IX, IY]]
        amap_val = anglemap.query(pos) if anglemap is not None else np.zeros(2)

        # observer correction with the newest estimate
        freeze = est.freeze_enabled and wall_freeze_heuristic(
            ds, layout, ds.x_pred, x_est, est.freeze_proximity, est.freeze_toward
        )
        d = ds.d
        u = agent.act(x_est, d, anglemap, t)
        if est.observer_enabled:
            ds = observer_step(ds, model_p, x_est, u, freeze=freeze, feedforward=amap_val)
        d_now = ds.d
        abs_d += float(np.hypot(*d_now))
        if recorder is not None:
            recorder.record(pos, d_now + amap_val)

        solve_times.append(agent.solve_time)
        if agent.solve_time > period:
            misses += 1
        fallbacks += int(agent.fallback)

        s = latch.update(sim.truth.x[[IX, IY]])
        if s > best_s + 1e-9:
            best_s, t_best = s, t

        offset = model_p.disturbance_offset(d_now + amap_val) if est.observer_enabled else None
        ks = kf_predict(ks, model_p, u, offset)
        out = sim.step(u, period)
        if on_tick is not None:
            on_tick(t, sim, x_est, u)
        xt = sim.truth.x
        if writer:
            writer.writerow(
                [_fmt(v) for v in (t, *x_est, xt[IX], xt[IY], u[0], u[1], d_now[0], d_now[1], s, agent.ref,
                                   agent.fallback, freeze, out.event)]  # fmt: skip
            )
        if out.event == EVENT_HOLE:
            outcome, hole_id = FELL, out.state.captured
            break
        goal = np.asarray(path.goal)
        if np.hypot(*(xt[[IX, IY]] - goal)) < h.arrive_radius and np.hypot(xt[IVX], xt[IVY]) < h.arrive_speed:
            outcome = COMPLETED
            break
        if t - t_best >= h.stall_time:
            outcome = STALLED
            break
    ticks = tick + 1
    fraction = 1.0 if outcome == COMPLETED else min(latch.fraction, 1.0 - 1e-9 if outcome == FELL else 1.0)
    hl = getattr(agent, "hl", None)
    return RunRecord(
        controller=ALIASES.get(controller, controller),
        seed=seed,
        outcome=outcome,
        fraction=float(fraction),
        elapsed=ticks * period,
        hole_id=hole_id,
        ticks=ticks,
        deadline_misses=misses,
        solve_times=solve_times,
        hl_solves=len(hl.telemetry) if hl else 0,
        hl_published=sum(r.published for r in hl.telemetry) if hl else 0,
        fallbacks=fallbacks,
        mean_abs_d=abs_d / ticks,
        log_text=buf.getvalue() if buf is not None else "",
    )


# --------------------------------------------------------------------------
# benchmark


@dataclass
class ControllerSummary:
    controller: str
    runs: int
    completion_rate: float  # % of runs completed
    average_distance: float  # mean completion fraction, %
    average_time: Optional[float]  # s, over completed runs only
    outcomes: dict


@dataclass
class BenchmarkSummary:
    controllers: list  # ControllerSummary per controller
    records: list = field(default_factory=list, repr=False)

    def by_name(self, name: str) -> ControllerSummary:
        name = ALIASES.get(name, name)
        for c in self.controllers:
            if c.controller == name:
                return c
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "runs", "full_completion_pct", "average_distance_pct", "average_time_s", *OUTCOMES])
        for c in self.controllers:
            t = "" if c.average_time is None else f"{c.average_time:.2f}"
            w.writerow([c.controller, c.runs, f"{c.completion_rate:.1f}", f"{c.average_distance:.1f}", t,
                        *(c.outcomes[o] for o in OUTCOMES)])  # fmt: skip
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "seed", "outcome", "hole_id", "fraction", "elapsed_s"])
        for r in self.records:
            w.writerow([r.controller, r.seed, r.outcome, "" if r.hole_id is None else r.hole_id,
                        f"{r.fraction:.4f}", f"{r.elapsed:.2f}"])  # fmt: skip
        return buf.getvalue()

    def histogram_csv(self, bins: int = 10) -> str:
        """Counts of runs per completion-fraction bin and controller."""
        edges = np.linspace(0.0, 1.0, bins + 1)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", *(c.controller for c in self.controllers)])
        counts = {}
        for c in self.controllers:
            fr = [r.fraction for r in self.records if r.controller == c.controller]
            counts[c.controller] = np.histogram(fr, bins=edges)[0]
        for i in range(bins):
            w.writerow([f"{edges[i]:.2f}", f"{edges[i + 1]:.2f}", *(int(counts[c.controller][i]) for c in self.controllers)])
        return buf.getvalue()


def summarize(records: Sequence[RunRecord], controllers: Sequence[str]) -> BenchmarkSummary:
    out = []
    for name in controllers:
        name = ALIASES.get(name, name)
        rs = [r for r in records if r.controller == name]
        n = len(rs)
        done = [r for r in rs if r.outcome == COMPLETED]
        out.append(
            ControllerSummary(
                controller=name,
                runs=n,
                completion_rate=100.0 * len(done) / n if n else 0.0,
                average_distance=100.0 * float(np.mean([r.fraction for r in rs])) if n else 0.0,
                average_time=float(np.mean([r.elapsed for r in done])) if done else None,
                outcomes={o: sum(r.outcome == o for r in rs) for o in OUTCOMES},
            )
        )
    return BenchmarkSummary(out, list(records))


def _bench_job(args):
    layout, sim_config, controller, seed, config, anglemap = args
    sc = seeded_sim_config(sim_config, seed, config.harness)
    rec = run_once(layout, sc, controller, seed, config=config, anglemap=anglemap, keep_log=False)
    rec.solve_times = []
    return rec


def run_benchmark(
    layout: LabyrinthLayout,
    sim_config: SimConfig,
    controllers: Iterable[str] = CONTROLLERS,
    n_runs: int = 25,
    seeds: Optional[Sequence[int]] = None,
    config: Optional[RunConfig] = None,
    anglemap: Optional[AngleMap] = None,
    workers: int = 1,
    progress: Optional[Callable[[RunRecord], None]] = None,
) -> BenchmarkSummary:
    """``n_runs`` runs per controller; the tilt field and noise vary by seed."""
    cfg = config or RunConfig()
    controllers = [ALIASES.get(c, c) for c in controllers]
    seeds = list(range(n_runs)) if seeds is None else list(seeds)[:n_runs]
    jobs = [(layout, sim_config, c, s, cfg, anglemap) for c in controllers for s in seeds]
    records = []
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            for rec in ex.map(_bench_job, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = _bench_job(job)
            records.append(rec)
            if progress:
                progress(rec)
    return summarize(records, controllers)


def board_anglemap(layout: LabyrinthLayout, sim_config: SimConfig, config: Optional[RunConfig] = None, iterations: int = 3) -> AngleMap:
    """Map learned on the board tilt alone, as done once before scoring runs."""
    cfg = config or RunConfig()
    return learn_anglemap(layout, sim_config.with_(tilt_field=board_tilt(cfg.harness)), config=cfg, iterations=iterations)


def default_benchmark(
    layout: LabyrinthLayout,
    n_runs: int = 25,
    controllers: Iterable[str] = CONTROLLERS,
    config: Optional[RunConfig] = None,
    workers: int = 1,
    progress: Optional[Callable[[RunRecord], None]] = None,
) -> tuple[BenchmarkSummary, AngleMap]:
    """Learn the board map, then score every controller with it applied."""
    cfg = config or RunConfig()
    amap = board_anglemap(layout, cfg.sim, cfg)
    summary = run_benchmark(layout, cfg.sim, controllers, n_runs, config=cfg, anglemap=amap, workers=workers, progress=progress)
    return summary, amap


def hl_latency_model(config: Optional[RunConfig] = None) -> Optional[int]:
    """LL ticks an HL result is withheld; ``None`` in measured (wall-clock) mode."""
    h = (config or RunConfig()).harness
    return None if h.hl_latency is None else latency_ticks(h.hl_latency, h.period)


# --------------------------------------------------------------------------
# angle-map learning


def learn_anglemap(
    layout: LabyrinthLayout,
    sim_config: SimConfig,
    controller: str = "pid",
    seed: int = 0,
    iterations: int = 3,
    config: Optional[RunConfig] = None,
    cap: Optional[float] = 90.0,
    on_iteration: Optional[Callable[[int, AngleMap], None]] = None,
) -> AngleMap:
    """Record/replay iterations forwards and backwards along the corner path.

    The default learner is the PID: its slower runs give the disturbance
    observer time to settle, which makes for a cleaner map.
    """
    from .estimation import anglemap_iterate

    back = reversed_layout(layout)
    counter = [0]

    def run(ff, forward, rec):
        counter[0] += 1
        lay = layout if forward else back
        run_once(lay, sim_config, controller, seed + counter[0], cap, config, anglemap=ff, recorder=rec, keep_log=False)

    return anglemap_iterate(run, lambda: AngleMap.for_layout(layout), iterations, on_iteration)


# --------------------------------------------------------------------------
# rendering


def render_ascii(
    layout: LabyrinthLayout,
    trajectory: Optional[np.ndarray] = None,
    plan: Optional[np.ndarray] = None,
    width: int = 100,
) -> str:
    """Character plot of the board: walls ``#``, holes ``O``, corner path ``+``,
    trajectory ``*``, planned path ``o``, start ``S`` and goal ``G``."""
    height = max(4, int(round(width * layout.y_frame / layout.x_frame / 2)))
    grid = [[" "] * width for _ in range(height)]

    def cell(x, y):
        j = int((x + layout.x_frame) / (2 * layout.x_frame) * (width - 1) + 0.5)
        i = int((layout.y_frame - y) / (2 * layout.y_frame) * (height - 1) + 0.5)
        return min(max(i, 0), height - 1), min(max(j, 0), width - 1)

    xs = np.linspace(-layout.x_frame, layout.x_frame, width)
    ys = np.linspace(-layout.y_frame, layout.y_frame, height)
    for y in ys:
        for x in xs:
            for w in layout.walls:
                if abs(x - w.center[0]) <= w.a + 1e-9 + layout.x_frame / width and abs(y - w.center[1]) <= w.b + layout.y_frame / height:
                    i, j = cell(x, y)
                    grid[i][j] = "#"
    for hole in layout.holes:
        i, j = cell(*hole.center)
        grid[i][j] = "O"
    C = layout.corner_path.array
    for p, q in zip(C[:-1], C[1:]):
        n = int(np.linalg.norm(q - p) / (2 * layout.x_frame) * width * 2) + 2
        for t in np.linspace(0, 1, n):
            i, j = cell(*(p + t * (q - p)))
            if grid[i][j] == " ":
                grid[i][j] = "+"
    for pts, ch in ((plan, "o"), (trajectory, "*")):
        if pts is None:
            continue
        for x, y in np.asarray(pts)[:, :2]:
            i, j = cell(x, y)
            if grid[i][j] != "O":
                grid[i][j] = ch
    for pt, ch in ((C[0], "S"), (C[-1], "G")):
        i, j = cell(*pt)
        grid[i][j] = ch
    border = "+" + "-" * width + "+"
    return "\n".join([border, *("|" + "".join(r) + "|" for r in grid), border]) + "\n"


def trajectory_from_log(log_text: str, true_position: bool = True) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(log_text)))
    kx, ky = ("x_true", "y_true") if true_position else ("x", "y")
    return np.array([[float(r[kx]), float(r[ky])] for r in rows]).reshape(-1, 2)


# --------------------------------------------------------------------------
# step response (baseline tuning)


@dataclass
class StepResponse:
    t: np.ndarray
    position: np.ndarray  # (n, 2) true ball position
    target: np.ndarray
    overshoot: float  # m, largest excursion past the target along the step
    settle_time: float  # s, last time the error exceeded the band (inf if it never settles)
    final_error: float  # m


def step_response(
    controller: str,
    config: Optional[RunConfig] = None,
    sim_config: Optional[SimConfig] = None,
    step=(0.04, 0.0),
    duration: float = 6.0,
    band: float = 0.002,
    seed: int = 0,
) -> StepResponse:
    """Closed-loop response of a waypoint baseline to a position step on an empty plate.

    The full estimation stack is in the loop.  Used to tune the shipped
    baseline gains.
    """
    cfg = config or RunConfig()
    sc = sim_config or SimConfig()
    layout = LabyrinthLayout(x_frame=0.125, y_frame=0.095, r_ball=0.006, walls=(), holes=(),
                             corner_path=CornerPath(((-0.02, 0.0), (0.02, 0.0))))  # fmt: skip
    start = np.array([-step[0] / 2, -step[1] / 2])
    target = start + np.asarray(step, dtype=float)
    period = cfg.harness.period
    model_p = build_linear_model(period)
    sim = Simulator(sc, layout, TruthState.at(start), seed)
    inner = PidController(cfg.pid, period) if ALIASES.get(controller, controller) == "pid" else LinearMpcController(cfg.linmpc)
    ks = KalmanState.initial(sim.measure(), Q_kf=default_process_noise(),
                             R_kf=default_measurement_noise(max(sc.pos_noise_std, 1e-5), max(sc.angle_noise_std, 1e-5)))  # fmt: skip
    ds = DisturbanceState()
    n = int(round(duration / period))
    ts, pos = np.arange(n) * period, np.empty((n, 2))
    for k in range(n):
        if k > 0:
            ks = kf_update(ks, sim.measure())
        u = inner.tick(ks.mean, target, ds.d)
        ds = observer_step(ds, model_p, ks.mean, u)
        ks = kf_predict(ks, model_p, u, model_p.disturbance_offset(ds.d))
        sim.step(u, period)
        pos[k] = sim.truth.x[[IX, IY]]
    unit = np.asarray(step, dtype=float) / np.linalg.norm(step)
    along = (pos - target) @ unit
    err = np.linalg.norm(pos - target, axis=1)
    outside = np.nonzero(err > band)[0]
    settle = 0.0 if len(outside) == 0 else (math.inf if outside[-1] == n - 1 else float(ts[outside[-1] + 1]))
    return StepResponse(ts, pos, target, float(max(0.0, along.max())), settle, float(err[-1]))
