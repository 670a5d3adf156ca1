"""Closed-loop unicycle runs with a stereo-driven safety filter.

Each control step renders the rig's three views, matches them, optionally
adapts the error model, builds the pixel constraints and holds the filtered
input over a few RK4 substeps of the unicycle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import errormodel as em
from .geometry import CameraRig, RobotPose
from .matching import MatchConfig, match, reconstruct
from .safety import (BarrierConfig, EmptyPixelSet, FilterResult, PixelMeasurements,
                     naive_controller, robust_controller)
from .scene import (Corruption, ImageTriple, Plane, Scene, Sphere, TextureSpec,
                    corrupt_disparity, read_pgm, render_triple)

MODES = ("naive", "robust-pretrained", "robust-online", "robust-oracle")
CSV_HEADER = ("t,x,y,theta,v_des,omega_des,v,omega,h_ns_true,h_ns_meas,"
              "eps_min,eps_mean,eps_max,loss,n_active").split(",")


def default_scene(start_distance: float = 1.3, radius: float = 0.25) -> Scene:
    """A noise-textured sphere dead ahead, its surface ``start_distance`` from the origin."""
    tex = TextureSpec("value_noise", contrast=0.8, scale_m=0.02, seed=7)
    return Scene((Sphere((start_distance + radius, 0.0, 0.0), radius, tex),))


def checker_frames(rig: CameraRig, count: int = 8, seed: int = 0):
    """Pretraining views of checker-textured walls and spheres at random ranges."""
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(count):
        dist = rng.uniform(0.4, 2.0)
        period = float(rng.choice([0.02, 0.04, 0.08]))
        wall = Plane((dist + 1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), TextureSpec("checker", period_m=period, contrast=0.6))
        ball = Sphere((dist, rng.uniform(-0.3, 0.3), 0.0), rng.uniform(0.1, 0.3),
                      TextureSpec("checker", period_m=period, seed=i))
        triple, _ = render_triple(Scene((wall, ball)), RobotPose(0.0, 0.0, rng.uniform(-0.2, 0.2)), rig)
        frames.append(triple)
    return frames


@dataclass(frozen=True)
class SimConfig:
    mode: str = "robust-online"
    duration_s: float = 60.0
    dt_dynamics: float = 0.005
    control_rate_hz: float = 10.0
    v_des: float = 0.2
    omega_des: float = 0.0
    start_distance: float = 1.3
    sigma: float = 0.99
    eta: float = 0.001
    c: float = 0.33
    alpha: float = 1.0
    delta: float = 0.0
    max_constraints: int = 4000
    u_max: float = 1.0
    seed: int = 0
    rig: CameraRig = field(default_factory=CameraRig)
    match: MatchConfig = field(default_factory=lambda: MatchConfig(uniqueness_ratio=1.1, lr_check=True))
    scales: em.FeatureScales = field(default_factory=em.FeatureScales)
    scene: Optional[Scene] = None
    corruption: Optional[Corruption] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("duration_s", "dt_dynamics", "control_rate_hz", "c", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dt_dynamics > 1.0 / self.control_rate_hz + 1e-12:
            raise ValueError("dt_dynamics must not exceed the control period")
        if self.v_des < 0 or self.start_distance <= 0:
            raise ValueError("v_des must be >= 0 and start_distance > 0")

    @property
    def world(self) -> Scene:
        return self.scene if self.scene is not None else default_scene(self.start_distance)

    def barrier(self) -> BarrierConfig:
        return BarrierConfig(c=self.c, alpha=self.alpha, delta=self.delta,
                             max_constraints=self.max_constraints, sigma=self.sigma, u_max=self.u_max)


# ---------------------------------------------------------------------------
# dynamics


def _unicycle(state, u):
    v, w = u
    return np.array([v * math.cos(state[2]), v * math.sin(state[2]), w])


def step_unicycle(pose: RobotPose, u, dt: float) -> RobotPose:
    """One RK4 step of ``x' = v cos th, y' = v sin th, th' = w`` with ``u`` held."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = np.array([pose.x, pose.y, pose.theta])
    k1 = _unicycle(s, u)
    k2 = _unicycle(s + 0.5 * dt * k1, u)
    k3 = _unicycle(s + 0.5 * dt * k2, u)
    k4 = _unicycle(s + dt * k3, u)
    s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return RobotPose(*s)


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrajectoryLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["t"] <= self.rows[-1]["t"]:
            raise ValueError("log times must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


@dataclass
class ExperimentReport:
    mode: str
    min_h_ns_true: float
    final_h_ns_true: float
    final_standoff: float
    safety_violated: bool
    steady_state_velocity: float
    steps: int

    def as_text(self) -> str:
        items = [
            ("mode", self.mode),
            ("min_h_ns_true", repr(self.min_h_ns_true)),
            ("final_h_ns_true", repr(self.final_h_ns_true)),
            ("final_standoff", repr(self.final_standoff)),
            ("safety_violated", str(self.safety_violated).lower()),
            ("steady_state_velocity", repr(self.steady_state_velocity)),
            ("steps", str(self.steps)),
        ]
        return "".join(f"{k} = {v}\n" for k, v in items)


def make_report(mode: str, log: TrajectoryLog, c: float, control_rate_hz: float) -> ExperimentReport:
    if len(log) == 0:
        raise ValueError("empty log")
    h = log.column("h_ns_true")
    v = log.column("v")
    tail = max(1, int(round(control_rate_hz)))
    final = float(h[-1])
    return ExperimentReport(
        mode=mode,
        min_h_ns_true=float(h.min()),
        final_h_ns_true=final,
        final_standoff=float(math.sqrt(max(2.0 * final + c * c, 0.0))),
        safety_violated=bool(h.min() < 0.0),
        steady_state_velocity=float(v[-tail:].mean()),
        steps=len(log),
    )


# ---------------------------------------------------------------------------
# ground truth barrier


def true_h_ns(depth: np.ndarray, rig: CameraRig, c: float) -> float:
    """Barrier minimum over the surface points actually seen by the reference camera.

    Uses the ray-cast depth (not the disparity-snapped one), so it measures
    the real planar clearance from the robot.
    """
    H, W = depth.shape
    uu = (np.arange(W) - rig.cu) / rig.focal_length_px
    planar = depth * np.sqrt(1.0 + uu[None, :] ** 2)
    r = float(planar.min())
    return 0.5 * (r * r - c * c)


# ---------------------------------------------------------------------------
# closed loop


def _narrow(cfg: MatchConfig) -> MatchConfig:
    # each half-baseline pair sees half the wide-baseline disparity
    return replace(cfg, d_max=(cfg.d_max + 1) // 2)


def frame_maps(triple: ImageTriple, cfg: MatchConfig, wide_only: bool = False):
    """``(d12, d23, d13)`` for a frame; the narrow maps are ``None`` when ``wide_only``."""
    d13 = match(triple.I1, triple.I3, cfg)
    if wide_only:
        return None, None, d13
    n = _narrow(cfg)
    return match(triple.I1, triple.I2, n), match(triple.I2, triple.I3, n), d13


def _epsilon(rig: CameraRig, meas: PixelMeasurements, lo, hi):
    """Distance from each measured point to the farthest member of its interval."""
    ray = np.sqrt(1.0 + ((meas.u - rig.cu) / rig.focal_length_px) ** 2
                  + ((meas.v - rig.cv) / rig.focal_length_px) ** 2)
    inv = 1.0 / meas.d_hat
    return rig.fb * ray * np.maximum(np.abs(1.0 / lo - inv), np.abs(1.0 / hi - inv))


def run_experiment(cfg: SimConfig, model: Optional[em.ErrorModelParams] = None, progress=None):
    """Run one closed-loop trial; returns ``(TrajectoryLog, ExperimentReport)``.

    ``model`` seeds the error model for the robust learned modes.
    """
    if cfg.mode in ("robust-pretrained", "robust-online") and model is None:
        raise ValueError(f"mode {cfg.mode} needs a pretrained error model")
    rig = cfg.rig
    bcfg = cfg.barrier()
    scene = cfg.world
    params = model.copy() if model is not None else None
    pose = RobotPose(0.0, 0.0, 0.0)
    u_des = np.array([cfg.v_des, cfg.omega_des])
    period = 1.0 / cfg.control_rate_hz
    substeps = max(1, int(round(period / cfg.dt_dynamics)))
    dt = period / substeps
    steps = int(round(cfg.duration_s * cfg.control_rate_hz))
    corruption = cfg.corruption
    log = TrajectoryLog()

    for k in range(steps):
        t = k * period
        triple, gt = render_triple(scene, pose, rig)
        online = cfg.mode == "robust-online"
        d12, d23, d13 = frame_maps(triple, cfg.match, wide_only=not online)
        if corruption is not None:
            d13 = corrupt_disparity(d13, replace(corruption, seed=corruption.seed + 7919 * cfg.seed),
                                    rig.d_max, frame=k)
        h_true = true_h_ns(gt.depth, rig, cfg.c)
        meas = PixelMeasurements.from_map(d13)
        loss = math.nan
        eps = np.zeros(1)
        try:
            if cfg.mode == "naive":
                res = naive_controller(u_des, pose, meas, rig, bcfg)
            else:
                if cfg.mode == "robust-oracle":
                    gt_d = gt.d13[meas.v, meas.u]
                    q = np.abs(meas.d_hat - gt_d) + 1
                else:
                    feats = em.feature_map(triple.I1, triple.I3, d13, cfg.scales)
                    if online:
                        params, value = em.adapt_online(params, triple, None, cfg.eta, rig.d_max,
                                                        cfg.scales, maps=(d12, d23, d13), features=feats)
                        loss = math.nan if value is None else value
                    probs = em.predict(params, feats[meas.v, meas.u])
                    q = em.quantile(probs, cfg.sigma, rig.d_max)
                res = robust_controller(u_des, pose, meas, q, rig, bcfg)
                lo, hi, _ = em.intervals(meas.d_hat, q, rig.d_max)
                eps = _epsilon(rig, meas, lo, hi)[res.active_pixels]
        except EmptyPixelSet:
            res = FilterResult(u_des.copy(), True, np.zeros(0, dtype=int), math.nan, math.nan)
        u = res.u
        log.append(t=t, x=pose.x, y=pose.y, theta=pose.theta, v_des=u_des[0], omega_des=u_des[1],
                   v=float(u[0]), omega=float(u[1]), h_ns_true=h_true, h_ns_meas=res.h_ns_measured,
                   eps_min=float(eps.min()) if eps.size else math.nan,
                   eps_mean=float(eps.mean()) if eps.size else math.nan,
                   eps_max=float(eps.max()) if eps.size else math.nan,
                   loss=loss, n_active=int(res.active_pixels.size))
        if progress is not None:
            progress(k, log.rows[-1])
        for _ in range(substeps):
            pose = step_unicycle(pose, u, dt)

    return log, make_report(cfg.mode, log, cfg.c, cfg.control_rate_hz)


# ---------------------------------------------------------------------------
# pretraining


def load_frames(frames_dir):
    """Image triples stored as ``<name>.I1.pgm``, ``<name>.I2.pgm``, ``<name>.I3.pgm``, sorted by name."""
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"{frames_dir}: no such directory")
    names = sorted(p.name[: -len(".I1.pgm")] for p in frames_dir.glob("*.I1.pgm"))
    if not names:
        raise ValueError(f"{frames_dir}: no frame triples (*.I1.pgm) found")
    return [ImageTriple(*(read_pgm(frames_dir / f"{n}.I{i}.pgm") for i in (1, 2, 3))) for n in names]


def pretrain(frames, eta: float, epochs: int, match_cfg: MatchConfig = MatchConfig(uniqueness_ratio=1.1, lr_check=True),
             scales: em.FeatureScales = em.FeatureScales(), plateau: float = 1e-4,
             params: Optional[em.ErrorModelParams] = None):
    """Self-supervised training over fixed frames until the epoch loss stops moving.

    Returns ``(params, final_loss)``; with zero epochs the untouched initial
    model and its loss (``ln C`` for zero weights) are returned.
    """
    if not frames:
        raise ValueError("no frames to train on")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    params = params.copy() if params is not None else em.ErrorModelParams.zeros()
    batches = []
    for tr in frames:
        d12, d23, d13 = frame_maps(tr, match_cfg)
        b = em.make_batch(tr.I1, tr.I3, d13, reconstruct(d12, d23, match_cfg.d_max),
                          params.class_count, scales)
        if b.labels.size:
            batches.append(b)
    if not batches:
        raise em.NoValidPixels("no frame has a valid reconstruction-error pixel")

    def epoch_loss(p):
        return float(np.mean([em.loss(p, b) for b in batches]))

    prev = epoch_loss(params)
    for _ in range(epochs):
        for b in batches:
            params = em.sgd_step(params, b, eta)
        cur = epoch_loss(params)
        if abs(prev - cur) < plateau:
            prev = cur
            break
        prev = cur
    return params, prev


# ---------------------------------------------------------------------------
# outputs


def write_csv(path, log: TrajectoryLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in log.rows:
            w.writerow([r[k] if k == "n_active" else repr(float(r[k])) for k in CSV_HEADER])


def read_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in CSV_HEADER}


def _velocity_axes(ax, series):
    for label, (t, v, v_des) in series.items():
        ax.plot(t, v, label=f"{label} v")
    if series:
        t, _, v_des = next(iter(series.values()))
        ax.plot(t, v_des, "k--", linewidth=0.8, label="v_des")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("forward velocity [m/s]")
    ax.legend(loc="best", fontsize=8)


def plot_velocity(path, series: dict) -> None:
    """Velocity-vs-time PNG; ``series`` maps a label to ``(t, v, v_des)``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    _velocity_axes(ax, series)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_outputs(log: TrajectoryLog, report: ExperimentReport, out_dir) -> dict:
    """Write ``<mode>.csv``, ``<mode>.report.txt``, ``<mode>.velocity.png`` and refresh ``overlay.png``.

    The overlay collects every ``*.csv`` trajectory already in ``out_dir``.
    """
    if len(log) == 0:
        raise ValueError("nothing to write: empty log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report.mode
    paths = {
        "csv": out / f"{stem}.csv",
        "report": out / f"{stem}.report.txt",
        "plot": out / f"{stem}.velocity.png",
        "overlay": out / "overlay.png",
    }
    write_csv(paths["csv"], log)
    paths["report"].write_text(report.as_text())
    plot_velocity(paths["plot"], {stem: (log.column("t"), log.column("v"), log.column("v_des"))})
    series = {}
    for mode in MODES:
        p = out / f"{mode}.csv"
        if p.exists():
            d = read_csv(p)
            series[mode] = (d["t"], d["v"], d["v_des"])
    plot_velocity(paths["overlay"], series)
    return paths
