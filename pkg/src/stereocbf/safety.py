"""Pixel-wise control barrier functions for a unicycle and their robust variants.

Every pixel with a usable disparity contributes a ball barrier
``h(x, rho) = 0.5 * (||(x, y) - (rho_x, rho_y)||^2 - c^2)``. The filters
combine them through the pointwise minimum, enforce only the near-minimal
pixels, and, in the robust case, replace each measured point with the
closest point of its disparity uncertainty interval.

Unicycle Lie derivatives: ``L_f h = 0`` and
``L_g h = [(p - rho) . (cos th, sin th), 0]`` with ``p`` the planar position.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errormodel import UncertaintySet, epsilon_bound, uncertainty_set
from .geometry import CameraRig, RobotPose, reproject_many, transform
from .qp import QPSolution, solve_qp
from .scene import INVALID


class EmptyPixelSet(ValueError):
    """No usable pixel to build a barrier from."""


class InvalidInstance(ValueError):
    """A true pixel position lies outside its uncertainty set."""


@dataclass(frozen=True)
class Lipschitz:
    """Lipschitz constants (w.r.t. the pixel position) of ``L_f h``, ``gamma o h_ns`` and ``L_g h``."""

    lfh: float = 0.0
    gamma_hns: float = 0.0
    lgh: float = 0.0

    def scaled(self, k: float) -> "Lipschitz":
        return Lipschitz(self.lfh * k, self.gamma_hns * k, self.lgh * k)


@dataclass(frozen=True)
class BarrierConfig:
    c: float = 0.33
    alpha: float = 1.0
    delta: float = 0.0
    max_constraints: int = 4000
    sigma: float = 0.99
    u_max: float = 1.0
    lipschitz: Lipschitz = field(default_factory=Lipschitz)

    def __post_init__(self):
        if self.c <= 0 or self.alpha <= 0:
            raise ValueError("c and alpha must be positive")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.max_constraints < 1:
            raise ValueError("max_constraints must be >= 1")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError("sigma must lie in (0, 1]")

    def gamma(self, r):
        return self.alpha * r


@dataclass
class FilterResult:
    u: np.ndarray
    feasible: bool
    active_pixels: np.ndarray
    h_ns_measured: float
    binding_bound: float
    qp: Optional[QPSolution] = None
    n_constraints: int = 0


# ---------------------------------------------------------------------------
# barrier primitives


def barrier(pose: RobotPose, rho, c: float):
    """Ball barrier of one or many world points ``rho`` (..., 3)."""
    rho = np.asarray(rho, dtype=float)
    dx = pose.x - rho[..., 0]
    dy = pose.y - rho[..., 1]
    return 0.5 * (dx * dx + dy * dy - c * c)


def lie_derivatives(pose: RobotPose, rho):
    """``(L_f h, L_g h)`` for the unicycle; ``L_g h`` has shape (..., 2)."""
    rho = np.asarray(rho, dtype=float)
    dx = pose.x - rho[..., 0]
    dy = pose.y - rho[..., 1]
    lgh_v = dx * np.cos(pose.theta) + dy * np.sin(pose.theta)
    lgh = np.stack([lgh_v, np.zeros_like(lgh_v)], axis=-1)
    return np.zeros_like(lgh_v), lgh


def h_ns(pose: RobotPose, rhos, c: float) -> float:
    rhos = np.asarray(rhos, dtype=float).reshape(-1, 3)
    if rhos.shape[0] == 0:
        raise EmptyPixelSet("h_ns of an empty pixel set")
    return float(barrier(pose, rhos, c).min())


def _truncate(idx: np.ndarray, key: np.ndarray, max_constraints: int) -> np.ndarray:
    if idx.size <= max_constraints:
        return idx
    order = np.argsort(key[idx], kind="stable")
    return np.sort(idx[order[:max_constraints]])


def index_set(h_values, delta: float, max_constraints: int = 4000) -> np.ndarray:
    """Indices with ``h <= min(h) + delta``, keeping the ``max_constraints`` smallest."""
    h = np.asarray(h_values, dtype=float)
    if h.size == 0:
        raise EmptyPixelSet("index set of an empty pixel set")
    idx = np.nonzero(h <= h.min() + delta)[0]
    return _truncate(idx, h, max_constraints)


def robust_index_set_bounds(h_min, h_max, delta: float, max_constraints: int = 4000) -> np.ndarray:
    """Indices with ``min_E h <= min_q max_E h + delta`` from per-pixel extremes."""
    h_min = np.asarray(h_min, dtype=float)
    h_max = np.asarray(h_max, dtype=float)
    if h_min.size == 0:
        raise EmptyPixelSet("robust index set of an empty pixel set")
    idx = np.nonzero(h_min <= h_max.min() + delta)[0]
    return _truncate(idx, h_min, max_constraints)


def set_extremes(pose: RobotPose, sets: Sequence[UncertaintySet], c: float):
    """Exact ``(min, max)`` of the barrier over each enumerated uncertainty set."""
    hmin = np.array([barrier(pose, s.points, c).min() for s in sets])
    hmax = np.array([barrier(pose, s.points, c).max() for s in sets])
    return hmin, hmax


def robust_index_set(pose: RobotPose, sets: Sequence[UncertaintySet], c: float, delta: float,
                     max_constraints: int = 4000) -> np.ndarray:
    hmin, hmax = set_extremes(pose, sets, c)
    return robust_index_set_bounds(hmin, hmax, delta, max_constraints)


def cbf_qp(u_des, A, b) -> FilterResult:
    """Project ``u_des`` onto ``{u : A u >= b}``.

    When the constraints are infeasible the result is flagged and ``u``
    falls back to stopping (``v = 0``) while keeping the desired turn rate.
    """
    u_des = np.asarray(u_des, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1)
    sol = solve_qp(u_des, A, b)
    u = sol.u if sol.feasible else np.array([0.0, u_des[1]])
    return FilterResult(u, sol.feasible, np.zeros(0, dtype=int), np.nan, np.nan, sol, len(b))


def mr_cbf_constraint(pose: RobotPose, rho_hat, eps_p: float, cfg: BarrierConfig, h_ns_val: float):
    """Measurement-robust half-plane ``a . u >= b`` for one pixel.

    The ``||u||`` factor multiplying the ``L_g h`` Lipschitz term is bounded
    by ``cfg.u_max`` so that the constraint stays linear.
    """
    lfh, lgh = lie_derivatives(pose, rho_hat)
    L = cfg.lipschitz
    tighten = (L.lfh + L.gamma_hns + L.lgh * cfg.u_max) * eps_p
    return lgh, float(-cfg.gamma(h_ns_val) - lfh + tighten)


# ---------------------------------------------------------------------------
# pixel sets and the two experimental controllers


@dataclass
class PixelMeasurements:
    """Measured wide-baseline disparities of the usable pixels of one frame."""

    u: np.ndarray
    v: np.ndarray
    d_hat: np.ndarray

    @classmethod
    def from_map(cls, d13_hat: np.ndarray) -> "PixelMeasurements":
        v, u = np.nonzero((d13_hat != INVALID) & (d13_hat >= 1))
        return cls(u, v, d13_hat[v, u].astype(np.int64))

    def __len__(self):
        return self.u.shape[0]


def _planar_range(rig: CameraRig, u, d):
    """Planar distance from the camera to the point of pixel column ``u`` at disparity ``d``."""
    ray = np.sqrt(1.0 + ((np.asarray(u, dtype=float) - rig.cu) / rig.focal_length_px) ** 2)
    return rig.fb / np.asarray(d, dtype=float) * ray


def _project(u_des, bounds) -> FilterResult:
    """QP with constraints ``-v >= -bound`` for every entry of ``bounds``."""
    A = np.zeros((len(bounds), 2))
    A[:, 0] = -1.0
    return cbf_qp(u_des, A, -np.asarray(bounds))


def naive_controller(u_des, pose: RobotPose, meas: PixelMeasurements, rig: CameraRig,
                     cfg: BarrierConfig) -> FilterResult:
    """Unrobustified filter: ``-z_p v >= -gamma(min_p h(x, rho_hat_p))`` for ``p`` in the index set."""
    if len(meas) == 0:
        raise EmptyPixelSet("no usable measured pixel")
    rho_hat = transform(pose, reproject_many(rig, meas.u, meas.v, meas.d_hat))
    h = barrier(pose, rho_hat, cfg.c)
    hns = float(h.min())
    lam = index_set(h, cfg.delta, cfg.max_constraints)
    z = rig.fb / meas.d_hat[lam]
    A = np.zeros((lam.size, 2))
    A[:, 0] = -z
    b = np.full(lam.size, -cfg.gamma(hns))
    res = cbf_qp(u_des, A, b)
    res.active_pixels = lam
    res.h_ns_measured = hns
    res.binding_bound = float(np.min(cfg.gamma(hns) / z))
    return res


def enumerate_extremes(pose: RobotPose, rig: CameraRig, u, lo, hi, c: float):
    """Barrier min/max over every integer disparity in ``[lo, hi]`` per pixel.

    Evaluates each interval member explicitly, so no monotonicity
    assumption is needed.
    """
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    width = int((hi - lo).max()) + 1 if lo.size else 1
    xi = lo[:, None] + np.arange(width)[None, :]
    inside = xi <= hi[:, None]
    r = _planar_range(rig, np.asarray(u)[:, None], np.where(inside, xi, lo[:, None]))
    h = 0.5 * (r * r - c * c)
    hmin = np.where(inside, h, np.inf).min(axis=1)
    hmax = np.where(inside, h, -np.inf).max(axis=1)
    return hmin, hmax


def robust_controller(u_des, pose: RobotPose, meas: PixelMeasurements, q, rig: CameraRig,
                      cfg: BarrierConfig) -> FilterResult:
    """Robust filter: ``-v >= -gamma(min_p h(x, rho*_p)) / z*_p`` for ``p`` in the robust index set.

    ``q`` holds each pixel's half-width of the disparity uncertainty interval;
    ``rho*`` and ``z*`` come from the interval's largest disparity.
    """
    q = np.asarray(q)
    lo = np.maximum(1, meas.d_hat - q)
    hi = np.minimum(rig.d_max, meas.d_hat + q)
    keep = lo <= hi
    if not np.any(keep):
        raise EmptyPixelSet("no usable uncertainty set")
    u = meas.u[keep]
    lo, hi = lo[keep], hi[keep]
    hmin, hmax = enumerate_extremes(pose, rig, u, lo, hi, cfg.c)
    lam_hat = robust_index_set_bounds(hmin, hmax, cfg.delta, cfg.max_constraints)
    h_star = float(hmin.min())
    z_star = rig.fb / hi[lam_hat]
    bounds = cfg.gamma(h_star) / z_star
    res = _project(u_des, bounds)
    res.active_pixels = np.nonzero(keep)[0][lam_hat]
    v_all = meas.v[keep]
    res.h_ns_measured = float(barrier(pose, transform(pose, reproject_many(
        rig, u, v_all, meas.d_hat[keep])), cfg.c).min())
    res.binding_bound = float(bounds.min())
    return res


def write_constraints_csv(path, rows) -> None:
    """Debug dump; ``rows`` are ``(pixel, h, z, epsilon, bound)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pixel", "h", "z", "epsilon", "bound"])
        for pixel, h, z, eps, bound in rows:
            w.writerow([f"{pixel[0]}:{pixel[1]}", repr(float(h)), repr(float(z)),
                        repr(float(eps)), repr(float(bound))])


# ---------------------------------------------------------------------------
# Lipschitz estimation


@dataclass(frozen=True)
class LipschitzDomain:
    """Box of robot poses and world pixel positions."""

    pose_lo: tuple = (-1.0, -1.0, -np.pi)
    pose_hi: tuple = (1.0, 1.0, np.pi)
    rho_lo: tuple = (-3.0, -3.0, -0.5)
    rho_hi: tuple = (3.0, 3.0, 0.5)


def estimate_lipschitz(domain: LipschitzDomain, rig: CameraRig, cfg: BarrierConfig, samples: int,
                       seed: int = 0, safety_factor: float = 1.5, step: float = 1e-4) -> Lipschitz:
    """Sampled finite-difference Lipschitz estimates w.r.t. the pixel position, inflated."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    poses = rng.uniform(domain.pose_lo, domain.pose_hi, size=(samples, 3))
    rho = rng.uniform(domain.rho_lo, domain.rho_hi, size=(samples, 3))
    dirs = rng.normal(size=(samples, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rho2 = rho + step * dirs
    best = np.zeros(3)
    for (x, y, th), r1, r2 in zip(poses, rho, rho2):
        pose = RobotPose(x, y, th)
        f1, g1 = lie_derivatives(pose, r1)
        f2, g2 = lie_derivatives(pose, r2)
        gh1 = cfg.gamma(barrier(pose, r1, cfg.c))
        gh2 = cfg.gamma(barrier(pose, r2, cfg.c))
        dist = np.linalg.norm(r2 - r1)
        best = np.maximum(best, [abs(f2 - f1) / dist, abs(gh2 - gh1) / dist,
                                 np.linalg.norm(g2 - g1) / dist])
    k = safety_factor
    return Lipschitz(float(best[0] * k), float(best[1] * k), float(best[2] * k))


# ---------------------------------------------------------------------------
# robust-implication verifier


@dataclass
class _Implication:
    """Precomputed pieces of one verification instance (inputs vary, geometry does not)."""

    lgh_hat: np.ndarray  # forward component of L_g h at the measured points in the robust index set
    eps: np.ndarray
    rhs_hat: float  # -gamma(h_ns measured)
    lgh_true: np.ndarray  # at the true points in the index set
    rhs_true: float  # -gamma(h_ns true)
    L: Lipschitz

    def antecedent(self, u) -> bool:
        tighten = (self.L.lfh + self.L.gamma_hns + self.L.lgh * np.hypot(u[0], u[1])) * self.eps
        return bool(np.all(self.lgh_hat * u[0] - tighten >= self.rhs_hat))

    def consequent(self, u, tol: float = 1e-10) -> bool:
        return bool(np.min(self.lgh_true * u[0]) >= self.rhs_true - tol)

    def holds(self, u, tol: float = 1e-10) -> bool:
        return (not self.antecedent(u)) or self.consequent(u, tol)


def _implication(pose: RobotPose, rho_true, sets: Sequence[UncertaintySet], cfg: BarrierConfig) -> _Implication:
    rho_true = np.asarray(rho_true, dtype=float).reshape(-1, 3)
    if len(sets) != rho_true.shape[0] or len(sets) == 0:
        raise InvalidInstance("need one uncertainty set per true pixel position")
    for s, r in zip(sets, rho_true):
        if np.min(np.linalg.norm(s.points - r, axis=1)) > 1e-9:
            raise InvalidInstance(f"true position of pixel {s.pixel} not in its uncertainty set")
    rho_hat = np.array([s.measured for s in sets])
    eps = np.array([epsilon_bound(s) for s in sets])
    lam_hat = robust_index_set(pose, sets, cfg.c, cfg.delta, cfg.max_constraints)
    h_true = barrier(pose, rho_true, cfg.c)
    lam = index_set(h_true, cfg.delta, cfg.max_constraints)
    # L_f h = 0 for the unicycle and L_g h only acts on v
    _, g_hat = lie_derivatives(pose, rho_hat[lam_hat])
    _, g_true = lie_derivatives(pose, rho_true[lam])
    return _Implication(
        g_hat[:, 0], eps[lam_hat], -cfg.gamma(float(barrier(pose, rho_hat, cfg.c).min())),
        g_true[:, 0], -cfg.gamma(float(h_true.min())), cfg.lipschitz,
    )


def check_robust_implication(pose: RobotPose, rho_true, sets: Sequence[UncertaintySet], u,
                             cfg: BarrierConfig, tol: float = 1e-10) -> bool:
    """Does satisfying the robust constraint on measured points imply the true nonsmooth condition?

    Antecedent, for every ``p`` in the robust index set:
    ``L_f h(rho_hat) + L_g h(rho_hat) u - (L_Lfh + L_gamma_hns + L_Lgh ||u||) eps_p
    >= -gamma(h_ns_measured)``.
    Consequent: ``min_{p in index set} L_f h(rho_p) + L_g h(rho_p) u >= -gamma(h_ns_true)``.
    Returns ``True`` when the implication holds (vacuously if the antecedent fails).
    """
    return _implication(pose, rho_true, sets, cfg).holds(np.asarray(u, dtype=float), tol)


def _instance_lipschitz(pose, sets, cfg: BarrierConfig) -> Lipschitz:
    """Valid constants for one instance: ``L_g h`` is 1-Lipschitz in ``rho``;
    ``gamma o h`` is bounded by ``alpha`` times the largest planar range in the sets."""
    pos = np.array([pose.x, pose.y])
    far = max(np.max(np.linalg.norm(s.points[:, :2] - pos, axis=1)) for s in sets)
    return Lipschitz(0.0, cfg.alpha * far, 1.0)


def _max_admissible_v(imp: _Implication, omega: float, v_lo=-2.0, v_hi=2.0):
    """Largest ``v`` in ``[v_lo, v_hi]`` meeting every robust constraint at turn rate ``omega`` (bisection)."""
    def ok(v):
        return imp.antecedent((v, omega))

    if not ok(v_lo):
        return None
    if ok(v_hi):
        return v_hi
    a, b = v_lo, v_hi
    for _ in range(60):
        mid = 0.5 * (a + b)
        if ok(mid):
            a = mid
        else:
            b = mid
    return a


def random_instance(rng, rig: CameraRig, n_pixels: int = 12, max_err: int = 3):
    """Random pose, true disparities, measurements and uncertainty sets containing the truth."""
    pose = RobotPose(*rng.uniform([-1.0, -1.0, -np.pi], [1.0, 1.0, np.pi]))
    u = rng.integers(0, rig.width, n_pixels)
    v = rng.integers(0, rig.height, n_pixels)
    d = rng.integers(1, rig.d_max + 1, n_pixels)
    e = rng.integers(-max_err, max_err + 1, n_pixels)
    d_hat = np.clip(d + e, 1, rig.d_max)
    q = np.abs(d_hat - d) + rng.integers(0, 3, n_pixels)
    sets = [uncertainty_set(rig, pose, (ui, vi), int(dh), int(qi))
            for ui, vi, dh, qi in zip(u, v, d_hat, q)]
    rho_true = transform(pose, reproject_many(rig, u, v, d))
    return pose, rho_true, sets


def theorem_trials(trials: int, seed: int = 0, rig: Optional[CameraRig] = None,
                   understate: float = 1.0, inputs_per_trial: int = 8, alpha: float = 1.0):
    """Randomised check of the robust-constraint => true-safety implication.

    Each trial draws an instance whose uncertainty sets contain the truth,
    then tests random inputs plus inputs pushed onto the boundary of the
    robust constraint. ``understate`` scales the valid Lipschitz constants;
    values below 1 form the negative control.
    Returns ``(n_trials, n_violating_trials)``.
    """
    rig = rig or CameraRig()
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        pose, rho_true, sets = random_instance(rng, rig)
        L = _instance_lipschitz(pose, sets, BarrierConfig(alpha=alpha)).scaled(understate)
        imp = _implication(pose, rho_true, sets, BarrierConfig(alpha=alpha, lipschitz=L))
        candidates = [rng.uniform(-1.0, 1.0, 2) for _ in range(inputs_per_trial)]
        for omega in rng.uniform(-1.0, 1.0, 2):
            v = _max_admissible_v(imp, omega)
            if v is not None:
                candidates.append(np.array([v, omega]))
        if not all(imp.holds(uc) for uc in candidates):
            bad += 1
    return trials, bad
