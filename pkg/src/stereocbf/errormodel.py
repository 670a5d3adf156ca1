"""Per-pixel categorical model of stereo disparity error, learned without ground truth.

The model is a linear softmax over a handful of local appearance features.
Its training signal is the wide-baseline reconstruction error: the
disagreement between the directly matched map ``d13_hat`` and the map
``d13_bar`` composed from the two narrow-baseline matches.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import CameraRig, RobotPose, reproject_many, transform
from .matching import reconstruct, reconstruction_error
from .scene import INVALID, ImageTriple

N_FEATURES = 6
N_CLASSES = 5
FEATURE_NAMES = ("gradient", "std", "census", "discrepancy", "border", "bias")

_MAGIC = b"SCEM"
_VERSION = 1


class NoValidPixels(ValueError):
    """Every pixel of a frame is INVALID; there is nothing to learn from."""


class EmptySet(ValueError):
    """Uncertainty interval is empty once disparity 0 is excluded."""


@dataclass(frozen=True)
class FeatureScales:
    """Fixed divisors that put raw features on comparable scales.

    Raw units: intensity levels for gradient, std and discrepancy; pixels for
    the border distance, which saturates at ``border_cap``; the census
    density is a fraction. Dividing by a constant (rather than running
    statistics) keeps online updates stationary. The divisors also set how
    fast a fixed learning rate moves the predictions.
    """

    window_radius: int = 2
    gradient: float = 2.0
    std: float = 3.0
    census: float = 0.05
    discrepancy: float = 2.0
    border: float = 0.25
    border_cap: float = 10.0


def feature_map(I1, I3, d13_hat, scales: FeatureScales = FeatureScales()) -> np.ndarray:
    """Features for every pixel, shape ``(H, W, 6)``. Windows clamp at the border."""
    a = np.asarray(I1, dtype=np.float64)
    b = np.asarray(I3, dtype=np.float64)
    H, W = a.shape
    r = scales.window_radius
    size = 2 * r + 1

    ap = np.pad(a, 1, mode="edge")
    # mean of the one-sided differences; a central difference is blind to period-2 texture
    gx = 0.5 * (np.abs(ap[1:-1, 2:] - ap[1:-1, 1:-1]) + np.abs(ap[1:-1, 1:-1] - ap[1:-1, :-2]))
    grad = uniform_filter(gx, size=size, mode="nearest")

    mean = uniform_filter(a, size=size, mode="nearest")
    sq = uniform_filter(a * a, size=size, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))

    apad = np.pad(a, r, mode="edge")
    census = np.zeros((H, W))
    for dv in range(size):
        for du in range(size):
            census += apad[dv : dv + H, du : du + W] > a
    census /= size * size - 1

    vv, uu = np.mgrid[0:H, 0:W]
    d = np.where(d13_hat == INVALID, 0, d13_hat)
    bflat = b.ravel()
    base = uu - d
    disc = np.zeros((H, W))
    for dv in range(-r, r + 1):
        row_off = np.clip(vv + dv, 0, H - 1) * W
        a_rows = apad[r + dv : r + dv + H, :]
        for du in range(-r, r + 1):
            a_win = a_rows[:, r + du : r + du + W]
            disc += np.abs(a_win - np.take(bflat, row_off + np.clip(base + du, 0, W - 1)))
    disc /= size * size
    disc[d13_hat == INVALID] = 0.0

    border = np.minimum(np.minimum(uu, W - 1 - uu), np.minimum(vv, H - 1 - vv)).astype(float)
    border = np.minimum(border, scales.border_cap)

    return np.stack(
        [
            grad / scales.gradient,
            std / scales.std,
            census / scales.census,
            disc / scales.discrepancy,
            border / scales.border,
            np.ones((H, W)),
        ],
        axis=-1,
    )


def extract_features(I1, I3, d13_hat, p, scales: FeatureScales = FeatureScales()) -> np.ndarray:
    """Feature vector of the single pixel ``p = (u, v)``."""
    u, v = p
    return feature_map(I1, I3, d13_hat, scales)[v, u]


@dataclass
class ErrorModelParams:
    """Weights ``theta`` of shape ``(F, C)``; classes are ``|re| = 0, 1, ..., C-2, >= C-1``."""

    weights: np.ndarray

    @classmethod
    def zeros(cls, n_features: int = N_FEATURES, n_classes: int = N_CLASSES):
        return cls(np.zeros((n_features, n_classes)))

    @property
    def class_count(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ErrorModelParams":
        return ErrorModelParams(self.weights.copy())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ErrorModelParams, features: np.ndarray) -> np.ndarray:
    """Class probabilities for feature rows ``(..., F)`` -> ``(..., C)``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.weights.shape[0]:
        raise ValueError("feature dimension does not match the model")
    return softmax(features @ params.weights)


@dataclass
class Batch:
    """Valid pixels of one frame: features ``(N, F)``, classes ``(N,)`` and pixel rows/cols."""

    features: np.ndarray
    labels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray


def error_classes(re: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    return np.minimum(re, n_classes - 1)


def make_batch(I1, I3, d13_hat, d13_bar, n_classes=N_CLASSES, scales=FeatureScales(),
               features: Optional[np.ndarray] = None) -> Batch:
    """Training batch from a frame ``(I1, I3, d13_hat, d13_bar)``; INVALID pixels dropped."""
    re = reconstruction_error(d13_hat, d13_bar)
    rows, cols = np.nonzero(re != INVALID)
    if features is None:
        features = feature_map(I1, I3, d13_hat, scales)
    return Batch(features[rows, cols], error_classes(re[rows, cols], n_classes), rows, cols)


def loss_and_grad(params: ErrorModelParams, batch: Batch):
    """Mean cross-entropy over the batch and its gradient w.r.t. the weights."""
    n = batch.labels.shape[0]
    if n == 0:
        raise NoValidPixels("frame has no valid reconstruction-error pixels")
    P = predict(params, batch.features)
    logits = batch.features @ params.weights
    z = logits - logits.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(z).sum(axis=1))
    nll = logZ - z[np.arange(n), batch.labels]
    P[np.arange(n), batch.labels] -= 1.0
    grad = batch.features.T @ P / n
    return float(nll.mean()), grad


def loss(params: ErrorModelParams, batch: Batch) -> float:
    return loss_and_grad(params, batch)[0]


def sgd_step(params: ErrorModelParams, batch: Batch, eta: float) -> ErrorModelParams:
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    _, g = loss_and_grad(params, batch)
    return ErrorModelParams(params.weights - eta * g)


Matcher = Callable[[np.ndarray, np.ndarray], np.ndarray]


def disparities(triple: ImageTriple, matcher: Matcher):
    """The three pairwise matches ``(d12_hat, d23_hat, d13_hat)``."""
    return matcher(triple.I1, triple.I2), matcher(triple.I2, triple.I3), matcher(triple.I1, triple.I3)


def adapt_online(params: ErrorModelParams, triple: ImageTriple, matcher: Matcher, eta: float,
                 d_max: int, scales: FeatureScales = FeatureScales(), maps=None, features=None):
    """One pass of the self-supervised adaptation loop on a captured frame.

    Matches the three pairs (or takes precomputed ``maps``), composes the
    narrow maps, scores the reconstruction error and takes one gradient step.
    Returns ``(new_params, loss_before_step)``; a frame without valid pixels
    leaves the parameters untouched and reports ``None``.
    """
    d12, d23, d13 = maps if maps is not None else disparities(triple, matcher)
    d13_bar = reconstruct(d12, d23, d_max)
    batch = make_batch(triple.I1, triple.I3, d13, d13_bar, params.class_count, scales, features)
    try:
        value, g = loss_and_grad(params, batch)
    except NoValidPixels:
        return params, None
    return ErrorModelParams(params.weights - eta * g), value


# ---------------------------------------------------------------------------
# uncertainty sets


def quantile(dist: np.ndarray, sigma: float, d_max: int) -> np.ndarray:
    """Smallest ``k`` with ``P(|e| <= k) >= sigma``; the open top class maps to ``d_max``."""
    dist = np.asarray(dist, dtype=np.float64)
    if not 0.0 < sigma <= 1.0:
        raise ValueError("sigma must lie in (0, 1]")
    C = dist.shape[-1]
    cum = np.cumsum(dist, axis=-1)
    cum[..., -1] = np.maximum(cum[..., -1], 1.0)
    k = np.argmax(cum >= sigma - 1e-12, axis=-1)
    return np.where(k == C - 1, d_max, k)


@dataclass
class UncertaintySet:
    """Candidate disparities ``lo..hi`` around ``d_hat`` at pixel ``(u, v)`` and their world points."""

    pixel: tuple
    d_hat: int
    lo: int
    hi: int
    points: np.ndarray
    measured: np.ndarray

    @property
    def disparities(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)


def uncertainty_set(rig: CameraRig, pose: RobotPose, p, d_hat: int, q: int) -> UncertaintySet:
    if d_hat == INVALID:
        raise ValueError("uncertainty set needs a valid measured disparity")
    lo = max(1, d_hat - q)
    hi = min(rig.d_max, d_hat + q)
    if lo > hi or d_hat < 1:
        raise EmptySet(f"no usable disparity around {d_hat} with q={q}")
    xi = np.arange(lo, hi + 1)
    u, v = p
    pts = transform(pose, reproject_many(rig, u, v, xi))
    meas = transform(pose, reproject_many(rig, u, v, d_hat))
    return UncertaintySet((u, v), int(d_hat), lo, hi, pts, meas)


def epsilon_bound(s: UncertaintySet) -> float:
    """Largest distance from the measured point to any member, by enumeration."""
    return float(np.max(np.linalg.norm(s.points - s.measured, axis=-1)))


def worst_case_disparity(s: UncertaintySet):
    """Largest candidate disparity (closest possible point) and its world position."""
    return s.hi, s.points[-1]


def intervals(d_hat: np.ndarray, q: np.ndarray, d_max: int):
    """Vectorised interval bounds; ``usable`` is False where the set would be empty."""
    lo = np.maximum(1, d_hat - q)
    hi = np.minimum(d_max, d_hat + q)
    usable = (d_hat >= 1) & (lo <= hi)
    return lo, hi, usable


# ---------------------------------------------------------------------------
# persistence


def save_model(path, params: ErrorModelParams) -> None:
    """Versioned binary: magic, version, F, C (uint32 LE), row-major float64 LE."""
    F, C = params.weights.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", _VERSION, F, C))
        fh.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())


def load_model(path) -> ErrorModelParams:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an error-model file")
    version, F, C = struct.unpack("<III", data[4:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    w = np.frombuffer(data[16 : 16 + 8 * F * C], dtype="<f8").reshape(F, C).copy()
    return ErrorModelParams(w)
