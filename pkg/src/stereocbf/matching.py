"""Integer block matching and three-view disparity reconstruction.

Disparity maps are ``int32`` arrays of shape ``(H, W)`` holding values in
``[0, d_max]`` or :data:`INVALID`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import INVALID

_MAGIC = b"DSPM"


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MatchConfig:
    """Block-matching parameters.

    ``uniqueness_ratio`` gates a pixel unless the best SAD beats the best
    non-adjacent competitor by that factor; 1.0 disables the gate.
    ``lr_check`` adds a left-right consistency test (tolerance 1 px).
    """

    window_radius: int = 2
    d_max: int = 48
    uniqueness_ratio: float = 1.0
    lr_check: bool = False

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if self.uniqueness_ratio < 1.0:
            raise ValueError("uniqueness_ratio must be >= 1")


def _box_sum(vol: np.ndarray, r: int) -> np.ndarray:
    """Sums over every full (2r+1)^2 window on the last two axes.

    Output is smaller by ``2r`` along both axes (valid windows only).
    Shifted-slice accumulation; exact for integer-valued float32 input.
    """
    H, W = vol.shape[-2:]
    h, w = H - 2 * r, W - 2 * r
    rows = vol[..., 0:h, :].copy()
    for k in range(1, 2 * r + 1):
        rows += vol[..., k : k + h, :]
    out = rows[..., 0:w].copy()
    for k in range(1, 2 * r + 1):
        out += rows[..., k : k + w]
    return out


def cost_volume(I_i: np.ndarray, I_j: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    """SAD cost ``C[d, v, u]`` of matching ``I_i(u, v)`` with ``I_j(u - d, v)``.

    Candidates whose window leaves either image are ``inf``.
    """
    if I_i.shape != I_j.shape:
        raise DimensionMismatch(f"{I_i.shape} vs {I_j.shape}")
    H, W = I_i.shape
    r = cfg.window_radius
    D = cfg.d_max + 1
    a = I_i.astype(np.float32)
    b = I_j.astype(np.float32)
    diff = np.zeros((D, H, W), dtype=np.float32)
    for d in range(min(D, W)):
        diff[d, :, d:] = np.abs(a[:, d:] - b[:, : W - d])
    cost = np.full((D, H, W), np.inf, dtype=np.float32)
    if H > 2 * r and W > 2 * r:
        cost[:, r : H - r, r : W - r] = _box_sum(diff, r)
    for d in range(D):
        # the window around u - d must stay inside I_j
        cost[d, :, : min(W, d + r)] = np.inf
    return cost


def _wta(cost: np.ndarray, ratio: float) -> np.ndarray:
    D = cost.shape[0]
    best = np.argmin(cost, axis=0)
    best_cost = np.take_along_axis(cost, best[None], axis=0)[0]
    disp = best.astype(np.int32)
    disp[~np.isfinite(best_cost)] = INVALID
    if ratio > 1.0:
        # best competitor at least two disparities away from the winner
        masked = cost.copy()
        for off in (-1, 0, 1):
            np.put_along_axis(masked, np.clip(best + off, 0, D - 1)[None], np.inf, axis=0)
        second = masked.min(axis=0)
        # without any admissible competitor uniqueness cannot be established
        ok = np.isfinite(second) & (second > ratio * best_cost)
        disp[~ok] = INVALID
    return disp


def match(I_i: np.ndarray, I_j: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    """Winner-take-all SAD disparity of ``I_i`` (left) against ``I_j`` (right).

    Output is indexed by ``I_i`` pixels; the match of ``(u, v)`` sits at
    ``(u - d, v)`` in ``I_j``.
    """
    cost = cost_volume(I_i, I_j, cfg)
    disp = _wta(cost, cfg.uniqueness_ratio)
    if cfg.lr_check:
        H, W = disp.shape
        D = cost.shape[0]
        # re-index the same volume by I_j pixel: C_R[d, v, u'] = C[d, v, u' + d]
        cost_r = np.full_like(cost, np.inf)
        for d in range(D):
            if d < W:
                cost_r[d, :, : W - d] = cost[d, :, d:]
        disp_r = _wta(cost_r, 1.0)
        v, u = np.nonzero(disp != INVALID)
        ur = u - disp[v, u]
        back = disp_r[v, ur]
        bad = (back == INVALID) | (np.abs(back - disp[v, u]) > 1)
        disp[v[bad], u[bad]] = INVALID
    return disp


def reconstruct(d12: np.ndarray, d23: np.ndarray, d_max: int) -> np.ndarray:
    """Compose narrow-baseline maps into a wide-baseline estimate.

    ``out(u, v) = d12(u, v) + d23(u - d12(u, v), v)`` clamped to ``d_max``;
    INVALID when either lookup is INVALID or leaves the image.
    """
    if d12.shape != d23.shape:
        raise DimensionMismatch(f"{d12.shape} vs {d23.shape}")
    H, W = d12.shape
    out = np.full((H, W), INVALID, dtype=np.int32)
    v, u = np.nonzero(d12 != INVALID)
    uh = u - d12[v, u]
    inside = (uh >= 0) & (uh < W)
    v, u, uh = v[inside], u[inside], uh[inside]
    look = d23[v, uh]
    good = look != INVALID
    v, u, look = v[good], u[good], look[good]
    out[v, u] = np.minimum(d12[v, u] + look, d_max)
    return out


def reconstruction_error(d13_hat: np.ndarray, d13_bar: np.ndarray) -> np.ndarray:
    """Per-pixel ``|d13_hat - d13_bar|``; INVALID where either input is."""
    if d13_hat.shape != d13_bar.shape:
        raise DimensionMismatch(f"{d13_hat.shape} vs {d13_bar.shape}")
    bad = (d13_hat == INVALID) | (d13_bar == INVALID)
    re = np.abs(d13_hat.astype(np.int32) - d13_bar.astype(np.int32))
    re[bad] = INVALID
    return re


def save_disparity(path, d: np.ndarray, d_max: int) -> None:
    """16-bit grid file: magic, W, H, d_max (uint32 LE), row-major uint16; 0xFFFF = INVALID."""
    H, W = d.shape
    vals = np.where(d == INVALID, 0xFFFF, d).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", W, H, d_max))
        fh.write(vals.tobytes())


def load_disparity(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: bad disparity file magic")
    W, H, d_max = struct.unpack("<III", data[4:16])
    vals = np.frombuffer(data[16 : 16 + 2 * W * H], dtype="<u2").reshape(H, W)
    out = vals.astype(np.int32)
    out[vals == 0xFFFF] = INVALID
    return out, d_max
