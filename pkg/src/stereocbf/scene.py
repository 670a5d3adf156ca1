"""Procedural scenes, ray-cast image triples and ground-truth disparities.

The synthetic world honours the integer-disparity model: every surface point
seen by the reference camera is snapped to an even wide-baseline disparity
``2k`` so that its projections in the centre and right cameras land exactly
``k`` and ``2k`` columns to the left. The reference image is ray cast; the
other two views are forward-warped from it with a z-buffer (nearer points
win) and any disoccluded holes are ray cast from the camera itself.
Because of this construction the ground-truth maps satisfy
``d13(u, v) == d12(u, v) + d23(u - d12(u, v), v)`` at every unoccluded pixel.

Camera layout (lateral offsets along the robot's left axis): camera 1 at 0,
camera 2 at ``-b/2``, camera 3 at ``-b``. Disparities are positive and the
match of an ``I1`` pixel in ``I2``/``I3`` sits at a smaller column.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .geometry import CameraRig, RobotPose

INVALID = -1


@dataclass(frozen=True)
class TextureSpec:
    """Surface texture.

    ``kind`` is ``"checker"`` (uses ``period_m``), ``"value_noise"`` (uses
    ``scale_m`` and ``seed``) or ``"flat"`` (uses ``intensity``).
    """

    kind: str = "value_noise"
    base_intensity: float = 128.0
    contrast: float = 0.8
    period_m: float = 0.05
    scale_m: float = 0.02
    seed: int = 0
    intensity: float = 128.0

    def __post_init__(self):
        if self.kind not in ("checker", "value_noise", "flat"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")
        for val in (self.base_intensity, self.intensity):
            if not 0.0 <= val <= 255.0:
                raise ValueError("intensities must lie in [0, 255]")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: TextureSpec = field(default_factory=TextureSpec)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    texture: TextureSpec = field(default_factory=TextureSpec)

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")


Primitive = Union[Sphere, Plane]


@dataclass(frozen=True)
class Scene:
    """Obstacles in the world frame plus a far backdrop.

    The backdrop is a fronto-parallel wall at forward distance
    ``background_depth`` from the reference camera; it catches every ray
    that misses the obstacles.
    """

    obstacles: tuple
    background_depth: float = 100.0
    background_texture: TextureSpec = field(
        default_factory=lambda: TextureSpec(kind="flat", intensity=128.0)
    )

    def __post_init__(self):
        if len(self.obstacles) == 0:
            raise ValueError("scene needs at least one obstacle")
        if self.background_depth <= 0:
            raise ValueError("background_depth must be positive")

    def translated(self, offset) -> "Scene":
        """Copy of the scene with every obstacle shifted by ``offset`` (world frame)."""
        off = np.asarray(offset, dtype=float)
        obs = []
        for ob in self.obstacles:
            if isinstance(ob, Sphere):
                obs.append(Sphere(tuple(np.asarray(ob.center) + off), ob.radius, ob.texture))
            else:
                obs.append(Plane(tuple(np.asarray(ob.point) + off), ob.normal, ob.texture))
        return Scene(tuple(obs), self.background_depth, self.background_texture)


@dataclass
class ImageTriple:
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray

    def __post_init__(self):
        if not (self.I1.shape == self.I2.shape == self.I3.shape):
            raise ValueError("image triple must share one shape")


@dataclass
class GroundTruth:
    """Ground-truth maps; ``d12``, ``d13`` and ``depth`` are indexed by ``I1``
    pixels, ``d23`` by ``I2`` pixels."""

    d12: np.ndarray
    d23: np.ndarray
    d13: np.ndarray
    depth: np.ndarray
    occlusion_mask: np.ndarray


# ---------------------------------------------------------------------------
# textures


def _hash01(ix, iy, iz, seed):
    """Deterministic lattice hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
            ^ np.uint64(seed) * np.uint64(0x27D4EB2F165667C5)
        )
        h ^= h >> np.uint64(29)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(pts, scale, seed):
    g = pts / scale
    i0 = np.floor(g)
    fr = g - i0
    w = fr * fr * (3.0 - 2.0 * fr)
    i0 = i0.astype(np.int64)
    out = np.zeros(pts.shape[:-1])
    for dx in (0, 1):
        wx = w[..., 0] if dx else 1.0 - w[..., 0]
        for dy in (0, 1):
            wy = w[..., 1] if dy else 1.0 - w[..., 1]
            for dz in (0, 1):
                wz = w[..., 2] if dz else 1.0 - w[..., 2]
                val = _hash01(i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz, seed)
                out += wx * wy * wz * val
    return out


def shade(texture: TextureSpec, pts: np.ndarray) -> np.ndarray:
    """Intensity in [0, 255] of ``texture`` at local surface points ``pts`` (..., 3)."""
    if texture.kind == "flat":
        return np.full(pts.shape[:-1], float(texture.intensity))
    amp = 127.0 * texture.contrast
    if texture.kind == "checker":
        cells = np.floor(pts / texture.period_m).astype(np.int64).sum(axis=-1)
        sign = np.where(cells % 2 == 0, 1.0, -1.0)
        val = texture.base_intensity + amp * sign
    else:
        n = 0.65 * _value_noise(pts, texture.scale_m, texture.seed)
        n += 0.35 * _value_noise(pts, texture.scale_m * 0.5, texture.seed + 7919)
        val = texture.base_intensity + amp * (2.0 * n - 1.0) / 0.75
    return np.clip(val, 0.0, 255.0)


# ---------------------------------------------------------------------------
# ray casting


def _ray_dirs(rig: CameraRig):
    """Unnormalised camera-frame ray directions with unit forward component."""
    v, u = np.mgrid[0 : rig.height, 0 : rig.width].astype(float)
    f = rig.focal_length_px
    return np.stack([np.ones_like(u), -(u - rig.cu) / f, -(v - rig.cv) / f], axis=-1)


def cast(scene: Scene, pose: RobotPose, rig: CameraRig, lateral: float, mask=None):
    """Ray cast one camera at ``lateral`` offset along the robot left axis.

    Returns ``(intensity, depth)`` where depth is the forward distance from
    the camera plane. With a boolean ``mask`` only those pixels are cast and
    the rest are left at zero.
    """
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    origin = np.array([pose.x, pose.y, 0.0]) + R @ np.array([0.0, lateral, 0.0])
    local_dirs = _ray_dirs(rig)
    if mask is None:
        mask = np.ones(rig.shape, dtype=bool)
    local_dirs = local_dirs[mask]
    dirs = local_dirs @ R.T
    n = dirs.shape[0]

    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    eps = 1e-9
    for k, ob in enumerate(scene.obstacles):
        if isinstance(ob, Sphere):
            oc = origin - np.asarray(ob.center, dtype=float)
            a = np.einsum("...i,...i->...", dirs, dirs)
            b = 2.0 * dirs @ oc
            cc = oc @ oc - ob.radius**2
            disc = b * b - 4.0 * a * cc
            hit = disc >= 0.0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = (-b - sq) / (2.0 * a)
            t1 = (-b + sq) / (2.0 * a)
            t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
            t = np.where(hit, t, np.inf)
        else:
            nrm = np.asarray(ob.normal, dtype=float)
            denom = dirs @ nrm
            num = (np.asarray(ob.point, dtype=float) - origin) @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            t = np.where(t > eps, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, k, best_id)

    back = best_t >= scene.background_depth
    best_t = np.where(back, scene.background_depth, best_t)
    best_id = np.where(back, -1, best_id)

    pts = origin + dirs * best_t[:, None]
    vals = np.zeros(n)
    for k, ob in enumerate(scene.obstacles):
        m = best_id == k
        if np.any(m):
            anchor = np.asarray(ob.center if isinstance(ob, Sphere) else ob.point, dtype=float)
            vals[m] = shade(ob.texture, pts[m] - anchor)
    m = best_id == -1
    if np.any(m):
        # backdrop texture lives in the rig frame: (left, up) on the wall
        local = local_dirs[m] * scene.background_depth
        local[:, 1] += lateral
        vals[m] = shade(scene.background_texture, local)
    img = np.zeros(rig.shape)
    depth = np.zeros(rig.shape)
    img[mask] = vals
    depth[mask] = best_t
    return img, depth


def half_disparity(rig: CameraRig, depth: np.ndarray) -> np.ndarray:
    """Integer narrow-baseline disparity ``k = round(f*b / (2 z))``, ties to even."""
    return np.rint(rig.fb / (2.0 * depth)).astype(np.int64)


def _warp(src_img, src_k, shift_mult, rig, targets=None):
    """Forward-warp rows of ``src_img`` left by ``shift_mult * src_k`` with a z-buffer.

    ``targets`` is an optional pre-filled ``(img, k, owner)`` to merge into.
    Returns target image, winning half-disparity, owner id (flat source
    index, -1 for none) and the per-source target column.
    """
    H, W = rig.shape
    if targets is None:
        img = np.zeros((H, W))
        kbuf = np.full((H, W), -1, dtype=np.int64)
        owner = np.full((H, W), -1, dtype=np.int64)
    else:
        img, kbuf, owner = (a.copy() for a in targets)
    v, u = np.mgrid[0:H, 0:W]
    ut = u - shift_mult * src_k
    ok = (ut >= 0) & (ut < W)
    flat_t = v * W + ut
    src_ids = v * W + u
    kk = src_k[ok]
    tt = flat_t[ok]
    # z-buffer: larger disparity is nearer and wins
    best = np.full(H * W, -1, dtype=np.int64)
    np.maximum.at(best, tt, kk)
    best = np.maximum(best, kbuf.ravel())
    win = kk == best[tt]
    img.ravel()[tt[win]] = src_img[ok][win]
    kbuf.ravel()[tt[win]] = kk[win]
    owner.ravel()[tt[win]] = src_ids[ok][win]
    return img, kbuf, owner, ut


def render_triple(scene: Scene, pose: RobotPose, rig: CameraRig):
    """Render ``(ImageTriple, GroundTruth)`` for the rig at ``pose``.

    Images are 8-bit grayscale; ground-truth disparities are clamped to
    ``[0, d_max]``.
    """
    H, W = rig.shape
    off1, off2, off3 = rig.camera_offsets()
    img1, depth1 = cast(scene, pose, rig, off1)
    k1 = half_disparity(rig, depth1)

    img2, kb2, own2, ut2 = _warp(img1, k1, 1, rig)
    holes2 = kb2 < 0
    if np.any(holes2):
        fill, dfill = cast(scene, pose, rig, off2, holes2)
        img2[holes2] = fill[holes2]
        kb2[holes2] = half_disparity(rig, dfill[holes2])

    # I3 receives I1 points (shift 2k) and the I2 hole pixels (shift k)
    img3, kb3, own3, ut3 = _warp(img1, 2 * k1, 1, rig)
    # keep z-buffer in half-disparity units
    kb3 = np.where(kb3 >= 0, kb3 // 2, -1)
    if np.any(holes2):
        v, u = np.nonzero(holes2)
        kh = kb2[v, u]
        ut = u - kh
        ok = (ut >= 0) & (ut < W)
        v, ut, kh, vals = v[ok], ut[ok], kh[ok], img2[v[ok], u[ok]]
        flat = v * W + ut
        best = kb3.ravel().copy()
        np.maximum.at(best, flat, kh)
        win = (kh == best[flat]) & (kh > kb3.ravel()[flat])
        kb3.ravel()[flat[win]] = kh[win]
        img3.ravel()[flat[win]] = vals[win]
        own3.ravel()[flat[win]] = -2
    holes3 = kb3 < 0
    if np.any(holes3):
        fill, _ = cast(scene, pose, rig, off3, holes3)
        img3[holes3] = fill[holes3]

    src = np.arange(H * W).reshape(H, W)
    vv = np.arange(H)[:, None]
    in2 = (ut2 >= 0) & (ut2 < W)
    in3 = (ut3 >= 0) & (ut3 < W)
    seen2 = np.zeros((H, W), dtype=bool)
    seen3 = np.zeros((H, W), dtype=bool)
    seen2[in2] = own2[np.broadcast_to(vv, (H, W))[in2], ut2[in2]] == src[in2]
    seen3[in3] = own3[np.broadcast_to(vv, (H, W))[in3], ut3[in3]] == src[in3]
    occlusion = ~(seen2 & seen3)

    dmax = rig.d_max
    gt = GroundTruth(
        d12=np.clip(k1, 0, dmax).astype(np.int32),
        d23=np.clip(kb2, 0, dmax).astype(np.int32),
        d13=np.clip(2 * k1, 0, dmax).astype(np.int32),
        depth=depth1,
        occlusion_mask=occlusion,
    )
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return ImageTriple(to8(img1), to8(img2), to8(img3)), gt


# ---------------------------------------------------------------------------
# scripted failures


@dataclass(frozen=True)
class Corruption:
    """Disparity bias applied inside ``region = (u0, v0, u1, v1)`` (half-open).

    ``fraction`` < 1 corrupts a seeded random subset of the region and
    ``spread`` > 0 adds a seeded per-pixel extra bias drawn from
    ``0..spread``. Random draws depend on ``(seed, frame)``.
    """

    region: tuple
    bias: int
    seed: int = 0
    fraction: float = 1.0
    spread: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")


def corrupt_disparity(d: np.ndarray, corr: Corruption, d_max: int, frame: int = 0) -> np.ndarray:
    """Subtract ``corr.bias`` inside the region; lower disparity reads as farther.

    INVALID entries are left untouched and results are clamped to ``[0, d_max]``.
    """
    H, W = d.shape
    u0, v0, u1, v1 = corr.region
    if not (0 <= u0 <= u1 <= W and 0 <= v0 <= v1 <= H):
        raise ValueError(f"corruption region {corr.region} outside {W}x{H} image")
    out = d.copy()
    mask = np.zeros(d.shape, dtype=bool)
    mask[v0:v1, u0:u1] = True
    rng = np.random.default_rng([corr.seed, frame])
    if corr.fraction < 1.0:
        mask &= rng.random(d.shape) < corr.fraction
    bias = np.full(d.shape, corr.bias)
    if corr.spread > 0:
        bias = bias + rng.integers(0, corr.spread + 1, d.shape)
    mask &= d != INVALID
    out[mask] = np.clip(d[mask] - bias[mask], 0, d_max)
    return out


# ---------------------------------------------------------------------------
# debug export


def write_pgm(path, img: np.ndarray) -> None:
    """Write an 8-bit image as binary PGM (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()
