"""Line-based run configuration: ``key = value`` pairs with ``#`` comments.

Scene primitives use indexed keys::

    obstacle.0.kind = sphere
    obstacle.0.center = 1.55, 0, 0
    obstacle.0.radius = 0.25
    obstacle.0.texture = value_noise
    obstacle.0.texture.seed = 7

Unknown keys are rejected so that typos do not pass silently.
"""
from __future__ import annotations

import dataclasses
import re
from pathlib import Path

from .errormodel import FeatureScales
from .geometry import CameraRig
from .matching import MatchConfig
from .scene import Corruption, Plane, Scene, Sphere, TextureSpec


class ConfigError(ValueError):
    """Bad configuration; the message names the file, line or key at fault."""


def parse_lines(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = value
    return out


def _convert(raw: str, kind, key: str, source: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(","))
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{source}: field '{key}': cannot parse {raw!r} as {kind.__name__}") from None


def _texture(keys: dict, prefix: str, source: str, used: set) -> TextureSpec:
    fields = {"kind": str, "base_intensity": float, "contrast": float, "period_m": float,
              "scale_m": float, "seed": int, "intensity": float}
    kw = {}
    if prefix in keys:
        kw["kind"] = keys[prefix]
        used.add(prefix)
    for name, kind in fields.items():
        k = f"{prefix}.{name}"
        if k in keys:
            kw[name] = _convert(keys[k], kind, k, source)
            used.add(k)
    try:
        return TextureSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: field '{prefix}': {exc}") from None


def _obstacles(keys: dict, source: str, used: set):
    ids = sorted({int(m.group(1)) for k in keys if (m := re.match(r"obstacle\.(\d+)\.", k))})
    obs = []
    for i in ids:
        pre = f"obstacle.{i}"
        kind = keys.get(f"{pre}.kind")
        if kind is None:
            raise ConfigError(f"{source}: field '{pre}.kind' is required")
        used.add(f"{pre}.kind")
        tex = _texture(keys, f"{pre}.texture", source, used)

        def need(name, conv):
            k = f"{pre}.{name}"
            if k not in keys:
                raise ConfigError(f"{source}: field '{k}' is required for a {kind}")
            used.add(k)
            return _convert(keys[k], conv, k, source)

        try:
            if kind == "sphere":
                obs.append(Sphere(need("center", tuple), need("radius", float), tex))
            elif kind == "plane":
                obs.append(Plane(need("point", tuple), need("normal", tuple), tex))
            else:
                raise ConfigError(f"{source}: field '{pre}.kind': unknown obstacle kind {kind!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}: field '{pre}': {exc}") from None
    return tuple(obs)


def _section(cls, keys: dict, prefix: str, source: str, used: set, **defaults):
    kw = dict(defaults)
    for f in dataclasses.fields(cls):
        k = f"{prefix}.{f.name}"
        if k in keys:
            kind = {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type), float)
            kw[f.name] = _convert(keys[k], kind, k, source)
            used.add(k)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: section '{prefix}': {exc}") from None


def load_config(path, overrides: dict | None = None):
    """Parse a run configuration file into a :class:`~stereocbf.sim.SimConfig`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return config_from_text(text, str(path), overrides)


def config_from_text(text: str, source: str = "<config>", overrides: dict | None = None):
    from .sim import MODES, SimConfig, default_scene

    keys = parse_lines(text, source)
    used: set = set()
    top = {}
    for f in dataclasses.fields(SimConfig):
        if f.name in keys:
            kind = {"int": int, "float": float, "str": str, "bool": bool}.get(str(f.type))
            if kind is None:
                continue
            top[f.name] = _convert(keys[f.name], kind, f.name, source)
            used.add(f.name)
    if overrides:
        top.update({k: v for k, v in overrides.items() if v is not None})
    if "mode" in top and top["mode"] not in MODES:
        raise ConfigError(f"{source}: field 'mode': expected one of {', '.join(MODES)}")

    rig = _section(CameraRig, keys, "rig", source, used)
    match = _section(MatchConfig, keys, "match", source, used,
                     d_max=rig.d_max, uniqueness_ratio=1.1, lr_check=True)
    scales = _section(FeatureScales, keys, "features", source, used)

    obstacles = _obstacles(keys, source, used)
    start = top.get("start_distance", 1.3)
    if obstacles:
        kw = {}
        if "scene.background_depth" in keys:
            kw["background_depth"] = _convert(keys["scene.background_depth"], float,
                                              "scene.background_depth", source)
            used.add("scene.background_depth")
        if any(k.startswith("scene.background_texture") for k in keys):
            kw["background_texture"] = _texture(keys, "scene.background_texture", source, used)
        try:
            scene = Scene(obstacles, **kw)
        except ValueError as exc:
            raise ConfigError(f"{source}: section 'scene': {exc}") from None
    else:
        scene = default_scene(start)

    corruption = None
    if any(k.startswith("corruption.") for k in keys):
        ck = {}
        fields = {"bias": int, "seed": int, "fraction": float, "spread": int, "region": tuple}
        for name, kind in fields.items():
            k = f"corruption.{name}"
            if k in keys:
                ck[name] = _convert(keys[k], kind, k, source)
                used.add(k)
        if "bias" not in ck:
            raise ConfigError(f"{source}: field 'corruption.bias' is required")
        ck["region"] = tuple(int(x) for x in ck.get("region", (0, 0, rig.width, rig.height)))
        if len(ck["region"]) != 4:
            raise ConfigError(f"{source}: field 'corruption.region': expected u0,v0,u1,v1")
        try:
            corruption = Corruption(**ck)
        except ValueError as exc:
            raise ConfigError(f"{source}: section 'corruption': {exc}") from None

    unknown = sorted(set(keys) - used)
    if unknown:
        raise ConfigError(f"{source}: unknown field '{unknown[0]}'")
    try:
        return SimConfig(rig=rig, match=match, scales=scales, scene=scene, corruption=corruption, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
