"""Scene files: a strict JSON description of teacher, cameras and pipeline settings.

Every object in the file is checked against a fixed key set; unknown or
mistyped keys raise :class:`SceneError` rather than being ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .field import AnalyticScene, Blob, MlpArch
from .geometry import Aabb, Camera
from .sampling import HCheckParams, SamplingConfig
from .training import DistillConfig
from .subdivision import BuildConfig


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class CameraSpec:
    position: tuple
    target: tuple = (0.5, 0.5, 0.5)
    up: tuple = (0.0, 1.0, 0.0)
    fov_y_deg: float = 40.0

    def camera(self, width: int, height: int) -> Camera:
        return Camera.look_at(self.position, self.target, self.up, math.radians(self.fov_y_deg), width, height)


@dataclass(frozen=True)
class RenderSettings:
    width: int = 128
    height: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    reference_steps: int = 1024


@dataclass(frozen=True)
class SceneConfig:
    teacher: AnalyticScene
    cameras: tuple
    build: BuildConfig = field(default_factory=BuildConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    kappa: float = 1.0
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def domain(self) -> Aabb:
        return self.teacher.domain

    def camera_objects(self) -> list[Camera]:
        return [c.camera(self.render.width, self.render.height) for c in self.cameras]

    def hcheck(self, cam: Camera) -> HCheckParams:
        return HCheckParams.for_camera(cam, self.kappa)

    def with_seed(self, seed: int) -> SceneConfig:
        return replace(self, build=replace(self.build, seed=seed, distill=replace(self.build.distill, seed=seed)),
                       sampling=replace(self.sampling, seed=seed))


# ---------------------------------------------------------------------------
# parsing

def _obj(v, where, allowed, required=()):
    if not isinstance(v, dict):
        raise SceneError(f"{where}: expected an object")
    extra = set(v) - set(allowed)
    if extra:
        raise SceneError(f"{where}: unknown key(s) {sorted(extra)}")
    missing = [k for k in required if k not in v]
    if missing:
        raise SceneError(f"{where}: missing key(s) {missing}")
    return v


def _num(v, where, integer=False):
    ok = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok:
        raise SceneError(f"{where}: expected {'an integer' if integer else 'a number'}")
    return v


def _vec(v, where, n=3):
    if not isinstance(v, list) or len(v) != n:
        raise SceneError(f"{where}: expected a list of {n} numbers")
    return tuple(float(_num(x, where)) for x in v)


def _typed(d, where, spec):
    out = {}
    for k, kind in spec.items():
        if k not in d:
            continue
        w = f"{where}.{k}"
        if kind == "int":
            out[k] = _num(d[k], w, integer=True)
        elif kind == "num":
            out[k] = float(_num(d[k], w))
        elif kind == "vec3":
            out[k] = _vec(d[k], w)
        elif kind == "str":
            if not isinstance(d[k], str):
                raise SceneError(f"{w}: expected a string")
            out[k] = d[k]
    return out


_BLOB = {"center": "vec3", "stddev": "num", "amplitude": "num", "color": "vec3",
         "view_dependence": "num", "view_axis": "vec3"}
_CAMERA = {"position": "vec3", "target": "vec3", "up": "vec3", "fov_y_deg": "num"}
_ARCH = {"width": "int", "depth": "int", "l_pos": "int", "l_dir": "int"}
_DISTILL = {"iterations": "int", "batch_size": "int", "dirs_per_point": "int", "lr": "num"}
_BUILD = {"cloud_points": "int", "cloud_dirs": "int", "max_depth": "int", "min_points": "int",
          "density_eps": "num", "threshold": "num", "target_score": "num", "score_points": "int", "score_dirs": "int",
          "seed": "int"}
_SAMPLING = {"budget": "int", "ray_cap": "int", "mode": "str", "kappa": "num"}
_RENDER = {"width": "int", "height": "int", "background": "vec3", "reference_steps": "int"}
_TOP = ("domain", "blobs", "cameras", "build", "sampling", "render")


def parse_scene(data: dict) -> SceneConfig:
    """Validate a decoded JSON document and build a :class:`SceneConfig`."""
    _obj(data, "scene", _TOP, ("domain", "blobs", "cameras"))
    dom = _obj(data["domain"], "domain", ("min", "max"), ("min", "max"))
    try:
        domain = Aabb(_vec(dom["min"], "domain.min"), _vec(dom["max"], "domain.max"))
        if not isinstance(data["blobs"], list):
            raise SceneError("blobs: expected a list")
        blobs = []
        for i, b in enumerate(data["blobs"]):
            w = f"blobs[{i}]"
            _obj(b, w, _BLOB, ("center", "stddev", "amplitude", "color"))
            blobs.append(Blob(**_typed(b, w, _BLOB)))
        teacher = AnalyticScene(tuple(blobs), domain)

        if not isinstance(data["cameras"], list) or not data["cameras"]:
            raise SceneError("cameras: expected a non-empty list")
        cams = []
        for i, c in enumerate(data["cameras"]):
            w = f"cameras[{i}]"
            _obj(c, w, _CAMERA, ("position",))
            cams.append(CameraSpec(**_typed(c, w, _CAMERA)))

        b = _obj(data.get("build", {}), "build", tuple(_BUILD) + ("arch", "distill"))
        arch = MlpArch(**_typed(_obj(b.get("arch", {}), "build.arch", _ARCH), "build.arch", _ARCH))
        dist = DistillConfig(**_typed(_obj(b.get("distill", {}), "build.distill", _DISTILL),
                                      "build.distill", _DISTILL))
        build = BuildConfig(arch=arch, distill=dist, **_typed(b, "build", _BUILD))
        build = replace(build, distill=replace(dist, seed=build.seed))

        s = _typed(_obj(data.get("sampling", {}), "sampling", _SAMPLING), "sampling", _SAMPLING)
        kappa = s.pop("kappa", 1.0)
        sampling = SamplingConfig(seed=build.seed, **s)
        render = RenderSettings(**_typed(_obj(data.get("render", {}), "render", _RENDER), "render", _RENDER))
        if render.width < 1 or render.height < 1 or render.reference_steps < 16:
            raise SceneError("render: width/height must be positive and reference_steps >= 16")
        cfg = SceneConfig(teacher, tuple(cams), build, sampling, kappa, render)
        for cam in cfg.camera_objects():
            cfg.hcheck(cam)
    except SceneError:
        raise
    except (TypeError, ValueError) as e:
        raise SceneError(str(e)) from e
    return cfg


def load_scene(path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}: invalid JSON ({e})") from e
    return parse_scene(data)


def scene_to_dict(cfg: SceneConfig) -> dict:
    """Inverse of :func:`parse_scene` (explicit values for every field)."""
    b = cfg.build
    return {
        "domain": {"min": list(cfg.domain.min), "max": list(cfg.domain.max)},
        "blobs": [{"center": [float(v) for v in bl.center], "stddev": bl.stddev, "amplitude": bl.amplitude,
                   "color": [float(v) for v in bl.color], "view_dependence": bl.view_dependence,
                   "view_axis": [float(v) for v in bl.view_axis]} for bl in cfg.teacher.blobs],
        "cameras": [{"position": list(c.position), "target": list(c.target), "up": list(c.up),
                     "fov_y_deg": c.fov_y_deg} for c in cfg.cameras],
        "build": {"cloud_points": b.cloud_points, "cloud_dirs": b.cloud_dirs, "max_depth": b.max_depth,
                  "min_points": b.min_points, "density_eps": b.density_eps, "threshold": b.threshold,
                  "score_points": b.score_points, "score_dirs": b.score_dirs, "seed": b.seed,
                  "arch": {"width": b.arch.width, "depth": b.arch.depth, "l_pos": b.arch.l_pos,
                           "l_dir": b.arch.l_dir},
                  "distill": {"iterations": b.distill.iterations, "batch_size": b.distill.batch_size,
                              "dirs_per_point": b.distill.dirs_per_point, "lr": b.distill.lr},
                  **({} if b.target_score is None else {"target_score": b.target_score})},
        "sampling": {"budget": cfg.sampling.budget, "ray_cap": cfg.sampling.ray_cap,
                     "mode": cfg.sampling.mode, "kappa": cfg.kappa},
        "render": {"width": cfg.render.width, "height": cfg.render.height,
                   "background": list(cfg.render.background), "reference_steps": cfg.render.reference_steps},
    }


def save_scene(cfg: SceneConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(cfg), f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# built-in scenes

UNIT = Aabb((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

# desk-scale build used by the built-in scenes: a fixed score target keeps trees
# around a hundred nodes and a build under two minutes on one core
BUILTIN_BUILD = BuildConfig(max_depth=7, target_score=40.0, distill=DistillConfig(iterations=500, batch_size=512))


def _orbit(dist, fov_deg, n=1):
    """Cameras on a ring around the unit cube centre, ``dist`` away."""
    cams = []
    for k in range(n):
        a = 0.6 + 2.0 * math.pi * k / n
        pos = (0.5 + dist * math.cos(a) * 0.94, 0.5 + dist * 0.34, 0.5 + dist * math.sin(a) * 0.94)
        cams.append(CameraSpec(pos, fov_y_deg=fov_deg))
    return tuple(cams)


def single_blob_scene() -> SceneConfig:
    t = AnalyticScene((Blob((0.5, 0.5, 0.5), 0.1, 20.0, (0.9, 0.5, 0.2), 0.3),), UNIT)
    return SceneConfig(t, _orbit(2.0, 40.0), BUILTIN_BUILD)


def imbalanced_scene() -> SceneConfig:
    """A small dense blob next to a broad faint one."""
    t = AnalyticScene((
        Blob((0.4, 0.45, 0.5), 0.03, 60.0, (0.9, 0.4, 0.2), 0.3),
        Blob((0.6, 0.55, 0.5), 0.09, 12.0, (0.2, 0.5, 0.9), 0.0),
    ), UNIT)
    return SceneConfig(t, _orbit(2.0, 40.0), BUILTIN_BUILD)


def standard_scene() -> SceneConfig:
    t = AnalyticScene((
        Blob((0.35, 0.4, 0.45), 0.08, 25.0, (0.9, 0.35, 0.2), 0.3),
        Blob((0.65, 0.55, 0.6), 0.1, 15.0, (0.2, 0.6, 0.9), 0.2),
        Blob((0.5, 0.7, 0.3), 0.06, 30.0, (0.3, 0.85, 0.3), 0.0),
    ), UNIT)
    return SceneConfig(t, _orbit(2.0, 40.0), BUILTIN_BUILD)


SCENES = {"single_blob": single_blob_scene, "imbalanced": imbalanced_scene, "standard": standard_scene}
