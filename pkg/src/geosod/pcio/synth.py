"""Synthetic tabletop-style scenes: salient primitives on a cluttered ground plane."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import kvfile
from .cloud import PointCloud

KINDS = ("sphere", "box", "cylinder")


class SceneSpecError(ValueError):
    pass


@dataclass
class Primitive:
    """A surface primitive.

    ``scale`` is (radius, -, -) for spheres, half extents for boxes and
    (radius, -, half height) for cylinders. ``yaw`` rotates about +z.
    """

    kind: str
    center: tuple[float, float, float]
    scale: tuple[float, float, float]
    color: tuple[float, float, float]
    yaw: float = 0.0

    def area(self) -> float:
        a, b, c = self.scale
        if self.kind == "sphere":
            return 4.0 * np.pi * a * a
        if self.kind == "box":
            return 8.0 * (a * b + b * c + c * a)
        if self.kind == "cylinder":
            return 4.0 * np.pi * a * c + 2.0 * np.pi * a * a
        raise SceneSpecError(f"unknown primitive kind {self.kind!r}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a, b, c = self.scale
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
            local = d * a
        elif self.kind == "box":
            local = _sample_box(n, np.array([a, b, c]), rng)
        else:
            local = _sample_cylinder(n, a, c, rng)
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center, dtype=np.float64)


def _sample_box(n: int, half: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # faces come in +/- pairs normal to each axis
    face_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=face_area / face_area.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_cylinder(n: int, r: float, hh: float, rng: np.random.Generator) -> np.ndarray:
    side, cap = 4.0 * np.pi * r * hh, 2.0 * np.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + cap)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-hh, hh, size=n), rng.choice([-hh, hh], size=n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


@dataclass
class Background:
    extent: tuple[float, float] = (4.0, 3.0)
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    clutter: list[Primitive] = field(default_factory=list)
    # share of background points placed on clutter primitives
    clutter_density: float = 0.0


@dataclass
class SceneSpec:
    seed: int
    n_points: int
    objects: list[Primitive]
    background: Background = field(default_factory=Background)
    noise_std: float = 0.0
    object_fraction: float = 0.5
    color_noise: float = 0.0

    def validate(self) -> None:
        if self.n_points < 64:
            raise SceneSpecError(f"n_points must be >= 64, got {self.n_points}")
        if not self.objects:
            raise SceneSpecError("scene needs at least one object primitive")
        if not 0.0 < self.object_fraction < 1.0:
            raise SceneSpecError("object_fraction must lie in (0, 1)")
        if not 0.0 <= self.background.clutter_density < 1.0:
            raise SceneSpecError("clutter_density must lie in [0, 1)")
        if self.noise_std < 0 or self.color_noise < 0:
            raise SceneSpecError("noise levels must be non-negative")
        ex, ey = self.background.extent
        if ex <= 0 or ey <= 0:
            raise SceneSpecError("ground plane has zero area")
        for role, prims in (("object", self.objects), ("clutter", self.background.clutter)):
            for i, p in enumerate(prims):
                if p.kind not in KINDS:
                    raise SceneSpecError(f"{role} {i}: unknown kind {p.kind!r}")
                if not p.area() > 0:
                    raise SceneSpecError(f"{role} {i}: {p.kind} has zero surface area")


def _split(total: int, weights: list[float]) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` by ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    if rest:
        counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    return counts


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labelled cloud; object primitives are exactly the mask-1 points.

    Positions are rounded to float32 and colors to 8-bit steps so the cloud
    survives a PLY round trip unchanged.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_obj = int(round(spec.n_points * spec.object_fraction))
    n_obj = min(max(n_obj, 1), spec.n_points - 1)
    n_bg = spec.n_points - n_obj
    bg = spec.background
    n_clutter = int(round(n_bg * bg.clutter_density)) if bg.clutter else 0

    parts_pos, parts_col = [], []
    for prim, k in zip(spec.objects, _split(n_obj, [p.area() for p in spec.objects])):
        parts_pos.append(prim.sample(int(k), rng))
        parts_col.append(np.tile(prim.color, (int(k), 1)))
    if n_clutter:
        for prim, k in zip(bg.clutter, _split(n_clutter, [p.area() for p in bg.clutter])):
            parts_pos.append(prim.sample(int(k), rng))
            parts_col.append(np.tile(prim.color, (int(k), 1)))
    n_ground = n_bg - n_clutter
    ex, ey = bg.extent
    ground = np.column_stack([
        rng.uniform(-ex / 2, ex / 2, n_ground),
        rng.uniform(-ey / 2, ey / 2, n_ground),
        np.zeros(n_ground),
    ])
    parts_pos.append(ground)
    parts_col.append(np.tile(bg.color, (n_ground, 1)))

    pos = np.concatenate(parts_pos)
    col = np.concatenate(parts_col).astype(np.float64)
    if spec.noise_std > 0:
        pos = pos + rng.normal(scale=spec.noise_std, size=pos.shape)
    if spec.color_noise > 0:
        col = col + rng.normal(scale=spec.color_noise, size=col.shape)
    col = np.rint(np.clip(col, 0.0, 1.0) * 255.0) / 255.0
    pos = pos.astype(np.float32).astype(np.float64)
    mask = np.zeros(spec.n_points, dtype=np.uint8)
    mask[:n_obj] = 1
    # interleave so file order carries no label information
    perm = rng.permutation(spec.n_points)
    return PointCloud(pos[perm], col[perm], mask[perm])


# --- random scene recipes ------------------------------------------------

def _random_primitive(rng, size_lo, size_hi, extent, color) -> Primitive:
    kind = KINDS[rng.integers(3)]
    s = rng.uniform(size_lo, size_hi, size=3)
    if kind == "sphere":
        s[1] = s[2] = s[0]
        height = s[0]
    elif kind == "cylinder":
        s[1] = s[0]
        height = s[2]
    else:
        height = s[2]
    margin = np.array(extent) / 2 - size_hi
    xy = rng.uniform(-margin, margin)
    return Primitive(kind, (float(xy[0]), float(xy[1]), float(height)), tuple(float(v) for v in s),
                     tuple(float(v) for v in color), float(rng.uniform(0, np.pi)))


def random_scene_spec(seed: int, n_points: int, color_noise: float = 0.12) -> SceneSpec:
    """A randomized scene: 1-2 large objects, several small clutter items.

    Object colors are saturated, clutter and ground colors are muted, and
    per-point color noise blurs the two so single points stay ambiguous.
    """
    rng = np.random.default_rng(seed)
    extent = (float(rng.uniform(3.0, 5.0)), float(rng.uniform(2.5, 4.0)))

    def saturated():
        c = rng.uniform(0.0, 0.35, size=3)
        c[rng.integers(3)] = rng.uniform(0.6, 0.9)
        return c

    def muted():
        return np.full(3, rng.uniform(0.3, 0.6)) + rng.uniform(-0.08, 0.08, size=3)

    objects = [_random_primitive(rng, 0.25, 0.6, extent, saturated()) for _ in range(rng.integers(1, 3))]
    clutter = [_random_primitive(rng, 0.06, 0.18, extent, muted()) for _ in range(rng.integers(3, 9))]
    bg = Background(extent, tuple(float(v) for v in muted()), clutter, float(rng.uniform(0.1, 0.3)))
    return SceneSpec(
        seed=int(seed),
        n_points=int(n_points),
        objects=objects,
        background=bg,
        noise_std=0.005,
        object_fraction=float(rng.uniform(0.25, 0.5)),
        color_noise=color_noise,
    )


# --- key-value serialization ------------------------------------------------

def _prim_items(prefix: str, p: Primitive) -> dict:
    return {f"{prefix}.kind": p.kind, f"{prefix}.center": p.center, f"{prefix}.scale": p.scale,
            f"{prefix}.color": p.color, f"{prefix}.yaw": p.yaw}


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    items: dict = {
        "seed": spec.seed,
        "n_points": spec.n_points,
        "noise_std": spec.noise_std,
        "object_fraction": spec.object_fraction,
        "color_noise": spec.color_noise,
        "ground.extent": spec.background.extent,
        "ground.color": spec.background.color,
        "clutter_density": spec.background.clutter_density,
    }
    for i, p in enumerate(spec.objects):
        items.update(_prim_items(f"object.{i}", p))
    for i, p in enumerate(spec.background.clutter):
        items.update(_prim_items(f"clutter.{i}", p))
    return items


def _read_prims(kv: dict, role: str) -> list[Primitive]:
    out = []
    i = 0
    while f"{role}.{i}.kind" in kv:
        pre = f"{role}.{i}"
        out.append(Primitive(
            kv[f"{pre}.kind"],
            tuple(kvfile.floats(kv[f"{pre}.center"])),
            tuple(kvfile.floats(kv[f"{pre}.scale"])),
            tuple(kvfile.floats(kv[f"{pre}.color"])),
            float(kv.get(f"{pre}.yaw", "0")),
        ))
        i += 1
    return out


def scene_spec_from_dict(kv: dict) -> SceneSpec:
    try:
        bg = Background(
            tuple(kvfile.floats(kv.get("ground.extent", "4,3"))),
            tuple(kvfile.floats(kv.get("ground.color", "0.5,0.5,0.5"))),
            _read_prims(kv, "clutter"),
            float(kv.get("clutter_density", "0")),
        )
        return SceneSpec(
            seed=int(kv["seed"]),
            n_points=int(kv["n_points"]),
            objects=_read_prims(kv, "object"),
            background=bg,
            noise_std=float(kv.get("noise_std", "0")),
            object_fraction=float(kv.get("object_fraction", "0.5")),
            color_noise=float(kv.get("color_noise", "0")),
        )
    except KeyError as exc:
        raise SceneSpecError(f"scene config is missing key {exc.args[0]!r}") from None


def save_scene_spec(spec: SceneSpec, path: str | Path) -> None:
    kvfile.write(path, scene_spec_to_dict(spec))


def load_scene_spec(path: str | Path) -> SceneSpec:
    return scene_spec_from_dict(kvfile.read(path))


def make_dataset(count: int, seed: int, points=(2048, 8192), **style) -> list[PointCloud]:
    """``count`` random scenes with point counts drawn uniformly from ``points``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    sizes = rng.integers(points[0], points[1] + 1, size=count)
    return [generate_scene(random_scene_spec(int(s), int(n), **style)) for s, n in zip(seeds, sizes)]
