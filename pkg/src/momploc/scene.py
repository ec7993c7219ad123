"""Synthetic street scenes and their specular multipath.

A scene holds an RSU, a vehicle and a handful of finite vertical plates.
Plates are placed so that each one produces a first-order reflection
whose excess length fits inside the receiver's delay window; double
reflections between plates are traced when the geometry allows them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

from .errors import ConfigError
from .geometry import SPEED_OF_LIGHT, Direction, unit


class PathOrder(IntEnum):
    """Class index used by the path classifier (1-based)."""

    LOS = 1
    FIRST = 2
    OTHER = 3


@dataclass(frozen=True)
class Reflector:
    """Finite vertical plate with horizontal unit normal."""

    normal: tuple[float, float, float]
    center: tuple[float, float, float]
    half_width: float
    z_min: float
    z_max: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ConfigError("reflector normal must be a unit vector")

    @property
    def offset(self) -> float:
        return float(np.dot(self.normal, self.center))

    @property
    def tangent(self) -> np.ndarray:
        n = self.normal
        return unit(np.array([-n[1], n[0], 0.0]))

    def mirror(self, p: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal)
        return p - 2.0 * (np.dot(n, p) - self.offset) * n

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        s = np.dot(self.tangent, p - np.asarray(self.center))
        return abs(s) <= self.half_width + tol and self.z_min - tol <= p[2] <= self.z_max + tol

    def intersect(self, a: np.ndarray, b: np.ndarray) -> float | None:
        """Segment parameter t in (0, 1) where a + t(b - a) meets the plane."""
        n = np.asarray(self.normal)
        den = np.dot(n, b - a)
        if abs(den) < 1e-15:
            return None
        t = (self.offset - np.dot(n, a)) / den
        return t if 0.0 < t < 1.0 else None


@dataclass(frozen=True)
class GainModel:
    carrier_hz: float = 73e9
    path_loss_exponent: float = 2.0
    reflection_loss: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.reflection_loss < 1.0:
            raise ConfigError("reflection loss factor must lie in (0, 1)")
        if self.path_loss_exponent <= 0:
            raise ConfigError("path loss exponent must be positive")


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic urban cross-section: 4 lanes along x, RSU on the +y sidewalk."""

    rsu_position: tuple[float, float, float] = (0.0, 18.0, 8.0)
    rsu_facing: tuple[float, float, float] = (0.0, -1.0, 0.0)
    vehicle_x: tuple[float, float] = (-25.0, 25.0)
    min_abs_dx: float = 5.0
    lane_centers: tuple[float, ...] = (1.75, 5.25, 8.75, 12.25)
    lane_jitter: float = 0.5
    vehicle_height: float = 1.6
    box_x: tuple[float, float] = (-50.0, 50.0)
    box_y: tuple[float, float] = (-6.0, 17.0)
    box_z: tuple[float, float] = (0.0, 12.0)
    n_reflectors: tuple[int, int] = (3, 6)
    excess_range: tuple[float, float] = (1.0, 9.0)
    half_width_range: tuple[float, float] = (1.0, 3.0)
    min_leg: float = 2.0
    min_arrival_cos: float = 0.34
    min_departure_cos: float = 0.34
    min_separation_deg: float = 4.0
    min_length_gap: float = 0.5
    p_los_blocked: float = 0.5
    double_reflections: bool = True
    max_attempts: int = 4000
    gain: GainModel = field(default_factory=GainModel)

    def __post_init__(self):
        lo, hi = self.n_reflectors
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad reflector count range {self.n_reflectors}")
        if not 0.0 <= self.p_los_blocked <= 1.0:
            raise ConfigError("LoS blockage probability must lie in [0, 1]")
        for name in ("vehicle_x", "box_x", "box_y", "box_z", "excess_range", "half_width_range"):
            a, b = getattr(self, name)
            if not a < b:
                raise ConfigError(f"{name} must be an increasing interval, got {(a, b)}")
        if self.min_abs_dx >= max(abs(self.vehicle_x[0]), abs(self.vehicle_x[1])):
            raise ConfigError("min_abs_dx excludes the whole vehicle_x range")
        if not self.lane_centers:
            raise ConfigError("need at least one lane")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "gain" in d and isinstance(d["gain"], dict):
            d["gain"] = GainModel(**d["gain"])
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Scene:
    x_r: np.ndarray
    x_t: np.ndarray
    reflectors: tuple[Reflector, ...]
    los_blocked: bool
    seed: int = 0
    rsu_facing: tuple[float, float, float] = (0.0, -1.0, 0.0)
    gain: GainModel = field(default_factory=GainModel)
    vehicle_facing: tuple[float, float, float] | None = None  # None: no panel limits

    def __post_init__(self):
        object.__setattr__(self, "x_r", np.asarray(self.x_r, dtype=float))
        object.__setattr__(self, "x_t", np.asarray(self.x_t, dtype=float))
        if np.allclose(self.x_r, self.x_t):
            raise ConfigError("RSU and vehicle positions coincide")

    @property
    def d_los(self) -> float:
        return float(np.linalg.norm(self.x_t - self.x_r))


@dataclass(frozen=True)
class PathParams:
    """One propagation path.

    ``doa`` points from the RSU toward the last interaction (or the
    vehicle), ``dod`` from the vehicle toward the first interaction (or the
    RSU); both are global unit vectors.
    """

    gain: complex
    doa: Direction
    dod: Direction
    delay: float
    order: PathOrder
    length: float = 0.0
    bounces: int = 0
    points: tuple = ()


def path_gain_model(length: float, bounces: int, cfg: GainModel, rng: np.random.Generator) -> complex:
    """Free-space amplitude law, per-bounce loss and a uniform random phase."""
    if not length > 0:
        raise ValueError("path length must be positive")
    lam = SPEED_OF_LIGHT / cfg.carrier_hz
    amp = lam / (4.0 * np.pi) * length ** (-cfg.path_loss_exponent / 2.0)
    amp *= cfg.reflection_loss ** bounces
    return complex(amp * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi)))


def _reflection_point(x_r, x_t, refl: Reflector):
    img = refl.mirror(x_t)
    t = refl.intersect(x_r, img)
    if t is None:
        return None
    p = x_r + t * (img - x_r)
    return p if refl.contains(p) else None


PANEL_FACINGS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, -1.0, 0.0))


def best_panel(x_t, x_r) -> tuple[float, float, float]:
    """Roof panel (one of four horizontal facings) best aligned with the RSU."""
    v = np.asarray(x_r, dtype=float) - np.asarray(x_t, dtype=float)
    return PANEL_FACINGS[int(np.argmax([np.dot(f, v) for f in PANEL_FACINGS]))]


def _sample_vehicle(cfg: SceneConfig, rng, x_r, facing) -> tuple[np.ndarray, tuple]:
    for _ in range(cfg.max_attempts):
        x = rng.uniform(*cfg.vehicle_x)
        if abs(x - cfg.rsu_position[0]) < cfg.min_abs_dx:
            continue
        lane = cfg.lane_centers[rng.integers(len(cfg.lane_centers))]
        y = lane + rng.uniform(-cfg.lane_jitter, cfg.lane_jitter)
        x_t = np.array([x, y, cfg.vehicle_height])
        panel = best_panel(x_t, x_r)
        los = unit(x_t - x_r)
        if np.dot(los, facing) >= cfg.min_arrival_cos and np.dot(-los, panel) >= cfg.min_departure_cos:
            return x_t, panel
    raise ConfigError("no vehicle position satisfies the array field-of-view limits")


def _angle_deg(a, b) -> float:
    return float(np.degrees(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0))))


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Random scene; identical output for identical (cfg, seed)."""
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    x_r = np.asarray(cfg.rsu_position, dtype=float)
    facing = unit(np.asarray(cfg.rsu_facing, dtype=float))
    x_t, panel = _sample_vehicle(cfg, rng, x_r, facing)
    blocked = bool(rng.random() < cfg.p_los_blocked)
    lo, hi = cfg.n_reflectors
    n_refl = int(rng.integers(lo, hi + 1))
    if blocked:
        n_refl = max(n_refl, 3)

    d_los = np.linalg.norm(x_t - x_r)
    los_doa = unit(x_t - x_r)
    los_dod = -los_doa
    doas, dods = [los_doa], [los_dod]
    lengths = [d_los]
    reflectors: list[Reflector] = []
    attempts = 0
    n_min = max(lo, 3) if blocked else lo
    # reflection points with excess <= excess_max lie inside an ellipse around R and T
    half = 0.5 * (d_los + cfg.excess_range[1])
    mid = 0.5 * (x_r[:2] + x_t[:2])
    sx = (max(cfg.box_x[0], mid[0] - half), min(cfg.box_x[1], mid[0] + half))
    sy = (max(cfg.box_y[0], mid[1] - half), min(cfg.box_y[1], mid[1] + half))
    if not (sx[0] < sx[1] and sy[0] < sy[1]):
        raise ConfigError("reflector box does not overlap the reachable region")
    while len(reflectors) < n_refl:
        attempts += 1
        if attempts > cfg.max_attempts:
            if len(reflectors) >= n_min:
                break
            raise ConfigError("could not place reflectors inside the configured bounds")
        ph = np.array([rng.uniform(*sx), rng.uniform(*sy)])
        to_r = x_r[:2] - ph
        to_t = x_t[:2] - ph
        if np.linalg.norm(to_r) < 1e-6 or np.linalg.norm(to_t) < 1e-6:
            continue
        bis = to_r / np.linalg.norm(to_r) + to_t / np.linalg.norm(to_t)
        if np.linalg.norm(bis) < 1e-6:
            continue
        n2 = bis / np.linalg.norm(bis)
        normal = (float(n2[0]), float(n2[1]), 0.0)
        hw = rng.uniform(*cfg.half_width_range)
        tangent = np.array([-n2[1], n2[0], 0.0])
        shift = rng.uniform(-0.5, 0.5) * hw
        z0, z1 = cfg.box_z
        center = np.array([ph[0], ph[1], 0.5 * (z0 + z1)]) + shift * tangent
        refl = Reflector(normal, tuple(float(c) for c in center), float(hw), float(z0), float(z1))
        p = _reflection_point(x_r, x_t, refl)
        if p is None:
            continue
        d_a = np.linalg.norm(p - x_r)
        d_d = np.linalg.norm(p - x_t)
        excess = d_a + d_d - d_los
        if not cfg.excess_range[0] <= excess <= cfg.excess_range[1]:
            continue
        if min(d_a, d_d) < cfg.min_leg:
            continue
        doa = (p - x_r) / d_a
        dod = (p - x_t) / d_d
        if np.dot(doa, facing) < cfg.min_arrival_cos or np.dot(dod, panel) < cfg.min_departure_cos:
            continue
        if any(abs(d_a + d_d - l) < cfg.min_length_gap for l in lengths):
            continue
        sep = cfg.min_separation_deg
        if any(_angle_deg(doa, a) < sep for a in doas) or any(_angle_deg(dod, b) < sep for b in dods):
            continue
        doas.append(doa)
        dods.append(dod)
        lengths.append(d_a + d_d)
        reflectors.append(refl)

    return Scene(
        x_r=x_r,
        x_t=x_t,
        reflectors=tuple(reflectors),
        los_blocked=blocked,
        seed=int(seed),
        rsu_facing=tuple(float(v) for v in facing),
        gain=cfg.gain,
        vehicle_facing=panel,
    )


def _double_path(x_r, x_t, ri: Reflector, rj: Reflector):
    """T -> plate i -> plate j -> R, or None when not realizable."""
    t1 = ri.mirror(x_t)
    t2 = rj.mirror(t1)
    s = rj.intersect(x_r, t2)
    if s is None:
        return None
    pj = x_r + s * (t2 - x_r)
    if not rj.contains(pj):
        return None
    s2 = ri.intersect(pj, t1)
    if s2 is None:
        return None
    pi = pj + s2 * (t1 - pj)
    if not ri.contains(pi):
        return None
    return pi, pj, float(np.linalg.norm(t2 - x_r))


def trace_paths(scene: Scene, include_double: bool = True) -> list[PathParams]:
    """Ground-truth LoS, first- and second-order paths sorted by delay."""
    x_r, x_t = scene.x_r, scene.x_t
    facing = np.asarray(scene.rsu_facing)
    panel = None if scene.vehicle_facing is None else np.asarray(scene.vehicle_facing)

    def visible(doa, dod) -> bool:
        return np.dot(doa, facing) > 0 and (panel is None or np.dot(dod, panel) > 0)

    raw = []  # (length, doa, dod, order, bounces, points)
    if not scene.los_blocked:
        v = x_t - x_r
        d = np.linalg.norm(v)
        raw.append((d, v / d, -v / d, PathOrder.LOS, 0, ()))
    for refl in scene.reflectors:
        p = _reflection_point(x_r, x_t, refl)
        if p is None:
            continue
        d_a = np.linalg.norm(p - x_r)
        d_d = np.linalg.norm(p - x_t)
        doa = (p - x_r) / d_a
        dod = (p - x_t) / d_d
        if not visible(doa, dod):
            continue
        raw.append((d_a + d_d, doa, dod, PathOrder.FIRST, 1, (tuple(p),)))
    if include_double:
        for i, ri in enumerate(scene.reflectors):
            for j, rj in enumerate(scene.reflectors):
                if i == j:
                    continue
                res = _double_path(x_r, x_t, ri, rj)
                if res is None:
                    continue
                pi, pj, length = res
                doa = unit(pj - x_r)
                dod = unit(pi - x_t)
                if not visible(doa, dod):
                    continue
                raw.append((length, doa, dod, PathOrder.OTHER, 2, (tuple(pi), tuple(pj))))

    raw.sort(key=lambda r: (r[0], int(r[3])))
    rng = np.random.default_rng([scene.seed, 0x6A1])
    out = []
    for length, doa, dod, order, bounces, pts in raw:
        gain = path_gain_model(length, bounces, scene.gain, rng)
        out.append(
            PathParams(
                gain=gain,
                doa=Direction.from_vector(doa),
                dod=Direction.from_vector(dod),
                delay=float(length / SPEED_OF_LIGHT),
                order=order,
                length=float(length),
                bounces=bounces,
                points=pts,
            )
        )
    return out


# -- line-oriented serialization -------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "kind": "scene",
        "seed": scene.seed,
        "x_r": scene.x_r.tolist(),
        "x_t": scene.x_t.tolist(),
        "los_blocked": scene.los_blocked,
        "rsu_facing": list(scene.rsu_facing),
        "vehicle_facing": None if scene.vehicle_facing is None else list(scene.vehicle_facing),
        "gain": asdict(scene.gain),
        "reflectors": [asdict(r) for r in scene.reflectors],
    }


def scene_from_dict(d: dict) -> Scene:
    refl = tuple(
        Reflector(tuple(r["normal"]), tuple(r["center"]), r["half_width"], r["z_min"], r["z_max"])
        for r in d["reflectors"]
    )
    return Scene(
        x_r=np.array(d["x_r"]),
        x_t=np.array(d["x_t"]),
        reflectors=refl,
        los_blocked=bool(d["los_blocked"]),
        seed=int(d["seed"]),
        rsu_facing=tuple(d["rsu_facing"]),
        gain=GainModel(**d["gain"]),
        vehicle_facing=None if d.get("vehicle_facing") is None else tuple(d["vehicle_facing"]),
    )


def path_to_dict(p: PathParams) -> dict:
    return {
        "kind": "path",
        "gain": [p.gain.real, p.gain.imag],
        "doa": [p.doa.x, p.doa.y, p.doa.z],
        "dod": [p.dod.x, p.dod.y, p.dod.z],
        "delay": p.delay,
        "order": int(p.order),
        "length": p.length,
        "bounces": p.bounces,
        "points": [list(q) for q in p.points],
    }


def path_from_dict(d: dict) -> PathParams:
    return PathParams(
        gain=complex(*d["gain"]),
        doa=Direction(*d["doa"]),
        dod=Direction(*d["dod"]),
        delay=float(d["delay"]),
        order=PathOrder(d["order"]),
        length=float(d["length"]),
        bounces=int(d["bounces"]),
        points=tuple(tuple(q) for q in d["points"]),
    )


def dump_jsonl(fp, scene: Scene, paths: Iterable[PathParams]) -> None:
    """Write one scene line followed by one line per path."""
    fp.write(json.dumps(scene_to_dict(scene)) + "\n")
    for p in paths:
        fp.write(json.dumps(path_to_dict(p)) + "\n")


def load_jsonl(fp) -> list[tuple[Scene, list[PathParams]]]:
    out: list[tuple[Scene, list[PathParams]]] = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if rec["kind"] == "scene":
            out.append((scene_from_dict(rec), []))
        elif rec["kind"] == "path":
            if not out:
                raise ValueError("path record before any scene record")
            out[-1][1].append(path_from_dict(rec))
        else:
            raise ValueError(f"unknown record kind {rec['kind']!r}")
    return out
