"""Vehicle position from LoS and first-order path parameters.

Only delay differences enter the estimators, so an unknown receive-time
offset cancels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, InconsistentInputError, UnlocatableError
from .geometry import SPEED_OF_LIGHT, Direction
from .scene import PathOrder

LOS_NLOS = "LoS+NLoS"
NLOS_ONLY = "NLoS-only"

DEN_TOL = 1e-9
COND_MAX = 1e12


@dataclass(frozen=True)
class ClassifiedPath:
    doa: Direction
    dod: Direction
    delta_d: float
    order: PathOrder = PathOrder.FIRST


@dataclass(frozen=True)
class PositionEstimate:
    x_t_hat: np.ndarray
    d_los_hat: float
    mode: str


@dataclass(frozen=True)
class EstimatedPath:
    """Path parameters as recovered from a sounding (delay relative to the window start)."""

    doa: Direction
    dod: Direction
    delay: float
    power: float = 0.0


def relative_angles(los: ClassifiedPath, p: ClassifiedPath) -> tuple[float, float]:
    ct = np.clip(np.dot(los.doa.as_array(), p.doa.as_array()), -1.0, 1.0)
    cp = np.clip(np.dot(los.dod.as_array(), p.dod.as_array()), -1.0, 1.0)
    return float(np.arccos(ct)), float(np.arccos(cp))


def locate_los_nlos(los: ClassifiedPath, firsts: Sequence[ClassifiedPath], x_r) -> PositionEstimate:
    """Law-of-sines range per reflection, combined by least squares along the LoS DoA."""
    if not firsts:
        raise UnlocatableError("LoS path without first-order reflections gives no range")
    ang = np.array([relative_angles(los, p) for p in firsts])
    th, ph = ang[:, 0], ang[:, 1]
    dd = np.array([p.delta_d for p in firsts])
    s_sum = np.sin(th + ph)
    den = np.sin(th) + np.sin(ph) - s_sum
    if np.all(np.abs(den) < DEN_TOL):
        raise DegenerateGeometryError("reflection points collinear with the LoS path")
    d_hat = float(np.dot(dd * s_sum, den) / np.dot(den, den))
    if not d_hat > 0:
        raise InconsistentInputError(f"non-positive LoS distance estimate {d_hat}")
    x_hat = np.asarray(x_r, dtype=float) + d_hat * los.doa.as_array()
    return PositionEstimate(x_hat, d_hat, LOS_NLOS)


def nlos_system(firsts: Sequence[ClassifiedPath], x_r):
    """Stacked projected equations ``M [x_T; d] = r``, one 3-row block per usable path."""
    x_r = np.asarray(x_r, dtype=float)
    blocks, rhs = [], []
    for p in firsts:
        th, ph = p.doa.as_array(), p.dod.as_array()
        s = th + ph
        n2 = np.dot(s, s)
        if n2 < DEN_TOL:
            continue
        proj = np.eye(3) - np.outer(s, s) / n2
        blocks.append(proj @ np.hstack([np.eye(3), ph[:, None]]))
        rhs.append(proj @ (x_r - ph * p.delta_d))
    if not blocks:
        return np.zeros((0, 4)), np.zeros(0)
    return np.vstack(blocks), np.concatenate(rhs)


def locate_nlos(firsts: Sequence[ClassifiedPath], x_r) -> PositionEstimate:
    """Least-squares solve of the projected reflection equations (needs >= 3 paths)."""
    m, r = nlos_system(firsts, x_r)
    if m.shape[0] < 9:
        raise UnlocatableError(f"NLoS localization needs 3 usable first-order paths, got {m.shape[0] // 3}")
    a = m.T @ m
    if not np.isfinite(a).all() or np.linalg.cond(a) > COND_MAX:
        raise DegenerateGeometryError("reflection geometry leaves the position unobservable")
    sol, *_ = np.linalg.lstsq(m, r, rcond=None)
    if not sol[3] > 0:
        raise InconsistentInputError(f"non-positive reference path length {sol[3]}")
    return PositionEstimate(sol[:3].copy(), float(sol[3]), NLOS_ONLY)


def delta_lengths(delays, ref_delay: float) -> np.ndarray:
    return SPEED_OF_LIGHT * (np.asarray(delays, dtype=float) - ref_delay)


def select_paths(labeled: Sequence[tuple[EstimatedPath, PathOrder]]):
    """Split labeled estimates into (LoS or None, first-order list) with excess lengths.

    The strongest LoS-labeled path is the LoS reference; without one the
    earliest first-order path is.  Paths labeled OTHER are discarded.
    """
    los_cands = [e for e, c in labeled if c == PathOrder.LOS]
    firsts = [e for e, c in labeled if c == PathOrder.FIRST]
    if los_cands:
        los = max(los_cands, key=lambda e: e.power)
        dd = delta_lengths([e.delay for e in firsts], los.delay)
        fp = [ClassifiedPath(e.doa, e.dod, float(d)) for e, d in zip(firsts, dd) if d > 0]
        if not fp:
            raise UnlocatableError("no first-order path arrives after the LoS path")
        return ClassifiedPath(los.doa, los.dod, 0.0, PathOrder.LOS), fp
    if len(firsts) < 3:
        raise UnlocatableError(f"no LoS path and only {len(firsts)} first-order paths")
    ref = min(firsts, key=lambda e: e.delay)
    dd = delta_lengths([e.delay for e in firsts], ref.delay)
    return None, [ClassifiedPath(e.doa, e.dod, float(d)) for e, d in zip(firsts, dd)]


def estimate_position(labeled: Sequence[tuple[EstimatedPath, PathOrder]], x_r) -> PositionEstimate:
    los, firsts = select_paths(labeled)
    if los is not None:
        return locate_los_nlos(los, firsts, x_r)
    return locate_nlos(firsts, x_r)
