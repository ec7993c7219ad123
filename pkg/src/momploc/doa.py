"""DoA and path power recovery from equivalent gain vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedDirectionError
from .geometry import Direction, UraGeometry, array_response, ura_steering_matrix


@dataclass(frozen=True)
class StackedCombiner:
    """Horizontal stack of whitened combiners and its pseudo-inverse."""

    w: np.ndarray
    w_pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "w_pinv", np.linalg.pinv(self.w))


@dataclass(frozen=True)
class DoaGrid:
    """Candidate arrival directions; ``local`` rows are in the array frame."""

    geom: UraGeometry
    local: np.ndarray
    steering: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "steering", ura_steering_matrix(self.geom, self.local))

    @property
    def directions(self) -> np.ndarray:
        return self.geom.to_global(self.local)

    def __len__(self) -> int:
        return self.local.shape[0]


def local_az_el_to_vec(az, el) -> np.ndarray:
    """Broadside-centred angles: az in the local x-z plane, el toward local y."""
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    return np.stack([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)], axis=-1)


def doa_grid(geom: UraGeometry, oversample: int = 2, extra=None) -> DoaGrid:
    """Product grid over the front hemisphere, optionally with extra global directions."""
    n_az = oversample * geom.n_x
    n_el = oversample * geom.n_y
    az = -np.pi / 2 + (np.arange(n_az) + 0.5) * np.pi / n_az
    el = -np.pi / 2 + (np.arange(n_el) + 0.5) * np.pi / n_el
    aa, ee = np.meshgrid(az, el, indexing="ij")
    local = local_az_el_to_vec(aa.ravel(), ee.ravel())
    if extra is not None and len(extra):
        local = np.vstack([local, geom.to_local(np.atleast_2d(extra))])
    return DoaGrid(geom, local)


def projection_scores(beta: np.ndarray, comb: StackedCombiner, grid: DoaGrid) -> np.ndarray:
    v = comb.w_pinv.conj().T @ np.asarray(beta)
    return np.abs(grid.steering.T @ v.conj())


def recover_doa(beta: np.ndarray, comb: StackedCombiner, grid: DoaGrid) -> tuple[Direction, int]:
    """Grid direction maximizing ``|beta^H W^+ a_R(theta)|``; lowest index on ties."""
    beta = np.asarray(beta)
    if not np.any(beta):
        raise UndefinedDirectionError("beta is identically zero")
    idx = int(np.argmax(projection_scores(beta, comb, grid)))
    return Direction.from_vector(grid.directions[idx]), idx


def path_power(beta: np.ndarray, comb: StackedCombiner, geom: UraGeometry, theta: Direction) -> float:
    """``|beta^H W^+ a_R(theta)|^2`` for a global direction."""
    a = array_response(geom, theta)
    return float(np.abs(np.vdot(beta, comb.w_pinv @ a)) ** 2)
