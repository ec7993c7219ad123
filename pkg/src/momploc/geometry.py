"""Array responses, direction algebra and pulse shaping.

Steering phases use the direction components directly
(``exp(-1j * pi * n * u)``), i.e. half-wavelength element spacing.
Storage is 0-based; a URA response is flattened x-major over y, which is
the order of ``kron(a_x, a_y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidDirectionError

SPEED_OF_LIGHT = 299_792_458.0

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class Direction:
    """Unit 3-vector."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        n2 = self.x * self.x + self.y * self.y + self.z * self.z
        if not np.isfinite(n2) or abs(n2 - 1.0) > _NORM_TOL:
            raise InvalidDirectionError(f"not a unit vector: ({self.x}, {self.y}, {self.z})")

    @classmethod
    def from_vector(cls, v) -> "Direction":
        v = np.asarray(v, dtype=float)
        n = np.linalg.norm(v)
        if n == 0.0 or not np.isfinite(n):
            raise InvalidDirectionError("cannot normalize a zero vector")
        v = v / n
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def from_az_el(cls, az: float, el: float) -> "Direction":
        ce = np.cos(el)
        return cls.from_vector([ce * np.cos(az), ce * np.sin(az), np.sin(el)])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def az(self) -> float:
        return float(np.arctan2(self.y, self.x))

    @property
    def el(self) -> float:
        return float(np.arcsin(np.clip(self.z, -1.0, 1.0)))

    def __neg__(self) -> "Direction":
        return Direction(-self.x, -self.y, -self.z)


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def az_el(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth/elevation (radians) of unit vectors stacked on the last axis."""
    v = np.asarray(v, dtype=float)
    return np.arctan2(v[..., 1], v[..., 0]), np.arcsin(np.clip(v[..., 2], -1.0, 1.0))


# Rows are the array's local x, y, z (broadside) axes in global coordinates.
IDENTITY_FRAME = np.eye(3)
# Vertical array facing -y: local x = global x, local y = global z.
WALL_FRAME_NEG_Y = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def vertical_frame(facing) -> np.ndarray:
    """Right-handed frame of a vertical panel with horizontal broadside ``facing``.

    Local y is global z; local x completes the frame.
    """
    f = np.asarray(facing, dtype=float)
    if abs(f[2]) > 1e-12 or not np.isclose(np.linalg.norm(f), 1.0, atol=1e-12):
        raise InvalidDirectionError("panel broadside must be a horizontal unit vector")
    up = np.array([0.0, 0.0, 1.0])
    return np.array([np.cross(up, f), up, f])


@dataclass(frozen=True)
class UraGeometry:
    """Uniform rectangular array with ``n_x * n_y`` elements.

    ``frame`` holds the local axes as rows; ``to_local`` maps global
    directions into the coordinates used by the steering vectors.
    """

    n_x: int
    n_y: int
    frame: np.ndarray = field(default_factory=lambda: IDENTITY_FRAME.copy(), compare=False)

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ConfigError(f"array dimensions must be >= 1, got {self.n_x}x{self.n_y}")
        f = np.asarray(self.frame, dtype=float)
        if f.shape != (3, 3) or not np.allclose(f @ f.T, np.eye(3), atol=1e-12):
            raise ConfigError("array frame must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "frame", f)

    @property
    def size(self) -> int:
        return self.n_x * self.n_y

    def to_local(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.frame.T

    def to_global(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.frame


@dataclass(frozen=True)
class PulseShape:
    """Raised-cosine pulse with roll-off ``rolloff`` and symbol period ``ts``."""

    ts: float
    rolloff: float = 0.25
    kind: str = "raised-cosine"

    def __post_init__(self):
        if self.kind != "raised-cosine":
            raise ConfigError(f"unsupported pulse kind {self.kind!r}")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ConfigError(f"rolloff must lie in [0, 1], got {self.rolloff}")
        if not self.ts > 0:
            raise ConfigError("symbol period must be positive")

    def __call__(self, t) -> np.ndarray:
        return raised_cosine(t, self.ts, self.rolloff)


def raised_cosine(t, ts: float, rolloff: float) -> np.ndarray:
    x = np.asarray(t, dtype=float) / ts
    out = np.sinc(x)
    if rolloff == 0.0:
        return out
    arg = 2.0 * rolloff * x
    den = 1.0 - arg * arg
    sing = np.abs(den) < 1e-10
    with np.errstate(divide="ignore", invalid="ignore"):
        out = out * np.cos(np.pi * rolloff * x) / den
    # value at |t| = ts / (2 rolloff), taken as the limit
    lim = np.pi / 4.0 * np.sinc(1.0 / (2.0 * rolloff))
    return np.where(sing, lim, out)


def _check_component(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u)) or np.any(np.abs(u) > 1.0 + 1e-12):
        raise InvalidDirectionError(f"direction component outside [-1, 1]: {u}")
    return u


def axis_steering(n: int, u: float) -> np.ndarray:
    """ULA response ``exp(-1j*pi*k*u)``, k = 0..n-1."""
    if n < 1:
        raise ConfigError("antenna count must be >= 1")
    u = float(_check_component(u))
    return np.exp(-1j * np.pi * np.arange(n) * u)


def axis_steering_matrix(n: int, u) -> np.ndarray:
    """Columns are ``axis_steering(n, u_j)`` for every entry of ``u``."""
    u = _check_component(u)
    return np.exp(-1j * np.pi * np.outer(np.arange(n), u))


def ura_steering(geom: UraGeometry, d) -> np.ndarray:
    """URA response for a direction already expressed in the array frame."""
    if isinstance(d, Direction):
        dx, dy = d.x, d.y
    else:
        dx, dy = float(d[0]), float(d[1])
    return np.kron(axis_steering(geom.n_x, dx), axis_steering(geom.n_y, dy))


def ura_steering_matrix(geom: UraGeometry, local_dirs: np.ndarray) -> np.ndarray:
    """Columns are URA responses of local unit vectors given as rows."""
    local_dirs = np.atleast_2d(local_dirs)
    ax = axis_steering_matrix(geom.n_x, np.clip(local_dirs[:, 0], -1.0, 1.0))
    ay = axis_steering_matrix(geom.n_y, np.clip(local_dirs[:, 1], -1.0, 1.0))
    return (ax[:, None, :] * ay[None, :, :]).reshape(geom.size, -1)


def array_response(geom: UraGeometry, d_global) -> np.ndarray:
    """Response to a global direction, rotated into the array frame first."""
    v = d_global.as_array() if isinstance(d_global, Direction) else np.asarray(d_global, float)
    return ura_steering(geom, geom.to_local(v))


def delay_response(n_taps: int, tau_eff: float, pulse: PulseShape) -> np.ndarray:
    """Tap vector ``p(ts*d - tau_eff)``, d = 0..n_taps-1 (real-valued pulse)."""
    if n_taps < 1:
        raise ConfigError("tap count must be >= 1")
    if not np.isfinite(tau_eff):
        raise ValueError("tau_eff must be finite")
    return pulse(pulse.ts * np.arange(n_taps) - tau_eff).astype(complex)


def delay_response_matrix(n_taps: int, taus, pulse: PulseShape) -> np.ndarray:
    taus = np.asarray(taus, dtype=float)
    t = pulse.ts * np.arange(n_taps)[:, None] - taus[None, :]
    return pulse(t).astype(complex)
