"""Training codebooks, pilots and synthesis of whitened hybrid-MIMO soundings.

Observation layout: row ``Q*m_t + q``, column ``n_rf*m_r + k``, where row
block ``m_t`` / column block ``m_r`` holds the transposed whitened symbols
of that precoder/combiner pair.  The tap index ``d`` is 0-based and the
convolution is ``y[q] = sum_d H_d F s[q - d]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigError, RankDeficientCombinerError
from .geometry import PulseShape, UraGeometry, delay_response_matrix, ura_steering_matrix
from .scene import PathParams

BOLTZMANN = 1.380649e-23


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def thermal_noise_power(bandwidth_hz: float, noise_figure_db: float = 7.0, temperature_k: float = 290.0) -> float:
    return BOLTZMANN * temperature_k * bandwidth_hz * 10.0 ** (noise_figure_db / 10.0)


@dataclass(frozen=True)
class PilotSequence:
    s: np.ndarray  # (Q, n_rf)

    @property
    def q(self) -> int:
        return self.s.shape[0]

    @property
    def n_rf(self) -> int:
        return self.s.shape[1]

    def energy(self) -> float:
        return float(np.sum(np.abs(self.s) ** 2) / self.q)

    def shifted(self, n_taps: int) -> np.ndarray:
        """Array ``S[q, d, k] = s[q - d, k]`` with zeros outside the sequence."""
        q, k = self.s.shape
        out = np.zeros((q, n_taps, k), dtype=complex)
        for d in range(min(n_taps, q)):
            out[d:, d, :] = self.s[: q - d, :]
        return out


def make_pilots(q: int, n_rf: int, pad: int, row: int = 0, kind: str = "hadamard") -> PilotSequence:
    """Pilot block with ``pad`` zeros on each side, same on every RF chain.

    ``kind="hadamard"`` uses row ``row`` of the Sylvester Hadamard matrix
    (row 0 is all ones); ``kind="zadoff-chu"`` uses the root-1 Zadoff-Chu
    sequence, whose low aperiodic autocorrelation keeps delay atoms apart.
    """
    payload = q - 2 * pad
    if pad < 0 or payload < 1:
        raise ConfigError(f"Q={q} cannot hold 2*{pad} padding symbols and a payload")
    if n_rf < 1:
        raise ConfigError("need at least one RF chain")
    if kind == "hadamard":
        if payload & (payload - 1):
            raise ConfigError(f"pilot payload length {payload} is not a power of 2")
        seq = scipy.linalg.hadamard(payload)[row].astype(complex)
    elif kind == "zadoff-chu":
        n = np.arange(payload)
        seq = np.exp(-1j * np.pi * n * (n + payload % 2) / payload)
    else:
        raise ConfigError(f"unknown pilot kind {kind!r}")
    a = np.sqrt(q / (payload * n_rf))
    s = np.zeros((q, n_rf), dtype=complex)
    s[pad : pad + payload, :] = a * seq[:, None]
    return PilotSequence(s)


@dataclass(frozen=True)
class Codebooks:
    f: np.ndarray  # (M_T, N_T, N_T_rf)
    w: np.ndarray  # (M_R, N_R, N_R_rf)

    @property
    def m_t(self) -> int:
        return self.f.shape[0]

    @property
    def m_r(self) -> int:
        return self.w.shape[0]


def _phase_matrix(rng, n: int, k: int) -> np.ndarray:
    return np.exp(2j * np.pi * rng.random((n, k))) / np.sqrt(n)


def make_codebooks(
    n_t: int, n_t_rf: int, m_t: int, n_r: int, n_r_rf: int, m_r: int, seed: int = 0
) -> Codebooks:
    """Random phase-only analog stages, identity baseband, unit-norm columns."""
    if min(n_t, n_t_rf, m_t, n_r, n_r_rf, m_r) < 1:
        raise ConfigError("codebook dimensions must be positive")
    if n_r_rf > n_r or n_t_rf > n_t:
        raise ConfigError("more RF chains than antennas")
    rng = np.random.default_rng([int(seed), 0xC0DE])
    f = np.stack([_phase_matrix(rng, n_t, n_t_rf) for _ in range(m_t)])
    w = []
    for _ in range(m_r):
        while True:
            wm = _phase_matrix(rng, n_r, n_r_rf)
            if np.linalg.cond(wm) < 1e6:
                break
        w.append(wm)
    return Codebooks(f, np.stack(w))


def whiten_combiners(w: np.ndarray) -> np.ndarray:
    """``W L^{-H}`` for every combiner, with ``L L^H = W^H W``."""
    out = np.empty_like(w)
    for m, wm in enumerate(w):
        try:
            l_fac = np.linalg.cholesky(wm.conj().T @ wm)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientCombinerError(f"combiner {m} is rank deficient") from exc
        out[m] = scipy.linalg.solve_triangular(l_fac.conj(), wm.T, lower=True).T
    return out


def stacked_combiner(w_bar: np.ndarray) -> np.ndarray:
    """``[W_1, ..., W_MR]`` as an ``N_R x (n_rf * M_R)`` matrix."""
    m_r, n_r, k = w_bar.shape
    return np.transpose(w_bar, (1, 0, 2)).reshape(n_r, m_r * k)


@dataclass(frozen=True)
class ChannelTaps:
    h: np.ndarray  # (D, N_R, N_T)

    @property
    def n_taps(self) -> int:
        return self.h.shape[0]


def channel_from_paths(
    paths: Sequence[PathParams],
    geom_t: UraGeometry,
    geom_r: UraGeometry,
    n_taps: int,
    pulse: PulseShape,
    t0: float,
) -> ChannelTaps:
    """Tap matrices ``H_d = sum_l a_l a_R(theta_l) a_T(phi_l)^H p(Ts d - (tau_l - t0))*``."""
    if n_taps < 1:
        raise ConfigError("tap count must be >= 1")
    h = np.zeros((n_taps, geom_r.size, geom_t.size), dtype=complex)
    if not paths:
        return ChannelTaps(h)
    doa = geom_r.to_local(np.array([p.doa.as_array() for p in paths]))
    dod = geom_t.to_local(np.array([p.dod.as_array() for p in paths]))
    gains = np.array([p.gain for p in paths], dtype=complex)
    a_r = ura_steering_matrix(geom_r, doa) * gains[None, :]
    a_t = ura_steering_matrix(geom_t, dod)
    taps = delay_response_matrix(n_taps, [p.delay - t0 for p in paths], pulse)
    h += np.einsum("rl,tl,dl->drt", a_r, a_t.conj(), taps.conj(), optimize=True)
    return ChannelTaps(h)


@dataclass(frozen=True)
class ObservationSet:
    y: np.ndarray  # (Q*M_T, n_rf*M_R)
    noise_power: float
    t0: float
    codebooks: Codebooks
    pilots: PilotSequence
    w_bar: np.ndarray  # whitened combiners, (M_R, N_R, N_R_rf)

    @property
    def combiner(self) -> np.ndarray:
        return stacked_combiner(self.w_bar)


def synthesize_observation(
    ch: ChannelTaps,
    cb: Codebooks,
    pilots: PilotSequence,
    noise_power: float,
    seed: int = 0,
    t0: float = 0.0,
    noise_domain: str = "antenna",
) -> ObservationSet:
    """Received, whitened and stacked training symbols for every (m_R, m_T).

    ``noise_domain="antenna"`` draws per-antenna noise and passes it through
    the whitened combiners; ``"combined"`` draws the (identically
    distributed) white post-whitening noise directly, which is much cheaper
    for large receive arrays.
    """
    n_taps, n_r, n_t = ch.h.shape
    m_t, n_t2, n_t_rf = cb.f.shape
    m_r, n_r2, n_r_rf = cb.w.shape
    if n_t2 != n_t or n_r2 != n_r or pilots.n_rf != n_t_rf:
        raise ConfigError("channel, codebook and pilot dimensions disagree")
    q = pilots.q
    w_bar = whiten_combiners(cb.w)

    hf = np.einsum("drt,mtk->dkrm", ch.h, cb.f, optimize=True)  # (D, k, N_R, M_T)
    s_shift = pilots.shifted(n_taps)  # (Q, D, k)
    z = s_shift.reshape(q, n_taps * n_t_rf) @ hf.reshape(n_taps * n_t_rf, n_r * m_t)
    z = z.reshape(q, n_r, m_t)
    # (M_R, M_T, Q, n_rf)
    yb = np.einsum("nrk,qrm->nmqk", w_bar.conj(), z, optimize=True)

    if noise_power < 0:
        raise ValueError("noise power must be non-negative")
    if noise_power > 0:
        rng = np.random.default_rng([int(seed), 0x9015E])
        sigma = np.sqrt(noise_power / 2.0)
        if noise_domain == "antenna":
            for mr in range(m_r):
                n = sigma * (rng.standard_normal((m_t, q, n_r)) + 1j * rng.standard_normal((m_t, q, n_r)))
                yb[mr] += n @ w_bar[mr].conj()
        elif noise_domain == "combined":
            yb += sigma * (rng.standard_normal(yb.shape) + 1j * rng.standard_normal(yb.shape))
        else:
            raise ConfigError(f"unknown noise domain {noise_domain!r}")

    y = np.transpose(yb, (1, 2, 0, 3)).reshape(m_t * q, m_r * n_r_rf)
    return ObservationSet(y=y, noise_power=float(noise_power), t0=float(t0), codebooks=cb, pilots=pilots, w_bar=w_bar)


def save_observation(path, obs: ObservationSet) -> None:
    np.savez_compressed(
        path,
        y=obs.y,
        noise_power=obs.noise_power,
        t0=obs.t0,
        f=obs.codebooks.f,
        w=obs.codebooks.w,
        s=obs.pilots.s,
        w_bar=obs.w_bar,
    )


def load_observation(path) -> ObservationSet:
    with np.load(path) as z:
        return ObservationSet(
            y=z["y"],
            noise_power=float(z["noise_power"]),
            t0=float(z["t0"]),
            codebooks=Codebooks(z["f"], z["w"]),
            pilots=PilotSequence(z["s"]),
            w_bar=z["w_bar"],
        )
