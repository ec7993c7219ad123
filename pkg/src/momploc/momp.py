"""Multidimensional orthogonal matching pursuit over factored dictionaries.

The measurement tensor is never materialized for the full problem: it is
applied through the codebook/pilot factorization
``Phi[(m_t, q), (a, d)] = (F_{m_t} s[q - d])[a]`` with the flat antenna
index ``a = i1 * n_y + i2``.  ``MeasurementTensor.dense`` builds the
explicit matrix for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import PulseShape, UraGeometry, axis_steering_matrix, delay_response_matrix
from .sounding import Codebooks, PilotSequence


@dataclass(frozen=True)
class DictionarySet:
    psi1: np.ndarray  # (n_x, N1a) conjugated x steering
    psi2: np.ndarray  # (n_y, N2a) conjugated y steering
    psi3: np.ndarray  # (D, N3a) delayed pulses
    grid_x: np.ndarray
    grid_y: np.ndarray
    grid_tau: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.psi1.shape[1], self.psi2.shape[1], self.psi3.shape[1]


def default_grids(geom_t: UraGeometry, n_taps: int, ts: float, dod_oversample: int = 2, delay_oversample: int = 4):
    gx = np.linspace(-1.0, 1.0, dod_oversample * geom_t.n_x, endpoint=False)
    gy = np.linspace(-1.0, 1.0, dod_oversample * geom_t.n_y, endpoint=False)
    gt = np.arange(delay_oversample * n_taps) * (ts / delay_oversample)
    return gx, gy, gt


def augment_grid(grid: np.ndarray, values) -> np.ndarray:
    """Union of a grid and extra points, sorted."""
    return np.unique(np.concatenate([np.asarray(grid, float), np.asarray(values, float).ravel()]))


def snap_grid(grid: np.ndarray, values) -> np.ndarray:
    """Move the nearest grid point onto each value (extra points only when two values share one).

    Keeps the grid density, so true parameters become grid points without
    near-duplicate atoms next to them.
    """
    g = np.asarray(grid, dtype=float).copy()
    moved = np.zeros(g.size, dtype=bool)
    extra = []
    for v in np.asarray(values, dtype=float).ravel():
        k = int(np.argmin(np.abs(g - v)))
        if moved[k]:
            if g[k] != v:
                extra.append(v)
            continue
        g[k] = v
        moved[k] = True
    return np.unique(np.concatenate([g, extra]))


def build_dictionaries(geom_t: UraGeometry, n_taps: int, pulse: PulseShape, grids) -> DictionarySet:
    gx, gy, gt = (np.asarray(g, dtype=float) for g in grids)
    if min(gx.size, gy.size, gt.size) == 0:
        raise ConfigError("dictionary grids must be non-empty")
    return DictionarySet(
        psi1=axis_steering_matrix(geom_t.n_x, gx).conj(),
        psi2=axis_steering_matrix(geom_t.n_y, gy).conj(),
        psi3=delay_response_matrix(n_taps, gt, pulse),
        grid_x=gx,
        grid_y=gy,
        grid_tau=gt,
    )


@dataclass(frozen=True)
class MeasurementTensor:
    f: np.ndarray  # (M_T, N_T, k)
    s_shift: np.ndarray  # (Q, D, k) with s_shift[q, d] = s[q - d]
    n_x: int
    n_y: int

    @property
    def m_t(self) -> int:
        return self.f.shape[0]

    @property
    def q(self) -> int:
        return self.s_shift.shape[0]

    @property
    def n_taps(self) -> int:
        return self.s_shift.shape[1]

    @property
    def n_t(self) -> int:
        return self.f.shape[1]

    @property
    def n_rows(self) -> int:
        return self.m_t * self.q

    def entry(self, m_t: int, q: int, i1: int, i2: int, i3: int) -> complex:
        return complex((self.f[m_t] @ self.s_shift[q, i3])[i1 * self.n_y + i2])

    def dense(self) -> np.ndarray:
        """Explicit ``(M_T*Q) x (N_T*D)`` matrix, columns ordered (i1, i2, i3)."""
        u = np.einsum("mak,qdk->mqad", self.f, self.s_shift)
        return u.reshape(self.n_rows, self.n_t * self.n_taps)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``Phi @ x`` for ``x`` shaped (N_T, D, K); returns (M_T*Q, K)."""
        n_t, d, k_cols = x.shape
        m_t, _, k = self.f.shape
        v = np.einsum("mak,adc->dkmc", self.f, x, optimize=True)  # (D, k, M_T, K)
        y = self.s_shift.reshape(self.q, d * k) @ v.reshape(d * k, m_t * k_cols)
        return y.reshape(self.q, m_t, k_cols).transpose(1, 0, 2).reshape(m_t * self.q, k_cols)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """``Phi^H @ r`` for ``r`` shaped (M_T*Q, No); returns (N_T, D, No)."""
        m_t, n_t, k = self.f.shape
        q, d = self.q, self.n_taps
        n_o = r.shape[1]
        r3 = r.reshape(m_t, q, n_o).transpose(1, 0, 2).reshape(q, m_t * n_o)
        sc = self.s_shift.reshape(q, d * k).conj().T @ r3  # (D*k, M_T*No)
        sc = sc.reshape(d, k, m_t, n_o).transpose(2, 1, 0, 3).reshape(m_t * k, d * n_o)
        fc = self.f.conj().transpose(1, 0, 2).reshape(n_t, m_t * k)
        return (fc @ sc).reshape(n_t, d, n_o)


def build_measurement(cb: Codebooks, pilots: PilotSequence, n_taps: int, geom_t: UraGeometry) -> MeasurementTensor:
    if cb.f.shape[1] != geom_t.size or cb.f.shape[2] != pilots.n_rf:
        raise ConfigError("precoder shape disagrees with array or pilot RF count")
    return MeasurementTensor(f=cb.f, s_shift=pilots.shifted(n_taps), n_x=geom_t.n_x, n_y=geom_t.n_y)


def atom_norms(phi: MeasurementTensor, psi: DictionarySet) -> np.ndarray:
    """Squared norms of every composite atom ``Phi (psi1 x psi2 x psi3)``."""
    f = phi.f.reshape(phi.m_t, phi.n_x, phi.n_y, -1)
    w = np.einsum("mabk,ai,bj->mkij", f, psi.psi1, psi.psi2, optimize=True)
    kv = np.einsum("mkij,mlij->ijkl", w.conj(), w, optimize=True)
    h = np.einsum("qdk,dt->qkt", phi.s_shift, psi.psi3, optimize=True)
    hg = np.einsum("qkt,qlt->tkl", h.conj(), h, optimize=True)
    return np.einsum("ijkl,tkl->ijt", kv, hg, optimize=True).real


def composite_atom(psi: DictionarySet, j) -> np.ndarray:
    """Kronecker atom over (i1, i2, d), shaped (N_T, D)."""
    j1, j2, j3 = j
    v = np.outer(psi.psi1[:, j1], psi.psi2[:, j2]).ravel()
    return np.outer(v, psi.psi3[:, j3])


@dataclass
class MompEntry:
    j1: int
    j2: int
    j3: int
    beta: np.ndarray

    @property
    def index(self) -> tuple[int, int, int]:
        return (self.j1, self.j2, self.j3)


@dataclass
class SparseChannelEstimate:
    entries: list[MompEntry]
    residual_norm: float
    trace: list[float] = field(default_factory=list)

    def to_dict(self, psi: DictionarySet | None = None) -> dict:
        out = {"residual_norm": self.residual_norm, "trace": list(self.trace), "entries": []}
        for e in self.entries:
            rec = {"j": [e.j1, e.j2, e.j3], "beta": [[z.real, z.imag] for z in e.beta]}
            if psi is not None:
                rec["phi_x"] = float(psi.grid_x[e.j1])
                rec["phi_y"] = float(psi.grid_y[e.j2])
                rec["tau"] = float(psi.grid_tau[e.j3])
            out["entries"].append(rec)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SparseChannelEstimate":
        entries = [
            MompEntry(*e["j"], beta=np.array([complex(a, b) for a, b in e["beta"]]))
            for e in d["entries"]
        ]
        return cls(entries, float(d["residual_norm"]), list(d.get("trace", [])))


@dataclass(frozen=True)
class MompConfig:
    max_sweeps: int = 8
    stop_fraction: float = 1e-3
    gram_cond_max: float = 1e10
    max_rank: int | None = None  # keep only this many dominant column directions of Y


TIE_RTOL = 1e-9


def _argmax(sc: np.ndarray) -> int:
    """Flat index of the maximum; scores within TIE_RTOL of it count as ties, lowest index wins."""
    flat = sc.ravel()
    top = flat.max()
    return int(np.flatnonzero(flat >= top - TIE_RTOL * abs(top))[0])


def _marginal_pick(mat: np.ndarray, dic: np.ndarray) -> int:
    """argmax_j sum over the remaining axes of |dic[:, j]^H mat|^2."""
    m = mat.reshape(mat.shape[0], -1)
    gram = m @ m.conj().T
    energy = np.sum(dic.conj() * (gram @ dic), axis=0).real
    return int(np.argmax(energy))


class _Scorer:
    """Normalized atom scores along one or two dimensions of a residual correlation.

    Contractions with single delay atoms are cached, since the sweeps revisit
    the same few delays.
    """

    def __init__(self, p: np.ndarray, psi: DictionarySet, norm2: np.ndarray, excluded):
        self.p = p
        self.pd = np.moveaxis(p, 2, 0)  # (D, n_x, n_y, No)
        self.p1 = psi.psi1.conj()
        self.p2 = psi.psi2.conj()
        self.p3 = psi.psi3.conj()
        self.norm2 = norm2
        self.excluded = excluded
        self._at_delay: dict[int, np.ndarray] = {}

    def at_delay(self, j3: int) -> np.ndarray:
        z = self._at_delay.get(j3)
        if z is None:
            z = np.tensordot(self.p3[:, j3], self.pd, axes=([0], [0]))  # (n_x, n_y, No)
            self._at_delay[j3] = z
        return z

    def along(self, dim: int, j) -> np.ndarray:
        j1, j2, j3 = j
        if dim == 0:
            c = self.p1.T @ (self.at_delay(j3).transpose(0, 2, 1) @ self.p2[:, j2])
            sc = np.sum(np.abs(c) ** 2, axis=1) / self.norm2[:, j2, j3]
            bad = [e[0] for e in self.excluded if e[1] == j2 and e[2] == j3]
        elif dim == 1:
            c = self.p2.T @ np.tensordot(self.p1[:, j1], self.at_delay(j3), axes=([0], [0]))
            sc = np.sum(np.abs(c) ** 2, axis=1) / self.norm2[j1, :, j3]
            bad = [e[1] for e in self.excluded if e[0] == j1 and e[2] == j3]
        else:
            w = np.outer(self.p1[:, j1], self.p2[:, j2]).ravel()
            pd = self.pd.reshape(self.pd.shape[0], w.size, -1)
            c = self.p3.T @ np.tensordot(pd, w, axes=([1], [0]))  # (N3a, No)
            sc = np.sum(np.abs(c) ** 2, axis=1) / self.norm2[j1, j2, :]
            bad = [e[2] for e in self.excluded if e[0] == j1 and e[1] == j2]
        if bad:
            sc[bad] = -np.inf
        return sc

    def pair(self, j3: int) -> np.ndarray:
        """Scores of every DoD pair at delay atom ``j3``."""
        z = self.at_delay(j3)
        n_x, n_y, n_o = z.shape
        c = (self.p1.T @ z.reshape(n_x, n_y * n_o)).reshape(-1, n_y, n_o)
        c = np.tensordot(c, self.p2, axes=([1], [0]))  # (N1a, No, N2a)
        sc = np.sum(np.abs(c) ** 2, axis=1) / self.norm2[:, :, j3]
        for e in self.excluded:
            if e[2] == j3:
                sc[e[0], e[1]] = -np.inf
        return sc

    def block_ascent(self, j, max_sweeps: int):
        """Alternate the joint DoD-pair maximization and the delay maximization."""
        j = list(j)
        for _ in range(max_sweeps):
            prev = tuple(j)
            sc = self.pair(j[2])
            j[0], j[1] = (int(k) for k in np.unravel_index(_argmax(sc), sc.shape))
            sd = self.along(2, j)
            j[2] = _argmax(sd)
            if tuple(j) == prev:
                break
        return tuple(j), float(sd[j[2]])


def select_atom(
    p: np.ndarray, psi: DictionarySet, norm2: np.ndarray, excluded=(), max_sweeps: int = 8, n_starts: int = 4
):
    """Alternating maximization of the normalized residual correlation.

    p is the residual correlation ``Phi^H R`` shaped (n_x, n_y, D, No).
    The first start maximizes the dimensions in turn with the others
    marginalized and sweeps them round-robin; further starts begin at the
    delay atoms with the most marginal energy.  Every start is finished by
    block sweeps (DoD pair jointly, then delay) and the best fixed point wins.
    Scores within ``TIE_RTOL`` of a maximum are ties, resolved to the lowest index.
    """
    excluded = set(excluded)
    scorer = _Scorer(p, psi, norm2, excluded)
    j1 = _marginal_pick(p, psi.psi1)
    z = np.tensordot(psi.psi1[:, j1].conj(), p, axes=([0], [0]))
    j2 = _marginal_pick(z, psi.psi2)
    j = [j1, j2, 0]
    j[2] = _argmax(scorer.along(2, j))
    for _ in range(max_sweeps):
        prev = tuple(j)
        for dim in range(3):
            j[dim] = _argmax(scorer.along(dim, j))
        if tuple(j) == prev:
            break
    starts = [tuple(j)]
    if n_starts > 1:
        m = np.moveaxis(p, 2, 0).reshape(p.shape[2], -1)
        energy = np.sum(psi.psi3.conj() * ((m @ m.conj().T) @ psi.psi3), axis=0).real
        energy = energy / np.maximum(norm2.max(axis=(0, 1)), 1e-300)
        for j3 in np.argsort(-energy, kind="stable")[: n_starts - 1]:
            starts.append((0, 0, int(j3)))
    results = [scorer.block_ascent(s0, max_sweeps) for s0 in starts]
    top = max(sc for _, sc in results)
    if not np.isfinite(top):
        return None
    best = min(c for c, sc in results if sc >= top - TIE_RTOL * abs(top))
    if best in excluded:
        return None
    return best


def momp_solve(
    y, phi: MeasurementTensor, psi: DictionarySet, n_paths: int = 10, cfg: MompConfig | None = None, norm2=None
) -> SparseChannelEstimate:
    """Greedy recovery of up to ``n_paths`` (DoD-x, DoD-y, delay) atoms and their beta rows.

    ``norm2`` optionally supplies precomputed ``atom_norms(phi, psi)``.
    """
    cfg = cfg or MompConfig()
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    y = np.asarray(getattr(y, "y", y))
    if y.shape[0] != phi.n_rows:
        raise ConfigError(f"observation has {y.shape[0]} rows, measurement expects {phi.n_rows}")
    y_full2 = float(np.vdot(y, y).real)
    trace = [y_full2]
    if y_full2 == 0.0:
        return SparseChannelEstimate([], 0.0, trace)
    y, vh, lost = compress_columns(y, cfg.max_rank)
    n_o = y.shape[1]
    shape4 = (phi.n_x, phi.n_y, phi.n_taps, n_o)
    p_y = phi.adjoint(y).reshape(shape4)
    if norm2 is None:
        norm2 = atom_norms(phi, psi)
    y2 = y_full2 - lost

    support: list[tuple[int, int, int]] = []
    atoms: list[np.ndarray] = []  # x_l flattened over (a, d)
    grams: list[np.ndarray] = []  # Phi^H Phi x_l
    banned: set[tuple[int, int, int]] = set()
    beta = np.zeros((0, n_o), dtype=complex)
    p_r = p_y
    res = y2
    while len(support) < n_paths and res + lost > cfg.stop_fraction * y_full2:
        j = select_atom(p_r, psi, norm2, excluded=set(support) | banned, max_sweeps=cfg.max_sweeps)
        if j is None:
            break
        x, g = _atom_pair(phi, psi, j)
        fit = _ls_fit(atoms + [x], grams + [g], p_y, y2, cfg.gram_cond_max)
        if fit is None:
            banned.add(j)
            continue
        support.append(j)
        atoms.append(x)
        grams.append(g)
        beta, p_r, res = fit
        trace.append(res + lost)

    return _estimate(support, beta, vh, res + lost, trace)


def compress_columns(y: np.ndarray, max_rank: int | None):
    """``Y V_r`` over the ``max_rank`` dominant right singular vectors.

    Returns the compressed matrix, ``V_r^H`` (None when nothing is dropped)
    and the discarded energy.
    """
    if max_rank is None or max_rank >= min(y.shape):
        return y, None, 0.0
    w, v = np.linalg.eigh(y.conj().T @ y)  # ascending eigenvalues
    v = v[:, ::-1][:, :max_rank]
    yc = y @ v
    return yc, v.conj().T, max(float(np.vdot(y, y).real - np.vdot(yc, yc).real), 0.0)


def _estimate(support, beta, vh, res: float, trace) -> SparseChannelEstimate:
    if vh is not None:
        beta = beta @ vh
    entries = [MompEntry(j1, j2, j3, beta[k].copy()) for k, (j1, j2, j3) in enumerate(support)]
    return SparseChannelEstimate(entries, res, trace)


def _atom_pair(phi: MeasurementTensor, psi: DictionarySet, j):
    x = composite_atom(psi, j)
    g = phi.adjoint(phi.apply(x[:, :, None]))[:, :, 0]
    return x.ravel(), g.ravel()


def _ls_fit(atoms, grams, p_y, y2: float, cond_max: float):
    """Least-squares betas for the given atoms, with residual correlation and energy."""
    n_o = p_y.shape[-1]
    pf = p_y.reshape(-1, n_o)
    if not atoms:
        return np.zeros((0, n_o), dtype=complex), p_y, y2
    xm = np.array(atoms)
    gm = np.array(grams)
    gram = xm.conj() @ gm.T
    if np.linalg.cond(gram) > cond_max:
        return None
    c = xm.conj() @ pf
    b = np.linalg.solve(gram, c)
    p_r = (pf - gm.T @ b).reshape(p_y.shape)
    res = max(y2 - float(np.sum(b.conj() * c).real), 0.0)
    return b, p_r, res


def refine_support(
    y, phi: MeasurementTensor, psi: DictionarySet, estimate: SparseChannelEstimate, cfg: MompConfig | None = None,
    norm2=None, max_rounds: int = 4,
) -> SparseChannelEstimate:
    """Cyclic single-atom replacement on the same dictionary.

    Each support atom in turn is dropped, the best atom for the residual of
    the others is selected, and the swap is kept when it lowers the misfit.
    Stops after a round without swaps.
    """
    cfg = cfg or MompConfig()
    y = np.asarray(getattr(y, "y", y))
    if not estimate.entries:
        return estimate
    if norm2 is None:
        norm2 = atom_norms(phi, psi)
    y_full2 = float(np.vdot(y, y).real)
    y, vh, lost = compress_columns(y, cfg.max_rank)
    n_o = y.shape[1]
    p_y = phi.adjoint(y).reshape(phi.n_x, phi.n_y, phi.n_taps, n_o)
    y2 = y_full2 - lost
    support = [e.index for e in estimate.entries]
    pairs = [_atom_pair(phi, psi, j) for j in support]
    fit = _ls_fit([a for a, _ in pairs], [g for _, g in pairs], p_y, y2, np.inf)
    beta, _, res = fit
    trace = list(estimate.trace)
    tol = 1e-12 * y2
    for _ in range(max_rounds):
        swapped = False
        for l in range(len(support)):
            others = [k for k in range(len(support)) if k != l]
            sub = _ls_fit([pairs[k][0] for k in others], [pairs[k][1] for k in others], p_y, y2, np.inf)
            j = select_atom(sub[1], psi, norm2, excluded={support[k] for k in others}, max_sweeps=cfg.max_sweeps)
            if j is None or j == support[l]:
                continue
            cand = list(pairs)
            cand[l] = _atom_pair(phi, psi, j)
            new = _ls_fit([a for a, _ in cand], [g for _, g in cand], p_y, y2, cfg.gram_cond_max)
            if new is None or not new[2] < res - tol:
                continue
            support[l], pairs = j, cand
            beta, _, res = new
            trace.append(res + lost)
            swapped = True
        if not swapped:
            break
    return _estimate(support, beta, vh, res + lost, trace)


def model_observation(phi: MeasurementTensor, psi: DictionarySet, estimate: SparseChannelEstimate, n_o: int) -> np.ndarray:
    """Observation predicted by the factored model for the given sparse tensor."""
    out = np.zeros((phi.n_rows, n_o), dtype=complex)
    for e in estimate.entries:
        out += phi.apply(composite_atom(psi, e.index)[:, :, None]) * e.beta[None, :]
    return out


def residual_model(y, phi: MeasurementTensor, psi: DictionarySet, estimate: SparseChannelEstimate) -> float:
    """Squared Frobenius misfit of the Kronecker-dictionary model at ``estimate``."""
    y = np.asarray(getattr(y, "y", y))
    r = y - model_observation(phi, psi, estimate, y.shape[1])
    return float(np.vdot(r, r).real)
