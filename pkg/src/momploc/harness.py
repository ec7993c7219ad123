"""Monte-Carlo campaigns through the full sounding/estimation/localization chain."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import classifier as clf
from .doa import StackedCombiner, doa_grid, path_power, recover_doa
from .errors import ConfigError, LocalizationError, UndefinedDirectionError
from .geometry import IDENTITY_FRAME, WALL_FRAME_NEG_Y, Direction, PulseShape, UraGeometry, vertical_frame
from .locate import LOS_NLOS, NLOS_ONLY, EstimatedPath, estimate_position
from .momp import (
    atom_norms,
    snap_grid,
    build_dictionaries,
    build_measurement,
    default_grids,
    compress_columns,
    momp_solve,
    refine_support,
)
from .scene import PathOrder, PathParams, SceneConfig, generate_scene, trace_paths
from .sounding import (
    channel_from_paths,
    dbm_to_watts,
    make_codebooks,
    make_pilots,
    synthesize_observation,
    thermal_noise_power,
    whiten_combiners,
    stacked_combiner,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PERCENTILES = (5, 50, 80, 95)
TRAIN_SEED_OFFSET = 1_000_000


@dataclass(frozen=True)
class ArraySetting:
    n_t: tuple[int, int]
    n_r: tuple[int, int]
    n_t_rf: int
    n_r_rf: int
    m_t: int
    m_r: int

    def __post_init__(self):
        if min(*self.n_t, *self.n_r, self.n_t_rf, self.n_r_rf, self.m_t, self.m_r) < 1:
            raise ConfigError("array setting counts must be positive")


SETTINGS = {
    "1": ArraySetting(n_t=(4, 4), n_r=(8, 8), n_t_rf=2, n_r_rf=4, m_t=8, m_r=16),
    "2": ArraySetting(n_t=(8, 8), n_r=(16, 16), n_t_rf=4, n_r_rf=8, m_t=16, m_r=32),
}


@dataclass(frozen=True)
class CampaignConfig:
    schema_version: int = SCHEMA_VERSION
    setting: str = "1"
    array: ArraySetting | None = None  # overrides ``setting`` when given
    tx_power_dbm: float = 40.0
    noiseless: bool = False
    noise_figure_db: float = 7.0
    noise_domain: str = "combined"
    carrier_hz: float = 73e9
    bandwidth_hz: float = 1e9
    sampling_hz: float = 1.76e9
    rolloff: float = 0.25
    n_taps: int = 64
    pilot_length: int = 192
    pilot_pad: int = 64
    pilot: str = "zadoff-chu"
    t0_max_samples: float = 4.0
    n_trials: int = 500
    seed: int = 0
    codebook_seed: int = 0
    n_paths: int = 10
    refine: bool = True
    max_rank: int | None = 32
    dod_oversample: int = 2
    delay_oversample: int = 4
    doa_oversample: int = 2
    on_grid: bool = False
    model_path: str | None = None
    workers: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if self.array is None and self.setting not in SETTINGS:
            raise ConfigError(f"unknown antenna setting {self.setting!r}")
        if self.n_trials < 1 or self.n_taps < 1 or self.n_paths < 1 or self.workers < 1:
            raise ConfigError("trial, tap, path and worker counts must be positive")
        if self.noise_domain not in ("antenna", "combined"):
            raise ConfigError(f"unknown noise domain {self.noise_domain!r}")
        if self.sampling_hz <= 0 or self.carrier_hz <= 0 or self.bandwidth_hz <= 0:
            raise ConfigError("frequencies must be positive")

    @property
    def antennas(self) -> ArraySetting:
        return self.array if self.array is not None else SETTINGS[self.setting]

    @property
    def ts(self) -> float:
        return 1.0 / self.sampling_hz

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_trials)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneConfig.from_dict(d["scene"])
        if d.get("array") is not None:
            a = dict(d["array"])
            a["n_t"], a["n_r"] = tuple(a["n_t"]), tuple(a["n_r"])
            d["array"] = ArraySetting(**a)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> CampaignConfig:
    with open(path) as fp:
        return CampaignConfig.from_dict(json.load(fp))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: CampaignConfig, overrides: Sequence[str]) -> CampaignConfig:
    """Apply ``key=value`` overrides; dotted keys reach into nested sections."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                if node.get(p) is None and p == "array":
                    node[p] = dataclasses.asdict(cfg.antennas)
                else:
                    raise ConfigError(f"cannot descend into {p!r} of override {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return CampaignConfig.from_dict(d)


# -- shared per-campaign state -----------------------------------------------


@dataclass
class Context:
    cfg: CampaignConfig
    geom_t: UraGeometry
    geom_r: UraGeometry
    pulse: PulseShape
    codebooks: object
    pilots: object
    phi: object
    comb: StackedCombiner
    grids: tuple
    psi: object
    norm2: np.ndarray
    doa: object
    model: clf.Mlp | None = None

    @property
    def noise_power(self) -> float:
        if self.cfg.noiseless:
            return 0.0
        return thermal_noise_power(self.cfg.bandwidth_hz, self.cfg.noise_figure_db)


def build_context(cfg: CampaignConfig, model: clf.Mlp | None = None) -> Context:
    a = cfg.antennas
    geom_t = UraGeometry(a.n_t[0], a.n_t[1], IDENTITY_FRAME)
    geom_r = UraGeometry(a.n_r[0], a.n_r[1], WALL_FRAME_NEG_Y)
    pulse = PulseShape(cfg.ts, cfg.rolloff)
    cb = make_codebooks(geom_t.size, a.n_t_rf, a.m_t, geom_r.size, a.n_r_rf, a.m_r, seed=cfg.codebook_seed)
    pilots = make_pilots(cfg.pilot_length, a.n_t_rf, cfg.pilot_pad, kind=cfg.pilot)
    phi = build_measurement(cb, pilots, cfg.n_taps, geom_t)
    comb = StackedCombiner(stacked_combiner(whiten_combiners(cb.w)))
    grids = default_grids(geom_t, cfg.n_taps, cfg.ts, cfg.dod_oversample, cfg.delay_oversample)
    psi = build_dictionaries(geom_t, cfg.n_taps, pulse, grids)
    if model is None and cfg.model_path:
        model = clf.load_model(cfg.model_path)
    return Context(
        cfg=cfg,
        geom_t=geom_t,
        geom_r=geom_r,
        pulse=pulse,
        codebooks=cb,
        pilots=pilots,
        phi=phi,
        comb=comb,
        grids=grids,
        psi=psi,
        norm2=atom_norms(phi, psi),
        doa=doa_grid(geom_r, cfg.doa_oversample),
        model=model,
    )


# -- one trial -----------------------------------------------------------------


@dataclass
class LocalizationOutcome:
    status: str
    mode: str = ""
    x_hat: np.ndarray | None = None
    error_2d: float = float("nan")


@dataclass
class TrialResult:
    seed: int
    channel: str  # LOS_NLOS when the scene has a LoS path, NLOS_ONLY otherwise
    x_t: np.ndarray
    true_orders: list[int]
    pred_orders: list[int]
    features: np.ndarray
    true_loc: LocalizationOutcome
    pred_loc: LocalizationOutcome
    n_true_paths: int = 0


def dod_from_grid(ux: float, uy: float) -> Direction:
    """Dictionary (u_x, u_y) to a unit vector in the vehicle panel frame.

    Grid points outside the unit disc are pulled onto its rim.
    """
    r2 = ux * ux + uy * uy
    if r2 > 1.0:
        r = np.sqrt(r2)
        return Direction.from_vector([ux / r, uy / r, 0.0])
    return Direction.from_vector([ux, uy, np.sqrt(1.0 - r2)])


def path_features(paths: Sequence[EstimatedPath], n_r: int, p_t: float) -> np.ndarray:
    """Classifier inputs: normalized power (dB), relative delay (s), DoA and DoD az/el."""
    if not paths:
        return np.zeros((0, len(clf.FEATURES)))
    tau0 = min(p.delay for p in paths)
    rows = []
    for p in paths:
        pw = 10.0 * np.log10(max(p.power, 1e-300) / (n_r * n_r * p_t))
        rows.append([pw, p.delay - tau0, p.doa.az, p.doa.el, p.dod.az, p.dod.el])
    return np.array(rows)


def match_labels(est_keys: np.ndarray, true_keys: np.ndarray, true_orders, cell: np.ndarray) -> list[int]:
    """One-to-one nearest-parameter labels; estimates with no true path within one cell are OTHER.

    Pairs are taken greedily in order of increasing cell-normalized distance,
    ties broken by estimate then truth index.
    """
    out = [int(PathOrder.OTHER)] * len(est_keys)
    if len(est_keys) == 0 or len(true_keys) == 0:
        return out
    diff = np.abs(np.asarray(est_keys)[:, None, :] - np.asarray(true_keys)[None, :, :]) / cell
    ok = np.all(diff <= 1.0 + 1e-9, axis=2)
    dist = np.sum(diff**2, axis=2)
    pairs = sorted((dist[i, k], i, k) for i, k in zip(*np.nonzero(ok)))
    used_e, used_t = set(), set()
    for _, i, k in pairs:
        if i in used_e or k in used_t:
            continue
        used_e.add(i)
        used_t.add(k)
        out[i] = int(true_orders[k])
    return out


def _locate(labeled, scene_xr, x_t) -> LocalizationOutcome:
    try:
        est = estimate_position(labeled, scene_xr)
    except LocalizationError as exc:
        return LocalizationOutcome(exc.status)
    err = float(np.hypot(est.x_t_hat[0] - x_t[0], est.x_t_hat[1] - x_t[1]))
    return LocalizationOutcome("ok", est.mode, est.x_t_hat, err)


def _trial_t0(cfg: CampaignConfig, paths: Sequence[PathParams], seed: int) -> float:
    rng = np.random.default_rng([int(seed), 0x7021])
    first = min(p.delay for p in paths)
    return first - rng.uniform(0.0, cfg.t0_max_samples) * cfg.ts


def run_trial(ctx: Context, seed: int) -> TrialResult:
    """Scene, sounding, MOMP, DoA, classification and localization for one seed."""
    cfg = ctx.cfg
    scene = generate_scene(cfg.scene, seed)
    paths = trace_paths(scene, cfg.scene.double_reflections)
    p_t = dbm_to_watts(cfg.tx_power_dbm)
    amp = np.sqrt(p_t)
    paths = [dataclasses.replace(p, gain=p.gain * amp) for p in paths]
    t0 = _trial_t0(cfg, paths, seed)
    # codebooks and dictionaries live in array coordinates; only the frame is per trial
    geom_t = ctx.geom_t
    if scene.vehicle_facing is not None:
        geom_t = UraGeometry(geom_t.n_x, geom_t.n_y, vertical_frame(scene.vehicle_facing))

    ch = channel_from_paths(paths, geom_t, ctx.geom_r, cfg.n_taps, ctx.pulse, t0)
    obs = synthesize_observation(ch, ctx.codebooks, ctx.pilots, ctx.noise_power, seed=seed, t0=t0, noise_domain=cfg.noise_domain)

    true_dod = geom_t.to_local(np.array([p.dod.as_array() for p in paths]))
    true_tau = np.array([p.delay - t0 for p in paths])
    psi, norm2, dgrid = ctx.psi, ctx.norm2, ctx.doa
    if cfg.on_grid:
        gx, gy, gt = ctx.grids
        psi = build_dictionaries(
            ctx.geom_t,
            cfg.n_taps,
            ctx.pulse,
            (snap_grid(gx, true_dod[:, 0]), snap_grid(gy, true_dod[:, 1]), snap_grid(gt, true_tau)),
        )
        norm2 = atom_norms(ctx.phi, psi)
        dgrid = doa_grid(ctx.geom_r, cfg.doa_oversample, extra=np.array([p.doa.as_array() for p in paths]))

    # dominant column subspace of Y, computed once and shared by both stages
    y_c, vh, _ = compress_columns(obs.y, cfg.max_rank)
    sparse = momp_solve(y_c, ctx.phi, psi, cfg.n_paths, norm2=norm2)
    if cfg.refine:
        sparse = refine_support(y_c, ctx.phi, psi, sparse, norm2=norm2)
    if vh is not None:
        for e in sparse.entries:
            e.beta = e.beta @ vh
    est_paths, keys = [], []
    for e in sparse.entries:
        ux, uy, tau = psi.grid_x[e.j1], psi.grid_y[e.j2], psi.grid_tau[e.j3]
        try:
            theta, _ = recover_doa(e.beta, ctx.comb, dgrid)
        except UndefinedDirectionError:
            continue
        dod = Direction.from_vector(geom_t.to_global(dod_from_grid(ux, uy).as_array()[None])[0])
        pw = path_power(e.beta, ctx.comb, ctx.geom_r, theta)
        est_paths.append(EstimatedPath(theta, dod, float(tau), pw))
        keys.append((ux, uy, tau))

    a = cfg.antennas
    cell = np.array([2.0 / (cfg.dod_oversample * a.n_t[0]), 2.0 / (cfg.dod_oversample * a.n_t[1]), cfg.ts / cfg.delay_oversample])
    true_keys = np.column_stack([true_dod[:, 0], true_dod[:, 1], true_tau])
    true_orders = match_labels(np.array(keys).reshape(-1, 3), true_keys, [p.order for p in paths], cell)
    feats = path_features(est_paths, ctx.geom_r.size, p_t)

    x_t = scene.x_t
    true_loc = _locate([(e, PathOrder(c)) for e, c in zip(est_paths, true_orders)], scene.x_r, x_t)
    pred_orders: list[int] = []
    pred_loc = LocalizationOutcome("n/a")
    if ctx.model is not None:
        if est_paths:
            pred_orders = [int(c) for c in np.atleast_1d(clf.classify(ctx.model, feats))]
        pred_loc = _locate([(e, PathOrder(c)) for e, c in zip(est_paths, pred_orders)], scene.x_r, x_t)

    return TrialResult(
        seed=int(seed),
        channel=NLOS_ONLY if scene.los_blocked else LOS_NLOS,
        x_t=x_t,
        true_orders=true_orders,
        pred_orders=pred_orders,
        features=feats,
        true_loc=true_loc,
        pred_loc=pred_loc,
        n_true_paths=len(paths),
    )


# -- campaigns -----------------------------------------------------------------

_WORKER_CTX: Context | None = None


def _init_worker(cfg_dict: dict, model_dict: dict | None):
    global _WORKER_CTX
    model = clf.model_from_dict(model_dict) if model_dict is not None else None
    _WORKER_CTX = build_context(CampaignConfig.from_dict(cfg_dict), model)


def _worker_trial(seed: int) -> TrialResult:
    return run_trial(_WORKER_CTX, seed)


def run_trials(ctx: Context, seeds: Sequence[int], workers: int = 1) -> list[TrialResult]:
    """Trials for ``seeds``, returned sorted by seed whatever the execution order."""
    if workers <= 1:
        out = [run_trial(ctx, s) for s in seeds]
    else:
        md = clf.model_to_dict(ctx.model) if ctx.model is not None else None
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx.cfg.to_dict(), md)) as ex:
            out = list(ex.map(_worker_trial, seeds, chunksize=8))
    return sorted(out, key=lambda r: r.seed)


def percentile(values, q) -> float:
    """Linear interpolation between order statistics; NaN for empty input."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan")
    return float(np.percentile(v, q, method="linear"))


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if not np.isfinite(x) else repr(x)


TRIAL_COLUMNS = [
    "seed", "channel", "x_t", "y_t", "z_t", "n_true_paths", "n_est", "labels",
    "status_true", "mode_true", "x_hat_true", "y_hat_true", "error_true",
    "status_pred", "mode_pred", "x_hat_pred", "y_hat_pred", "error_pred",
]


def _loc_fields(o: LocalizationOutcome) -> list[str]:
    xh = o.x_hat if o.x_hat is not None else (None, None)
    return [o.status, o.mode, _fmt(xh[0]), _fmt(xh[1]), _fmt(o.error_2d)]


def trials_csv(results: Sequence[TrialResult]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRIAL_COLUMNS) + "\n")
    for r in results:
        preds = r.pred_orders or ["-"] * len(r.true_orders)
        labels = ";".join(f"{t}>{p}" for t, p in zip(r.true_orders, preds))
        row = [str(r.seed), r.channel, *(_fmt(v) for v in r.x_t), str(r.n_true_paths), str(len(r.true_orders)), labels]
        row += _loc_fields(r.true_loc) + _loc_fields(r.pred_loc)
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def _groups(results: Sequence[TrialResult]):
    for channel in (LOS_NLOS, NLOS_ONLY, "all"):
        sel = [r for r in results if channel == "all" or r.channel == channel]
        for labels in ("true", "pred"):
            yield channel, labels, [r.true_loc if labels == "true" else r.pred_loc for r in sel]


def summarize(results: Sequence[TrialResult]) -> list[dict]:
    """Percentile table over ok trials, split by channel type and label source."""
    rows = []
    for channel, labels, outs in _groups(results):
        errs = [o.error_2d for o in outs if o.status == "ok"]
        counts = {s: sum(o.status == s for o in outs) for s in ("ok", "unlocatable", "degenerate", "inconsistent")}
        row = {"channel": channel, "labels": labels, "n_trials": len(outs), **{f"n_{k}": v for k, v in counts.items()}}
        for q in PERCENTILES:
            row[f"p{q}"] = percentile(errs, q)
        rows.append(row)
    return rows


SUMMARY_COLUMNS = ["channel", "labels", "n_trials", "n_ok", "n_unlocatable", "n_degenerate", "n_inconsistent"] + [
    f"p{q}" for q in PERCENTILES
]


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[c]) if c.startswith("p") else str(r[c]) for c in SUMMARY_COLUMNS) + "\n")
    return buf.getvalue()


def cdf_points(errors) -> list[tuple[float, float]]:
    e = np.sort(np.asarray(errors, dtype=float))
    n = e.size
    return [(float(x), (i + 1) / n) for i, x in enumerate(e)]


def cdf_csv(results: Sequence[TrialResult]) -> str:
    buf = io.StringIO()
    buf.write("channel,labels,error,probability\n")
    for channel, labels, outs in _groups(results):
        if channel == "all":
            continue
        for x, p in cdf_points([o.error_2d for o in outs if o.status == "ok"]):
            buf.write(f"{channel},{labels},{_fmt(x)},{_fmt(p)}\n")
    return buf.getvalue()


def campaign_outputs(cfg: CampaignConfig, results: Sequence[TrialResult]) -> dict[str, str]:
    return {
        "trials.csv": trials_csv(results),
        "summary.csv": summary_csv(summarize(results)),
        "cdf.csv": cdf_csv(results),
        "config.json": json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
    }


def write_outputs(out_dir, files: dict[str, str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w", newline="") as fp:
            fp.write(text)


def run_campaign(cfg: CampaignConfig, out_dir=None, model: clf.Mlp | None = None, ctx: Context | None = None):
    """Run all trials; optionally write trials/summary/cdf CSVs and the resolved config."""
    ctx = ctx or build_context(cfg, model)
    results = run_trials(ctx, cfg.seeds, cfg.workers)
    rows = summarize(results)
    if all(r["n_ok"] == 0 for r in rows if r["labels"] == "true" and r["channel"] == "all"):
        log.warning("no trial produced a position estimate")
    if out_dir is not None:
        write_outputs(out_dir, campaign_outputs(cfg, results))
    return results, rows


# -- classifier training -------------------------------------------------------


def collect_dataset(ctx: Context, n_samples: int, seed0: int | None = None, max_trials: int = 100_000):
    """Labeled path features from trials until at least ``n_samples`` rows exist."""
    seed0 = ctx.cfg.seed + TRAIN_SEED_OFFSET if seed0 is None else seed0
    feats, labels = [], []
    total, s = 0, seed0
    while total < n_samples:
        if s - seed0 >= max_trials:
            raise ConfigError(f"{max_trials} trials produced only {total} labeled paths")
        r = run_trial(ctx, s)
        feats.append(r.features)
        labels.extend(r.true_orders)
        total += len(r.true_orders)
        s += 1
    return np.vstack(feats), np.array(labels, dtype=int)


def train_command(
    cfg: CampaignConfig,
    out_dir,
    n_samples: int = 10_000,
    train_cfg: clf.TrainConfig | None = None,
    seed: int = 0,
):
    """Build a labeled dataset from simulated trials, train, and save model and report."""
    ctx = build_context(dataclasses.replace(cfg, model_path=None))
    x, y = collect_dataset(ctx, n_samples)
    model, report = clf.train(x, y, train_cfg, seed=seed, log=log.info)
    os.makedirs(out_dir, exist_ok=True)
    clf.save_model(os.path.join(out_dir, "model.json"), model)
    with open(os.path.join(out_dir, "training.csv"), "w", newline="") as fp:
        report.to_csv(fp)
    np.savez_compressed(os.path.join(out_dir, "dataset.npz"), features=x, labels=y)
    return model, report, (x, y)
