import numpy as np
import pytest

from momploc.geometry import PulseShape, UraGeometry
from momploc.momp import build_dictionaries, build_measurement
from momploc.sounding import make_codebooks, make_pilots

TS = 1.0 / 1.76e9


def small_problem(n_t=(2, 2), n_r=(4, 4), n_taps=4, grid=(4, 4, 8), m_t=4, m_r=4, n_t_rf=2, n_r_rf=2,
                  q=24, pad=4, pilot="zadoff-chu", seed=0):
    """Tiny sounding setup: geometries, codebooks, pilots, measurement and dictionaries."""
    geom_t = UraGeometry(*n_t)
    geom_r = UraGeometry(*n_r)
    pulse = PulseShape(TS)
    cb = make_codebooks(geom_t.size, n_t_rf, m_t, geom_r.size, n_r_rf, m_r, seed=seed)
    pilots = make_pilots(q, n_t_rf, pad, kind=pilot)
    phi = build_measurement(cb, pilots, n_taps, geom_t)
    gx = np.linspace(-1, 1, grid[0], endpoint=False)
    gy = np.linspace(-1, 1, grid[1], endpoint=False)
    gt = np.arange(grid[2]) * (n_taps * TS / grid[2])
    psi = build_dictionaries(geom_t, n_taps, pulse, (gx, gy, gt))
    return dict(geom_t=geom_t, geom_r=geom_r, pulse=pulse, cb=cb, pilots=pilots, phi=phi, psi=psi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit(rng, n=None):
    v = rng.standard_normal((3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def true_labeled(scene, paths=None):
    """Exact path parameters of a scene as labeled estimates (LoS and first order only)."""
    from momploc.locate import EstimatedPath
    from momploc.scene import PathOrder, trace_paths

    paths = trace_paths(scene) if paths is None else paths
    return [
        (EstimatedPath(p.doa, p.dod, p.delay, abs(p.gain) ** 2), p.order)
        for p in paths
        if p.order in (PathOrder.LOS, PathOrder.FIRST)
    ]


def oracle_scenes(blocked: bool, count: int, min_first: int = 1, seed0: int = 0):
    """Scenes with the requested LoS state and enough first-order paths."""
    import dataclasses

    from momploc.scene import PathOrder, SceneConfig, generate_scene, trace_paths

    cfg = dataclasses.replace(SceneConfig(), p_los_blocked=1.0 if blocked else 0.0)
    out, seed = [], seed0
    while len(out) < count:
        sc = generate_scene(cfg, seed)
        paths = trace_paths(sc)
        if sum(p.order == PathOrder.FIRST for p in paths) >= min_first:
            out.append((sc, paths))
        seed += 1
    return out


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
