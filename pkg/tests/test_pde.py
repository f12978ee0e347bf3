import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexivae.errors import ConfigurationError, DomainError
from flexivae.pde import (
    AdvDiffConfig,
    BurgersConfig,
    TupleRecord,
    ZoneBox,
    advdiff_exact,
    build_dataset,
    burgers_exact,
    dataset_to_bytes,
    load_dataset,
    pde_residual,
    save_dataset,
    snapshot,
    snapshots,
    split_dataset,
)

# x=0.5, t=0, Re=400: evaluated with mpmath at 50 digits. The exponential and
# the sqrt(1/t0) factor cancel exactly here, leaving 0.5 / 2.
BURGERS_GOLDEN = 0.25


# ------------------------------------------------------------------ closed forms


def test_burgers_zero_at_origin():
    for t in (0.0, 0.7, 3.0):
        for re in (1.0, 400.0, 2400.0):
            assert burgers_exact(0.0, t, re) == 0.0


def test_burgers_golden():
    assert burgers_exact(0.5, 0.0, 400.0) == pytest.approx(BURGERS_GOLDEN, rel=1e-14)


def test_burgers_forms_agree_at_t0():
    x = np.linspace(0, 1, 101)
    np.testing.assert_allclose(burgers_exact(x, 0.0, 900.0), burgers_exact(x, 0.0, 900.0, form="printed"), rtol=1e-13)


@pytest.mark.parametrize("re,t", [(400, 0.0), (400, 1.3), (1200, 0.5), (2400, 2.0), (800, 1.9)])
def test_burgers_single_interior_maximum(re, t):
    x = np.linspace(0, 1, 10_001)[1:]
    u = burgers_exact(x, t, re)
    d = np.diff(u)
    peak = int(np.argmax(u))
    assert 0 < peak < len(x) - 1
    assert np.all(d[:peak] >= 0) and np.all(d[peak:] <= 0)


def test_burgers_large_exponent_is_finite():
    u = burgers_exact(np.linspace(0, 1, 128), 0.0, 1e6)
    assert np.all(np.isfinite(u)) and 0.0 <= u[-1] < 1e-300


def test_burgers_errors():
    with pytest.raises(DomainError):
        burgers_exact(0.5, 0.0, 0.0)
    with pytest.raises(DomainError):
        burgers_exact(0.5, 0.0, -3.0)
    with pytest.raises(DomainError):
        burgers_exact(0.5, -0.1, 400.0)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0, 1), t=st.floats(0, 10), re=st.floats(1e-3, 1e5))
def test_burgers_bounds(x, t, re):
    u = burgers_exact(x, t, re)
    assert 0.0 <= u <= x / (t + 1.0)


def test_advdiff_peak_value():
    for re, t, c in [(1.0, 0.3, 1.0), (10.0, 1.2, 1.0), (4.0, 0.5, -0.7)]:
        nu = 1.0 / re
        assert advdiff_exact(c * t, 0.0, t, re, c) == pytest.approx(1.0 / (4 * np.pi * nu * t), rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-2, 2), y=st.floats(-2, 2), t=st.floats(0.01, 2), re=st.floats(1, 10), c=st.floats(-2, 2)
)
def test_advdiff_properties(x, y, t, re, c):
    u = advdiff_exact(x, y, t, re, c)
    # positive wherever the Gaussian factor does not underflow
    if ((x - c * t) ** 2 + y * y) * re / (4 * t) < 700:
        assert u > 0
    assert u >= 0
    assert u == advdiff_exact(x, -y, t, re, c)
    assert u <= advdiff_exact(c * t, 0.0, t, re, c)


def test_advdiff_errors():
    with pytest.raises(DomainError):
        advdiff_exact(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        advdiff_exact(0.0, 0.0, 0.5, 0.0)


@pytest.mark.parametrize("re,t", [(10, 0.6), (10, 0.3), (5, 0.5), (2, 0.2)])
def test_advdiff_quadrature_mass(re, t):
    g = np.linspace(-2, 2, 257)
    xx, yy = np.meshgrid(g, g)
    mass = np.trapezoid(np.trapezoid(advdiff_exact(xx, yy, t, re), g, axis=1), g)
    assert abs(mass - 1.0) < 1e-3


# ------------------------------------------------------------------ snapshots and residuals


def test_burgers_snapshot_edges():
    cfg = BurgersConfig()
    u = snapshot(cfg, 0.0, 2400.0)
    assert u.shape == (128,)
    assert u[0] == 0.0
    assert abs(u[-1]) < 1e-6


def test_advdiff_snapshot_argmax():
    cfg = AdvDiffConfig(grid=(32, 32))
    for t in (0.2, 0.9, 1.7):
        u = snapshot(cfg, t, 5.0)
        assert u.shape == (32, 32)
        iy, ix = np.unravel_index(np.argmax(u), u.shape)
        assert ix == np.argmin(np.abs(cfg.x - cfg.c * t))
        assert iy == np.argmin(np.abs(cfg.y))


def test_snapshots_matches_snapshot():
    for cfg in (BurgersConfig(), AdvDiffConfig(grid=(16, 20))):
        times, zetas = np.array([0.3, 1.1]), np.array([3.0, 7.0]) if cfg.kind == "advdiff" else np.array([500.0, 2000.0])
        batch = snapshots(cfg, times, zetas)
        for b in range(2):
            assert np.array_equal(batch[b], snapshot(cfg, times[b], zetas[b]))


def _burgers_stack(re, t, cfg):
    return snapshots(cfg, t + np.arange(3) * cfg.dt, np.full(3, re))


def test_burgers_residual_fine_grid():
    cfg = BurgersConfig(n=512, dt=1e-4)
    assert pde_residual(_burgers_stack(400.0, 1.0, cfg), cfg, 400.0) < 1e-2


def test_burgers_residual_converges_second_order():
    res = []
    for n in (257, 513, 1025):
        cfg = BurgersConfig(n=n, dt=1e-5)
        res.append(pde_residual(_burgers_stack(400.0, 0.5, cfg), cfg, 400.0))
    assert res[0] / res[1] > 3.5 and res[1] / res[2] > 3.5


def test_printed_burgers_form_is_not_a_solution():
    # the residual of the printed form stalls under refinement
    res = []
    for n in (513, 2049):
        cfg = BurgersConfig(n=n, dt=1e-5, form="printed")
        res.append(pde_residual(_burgers_stack(400.0, 0.5, cfg), cfg, 400.0))
    assert res[1] > 0.5 * res[0] > 1e-2


@pytest.mark.parametrize("re", [1.0, 5.0, 10.0])
def test_advdiff_residual(re):
    cfg = AdvDiffConfig(grid=(512, 512), dt=1e-4)
    states = snapshots(cfg, 0.5 + np.arange(3) * cfg.dt, np.full(3, re))
    assert pde_residual(states, cfg, re) < 1e-2


def test_residual_of_zero_field():
    cfg = AdvDiffConfig(grid=(16, 16))
    assert pde_residual(np.zeros((4, 16, 16)), cfg, 3.0) == 0.0


def test_residual_needs_three_snapshots():
    with pytest.raises(ConfigurationError):
        pde_residual(np.zeros((2, 8)), BurgersConfig(n=8), 400.0)


# ------------------------------------------------------------------ configs


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=1), dict(dt=0.0), dict(re_range=(5.0, 5.0)), dict(tau_steps_range=(10, 5)), dict(form="x")],
)
def test_burgers_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        BurgersConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs", [dict(grid=(1, 8)), dict(c=float("inf")), dict(re_range=(0.0, 1.0)), dict(re_range=(3.0, 2.0))]
)
def test_advdiff_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        AdvDiffConfig(**kwargs)


# ------------------------------------------------------------------ dataset


def test_single_record():
    assert len(build_dataset(BurgersConfig(), 1, 1, 1, seed=0)) == 1


def test_dataset_cardinality_and_ranges():
    cfg = BurgersConfig()
    recs = build_dataset(cfg, 4, 3, 5, seed=1)
    assert len(recs) == 60
    assert len({r.key for r in recs}) == 60
    for r in recs:
        assert 150 * cfg.dt - 1e-12 <= r.tau <= 450 * cfg.dt + 1e-12
        assert r.tau == r.tau_steps * cfg.dt
        assert 400 <= r.zeta[0] <= 2400 and 0 <= r.t <= 2
        assert r.u_now.shape == r.u_future.shape == (128,)


def test_dataset_regenerates_future_bit_exactly():
    for cfg in (BurgersConfig(), AdvDiffConfig(grid=(16, 16))):
        for r in build_dataset(cfg, 3, 2, 2, seed=2):
            assert np.array_equal(snapshot(cfg, r.t + r.tau, r.zeta), r.u_future)
            assert np.all(np.isfinite(r.u_future)) and r.tau > 0


def test_dataset_bytes_deterministic(tmp_path):
    cfg = BurgersConfig()
    a, b = tmp_path / "a.fvds", tmp_path / "b.fvds"
    save_dataset(a, cfg, build_dataset(cfg, 3, 2, 2, seed=5))
    save_dataset(b, cfg, build_dataset(cfg, 3, 2, 2, seed=5))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"FVDS"
    assert dataset_to_bytes(cfg, build_dataset(cfg, 3, 2, 2, seed=6)) != a.read_bytes()


def test_dataset_roundtrip(tmp_path):
    cfg = AdvDiffConfig(grid=(8, 12))
    recs = build_dataset(cfg, 2, 2, 3, seed=7)
    save_dataset(tmp_path / "d.fvds", cfg, recs)
    cfg2, back = load_dataset(tmp_path / "d.fvds")
    assert cfg2 == cfg
    for r, s in zip(recs, back):
        assert r.key == s.key and r.t == s.t and r.tau == s.tau and r.tau_steps == s.tau_steps
        assert np.array_equal(r.u_now, s.u_now) and np.array_equal(r.u_future, s.u_future)


def test_dataset_prefix_independent_of_size():
    cfg = BurgersConfig()
    small = build_dataset(cfg, 2, 2, 2, seed=3)
    big = build_dataset(cfg, 3, 2, 2, seed=3)
    assert [(r.t, r.tau, r.zeta[0]) for r in small] == [(r.t, r.tau, r.zeta[0]) for r in big[:8]]


def test_dataset_bad_sizes():
    with pytest.raises(ConfigurationError):
        build_dataset(BurgersConfig(), 0, 1, 1, seed=0)


# ------------------------------------------------------------------ split


def _fake(zeta, tplus, k):
    u = np.zeros(4)
    return TupleRecord(u, u, 0.0, float(tplus), 1, np.array([float(zeta)]), k, 0, 0)


def test_split_degenerate_spread():
    recs = [_fake(1000.0, 1.5, k) for k in range(20)]
    s = split_dataset(recs, 0.7, seed=0)
    assert not s.val_left_extrap and not s.val_right_extrap
    assert len(s.train) + len(s.val_interp) == 20


def test_split_needs_ten_records():
    with pytest.raises(ConfigurationError):
        split_dataset([_fake(1.0, 1.0, k) for k in range(9)], 0.7, seed=0)
    with pytest.raises(ConfigurationError):
        split_dataset([_fake(k, k, k) for k in range(20)], 1.0, seed=0)


def test_zone_classification():
    box = ZoneBox(1.0, 2.0, 10.0, 20.0)
    labels = box.classify([0.5, 1.5, 2.5, 0.9, 1.5, 2.9, 0.2], [5.0, 15.0, 25.0, 25.0, 9.0, 12.0, 21.0])
    # both below, inside, both above, mixed corners resolved by normalized excess
    assert list(labels) == ["left", "interp", "right", "right", "left", "right", "left"]


def test_split_partition_and_box():
    cfg = BurgersConfig()
    recs = build_dataset(cfg, 20, 5, 4, seed=11)
    s = split_dataset(recs, 0.7, seed=0)
    parts = [s.train, s.val_interp, s.val_left_extrap, s.val_right_extrap]
    keys = [{r.key for r in p} for p in parts]
    assert sum(len(k) for k in keys) == len(recs) == len(set().union(*keys))
    zeta = np.array([r.zeta[0] for r in recs])
    assert s.box.re_lo == pytest.approx(np.quantile(zeta, 0.15))
    assert s.box.re_hi == pytest.approx(np.quantile(zeta, 0.85))
    for r in s.train + s.val_interp:
        assert s.box.classify(r.zeta[0], r.t_future)[0] == "interp"
    for r in s.val_left_extrap:
        assert s.box.classify(r.zeta[0], r.t_future)[0] == "left"
    low = [r for r in recs if r.zeta[0] < s.box.re_lo and r.t_future < s.box.tplus_lo]
    assert low and all(r.key in keys[2] for r in low)


def test_split_counts_stable_for_default_build():
    # 10,000-record build at defaults, fixed seeds
    recs = build_dataset(BurgersConfig(), 100, 10, 10, seed=0)
    first = split_dataset(recs, 0.7, seed=0).counts()
    assert first == split_dataset(recs, 0.7, seed=0).counts()
    assert first == {"train": 3436, "interp": 1472, "left": 2531, "right": 2561}
