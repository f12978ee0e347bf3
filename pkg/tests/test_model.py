import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexivae.autodiff import Tape, Tensor, backward, count_ops, ops
from flexivae.diagnostics import decoder_jacobian
from flexivae.errors import ConfigurationError, DimensionError, StateError
from flexivae.model import (
    EncoderDecoderConfig,
    FlexiVAE,
    PropagatorConfig,
    kl_divergence,
    loss_total,
    positional_encoding,
    reparameterize,
)
from flexivae.pde import AdvDiffConfig, BurgersConfig, build_dataset, stack_records


@pytest.fixture(scope="module")
def burgers_records():
    return build_dataset(BurgersConfig(), 4, 2, 2, seed=0)


@pytest.fixture(scope="module")
def model():
    return FlexiVAE(seed=3)


# ------------------------------------------------------------------ configs


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(latent_dim=0),
        dict(channels=()),
        dict(channels=(16, 30)),
        dict(state_shape=(100,)),
        dict(state_shape=(8, 8, 8)),
        dict(kernel=4),
        dict(activation="gelu"),
    ],
)
def test_arch_validation(kwargs):
    with pytest.raises(ConfigurationError):
        EncoderDecoderConfig(**kwargs)


def test_arch_default_kernels():
    assert EncoderDecoderConfig().kernel == 5
    assert EncoderDecoderConfig(state_shape=(32, 32), latent_dim=3).kernel == 3


def test_propagator_validation():
    with pytest.raises(ConfigurationError):
        PropagatorConfig(kind="attention")
    with pytest.raises(ConfigurationError):
        PropagatorConfig(kind="pep", embedding_dim=63)
    with pytest.raises(ConfigurationError):
        PropagatorConfig(hidden=(0,))
    with pytest.raises(ConfigurationError):
        FlexiVAE(EncoderDecoderConfig(latent_dim=4), PropagatorConfig(kind="pep", embedding_dim=4))


# ------------------------------------------------------------------ encode / decode


def test_encode_deterministic(model, burgers_records):
    u = burgers_records[0].u_now
    a, b = model.encode(u), model.encode(u)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_encode_no_cross_sample_coupling(model, burgers_records):
    u = burgers_records[1].u_now
    mu, lv = model.encode(np.stack([u, u]))
    assert np.array_equal(mu.data[0], mu.data[1]) and np.array_equal(lv.data[0], lv.data[1])
    other = np.stack([u, burgers_records[2].u_now])
    assert np.array_equal(model.encode(other)[0].data[0], mu.data[0])


def test_encode_dims(model, burgers_records):
    mu, lv = model.encode(burgers_records[0].u_now)
    assert mu.shape == (1, 2) and lv.shape == (1, 2)
    assert np.all(np.isfinite(mu.data)) and np.all(np.abs(lv.data) <= 10)


def test_encode_shape_mismatch(model):
    with pytest.raises(DimensionError):
        model.encode(np.zeros(64))
    with pytest.raises(DimensionError):
        model.encode(np.zeros((3, 127)))


def test_decode_deterministic_and_shape(model):
    z = np.array([[0.3, -1.2]])
    a, b = model.decode(z).data, model.decode(z).data
    assert np.array_equal(a, b) and a.shape == (1, 128)


def test_decode_length_mismatch(model):
    with pytest.raises(DimensionError):
        model.decode(np.zeros((1, 3)))


def test_decode_directional_derivative_matches_jacobian(model):
    z = np.array([0.4, -0.7])
    J = decoder_jacobian(model, z).J
    h = 1e-6
    fd = (model.decode(z + [h, 0]).data[0] - model.decode(z - [h, 0]).data[0]) / (2 * h)
    assert np.max(np.abs(fd - J[:, 0])) < 1e-5


def test_advdiff_shapes():
    m = FlexiVAE(EncoderDecoderConfig(state_shape=(32, 32), latent_dim=3), PropagatorConfig(zeta_scale=10, tau_scale=1.7))
    u = build_dataset(AdvDiffConfig(grid=(32, 32)), 1, 1, 2, seed=0)
    out = m.forecast(np.stack([r.u_now for r in u]), [r.tau for r in u], [r.zeta for r in u])
    assert out.shape == (2, 32, 32)
    assert m.encode(u[0].u_now)[0].shape == (1, 3)


# ------------------------------------------------------------------ sampling


def test_reparameterize_zero_variance():
    mu = Tensor(np.array([[0.5, -2.0]]))
    s = reparameterize(mu, Tensor(np.full((1, 2), -100.0)), np.random.default_rng(0))
    np.testing.assert_allclose(s.z.data, mu.data, atol=1e-20)


def test_reparameterize_reproducible():
    mu, lv = Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2)))
    a = reparameterize(mu, lv, np.random.default_rng(4))
    b = reparameterize(mu, lv, np.random.default_rng(4))
    assert np.array_equal(a.epsilon, b.epsilon) and np.array_equal(a.z.data, b.z.data)


def test_reparameterize_monte_carlo_mean():
    n = 100_000
    mu0, lv0 = np.array([1.5, -0.3]), np.array([0.4, -1.0])
    s = reparameterize(Tensor(np.tile(mu0, (n, 1))), Tensor(np.tile(lv0, (n, 1))), np.random.default_rng(5))
    sigma = np.exp(0.5 * lv0)
    assert np.all(np.abs(s.z.data.mean(0) - mu0) < 4 * sigma / np.sqrt(n))
    np.testing.assert_allclose(s.z.data, mu0 + sigma * s.epsilon, rtol=1e-14)


def test_reparameterize_gradient_reaches_mu_and_log_var():
    mu = Tensor(np.array([[0.2, 0.1]]), requires_grad=True)
    lv = Tensor(np.array([[0.0, -1.0]]), requires_grad=True)
    with Tape() as tape:
        s = reparameterize(mu, lv, np.random.default_rng(6))
        out = ops.sum(s.z)
    backward(tape, out)
    np.testing.assert_allclose(mu.grad, 1.0)
    np.testing.assert_allclose(lv.grad, 0.5 * np.exp(0.5 * lv.data) * s.epsilon)


# ------------------------------------------------------------------ positional encoding


def test_pe_zero_alternates():
    np.testing.assert_array_equal(positional_encoding(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_pe_first_frequency_is_one():
    assert positional_encoding(1.3, 16)[0] == np.sin(1.3)
    assert positional_encoding(1.3, 16)[1] == np.cos(1.3)


def test_pe_frequencies():
    d = 64
    v = 7.0
    pe = positional_encoding(v, d)
    f = np.arange(d // 2)
    np.testing.assert_allclose(pe[0::2], np.sin(v / 10000 ** (2 * f / d)), rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(v=st.floats(-1e6, 1e6), half=st.integers(1, 64))
def test_pe_bounded(v, half):
    pe = positional_encoding(v, 2 * half)
    assert pe.shape == (2 * half,) and np.all(np.abs(pe) <= 1.0)


def test_pe_odd_dimension():
    with pytest.raises(ConfigurationError):
        positional_encoding(1.0, 7)


# ------------------------------------------------------------------ propagators


def test_dcp_arity_and_determinism(model):
    assert model.params["prop/fc0/w"].shape[0] == 4
    z = np.array([[0.1, 0.2]])
    a = model.propagate(z, [1000.0], 1.0).data
    assert np.array_equal(a, model.propagate(z, [1000.0], 1.0).data)
    assert a.shape == (1, 2)


def test_pep_forced_composition():
    m = FlexiVAE(prop=PropagatorConfig(kind="pep"), seed=0)
    assert m.prop.embedding_dim == 64
    P = m.params
    P["prop/up/w"].data[:] = 0.0
    P["prop/up/b"].data[:] = 0.0
    P["prop/down/w"].data[:] = np.eye(64)[:, :2]
    P["prop/down/b"].data[:] = 0.0
    zeta, tau = 1500.0, 1.2
    out = m.propagate(np.array([[3.0, -4.0]]), [zeta], tau).data[0]
    s = m.prop.pe_scale
    pe = positional_encoding(s * zeta / m.prop.zeta_scale, 64) + positional_encoding(s * tau / m.prop.tau_scale, 64)
    np.testing.assert_allclose(out, pe[:2], rtol=0, atol=1e-12)
    assert np.array_equal(out, m.propagate(np.array([[3.0, -4.0]]), [zeta], tau).data[0])


# ------------------------------------------------------------------ KL and loss


def test_kl_values():
    assert kl_divergence(np.zeros((1, 2)), np.zeros((1, 2))).item() == 0.0
    assert kl_divergence(np.array([[1.0]]), np.array([[0.0]])).item() == pytest.approx(0.5)


def test_kl_non_negative_scan():
    rng = np.random.default_rng(7)
    mu = rng.normal(scale=3, size=(1_000_000, 1))
    lv = rng.uniform(-10, 10, size=(1_000_000, 1))
    inner = mu**2 + np.exp(lv) - lv - 1.0
    assert np.all(0.5 * inner >= 0)
    assert kl_divergence(mu, lv).item() >= 0


@settings(max_examples=100, deadline=None)
@given(mu=st.lists(st.floats(-50, 50), min_size=3, max_size=3), lv=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_kl_non_negative_property(mu, lv):
    assert kl_divergence(np.array([mu]), np.array([lv])).item() >= 0


def test_loss_weights_off(model, burgers_records):
    terms = loss_total(burgers_records, model, 0.0, 0.0, np.random.default_rng(0))
    assert terms.total.item() == terms.re.item()
    assert terms.re.item() >= 0 and terms.pre.item() >= 0


def test_loss_decomposition(model, burgers_records):
    beta, eta = 1.2e-5, 1.7
    t = loss_total(burgers_records, model, beta, eta, np.random.default_rng(1))
    assert abs(t.total.item() - (t.re.item() + eta * t.pre.item() + beta * t.kl.item())) < 1e-12


def test_loss_rejects_negative_weights(model, burgers_records):
    with pytest.raises(ConfigurationError):
        loss_total(burgers_records, model, -1.0, 0.0, np.random.default_rng(0))


def test_loss_identity_propagator_gives_equal_terms(burgers_records):
    # PEP weights forced so that propagate(z) == z for this (zeta, tau)
    m = FlexiVAE(prop=PropagatorConfig(kind="pep"), seed=2)
    r = burgers_records[0]
    P = m.params
    up = np.zeros((2, 64))
    up[:, :2], up[:, 2:4] = np.eye(2), -np.eye(2)
    down = np.zeros((64, 2))
    down[:2], down[2:4] = np.eye(2), -np.eye(2)
    P["prop/up/w"].data[:] = up
    P["prop/up/b"].data[:] = 0.0
    P["prop/down/w"].data[:] = down
    s = m.prop.pe_scale
    pe = positional_encoding(s * r.zeta[0] / m.prop.zeta_scale, 64) + positional_encoding(s * r.tau / m.prop.tau_scale, 64)
    P["prop/down/b"].data[:] = -(pe @ down)
    z = np.array([[0.7, -1.1]])
    np.testing.assert_allclose(m.propagate(z, r.zeta, r.tau).data, z, atol=1e-12)
    rec = type(r)(r.u_now, r.u_now.copy(), r.t, r.tau, r.tau_steps, r.zeta, 0, 0, 0)
    t = loss_total([rec], m, 0.0, 1.0, np.random.default_rng(3))
    assert t.pre.item() == pytest.approx(t.re.item(), rel=1e-9)


def test_gradient_reaches_all_three_groups(burgers_records):
    for kind in ("dcp", "pep"):
        m = FlexiVAE(prop=PropagatorConfig(kind=kind), seed=4)
        with Tape() as tape:
            t = loss_total(burgers_records, m, 1e-3, 1.0, np.random.default_rng(0))
        backward(tape, t.total)
        for group in (m.theta_e, m.theta_d, m.theta_p):
            assert sum(np.abs(g).sum() for g in group.grads().values()) > 0


def test_shared_decoder_tensors(model, burgers_records):
    with Tape() as tape:
        loss_total(burgers_records, model, 1e-5, 1.0, np.random.default_rng(0))
    uses = [n for n in tape.nodes if any(x is model.params["dec/out/w"] for x in n.inputs)]
    assert len(uses) == 2  # reconstruction and forecast
    assert model.theta_d["dec/out/w"] is model.params["dec/out/w"]


# ------------------------------------------------------------------ forecast


def test_forecast_op_counts_independent_of_tau(model, burgers_records):
    u = burgers_records[0].u_now
    counts = []
    for steps in (150, 450):
        with count_ops() as c:
            model.forecast(u, steps * 0.004, [1200.0])
        counts.append(dict(c))
    assert counts[0] == counts[1]
    n_conv = len(model.arch.channels)
    # encoder convs, decoder convs plus the output conv
    assert counts[0]["conv1d"] == 2 * n_conv + 1
    # encoder fc + head, propagator layers, decoder fc + expand
    assert counts[0]["dense"] == (len(model.arch.head_widths) + 1) * 2 + len(model.prop.hidden) + 1


def test_forecast_matches_manual_composition(model, burgers_records):
    r = burgers_records[3]
    mu, _ = model.encode(r.u_now)
    manual = model.decode(model.propagate(mu, r.zeta, r.tau)).data[0]
    assert np.array_equal(model.forecast(r.u_now, r.tau, r.zeta), manual)


def test_forecast_batched(model, burgers_records):
    cols = stack_records(burgers_records)
    batch = model.forecast(cols["u_now"], cols["tau"], cols["zeta"])
    for i, r in enumerate(burgers_records):
        np.testing.assert_allclose(batch[i], model.forecast(r.u_now, r.tau, r.zeta), rtol=1e-12, atol=1e-14)


def test_unloaded_model_raises(burgers_records):
    m = FlexiVAE(seed=None)
    with pytest.raises(StateError):
        m.forecast(burgers_records[0].u_now, 1.0, [500.0])


def test_checkpoint_roundtrip(tmp_path, model, burgers_records):
    model.save(tmp_path / "ckpt")
    back = FlexiVAE.load(tmp_path / "ckpt")
    r = burgers_records[0]
    assert np.array_equal(back.forecast(r.u_now, r.tau, r.zeta), model.forecast(r.u_now, r.tau, r.zeta))
    assert back.arch == model.arch and back.prop == model.prop
    with pytest.raises(StateError):
        FlexiVAE.load(tmp_path / "missing")
