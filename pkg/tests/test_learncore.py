import numpy as np
import pytest

from fleetmon.learncore import (
    Adam,
    Conv2d,
    Dense,
    GroupNorm,
    LayerNorm,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    Sequential,
    Tensor,
    Transformer,
    check_module_gradients,
    gaussian_kl,
    gaussian_reparameterize,
    gmm_log_prob,
    gmm_sample,
    kl_to_gaussian_mixture,
    load_arrays,
    load_module,
    save_arrays,
    save_module,
    upsample2x,
)
from fleetmon.learncore.optim import adam_step
from fleetmon.seeding import seeded_rng


def test_identity_graph():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    t = Tensor(x, requires_grad=True)
    out = t.reshape(3, 4)
    assert np.array_equal(out.data, x)
    g = np.ones_like(x) * 2.0
    out.backward(g)
    assert np.array_equal(t.grad, g)


def test_dense_zero_weights_zero_output():
    rng = seeded_rng(0)
    layer = Dense(4, 3, rng)
    layer.weight.data[:] = 0.0
    layer.bias.data[:] = 0.0
    out = layer(Tensor(rng.standard_normal((5, 4))))
    assert np.all(out.data == 0.0)


def test_upstream_grad_shape_mismatch():
    t = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
    out = t * 2.0
    with pytest.raises(ValueError):
        out.backward(np.ones(3))


def test_forward_backward_does_not_mutate_params():
    rng = seeded_rng(1)
    layer = Dense(6, 6, rng)
    before = layer.weight.data.copy()
    out = layer(Tensor(rng.standard_normal((4, 6)), requires_grad=True))
    (out ** 2).mean().backward()
    assert np.array_equal(layer.weight.data, before)


class _ConvNet(Module):
    def __init__(self, rng, stride):
        self.conv = Conv2d(2, 4, rng, stride=stride)
        self.gn = GroupNorm(2, 4)

    def forward(self, x):
        return self.gn(self.conv(x)).silu()


@pytest.mark.parametrize("shape_seed", range(5))
@pytest.mark.parametrize("layer_kind", ["dense", "conv1", "conv2", "groupnorm", "layernorm", "attention", "transformer"])
def test_gradcheck_layers(layer_kind, shape_seed):
    rng = seeded_rng("gradcheck", layer_kind, shape_seed)
    B = int(rng.integers(1, 4))
    if layer_kind == "dense":
        d_in, d_out = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        mod = Dense(d_in, d_out, rng)
        x = rng.standard_normal((B, d_in))
        fn = lambda m: (m(Tensor(x)) ** 2).mean()
    elif layer_kind in ("conv1", "conv2"):
        stride = 1 if layer_kind == "conv1" else 2
        side = int(rng.integers(4, 9))
        mod = _ConvNet(rng, stride)
        x = rng.standard_normal((B, 2, side, side))
        fn = lambda m: (m(Tensor(x)) ** 2).mean()
    elif layer_kind == "groupnorm":
        mod = GroupNorm(2, 4)
        x = rng.standard_normal((B, 4, 3, 3))
        fn = lambda m: (m(Tensor(x)).tanh() ** 2).mean()
    elif layer_kind == "layernorm":
        d = int(rng.integers(3, 10))
        mod = LayerNorm(d)
        x = rng.standard_normal((B, d))
        fn = lambda m: (m(Tensor(x)).sigmoid() ** 2).mean()
    elif layer_kind == "attention":
        mod = MultiHeadSelfAttention(8, 2, rng, causal=bool(shape_seed % 2))
        x = rng.standard_normal((B, int(rng.integers(2, 6)), 8))
        fn = lambda m: (m(Tensor(x)) ** 2).mean()
    else:
        mod = Transformer(5, 8, 1, 2, max_len=6, rng=rng, causal=True)
        x = rng.standard_normal((B, int(rng.integers(2, 7)), 5))
        fn = lambda m: (m(Tensor(x)) ** 2).mean()
    err = check_module_gradients(mod, fn, rng, max_coords=6)
    assert err <= 1e-4, f"{layer_kind}: rel error {err}"


def test_gradcheck_upsample_and_gmm_head():
    rng = seeded_rng("up")

    class Up(Module):
        def __init__(self):
            self.conv = Conv2d(2, 2, rng, stride=1)

        def forward(self, x):
            return upsample2x(self.conv(x))

    x = rng.standard_normal((2, 2, 3, 3))
    err = check_module_gradients(Up(), lambda m: (m(Tensor(x)) ** 2).mean(), rng)
    assert err <= 1e-4

    class Head(Module):
        def __init__(self):
            self.fc = Dense(4, 2 * 3 * 2 + 3, rng)

        def forward(self, x):
            out = self.fc(x)
            means = out[:, :6].reshape(-1, 3, 2)
            log_stds = out[:, 6:12].reshape(-1, 3, 2).tanh()
            logits = out[:, 12:]
            value = Tensor(np.zeros((x.shape[0], 2), dtype=x.dtype))
            return -gmm_log_prob(means, log_stds, logits, value).mean()

    x2 = rng.standard_normal((3, 4))
    err2 = check_module_gradients(Head(), lambda m: m(Tensor(x2)), rng)
    assert err2 <= 1e-4


def test_reparameterize_zero_variance_and_determinism():
    mu = Tensor(np.array([1.5, -2.0], dtype=np.float32))
    log_var = Tensor(np.full(2, -80.0, dtype=np.float32))
    out = gaussian_reparameterize(mu, log_var, seeded_rng(3))
    np.testing.assert_allclose(out.data, mu.data, atol=1e-6)
    a = gaussian_reparameterize(mu, Tensor(np.zeros(2, dtype=np.float32)), seeded_rng(5))
    b = gaussian_reparameterize(mu, Tensor(np.zeros(2, dtype=np.float32)), seeded_rng(5))
    assert np.array_equal(a.data, b.data)


def test_gaussian_kl_values():
    zero = Tensor(np.zeros((1, 1), dtype=np.float32))
    assert gaussian_kl(zero, zero, zero, zero).item() == 0.0
    one = Tensor(np.ones((1, 1), dtype=np.float32))
    kl = gaussian_kl(one, zero, zero, zero).item()
    assert abs(kl - 0.5) < 1e-7


def test_mixture_kl_nonnegative_and_exact_single_mode():
    rng = seeded_rng(11)
    for _ in range(20):
        mu = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
        lv = Tensor(rng.standard_normal((4, 3)).astype(np.float32) * 0.5)
        pm = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        plv = Tensor(rng.standard_normal((5, 3)).astype(np.float32) * 0.5)
        lg = Tensor(rng.standard_normal(5).astype(np.float32))
        assert kl_to_gaussian_mixture(mu, lv, pm, plv, lg).item() >= 0.0
    mu = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
    lv = Tensor(np.zeros((2, 3), dtype=np.float32))
    pm = Tensor(np.zeros((1, 3), dtype=np.float32))
    plv = Tensor(np.zeros((1, 3), dtype=np.float32))
    exact = gaussian_kl(mu, lv, pm.reshape(1, 3) * Tensor(np.ones((2, 3), dtype=np.float32)),
                        plv * Tensor(np.ones((2, 3), dtype=np.float32))).item()
    bound = kl_to_gaussian_mixture(mu, lv, pm, plv, Tensor(np.zeros(1, dtype=np.float32))).item()
    assert abs(exact - bound) < 1e-5


def test_gmm_log_prob_standard_normal_at_mode():
    one_mode = Tensor(np.zeros((1, 1, 1), dtype=np.float32))
    lp = gmm_log_prob(one_mode, one_mode, Tensor(np.zeros((1, 1), dtype=np.float32)),
                      Tensor(np.zeros((1, 1), dtype=np.float32)))
    assert abs(lp.item() - (-0.5 * np.log(2 * np.pi))) < 1e-6


def test_gmm_low_noise_picks_heaviest_mode():
    means = np.array([[[1.0, 1.0], [5.0, -3.0]]], dtype=np.float32)
    log_stds = np.zeros_like(means)
    logits = np.array([[0.1, 5.0]], dtype=np.float32)
    out = gmm_sample(means, log_stds, logits, seeded_rng(0), low_noise=True)
    assert np.array_equal(out[0], means[0, 1])


def test_gmm_density_integrates_to_one():
    # 1-D trapezoidal quadrature oracle
    means = Tensor(np.array([[[-1.0], [2.0]]], dtype=np.float32))
    log_stds = Tensor(np.log(np.array([[[0.5], [1.5]]], dtype=np.float32)))
    logits = Tensor(np.array([[0.3, 1.1]], dtype=np.float32))
    xs = np.linspace(-12, 14, 4001)
    dens = np.array([
        np.exp(gmm_log_prob(means, log_stds, logits, Tensor(np.array([[x]], dtype=np.float32))).item())
        for x in xs])
    integral = np.trapezoid(dens, xs)
    assert abs(integral - 1.0) < 1e-3


def test_gmm_empty_mixture_rejected():
    empty = Tensor(np.zeros((1, 0, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        gmm_log_prob(empty, empty, Tensor(np.zeros((1, 0), dtype=np.float32)),
                     Tensor(np.zeros((1, 2), dtype=np.float32)))
    with pytest.raises(ValueError):
        gmm_sample(np.zeros((1, 0, 2)), np.zeros((1, 0, 2)), np.zeros((1, 0)), seeded_rng(0))


def test_adam_zero_grad_no_update():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))


def test_adam_first_step_magnitude():
    # bias-corrected first update with constant grad equals lr to rounding
    p = Parameter(np.array([0.5], dtype=np.float32))
    opt = Adam([p], lr=1e-4)
    adam_step(opt, [np.array([1.0], dtype=np.float32)])
    assert abs((0.5 - float(p.data[0])) - 1e-4) < 1e-9


def test_adam_converges_quadratic_bowl():
    p = Parameter(np.array([1.0], dtype=np.float32))
    opt = Adam([p], lr=0.01)
    for _ in range(500):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(float(p.data[0])) < 1e-2


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = seeded_rng(42)
    arrays = {
        "a.weight": rng.standard_normal((3, 5)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalarish": np.array([3.25], dtype=np.float32),
    }
    path = tmp_path / "model.fmck"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].tobytes() == arrays[k].tobytes()
    # header layout pinned
    raw = path.read_bytes()
    assert raw[:4] == b"FMCK"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_module_save_load_roundtrip(tmp_path):
    rng = seeded_rng(4)
    net = Sequential(Dense(3, 4, rng), Dense(4, 2, rng))
    path = tmp_path / "net.fmck"
    save_module(path, net)
    net2 = Sequential(Dense(3, 4, seeded_rng(99)), Dense(4, 2, seeded_rng(100)))
    load_module(path, net2)
    x = Tensor(seeded_rng(1).standard_normal((2, 3)))
    assert np.array_equal(net(x).data, net2(x).data)
