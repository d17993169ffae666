import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdflow import autodiff as ad
from cdflow.autodiff import Tensor
from cdflow.exceptions import DimensionError, DomainError, SingularityError
from cdflow.flow import (
    LOG_2PI,
    FlowConfig,
    FlowModel,
    actnorm,
    actnorm_init,
    affine_coupling,
    flow_forward,
    flow_inverse,
    inv_conv,
    log_likelihood,
    split,
    squeeze,
    unsqueeze,
)

from conftest import randomize


def numeric_jacobian(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        d = np.zeros(x.size)
        d[i] = eps
        d = d.reshape(x.shape)
        cols.append((f(x + d) - f(x - d)).ravel() / (2 * eps))
    return np.stack(cols, axis=1)


def random_net(rng, d, hidden, scale=0.3):
    return {
        "conv1.kernel": Tensor(scale * rng.standard_normal((3, 3, d, hidden))),
        "conv1.bias": Tensor(scale * rng.standard_normal(hidden)),
        "conv2.kernel": Tensor(scale * rng.standard_normal((3, 3, hidden, 2 * d))),
        "conv2.bias": Tensor(scale * rng.standard_normal(2 * d)),
    }


# ---------------------------------------------------------------------------
# independent per-image reference: explicit loops, no autodiff, no shared helpers


def ref_conv(x, kernel, bias):
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.empty((h, w, kernel.shape[3]))
    for i in range(h):
        for j in range(w):
            out[i, j] = np.einsum("abc,abco->o", xp[i : i + 3, j : j + 3], kernel) + bias
    return out


def ref_squeeze(x):
    h, w, c = x.shape
    out = np.empty((h // 2, w // 2, 4 * c))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = np.concatenate([x[2 * i, 2 * j], x[2 * i, 2 * j + 1], x[2 * i + 1, 2 * j], x[2 * i + 1, 2 * j + 1]])
    return out


def ref_log_density(x, model):
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    z = np.asarray(x, dtype=np.float64)
    logdet = 0.0
    logp = 0.0

    def gauss(v, m, ls):
        return np.sum(-0.5 * ((v - m) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi))

    for k in range(1, cfg.n_scales + 1):
        z = ref_squeeze(z)
        h, w, c = z.shape
        for l in range(1, cfg.n_steps + 1):
            pre = f"scale{k}.step{l}."
            s, t = P[pre + "actnorm.scale"], P[pre + "actnorm.bias"]
            z = z * s + t
            logdet += h * w * np.sum(np.log(np.abs(s)))
            W = P[pre + "invconv.weight"]
            z = np.einsum("ij,hwj->hwi", W, z)
            logdet += h * w * np.linalg.slogdet(W)[1]
            d = c // 2
            hid = np.tanh(ref_conv(z[..., :d], P[pre + "coupling.conv1.kernel"], P[pre + "coupling.conv1.bias"]))
            raw = ref_conv(hid, P[pre + "coupling.conv2.kernel"], P[pre + "coupling.conv2.bias"])
            ls = cfg.clamp * np.tanh(raw[..., :d] / cfg.clamp)
            z = np.concatenate([z[..., :d], z[..., d:] * np.exp(ls) + raw[..., d:]], axis=-1)
            logdet += ls.sum()
        if k < cfg.n_scales:
            d = c // 2
            stats = ref_conv(z[..., d:], P[f"scale{k}.prior.kernel"], P[f"scale{k}.prior.bias"])
            logp += gauss(z[..., :d], stats[..., :d], stats[..., d:])
            z = z[..., d:]
        else:
            logp += gauss(z, P["top.mean"], P["top.log_std"])
    return logp + logdet


# ---------------------------------------------------------------------------


class TestFlowConfig:
    def test_shapes_follow_schedule(self):
        cfg = FlowConfig(3, 2, 8, 2.0, (32, 32))
        assert cfg.latent_shapes() == [(16, 16, 6), (8, 8, 12), (4, 4, 48)]
        assert sum(np.prod(s) for s in cfg.latent_shapes()) == cfg.dim == 32 * 32 * 3

    @pytest.mark.parametrize("kw", [dict(n_scales=1), dict(n_steps=0), dict(hidden_width=0), dict(clamp=0.0)])
    def test_domain_errors(self, kw):
        with pytest.raises(DomainError):
            FlowConfig(**{**dict(input_size=(16, 16)), **kw})

    def test_divisibility(self):
        with pytest.raises(DimensionError):
            FlowConfig(n_scales=3, input_size=(20, 32))

    def test_parameter_count_is_pure_function_of_config(self):
        cfg = FlowConfig(2, 2, 5, 2.0, (8, 8))
        assert FlowModel(cfg, seed=0).n_parameters == FlowModel(cfg, seed=9).n_parameters
        shapes = FlowModel.expected_parameter_shapes(cfg)
        assert {k: v.shape for k, v in FlowModel(cfg, seed=3).params.items()} == shapes


class TestSqueeze:
    def test_block_order(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        np.testing.assert_array_equal(squeeze(x).ravel(), [1, 2, 3, 4])

    def test_shape(self, rng):
        assert squeeze(rng.standard_normal((2, 6, 4, 5))).shape == (2, 3, 2, 20)

    def test_matches_reference(self, rng):
        x = rng.standard_normal((4, 6, 3))
        np.testing.assert_array_equal(squeeze(x[None])[0], ref_squeeze(x))

    def test_tensor_and_array_paths_agree(self, rng):
        x = rng.standard_normal((1, 4, 4, 3))
        assert np.array_equal(squeeze(Tensor(x)).data, squeeze(x))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 2), st.sampled_from([2, 4, 6]), st.sampled_from([2, 4]), st.integers(1, 3)), elements=st.floats(-10, 10)))
    def test_round_trip_bit_identical(self, x):
        assert np.array_equal(unsqueeze(squeeze(x)), x)

    def test_odd_extent(self):
        with pytest.raises(DimensionError):
            squeeze(np.zeros((1, 3, 4, 1)))
        with pytest.raises(DimensionError):
            unsqueeze(np.zeros((1, 2, 2, 3)))


class TestActnorm:
    def test_identity(self, rng):
        z = rng.standard_normal((2, 3, 3, 4))
        out, ld = actnorm(Tensor(z), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, z)
        np.testing.assert_array_equal(ld.data, 0.0)

    def test_log_det_of_doubling(self):
        _, ld = actnorm(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.full(1, 2.0)), Tensor(np.zeros(1)))
        assert ld.data[0] == pytest.approx(16 * np.log(2), rel=1e-14)

    def test_round_trip(self, rng):
        z = rng.standard_normal((2, 3, 3, 4))
        s, t = rng.uniform(0.5, 2, 4) * rng.choice([-1, 1], 4), rng.standard_normal(4)
        out, ld = actnorm(Tensor(z), Tensor(s), Tensor(t))
        back, ld_inv = actnorm(out.data, s, t, reverse=True)
        assert np.max(np.abs(back - z)) <= 1e-10
        np.testing.assert_allclose(ld.data, -ld_inv)

    def test_zero_scale(self):
        with pytest.raises(SingularityError):
            actnorm(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.array([1.0, 0.0])), Tensor(np.zeros(2)))


class TestActnormInit:
    def test_standardised_batch(self, rng):
        x = rng.standard_normal((20000, 3))
        x = (x - x.mean(0)) / x.std(0)
        s, t = actnorm_init(x.reshape(100, 10, 20, 3))
        np.testing.assert_allclose(s, 1.0, atol=1e-12)
        np.testing.assert_allclose(t, 0.0, atol=1e-12)

    def test_constant_batch(self):
        s, t = actnorm_init([np.full((2, 2, 3), 0.4), np.full((2, 2, 3), 0.4)])
        np.testing.assert_array_equal(s, 1.0)
        np.testing.assert_allclose(t, -0.4)

    def test_random_batch_statistics(self, rng):
        batch = [rng.normal(3, 5, (4, 4, 6)) for _ in range(5)]
        s, t = actnorm_init(batch)
        out = np.stack(batch) * s + t
        flat = out.reshape(-1, 6)
        assert np.max(np.abs(flat.mean(0))) <= 1e-8
        assert np.max(np.abs(flat.var(0) - 1)) <= 1e-6

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            actnorm_init([])

    def test_forward_init_sets_flag_and_standardises(self, rng, small_config):
        model = FlowModel(small_config)
        x = rng.uniform(size=(6, 8, 8, 3))
        flow_forward(x, model, init_actnorm=True)
        assert model.actnorm_initialized
        z = squeeze(x)
        out, _ = actnorm(Tensor(z), model.params["scale1.step1.actnorm.scale"], model.params["scale1.step1.actnorm.bias"])
        assert np.max(np.abs(out.data.reshape(-1, 12).mean(0))) <= 1e-8


class TestInvConv:
    def test_identity(self, rng):
        z = rng.standard_normal((1, 2, 2, 5))
        out, ld = inv_conv(Tensor(z), Tensor(np.eye(5)))
        np.testing.assert_array_equal(out.data, z)
        assert ld.data[0] == 0.0

    def test_orthogonal_log_det_zero(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        _, ld = inv_conv(Tensor(rng.standard_normal((1, 3, 3, 6))), Tensor(q))
        assert abs(ld.data[0]) <= 1e-12

    def test_random_weight(self, rng):
        W = rng.standard_normal((12, 12)) + 4 * np.eye(12)
        z = rng.standard_normal((1, 2, 2, 12))
        out, ld = inv_conv(Tensor(z), Tensor(W))
        assert abs(ld.data[0] - 4 * np.linalg.slogdet(W)[1]) <= 1e-8
        back, ld_inv = inv_conv(out.data, W, reverse=True)
        assert np.max(np.abs(back - z)) <= 1e-8
        assert abs(ld_inv[0] + ld.data[0]) <= 1e-8

    def test_singular(self):
        W = np.ones((3, 3))
        with pytest.raises(SingularityError):
            inv_conv(Tensor(np.zeros((1, 2, 2, 3))), Tensor(W))
        with pytest.raises(SingularityError):
            inv_conv(np.zeros((1, 2, 2, 3)), W, reverse=True)


class TestCoupling:
    def test_zero_net_is_identity(self, rng):
        z = rng.standard_normal((2, 3, 3, 4))
        net = random_net(rng, 2, 5)
        net["conv2.kernel"].data[:] = 0
        net["conv2.bias"].data[:] = 0
        out, ld = affine_coupling(Tensor(z), net)
        np.testing.assert_array_equal(out.data, z)
        np.testing.assert_array_equal(ld.data, 0.0)

    def test_round_trip(self, rng):
        for _ in range(5):
            z = rng.standard_normal((2, 4, 4, 6))
            net = random_net(rng, 3, 4, scale=0.5)
            out, ld = affine_coupling(Tensor(z), net)
            back, ld_inv = affine_coupling(out.data, net, reverse=True)
            assert np.max(np.abs(back - z)) <= 1e-8
            np.testing.assert_allclose(ld_inv, -ld.data, atol=1e-10)

    def test_log_det_matches_jacobian(self, rng):
        z = rng.standard_normal((2, 2, 4))
        net = random_net(rng, 2, 3, scale=0.5)

        def f(v):
            with ad.no_grad():
                return affine_coupling(Tensor(v[None]), net)[0].data[0]

        J = numeric_jacobian(f, z)
        _, ld = affine_coupling(Tensor(z[None]), net)
        assert abs(ld.data[0] - np.linalg.slogdet(J)[1]) <= 1e-6

    def test_scale_is_clamped(self, rng):
        net = random_net(rng, 1, 2)
        net["conv2.bias"].data[:] = [100.0, 0.0]
        _, ld = affine_coupling(Tensor(rng.standard_normal((1, 2, 2, 2))), net, clamp=2.0)
        assert ld.data[0] <= 4 * 2.0 + 1e-12

    def test_odd_channels(self, rng):
        with pytest.raises(DimensionError):
            affine_coupling(Tensor(np.zeros((1, 2, 2, 3))), random_net(rng, 1, 2))


class TestSplit:
    def test_halves_and_zero_prior(self, rng):
        z = rng.standard_normal((1, 8, 8, 12))
        out, carry, (mean, log_std) = split(Tensor(z), Tensor(np.zeros((3, 3, 6, 12))), Tensor(np.zeros(12)))
        assert out.shape == carry.shape == (1, 8, 8, 6)
        assert np.array_equal(np.concatenate([out.data, carry.data], axis=-1), z)
        assert np.all(mean.data == 0) and np.all(log_std.data == 0)

    def test_odd_channels(self):
        with pytest.raises(DimensionError):
            split(np.zeros((1, 2, 2, 5)), np.zeros((3, 3, 2, 4)), np.zeros(4))


class TestForwardInverse:
    def test_identity_model_is_permutation(self, rng, small_config):
        model = FlowModel(small_config, w_init="identity")
        x = rng.uniform(size=(8, 8, 3))
        stack = flow_forward(x, model)
        flat = stack.flatten().data[0]
        assert np.array_equal(np.sort(flat), np.sort(x.ravel()))
        assert stack.log_det.data[0] == 0.0
        assert stack.n_elements == x.size

    def test_orthogonal_init_has_zero_log_det(self, rng, small_config):
        stack = flow_forward(rng.uniform(size=(2, 8, 8, 3)), FlowModel(small_config, seed=4))
        assert np.max(np.abs(stack.log_det.data)) <= 1e-12

    def test_round_trip_random_models(self, rng):
        cfg = FlowConfig(3, 2, 6, 2.0, (16, 16))
        for seed in range(5):
            model = randomize(FlowModel(cfg, seed=seed), rng, scale=0.2)
            x = rng.uniform(size=(3, 16, 16, 3))
            assert np.max(np.abs(flow_inverse(flow_forward(x, model), model) - x)) <= 1e-6

    def test_unbatched_round_trip_and_part_list(self, rng, small_config):
        model = randomize(FlowModel(small_config), rng)
        x = rng.uniform(size=(8, 8, 3))
        stack = flow_forward(x, model)
        assert not stack.batched
        parts = [p.data[0] for p in stack.parts]
        np.testing.assert_allclose(flow_inverse(parts, model), x, atol=1e-10)

    def test_log_det_matches_numeric_jacobian(self, rng):
        cfg = FlowConfig(2, 1, 4, 2.0, (4, 4))
        model = randomize(FlowModel(cfg, seed=1), rng, scale=0.3)
        x = rng.uniform(size=(4, 4, 3))

        def f(v):
            with ad.no_grad():
                return flow_forward(v, model).flatten().data[0]

        J = numeric_jacobian(f, x)
        assert abs(flow_forward(x, model).log_det.data[0] - np.linalg.slogdet(J)[1]) <= 1e-3

    def test_batch_matches_single(self, rng, small_config):
        model = randomize(FlowModel(small_config), rng)
        x = rng.uniform(size=(3, 8, 8, 3))
        batch = flow_forward(x, model)
        for i in range(3):
            one = flow_forward(x[i], model)
            np.testing.assert_allclose(one.flatten().data[0], batch.flatten().data[i], atol=1e-12)

    def test_wrong_input_shape(self, small_config):
        model = FlowModel(small_config)
        with pytest.raises(DimensionError):
            flow_forward(np.zeros((16, 16, 3)), model)
        with pytest.raises(DimensionError):
            flow_forward(np.zeros((8, 8)), model)

    def test_inverse_shape_mismatch(self, small_config):
        model = FlowModel(small_config)
        with pytest.raises(DimensionError):
            flow_inverse([np.zeros((4, 4, 6))], model)

    def test_inverse_singular_weight(self, rng, small_config):
        model = FlowModel(small_config)
        stack = flow_forward(rng.uniform(size=(8, 8, 3)), model)
        model.params["scale1.step1.invconv.weight"].data = np.ones((12, 12))
        with pytest.raises(SingularityError):
            flow_inverse(stack, model)


class TestLogLikelihood:
    def test_zero_input(self, small_config):
        model = FlowModel(small_config, w_init="identity")
        D = small_config.dim
        assert float(log_likelihood(np.zeros((8, 8, 3)), model)) == pytest.approx(-D / 2 * LOG_2PI, rel=1e-14)

    def test_standard_gaussian_of_permuted_input(self, rng, small_config):
        x = rng.uniform(size=(8, 8, 3))
        D = small_config.dim
        expected = -D / 2 * LOG_2PI - 0.5 * np.sum(x**2)
        for w_init in ("identity", "orthogonal"):
            ll = float(log_likelihood(x, FlowModel(small_config, seed=2, w_init=w_init)))
            assert ll == pytest.approx(expected, rel=1e-12)

    def test_matches_independent_evaluation(self, rng):
        cfg = FlowConfig(2, 2, 4, 2.0, (8, 8))
        for seed in range(3):
            model = randomize(FlowModel(cfg, seed=seed), rng, scale=0.2)
            x = rng.uniform(size=(8, 8, 3))
            assert float(log_likelihood(x, model)) == pytest.approx(ref_log_density(x, model), rel=1e-10)

    def test_batched_shape(self, rng, small_config):
        ll = log_likelihood(rng.uniform(size=(4, 8, 8, 3)), FlowModel(small_config))
        assert ll.shape == (4,)


class TestModelState:
    def test_copy_is_independent(self, small_config):
        model = FlowModel(small_config)
        other = model.copy()
        other.params["top.mean"].data += 1
        assert np.all(model.params["top.mean"].data == 0)

    def test_load_state_dict_validates(self, small_config):
        model = FlowModel(small_config)
        state = model.state_dict()
        state.pop("top.mean")
        with pytest.raises(DimensionError):
            model.load_state_dict(state)
        state = model.state_dict()
        state["top.mean"] = np.zeros(3)
        with pytest.raises(DimensionError):
            model.load_state_dict(state)

    def test_unknown_w_init(self, small_config):
        with pytest.raises(DomainError):
            FlowModel(small_config, w_init="random")
