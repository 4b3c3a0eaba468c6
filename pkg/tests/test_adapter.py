"""Adapter tests: forward semantics, decomposition, and explicit backprop
checked against central finite differences and a torch-autograd twin."""

import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avlm.adapter import (
    BN_EPS,
    AdapterConfig,
    Model,
    apply_adapter,
    backward,
    decompose,
    decompose_batch,
    forward,
    init_adapter,
    init_model,
)


def unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1)[:, None]


class TestConfig:
    def test_gauss_output_width(self):
        cfg = AdapterConfig(d_in=8, dist_family="gauss")
        assert cfg.d_out == 16
        assert AdapterConfig(d_in=8).d_out == 8

    def test_invalid(self):
        with pytest.raises(ValueError):
            AdapterConfig(d_in=8, dist_family="laplace")
        with pytest.raises(ValueError):
            AdapterConfig(d_in=8, variant="foo")
        with pytest.raises(ValueError):
            AdapterConfig(d_in=8, d_out=9)
        with pytest.raises(ValueError):
            AdapterConfig(d_in=8, bn_momentum=1.5)
        with pytest.raises(ValueError):
            AdapterConfig(d_in=8, d_hidden=0)


class TestInit:
    def test_deterministic(self):
        cfg = AdapterConfig(d_in=8, d_hidden=16)
        a = init_adapter(cfg, seed=5)
        b = init_adapter(cfg, seed=5)
        for (_, x), (_, y) in zip(a.trainable_items(), b.trainable_items()):
            assert np.array_equal(x, y)

    def test_seed_changes_weights(self):
        cfg = AdapterConfig(d_in=8, d_hidden=16)
        a = init_adapter(cfg, seed=5)
        b = init_adapter(cfg, seed=6)
        assert any(not np.array_equal(x, y)
                   for (_, x), (_, y) in zip(a.trainable_items(), b.trainable_items()))

    def test_forward_finite_on_random_batches(self):
        cfg = AdapterConfig(d_in=12, d_hidden=24)
        params = init_adapter(cfg, seed=0)
        rng = np.random.default_rng(1)
        for i in range(100):
            batch = rng.standard_normal((int(rng.integers(2, 9)), 12))
            batch /= np.linalg.norm(batch, axis=1)[:, None]
            out = forward(params, batch, "train")
            assert np.all(np.isfinite(out.raw))


class TestForward:
    def test_zero_weights_give_zero_output(self):
        cfg = AdapterConfig(d_in=4, d_hidden=6)
        params = init_adapter(cfg, seed=0)
        for i in range(3):
            params.weights[i][:] = 0.0
        batch = unit_rows(5, 4, seed=2)
        assert np.allclose(forward(params, batch, "train").raw, 0.0)
        assert np.allclose(forward(params, batch, "eval").raw, 0.0)

    def test_eval_is_row_independent(self):
        cfg = AdapterConfig(d_in=6, d_hidden=12)
        params = init_adapter(cfg, seed=3)
        batch = unit_rows(7, 6, seed=4)
        full = forward(params, batch, "eval").raw
        single = forward(params, batch[2:3], "eval").raw
        assert np.allclose(full[2], single[0], atol=1e-14)

    def test_train_forward_is_deterministic(self):
        cfg = AdapterConfig(d_in=6, d_hidden=12)
        batch = unit_rows(8, 6, seed=4)
        a = forward(init_adapter(cfg, 3), batch, "train").raw
        b = forward(init_adapter(cfg, 3), batch, "train").raw
        assert np.array_equal(a, b)

    def test_train_requires_two_rows(self):
        params = init_adapter(AdapterConfig(d_in=4, d_hidden=4), seed=0)
        with pytest.raises(ValueError):
            forward(params, unit_rows(1, 4, 0), "train")
        forward(params, unit_rows(1, 4, 0), "eval")  # fine in eval

    def test_eval_never_mutates(self):
        cfg = AdapterConfig(d_in=5, d_hidden=8)
        params = init_adapter(cfg, seed=1)
        # push the running stats off their init first
        forward(params, unit_rows(6, 5, 0), "train")
        before = [m.copy() for m in params.bn_running_mean] + [v.copy() for v in params.bn_running_var]
        forward(params, unit_rows(9, 5, 1), "eval")
        after = params.bn_running_mean + params.bn_running_var
        for x, y in zip(before, after):
            assert np.array_equal(x, y)

    def test_train_updates_running_stats(self):
        cfg = AdapterConfig(d_in=5, d_hidden=8)
        params = init_adapter(cfg, seed=1)
        before = params.bn_running_mean[0].copy()
        forward(params, unit_rows(6, 5, 0), "train")
        assert not np.array_equal(before, params.bn_running_mean[0])

    def test_bad_mode_and_shape(self):
        params = init_adapter(AdapterConfig(d_in=4, d_hidden=4), seed=0)
        with pytest.raises(ValueError):
            forward(params, unit_rows(3, 4, 0), "predict")
        with pytest.raises(ValueError):
            forward(params, unit_rows(3, 5, 0), "eval")


class TestDecompose:
    def test_three_four_five(self):
        mu, kappa = decompose(np.array([3.0, 4.0]))
        assert np.allclose(mu, [0.6, 0.8])
        assert kappa == pytest.approx(5.0)

    def test_degenerate_floor_and_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="avlm.adapter"):
            mu, kappa = decompose(np.zeros(4))
        assert kappa == pytest.approx(1e-6)
        assert np.allclose(mu, [1.0, 0.0, 0.0, 0.0])
        assert any("degenerate" in r.message for r in caplog.records)

    @given(st.floats(1e-3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_positive_scaling(self, c):
        row = np.array([0.3, -1.2, 0.8])
        mu1, k1 = decompose(row)
        mu2, k2 = decompose(c * row)
        assert np.allclose(mu1, mu2, atol=1e-12)
        assert k2 == pytest.approx(c * k1, rel=1e-12)

    def test_recompose(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            row = rng.standard_normal(6)
            mu, kappa = decompose(row)
            assert np.allclose(kappa * mu, row, atol=1e-9)

    def test_batch_gauss_mean_is_normalized(self):
        cfg = AdapterConfig(d_in=3, dist_family="gauss")
        raw = np.array([[3.0, 0.0, 0.0, 1.0, 2.0, 3.0], [0.0, -2.0, 0.0, 0.5, 0.5, 0.5]])
        dec = decompose_batch(raw, cfg)
        assert np.allclose(np.linalg.norm(dec.mean, axis=1), 1.0)
        assert np.allclose(dec.log_var, raw[:, 3:])
        assert np.allclose(dec.norm, [3.0, 2.0])


class TestBackward:
    def test_zero_grad_gives_zero(self):
        cfg = AdapterConfig(d_in=4, d_hidden=6)
        params = init_adapter(cfg, seed=0)
        out = forward(params, unit_rows(5, 4, 1), "train")
        grads = backward(params, out, np.zeros_like(out.raw))
        for _, g in grads.items():
            assert np.all(np.asarray(g) == 0.0)

    def test_requires_cache(self):
        cfg = AdapterConfig(d_in=4, d_hidden=6)
        params = init_adapter(cfg, seed=0)
        out = forward(params, unit_rows(5, 4, 1), "eval")
        with pytest.raises(ValueError):
            backward(params, out, np.zeros_like(out.raw))

    def _torch_twin(self, params, batch, grad_raw):
        """Train-mode forward in torch; returns autograd gradients."""
        tensors = {}
        for name, arr in params.trainable_items():
            tensors[name] = torch.tensor(arr, dtype=torch.float64, requires_grad=True)
        h = torch.tensor(batch, dtype=torch.float64)
        for i in range(3):
            a = h @ tensors[f"layer{i}.weight"] + tensors[f"layer{i}.bias"]
            mean = a.mean(dim=0)
            var = a.var(dim=0, unbiased=False)
            x_hat = (a - mean) / torch.sqrt(var + BN_EPS)
            y = tensors[f"layer{i}.bn_scale"] * x_hat + tensors[f"layer{i}.bn_shift"]
            h = torch.relu(y) if i < 2 else y
        h.backward(torch.tensor(grad_raw, dtype=torch.float64))
        return {name: t.grad.numpy() if t.grad is not None else np.zeros_like(t.detach().numpy())
                for name, t in tensors.items()}

    def test_matches_torch_autograd(self):
        cfg = AdapterConfig(d_in=6, d_hidden=10)
        params = init_adapter(cfg, seed=7)
        batch = unit_rows(8, 6, seed=8)
        grad_raw = np.random.default_rng(9).standard_normal((8, 6))
        out = forward(params.copy(), batch, "train")
        mine = dict(backward(params, out, grad_raw).items())
        ref = self._torch_twin(params, batch, grad_raw)
        for name in ref:
            if name in ("log_tau", "siglip_bias"):
                continue
            assert np.allclose(np.asarray(mine[name]), ref[name], atol=1e-10), name

    def test_linear_regime_matches_torch(self):
        # hidden ReLUs forced active via a large positive bn_shift; the
        # stack is then affine in the inputs and autograd still agrees
        cfg = AdapterConfig(d_in=5, d_hidden=7)
        params = init_adapter(cfg, seed=2)
        for i in range(2):
            params.bn_shift[i][:] = 10.0
        batch = unit_rows(6, 5, seed=3)
        out = forward(params.copy(), batch, "train")
        assert np.all(out.cache[0].bn_out > 0) and np.all(out.cache[1].bn_out > 0)
        grad_raw = np.random.default_rng(4).standard_normal((6, 5))
        mine = dict(backward(params, out, grad_raw).items())
        ref = self._torch_twin(params, batch, grad_raw)
        for name in ref:
            if name in ("log_tau", "siglip_bias"):
                continue
            assert np.allclose(np.asarray(mine[name]), ref[name], atol=1e-10), name

    def test_matches_finite_differences(self):
        # scalar probe loss: sum(c * raw) with fixed random c
        cfg = AdapterConfig(d_in=8, d_hidden=8)
        base = init_adapter(cfg, seed=11)
        batch = unit_rows(8, 8, seed=12)
        c = np.random.default_rng(13).standard_normal((8, 8))

        def loss_for(params):
            return float((c * forward(params, batch, "train").raw).sum())

        out = forward(base.copy(), batch, "train")
        grads = dict(backward(base, out, c).items())
        rng = np.random.default_rng(14)
        for name, arr in base.trainable_items():
            if name in ("log_tau", "siglip_bias"):
                continue
            a = np.asarray(arr)
            for _ in range(4):
                ix = tuple(rng.integers(0, s) for s in a.shape)
                h = 1e-5
                plus = base.copy()
                t = np.asarray(dict(plus.trainable_items())[name]).copy()
                t[ix] += h
                plus.set_trainable(name, t)
                minus = base.copy()
                t = np.asarray(dict(minus.trainable_items())[name]).copy()
                t[ix] -= h
                minus.set_trainable(name, t)
                fd = (loss_for(plus) - loss_for(minus)) / (2 * h)
                assert abs(np.asarray(grads[name])[ix] - fd) <= max(1e-4 * abs(fd), 1e-7), (name, ix)


class TestModel:
    def test_variant_adapters(self):
        assert init_model(AdapterConfig(d_in=4, d_hidden=4), 0).image_adapter is None
        m = init_model(AdapterConfig(d_in=4, d_hidden=4, variant="asym_image"), 0)
        assert m.text_adapter is None and m.image_adapter is not None
        m = init_model(AdapterConfig(d_in=4, d_hidden=4, variant="symmetric"), 0)
        assert m.text_adapter is not None and m.image_adapter is not None

    def test_symmetric_trainables_have_one_temperature(self):
        m = init_model(AdapterConfig(d_in=4, d_hidden=4, variant="symmetric"), 0)
        names = [n for n, _ in m.trainable_items()]
        assert "text.log_tau" in names
        assert "image.log_tau" not in names

    def test_apply_adapter_families(self):
        texts = unit_rows(5, 6, seed=0)
        dec = apply_adapter(init_adapter(AdapterConfig(d_in=6, d_hidden=4), 1), texts)
        assert dec.family == "vmf" and dec.mu.shape == (5, 6) and dec.kappa.shape == (5,)
        dec = apply_adapter(init_adapter(AdapterConfig(d_in=6, d_hidden=4, dist_family="gauss"), 1), texts)
        assert dec.family == "gauss" and dec.mean.shape == (5, 6) and dec.log_var.shape == (5, 6)
        dec = apply_adapter(init_adapter(AdapterConfig(d_in=6, d_hidden=4, dist_family="deterministic"), 1), texts)
        assert dec.family == "cosine"
