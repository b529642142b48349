import numpy as np
import pytest

import reference as R
from conftest import make_toy_model
from leantuner.errors import InvalidConfig, MissingGradient
from leantuner.lora import LoRAConfig, attach_lora
from leantuner.optim import SGD, AdamW, trainable_params
from leantuner.tensor import Tensor

# Frozen single-step oracle. With w=0, g=1, lr=1e-3, wd=0 the bias-corrected
# moments give m_hat = 1 and v_hat = 1 exactly, so
#   w' = 0 - lr * 1/(sqrt(1)+eps) = -1e-3 / (1+1e-8)
# and in float32 arithmetic 1 + 1e-8 rounds to exactly 1.0, hence w' = -1e-3.
FIRST_STEP_EXPECTED = np.float32(-1e-3)


def _param(value, name="w"):
    p = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
    return name, p


class TestAdamWFirstStep:
    def test_unit_gradient_closed_form(self):
        name, p = _param([0.0, 0.0, 0.0])
        p.grad = np.ones(3, dtype=np.float32)
        opt = AdamW([(name, p)], lr=1e-3, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, np.full(3, FIRST_STEP_EXPECTED))
        assert opt.step_count == 1

    def test_first_step_magnitude_is_lr_for_any_gradient(self, rng):
        # bias correction makes |update| = lr on step one regardless of g
        name, p = _param(np.zeros(16))
        p.grad = (rng.standard_normal(16).astype(np.float32) * 10) + 0.5
        opt = AdamW([(name, p)], lr=1e-3, weight_decay=0.0)
        opt.step()
        np.testing.assert_allclose(
            np.abs(p.data), np.full(16, 1e-3), rtol=1e-4
        )
        assert np.all(np.sign(p.data) == -np.sign(p.grad))


class TestAdamWTrajectory:
    def test_matches_float64_reference_over_many_steps(self, rng):
        name, p = _param(rng.standard_normal(8))
        opt = AdamW([(name, p)], lr=1e-2, weight_decay=0.01)

        w = p.data.astype(np.float64)
        m = np.zeros(8)
        v = np.zeros(8)
        for t in range(1, 26):
            g = rng.standard_normal(8).astype(np.float32)
            p.grad = g
            opt.step()
            w, m, v = R.ref_adamw_step(
                w, g.astype(np.float64), m, v, t, lr=1e-2, wd=0.01
            )
            p.grad = None
        np.testing.assert_allclose(p.data, w, rtol=1e-4, atol=1e-6)

    def test_decay_skipped_for_norm_and_bias_params(self):
        # with zero gradients the only movement can come from weight decay
        entries = {
            "layer.weight": True,
            "layer.bias": False,
            "ln.gamma": False,
            "ln.beta": False,
        }
        params = []
        for name in entries:
            _, p = _param([1.0], name)
            p.grad = np.zeros(1, dtype=np.float32)
            params.append((name, p))
        opt = AdamW(params, lr=0.1, weight_decay=0.5)
        opt.step()
        for name, p in params:
            moved = bool(p.data[0] != 1.0)
            assert moved == entries[name], name

    def test_step_count_tracks_steps_not_backwards(self):
        name, p = _param([0.0])
        opt = AdamW([(name, p)], lr=1e-3)
        p.grad = np.ones(1, dtype=np.float32)  # as if accumulated twice
        p.grad += np.ones(1, dtype=np.float32)
        opt.step()
        assert opt.step_count == 1

    def test_missing_gradient_is_an_error(self):
        name, p = _param([0.0])
        opt = AdamW([(name, p)], lr=1e-3)
        with pytest.raises(MissingGradient, match="w"):
            opt.step()

    def test_empty_param_list_rejected(self):
        with pytest.raises(InvalidConfig):
            AdamW([], lr=1e-3)


class TestAdamWState:
    def test_state_roundtrip_resumes_identically(self, rng, tmp_path):
        def fresh():
            p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
            return p, AdamW([("w", p)], lr=1e-2, weight_decay=0.01)

        grads = [rng.standard_normal(4).astype(np.float32) for _ in range(6)]

        p1, opt1 = fresh()
        for g in grads:
            p1.grad = g.copy()
            opt1.step()
            p1.grad = None

        p2, opt2 = fresh()
        for g in grads[:3]:
            p2.grad = g.copy()
            opt2.step()
            p2.grad = None
        opt2.save_state(tmp_path / "opt.safetensors")

        p3 = Tensor(p2.data.copy(), requires_grad=True)
        opt3 = AdamW([("w", p3)], lr=1e-2, weight_decay=0.01)
        opt3.load_state(tmp_path / "opt.safetensors")
        assert opt3.step_count == 3
        for g in grads[3:]:
            p3.grad = g.copy()
            opt3.step()
            p3.grad = None

        np.testing.assert_array_equal(p1.data, p3.data)


class TestSGD:
    def test_plain_update(self):
        name, p = _param([1.0, 2.0])
        p.grad = np.array([0.5, -0.5], dtype=np.float32)
        SGD([(name, p)], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.05], rtol=1e-6)

    def test_missing_gradient(self):
        name, p = _param([1.0])
        with pytest.raises(MissingGradient):
            SGD([(name, p)], lr=0.1).step()


class TestTrainableParams:
    def test_full_mode_selects_everything(self):
        model = make_toy_model()
        full = trainable_params(model, "full")
        assert len(full) == sum(1 for _ in model.parameters())

    def test_lora_mode_selects_adapters_only(self):
        model = make_toy_model()
        attach_lora(model, LoRAConfig(r=4))
        chosen = trainable_params(model, "lora")
        assert len(chosen) == model.config.n_layers * 2 * 2
        assert all(n.endswith(("lora_a", "lora_b")) for n, _ in chosen)

    def test_full_mode_after_attach_is_adapters_too(self):
        # attach freezes the base, so "full" collapses to the same set
        model = make_toy_model()
        attach_lora(model, LoRAConfig(r=4))
        assert {n for n, _ in trainable_params(model, "full")} == {
            n for n, _ in trainable_params(model, "lora")
        }

    def test_unknown_mode(self):
        with pytest.raises(InvalidConfig):
            trainable_params(make_toy_model(), "half")
