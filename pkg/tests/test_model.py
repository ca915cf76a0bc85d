import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import eval_fixture
import tiny_forward
from conftest import explicit_params, random_batch, zero_params
from fedpeft import rng as frng
from fedpeft.errors import ConfigError, ContractError, InputError
from fedpeft.model import (Example, ModelConfig, OptimizerState, adamw_step, count_params, evaluate,
                           forward, init_model, loss_and_grad, predict)


def tiny(strategy="full", **kw):
    cfg = ModelConfig(vocab_size=4, embed_dim=2, hidden_dim=2, num_classes=2, prompt_len=1,
                      lora_rank=1, lora_alpha=16.0, lora_dropout=0.0, strategy=strategy, **kw)
    t = dict(E=tiny_forward.E, W1=tiny_forward.W1, b1=tiny_forward.b1, W2=tiny_forward.W2,
             b2=tiny_forward.b2, P=tiny_forward.P)
    if strategy == "lora":
        t.update(A=tiny_forward.A, B=tiny_forward.B)
    return explicit_params(cfg, **t)


TINY_EX = Example((1, 3), 0, "xx")


# values printed by tests/oracles/tiny_forward.py
TINY_PLAIN = [0.41835477421524875, -0.045120801743024186]
TINY_LORA = [1.2462984352844946, -0.26622411109479427]
TINY_CE = 0.48802365128466113


class TestInit:
    def test_shapes(self):
        p = init_model(ModelConfig(vocab_size=100, embed_dim=8, hidden_dim=16, num_classes=3,
                                   prompt_len=2, lora_rank=1, strategy="lora"))
        shapes = {k: v.shape for k, v in p.tensors.items()}
        assert shapes == {"E": (100, 8), "W1": (16, 8), "b1": (16,), "W2": (3, 16), "b2": (3,),
                          "P": (2, 8), "A": (1, 8), "B": (16, 1)}
        assert not p["b1"].any() and not p["b2"].any() and not p["B"].any()

    def test_deterministic(self):
        cfg = ModelConfig(strategy="lora", seed=11)
        a, b = init_model(cfg), init_model(cfg)
        for k in a.tensors:
            assert a[k].tobytes() == b[k].tobytes()
        assert init_model(ModelConfig(seed=12))["E"].tobytes() != a["E"].tobytes()

    def test_trainable_sets(self):
        assert init_model(ModelConfig(strategy="prompt")).trainable == {"P", "W2", "b2"}
        assert init_model(ModelConfig(strategy="lora")).trainable == {"A", "B", "W2", "b2"}
        full = init_model(ModelConfig(strategy="full"))
        assert full.trainable == set(full.tensors)

    @pytest.mark.parametrize("field", ["vocab_size", "embed_dim", "hidden_dim"])
    def test_zero_dimension(self, field):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: 0})

    def test_bad_strategy_and_classes(self):
        with pytest.raises(ConfigError, match="strategy"):
            ModelConfig(strategy="adapter")
        with pytest.raises(ConfigError, match="num_classes"):
            ModelConfig(num_classes=1)

    def test_lora_fields_ignored_for_other_strategies(self):
        ModelConfig(strategy="prompt", lora_rank=0, lora_dropout=5.0)
        with pytest.raises(ConfigError, match="lora_dropout"):
            ModelConfig(strategy="lora", lora_dropout=1.0)


class TestForward:
    def test_tiny_oracle(self):
        for strategy in ("full", "prompt"):
            np.testing.assert_allclose(forward(tiny(strategy), TINY_EX), TINY_PLAIN, rtol=1e-14)
        np.testing.assert_allclose(forward(tiny("lora"), TINY_EX), TINY_LORA, rtol=1e-14)
        loss, _ = loss_and_grad(tiny("full"), [TINY_EX])
        assert loss == pytest.approx(TINY_CE, rel=1e-14)

    def test_zero_weights_uniform(self):
        cfg = ModelConfig(vocab_size=10, embed_dim=3, hidden_dim=4, num_classes=5)
        p = zero_params(cfg)
        ex = Example((1, 2, 9), 3, "xx")
        assert not forward(p, ex).any()
        loss, _ = loss_and_grad(p, [ex])
        assert abs(loss - math.log(5)) < 1e-15

    def test_lora_zero_delta_matches_base(self):
        cfg = ModelConfig(vocab_size=30, embed_dim=6, hidden_dim=5, num_classes=3, prompt_len=2,
                          lora_rank=2, lora_dropout=0.1, strategy="lora", seed=3)
        lora = init_model(cfg)
        base = lora.with_strategy("full")
        assert "A" not in base.tensors
        batch = random_batch(np.random.default_rng(0), 30, 3, 9)
        for mode in ("eval", "train"):
            got = forward(lora, batch, mode=mode, rng=frng.stream(0, "d"))
            assert got.tobytes() == forward(base, batch, mode=mode).tobytes()

    def test_dropout_zero_train_equals_eval(self):
        cfg = ModelConfig(vocab_size=20, embed_dim=4, hidden_dim=6, num_classes=3, lora_rank=2,
                          lora_dropout=0.0, strategy="lora")
        p = init_model(cfg).with_tensors({"B": np.full((6, 2), 0.3)})
        batch = random_batch(np.random.default_rng(1), 20, 3, 7)
        assert forward(p, batch, "train").tobytes() == forward(p, batch, "eval").tobytes()

    def test_eval_mode_has_no_dropout(self):
        cfg = ModelConfig(vocab_size=20, embed_dim=4, hidden_dim=6, num_classes=3, lora_rank=2,
                          lora_dropout=0.5, strategy="lora")
        p = init_model(cfg).with_tensors({"B": np.full((6, 2), 0.3)})
        batch = random_batch(np.random.default_rng(1), 20, 3, 7)
        first = forward(p, batch, "eval")
        assert forward(p, batch, "eval").tobytes() == first.tobytes()
        train = forward(p, batch, "train", rng=frng.stream(0, "x"))
        assert not np.array_equal(train, first)

    def test_out_of_range_token(self):
        p = tiny()
        with pytest.raises(InputError, match="out of range"):
            forward(p, Example((4,), 0, "xx"))
        with pytest.raises(InputError):
            Example((), 0, "xx")


def finite_difference_check(params, batch, key=("fd",), eps=1e-4):
    def f(q):
        return loss_and_grad(q, batch, rng=frng.stream(5, *key))[0]

    _, grads = loss_and_grad(params, batch, rng=frng.stream(5, *key))
    worst = 0.0
    for name, g in grads.items():
        x = params[name]
        for idx in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += eps
            down[idx] -= eps
            num = (f(params.with_tensors({name: up})) - f(params.with_tensors({name: down}))) / (2 * eps)
            worst = max(worst, abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-8))
    return worst, grads


class TestGradients:
    def test_zero_weights_logit_gradient(self):
        cfg = ModelConfig(vocab_size=6, embed_dim=2, hidden_dim=3, num_classes=4)
        for y in range(4):
            _, grads = loss_and_grad(zero_params(cfg), [Example((0, 5), y, "xx")])
            np.testing.assert_array_equal(grads["b2"], np.full(4, 0.25) - np.eye(4)[y])

    @pytest.mark.parametrize("strategy", ["full", "prompt", "lora"])
    def test_finite_differences(self, strategy):
        rng = np.random.default_rng(42)
        cfg = ModelConfig(vocab_size=50, embed_dim=8, hidden_dim=16, num_classes=3, prompt_len=2,
                          lora_rank=2, lora_dropout=0.1, strategy=strategy, seed=1)
        p = init_model(cfg)
        p = p.with_tensors({k: rng.normal(0, 0.4, v.shape) for k, v in p.tensors.items()})
        batch = random_batch(rng, 50, 3, 6, length=5)
        worst, grads = finite_difference_check(p, batch)
        assert worst <= 1e-4
        assert set(grads) == p.trainable

    def test_grad_keys(self):
        batch = random_batch(np.random.default_rng(0), 1000, 4, 3)
        assert set(loss_and_grad(init_model(ModelConfig(strategy="prompt")), batch)[1]) == {"P", "W2", "b2"}
        lora = init_model(ModelConfig(strategy="lora"))
        assert set(loss_and_grad(lora, batch, rng=frng.stream(0))[1]) == {"A", "B", "W2", "b2"}

    def test_empty_batch(self):
        with pytest.raises(InputError):
            loss_and_grad(tiny(), [])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_loss_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(vocab_size=15, embed_dim=3, hidden_dim=4, num_classes=3, seed=seed % 1000)
        p = init_model(cfg)
        p = p.with_tensors({k: rng.normal(0, 3, v.shape) for k, v in p.tensors.items()})
        loss, _ = loss_and_grad(p, random_batch(rng, 15, 3, 4))
        assert loss >= 0


class TestAdamW:
    def test_zero_gradient_no_decay_is_fixed_point(self):
        p = init_model(ModelConfig(strategy="prompt"))
        grads = {k: np.zeros_like(p[k]) for k in p.trainable}
        new, state = adamw_step(p, grads, OptimizerState(weight_decay=0.0))
        for k in p.tensors:
            assert new[k].tobytes() == p[k].tobytes()
        assert state.step == 1

    def test_scalar_hand_step(self):
        cfg = ModelConfig(vocab_size=1, embed_dim=1, hidden_dim=1, num_classes=2, prompt_len=1)
        p = zero_params(cfg).with_tensors({"P": [[1.0]]})
        new, _ = adamw_step(p, {"P": np.array([[1.0]])}, OptimizerState())
        # m_hat = v_hat = 1 on the first step
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.01 * 1.0
        assert new["P"][0, 0] == pytest.approx(expected, abs=1e-15)
        assert new["P"][0, 0] == pytest.approx(0.99899, abs=1e-7)

    def test_frozen_gradient_rejected(self):
        p = init_model(ModelConfig(strategy="prompt"))
        with pytest.raises(ContractError, match="frozen"):
            adamw_step(p, {"E": np.zeros_like(p["E"])}, OptimizerState())

    def test_non_positive_lr(self):
        with pytest.raises(ConfigError, match="lr"):
            OptimizerState(lr=-1.0)

    def test_frozen_immutable_over_100_steps(self):
        cfg = ModelConfig(vocab_size=40, embed_dim=6, hidden_dim=8, num_classes=3, strategy="prompt")
        p0 = init_model(cfg)
        p, state = p0, OptimizerState(lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(100):
            _, g = loss_and_grad(p, random_batch(rng, 40, 3, 4))
            p, state = adamw_step(p, g, state)
        for k in ("E", "W1", "b1"):
            assert p[k].tobytes() == p0[k].tobytes()
        assert not np.array_equal(p["P"], p0["P"])
        assert set(state.m) == set(state.v) == p.trainable
        assert state.step == 100

    def test_deterministic_training(self):
        cfg = ModelConfig(vocab_size=40, embed_dim=6, hidden_dim=8, num_classes=3, strategy="lora",
                          lora_rank=2)

        def run():
            p, s = init_model(cfg), OptimizerState()
            rng = np.random.default_rng(9)
            drop = frng.stream(1, "drop")
            for _ in range(20):
                _, g = loss_and_grad(p, random_batch(rng, 40, 3, 4), rng=drop)
                p, s = adamw_step(p, g, s)
            return p

        a, b = run(), run()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a.tensors)


class TestCountParams:
    def test_toy_prompt(self):
        cfg = ModelConfig(vocab_size=100, embed_dim=8, hidden_dim=16, num_classes=3, prompt_len=2)
        # E 800 + W1,b1 144 + W2,b2 51 + P 16; trainable = P + head
        assert count_params(cfg, "prompt") == (1011, 67)

    def test_toy_lora(self):
        cfg = ModelConfig(vocab_size=100, embed_dim=8, hidden_dim=16, num_classes=3, prompt_len=2,
                          lora_rank=1)
        assert count_params(cfg, "lora") == (1011 + 8 + 16, 8 + 16 + 51)

    def test_matches_tensor_sizes(self):
        for strategy in ("full", "prompt", "lora"):
            p = init_model(ModelConfig(strategy=strategy, vocab_size=77, prompt_len=3))
            total, trainable = count_params(p.config)
            assert total == sum(v.size for v in p.tensors.values())
            assert trainable == sum(p[k].size for k in p.trainable)

    def test_reference_preset(self):
        assert count_params("paper-table4", "full") == (278_655_764, 278_655_764)
        assert count_params("paper-table4", "prompt")[1] == 1_202_708
        assert count_params("paper-table4", "lora")[1] == 1_491_476
        with pytest.raises(ConfigError):
            count_params("nope", "full")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(1, 64), st.integers(1, 64), st.integers(2, 20), st.integers(0, 8))
    def test_full_trainable_equals_total(self, V, d, dh, S, p):
        total, trainable = count_params(ModelConfig(V, d, dh, S, p), "full")
        assert total == trainable


class TestEvaluate:
    def test_perfect_predictor(self):
        cfg = ModelConfig(vocab_size=2, embed_dim=1, hidden_dim=1, num_classes=2, prompt_len=0,
                          strategy="full")
        p = explicit_params(cfg, E=[[1.0], [-1.0]], W1=[[1.0]], b1=[0.0], W2=[[1.0], [-1.0]],
                            b2=[0.0, 0.0], P=np.zeros((0, 1)))
        data = [Example((0,), 0, "aa"), Example((1, 1), 1, "bb"), Example((0, 0, 0), 0, "bb")]
        result = evaluate(p, data)
        assert result.overall == 1.0 and result.per_language == {"aa": 1.0, "bb": 1.0}

    def test_zero_model_balanced(self):
        cfg = ModelConfig(vocab_size=5, embed_dim=2, hidden_dim=2, num_classes=4)
        data = [Example((i % 5,), i % 4, "xx") for i in range(40)]
        p = zero_params(cfg)
        assert (predict(p, data) == 0).all()
        assert evaluate(p, data).overall == 0.25

    def test_against_independent_predictor(self):
        f = eval_fixture
        cfg = ModelConfig(vocab_size=f.V, embed_dim=f.D, hidden_dim=f.DH, num_classes=f.S,
                          prompt_len=f.PLEN, strategy="prompt")
        p = explicit_params(cfg, E=f.E, W1=f.W1, b1=f.b1, W2=f.W2, b2=f.b2, P=f.P)
        data = [Example(tuple(t), y, lang) for t, y, lang in f.examples()]
        result = evaluate(p, data)
        # frozen output of tests/oracles/eval_fixture.py
        assert result.per_language == {"aa": 2 / 7, "bb": 3 / 7, "cc": 2 / 6}
        assert result.overall == 7 / 20
        assert [f.predict(list(ex.tokens)) for ex in data] == predict(p, data).tolist()

    def test_empty_dataset(self):
        with pytest.raises(InputError):
            evaluate(tiny(), [])
