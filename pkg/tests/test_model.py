from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from src.concepts import init_bank
from src.errors import ShapeError
from src.losses import em_loss
from src.model import ArchConfig, embed, forward, init_model, predict_proba
from src.tensor import ParamSet, backward


SMALL = ArchConfig(input_dim=3, hidden_dims=(4,), num_classes=3, embed_dim=2, activation="tanh", dtype="float64")


def _loss_value(arrays: dict[str, np.ndarray], x, y, bank, upsilon) -> float:
    params = ParamSet(arrays)
    return em_loss(forward(params, SMALL, x), y, bank, upsilon).total.item()


def test_parameter_names_and_shapes() -> None:
    params = init_model(SMALL, seed=0)
    assert list(params) == [
        "trunk.0.weight", "trunk.0.bias",
        "classifier.weight", "classifier.bias",
        "projection.weight", "projection.bias",
    ]
    assert params["trunk.0.weight"].shape == (3, 4)
    assert params["projection.weight"].shape == (4, 2)
    assert params.num_parameters == SMALL.num_parameters()


def test_init_is_seeded_and_fan_in_bounded() -> None:
    a, b = init_model(SMALL, seed=7), init_model(SMALL, seed=7)
    assert a.allclose(b)
    assert not a.allclose(init_model(SMALL, seed=8))
    assert np.abs(a["trunk.0.weight"].data).max() <= 1 / np.sqrt(3)
    assert np.abs(a["classifier.weight"].data).max() <= 1 / np.sqrt(4)


def test_projection_gain_scales_only_the_projection_head() -> None:
    base = init_model(SMALL, seed=3)
    wide = init_model(replace(SMALL, projection_gain=4.0), seed=3)
    for name in base:
        factor = 4.0 if name.startswith("projection.") else 1.0
        np.testing.assert_allclose(wide[name].data, factor * base[name].data)
    x = np.random.default_rng(0).standard_normal((6, 3))
    np.testing.assert_allclose(predict_proba(wide, SMALL, x), predict_proba(base, SMALL, x))


def test_forward_shapes() -> None:
    params = init_model(SMALL, seed=0)
    out = forward(params, SMALL, np.zeros((5, 3)))
    assert out.logits.shape == (5, 3)
    assert out.embedding.shape == (5, 2)
    assert out.hidden.shape == (5, 4)


def test_forward_rejects_wrong_input_width() -> None:
    with pytest.raises(ShapeError, match="forward"):
        forward(init_model(SMALL, seed=0), SMALL, np.zeros((5, 4)))


def test_forward_rejects_non_finite_outputs() -> None:
    arrays = init_model(SMALL, seed=0).arrays()
    arrays["projection.bias"][0] = np.nan
    with pytest.raises(ValueError, match="embedding contain non-finite"):
        forward(ParamSet(arrays), SMALL, np.zeros((2, 3)))
    arrays = init_model(SMALL, seed=0).arrays()
    arrays["classifier.weight"][:] = np.inf
    with pytest.raises(ValueError, match="logits contain non-finite"):
        forward(ParamSet(arrays), SMALL, np.ones((2, 3)))


def test_predict_proba_rows_sum_to_one_in_chunks() -> None:
    params = init_model(SMALL, seed=1)
    x = np.random.default_rng(0).standard_normal((11, 3))
    proba = predict_proba(params, SMALL, x, batch_size=4)
    assert proba.shape == (11, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    np.testing.assert_allclose(proba, predict_proba(params, SMALL, x, batch_size=1024))


def test_embed_matches_forward() -> None:
    params = init_model(SMALL, seed=2)
    x = np.random.default_rng(1).standard_normal((6, 3))
    z, h = embed(params, SMALL, x, batch_size=4)
    out = forward(params, SMALL, x)
    np.testing.assert_allclose(z, out.embedding.data)
    np.testing.assert_allclose(h, out.hidden.data)


def test_embed_empty_input() -> None:
    z, h = embed(init_model(SMALL, seed=0), SMALL, np.zeros((0, 3)))
    assert z.shape == (0, 2) and h.shape == (0, 4)


@pytest.mark.parametrize("bad", [
    {"input_dim": 0},
    {"input_dim": 3, "num_classes": 1},
    {"input_dim": 3, "activation": "gelu"},
    {"input_dim": 3, "dtype": "float16"},
    {"input_dim": 3, "projection_gain": 0.0},
])
def test_arch_config_validation(bad: dict) -> None:
    with pytest.raises(ValueError):
        ArchConfig(**bad)


def test_full_loss_gradients_match_finite_differences_over_seeded_models() -> None:
    eps = 1e-6
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_model(SMALL, seed=seed)
        x = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        bank = init_bank(3, 2, iota=0.5, seed=seed, scale=1.0)
        upsilon = rng.dirichlet(np.ones(3))

        loss = em_loss(forward(params, SMALL, x), y, bank, upsilon).total
        grads = backward(loss, params)

        base = {k: v.copy() for k, v in params.arrays().items()}
        for name, value in base.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                plus = {k: v.copy() for k, v in base.items()}
                minus = {k: v.copy() for k, v in base.items()}
                plus[name][idx] += eps
                minus[name][idx] -= eps
                numeric[idx] = (_loss_value(plus, x, y, bank, upsilon) - _loss_value(minus, x, y, bank, upsilon)) / (2 * eps)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-6, err_msg=f"seed={seed} {name}")
