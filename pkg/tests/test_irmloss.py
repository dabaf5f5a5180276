import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facemae.autoenc import ModelConfig, init_params
from facemae.embedder import make_embedder
from facemae.irmloss import (
    MODES,
    IrmConfig,
    TrainConfig,
    dc_loss,
    dc_loss_grad,
    delta,
    gram,
    objective,
    train_facemae,
)
from facemae.patchmask import ShapeMismatch, sample_random_mask
from facemae.synthfaces import SynthConfig, gen_dataset
from facemae.tensorio import InvariantViolation

from fdcheck import numeric_grad, rel_error


def _delta_loop(x, y):
    total = 0.0
    for i in range(len(x)):
        total += math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(x[i], y[i])))
    return total / len(x)


def _gram_loop(f):
    n = len(f)
    return [[sum(float(a) * float(b) for a, b in zip(f[i], f[j])) for j in range(n)] for i in range(n)]


def test_delta_examples():
    assert delta([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]) == 0.0
    assert delta([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


def test_worked_example_is_two():
    f = np.eye(2)
    assert dc_loss(f, np.zeros((2, 2)), IrmConfig(beta=1.0)) == 2.0


def test_mode_semantics():
    rng = np.random.default_rng(0)
    f, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    im, rm = delta(f, g), delta(gram(f), gram(g))
    assert dc_loss(f, g, IrmConfig(mode="im")) == im
    assert dc_loss(f, g, IrmConfig(mode="rm", beta=7.0)) == rm
    assert dc_loss(f, g, IrmConfig(mode="irm", beta=0.5)) == pytest.approx(im + 0.5 * rm, rel=1e-15)
    assert dc_loss(f, g, IrmConfig(mode="irm", beta=0.0)) == im
    assert dc_loss(f, g, IrmConfig(mode="mse")) == 0.0


def test_identical_features_give_zero_everywhere():
    f = np.random.default_rng(1).standard_normal((5, 3))
    for mode in MODES:
        assert dc_loss(f, f.copy(), IrmConfig(mode=mode, beta=3.0)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        delta(np.zeros((2, 3)), np.zeros((3, 3)))


def test_unknown_mode_rejected():
    with pytest.raises(InvariantViolation):
        IrmConfig(mode="l1")


@pytest.mark.parametrize("seed", range(10))
def test_matches_double_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 7), rng.integers(1, 6)
    f, g = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    beta = float(rng.uniform(0, 3))
    im = _delta_loop(f, g)
    rm = _delta_loop(_gram_loop(f), _gram_loop(g))
    assert abs(delta(f, g) - im) <= 1e-9
    assert abs(dc_loss(f, g, IrmConfig(beta=beta)) - (im + beta * rm)) <= 1e-9
    assert abs(dc_loss(f, g, IrmConfig(mode="rm")) - rm) <= 1e-9


_mats = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal((3, 6, 4)))


@settings(max_examples=100, deadline=None)
@given(_mats)
def test_delta_pseudometric(m):
    x, y, z = m
    assert delta(x, y) >= 0
    assert delta(x, y) == pytest.approx(delta(y, x), rel=1e-12)
    assert delta(x, z) <= delta(x, y) + delta(y, z) + 1e-12


@settings(max_examples=100, deadline=None)
@given(_mats, st.integers(0, 2**32 - 1))
def test_joint_row_permutation_invariance(m, seed):
    f, g, _ = m
    perm = np.random.default_rng(seed).permutation(len(f))
    cfg = IrmConfig(beta=1.3)
    assert dc_loss(f[perm], g[perm], cfg) == pytest.approx(dc_loss(f, g, cfg), rel=1e-12)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(2))
def test_gradient_finite_difference(mode, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    cfg = IrmConfig(mode=mode, beta=1.0)
    analytic = dc_loss_grad(f, g, cfg)
    numeric = numeric_grad(lambda: dc_loss(f, g, cfg), g)
    assert rel_error(analytic, numeric) < 1e-4


def test_zero_residual_rows_take_zero_subgradient():
    f = np.random.default_rng(2).standard_normal((3, 2))
    g = f.copy()
    g[1] += 1.0
    grad = dc_loss_grad(f, g, IrmConfig(mode="im"))
    assert not grad[0].any() and not grad[2].any()
    np.testing.assert_allclose(grad[1], [1 / 3 / math.sqrt(2)] * 2)


def test_gradient_linear_in_beta():
    rng = np.random.default_rng(3)
    f, g = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    g0, g1, g2 = (dc_loss_grad(f, g, IrmConfig(beta=b)) for b in (0.0, 1.0, 2.0))
    np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), atol=1e-9)


@pytest.mark.parametrize("mode", MODES)
def test_objective_gradient_end_to_end(mode):
    cfg = ModelConfig(patch_size=4, d_enc=8, d_dec=8, enc_depth=1, dec_depth=1, seed=4)
    p = init_params(cfg)
    rng = np.random.default_rng(4)
    for k, v in p.tensors.items():
        p.tensors[k] = v + 0.1 * rng.standard_normal(v.shape)
    spec = make_embedder(4, 6, 1)
    img = rng.uniform(size=(3, 16, 16, 1))
    pats = [sample_random_mask(16, 0.5, s) for s in range(3)]
    icfg = IrmConfig(mode=mode)
    _, grads, _ = objective(p, img, pats, spec, icfg)
    for name in ("head.w", "mask_token", "enc0.wq", "patch_embed.b"):
        numeric = numeric_grad(lambda: objective(p, img, pats, spec, icfg, need_grad=False)[0], p.tensors[name])
        assert rel_error(grads[name], numeric) < 1e-4, name


def test_zero_epochs_returns_init():
    ds = gen_dataset(SynthConfig(n_ids=2, imgs_per_id=2, size=16, seed=0))
    cfg = ModelConfig(patch_size=4, d_enc=8, d_dec=8, enc_depth=1, dec_depth=1)
    params, hist = train_facemae(ds, cfg, IrmConfig(), TrainConfig(epochs=0), make_embedder(4, 8))
    init = init_params(cfg)
    assert hist.loss == []
    for k in init.tensors:
        np.testing.assert_array_equal(params[k], init[k])


def test_pinned_run_decreases_smoothed_loss():
    ds = gen_dataset(SynthConfig(n_ids=10, imgs_per_id=8, seed=1))
    _, hist = train_facemae(ds, ModelConfig(), IrmConfig(beta=1.0), TrainConfig(epochs=8, batch_size=16, base_lr=1e-3))
    smooth = np.convolve(hist.loss, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]
    assert hist.to_csv().startswith("step,loss,lr\n0,")
