import math

import numpy as np
import pytest

from amad import tensor as T
from amad.errors import ConfigError, ContractError, ShapeError
from amad.losses import cad, contrastive_loss, cross_entropy, js_divergence, maxmin_losses, recon_loss
from amad.model import AttentionPack, ModelConfig, init_params, model_forward
from amad.tensor import Tensor

from conftest import max_rel_err, numeric_grad

LN2 = math.log(2.0)
# oracle values, evaluated independently at 50 digits
JS_75_25 = 0.130812035941137
LOG1P_EXP_M5 = 0.006715348489118


def rows(rng, shape):
    return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])


# -- JS ----------------------------------------------------------------------
def test_js_examples():
    assert js_divergence([0.5, 0.5], [0.5, 0.5]).item() == 0.0
    assert js_divergence([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(LN2, abs=1e-12)
    assert js_divergence([0.75, 0.25], [0.25, 0.75]).item() == pytest.approx(JS_75_25, abs=1e-12)


def test_js_symmetry_and_bounds(rng):
    p, q = rows(rng, (10_000, 7)), rows(rng, (10_000, 7))
    a, b = js_divergence(p, q).data, js_divergence(q, p).data
    assert np.abs(a - b).max() < 1e-12
    assert (a >= 0).all() and (a <= LN2 + 1e-12).all()
    assert not js_divergence(p, p).data.any()


def test_js_rejects_non_distributions():
    with pytest.raises(ContractError):
        js_divergence([0.7, 0.7], [0.5, 0.5])
    with pytest.raises(ContractError):
        js_divergence([1.5, -0.5], [0.5, 0.5])
    with pytest.raises(ShapeError):
        js_divergence([0.5, 0.5], [1 / 3] * 3)


def test_js_gradient_fd(rng):
    p = Tensor(rows(rng, (3, 5)), requires_grad=True)
    q = Tensor(rows(rng, (3, 5)), requires_grad=True)
    w = rng.normal(size=3)
    T.backward(T.tsum(js_divergence(p, q) * w))

    def f():
        m = 0.5 * (p.data + q.data)
        kl = lambda a, b: (a * np.log(a / b)).sum(-1)  # noqa: E731
        return float(((0.5 * kl(p.data, m) + 0.5 * kl(q.data, m)) * w).sum())

    assert max_rel_err(p.grad, numeric_grad(f, p.data, h=1e-7)) < 1e-6
    assert max_rel_err(q.grad, numeric_grad(f, q.data, h=1e-7)) < 1e-6


# -- CAD ---------------------------------------------------------------------
def test_cad_identical_maps_is_exactly_zero(rng):
    A = rows(rng, (2, 3, 4, 4))
    out = cad(AttentionPack([Tensor(A)], [Tensor(A.copy())])).data
    assert out.shape == (2, 4)
    assert not out.any()


def test_cad_disjoint_support_is_ln2():
    A = np.full((1, 1, 2, 2), 0.5)
    S = A.copy()
    A[0, 0, 1] = [1.0, 0.0]
    S[0, 0, 1] = [0.0, 1.0]
    out = cad(AttentionPack([Tensor(A)], [Tensor(S)])).data
    assert out[0, 0] == 0.0
    assert abs(out[0, 1] - LN2) < 1e-9


def test_cad_averages_layers_and_heads():
    eq = np.full((1, 2, 1, 2), 0.5)
    dis_a, dis_s = eq.copy(), eq.copy()
    dis_a[0, 0, 0] = [1.0, 0.0]
    dis_s[0, 0, 0] = [0.0, 1.0]
    # layer 0: one of two heads disjoint -> ln2/2; layer 1: identical -> 0
    out = cad(AttentionPack([Tensor(dis_a), Tensor(eq)], [Tensor(dis_s), Tensor(eq.copy())])).item()
    assert out == pytest.approx(LN2 / 4, abs=1e-12)


def test_cad_layer_mismatch():
    a = Tensor(np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ContractError):
        cad(AttentionPack([a, a], [a]))
    with pytest.raises(ContractError):
        cad(AttentionPack([None], [a]))


# -- reconstruction ----------------------------------------------------------
def test_recon_loss_examples():
    x = np.zeros((1, 2, 2))
    r = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    assert recon_loss(x, r).item() == 5.0
    assert recon_loss(x, r, np.array([[1.0, 1.0]]), lambda_signed=3.0).item() == -1.0
    assert recon_loss(x, r, np.array([[1.0, 1.0]]), lambda_signed=-3.0).item() == 11.0
    assert recon_loss(np.ones((4, 3, 2)), np.ones((4, 3, 2))).item() == 0.0


def test_recon_loss_is_batch_mean():
    x = np.zeros((2, 1, 1))
    r = np.array([[[1.0]], [[3.0]]])
    assert recon_loss(x, r).item() == 5.0


def test_recon_loss_shape_error():
    with pytest.raises(ShapeError):
        recon_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# -- Max-Min -----------------------------------------------------------------
def _forward(cfg, seed=0, B=2):
    p = init_params(cfg, seed)
    x = np.random.default_rng(seed + 100).normal(size=(B, cfg.window_len, cfg.input_dim))
    return p, Tensor(x), model_forward(x, p)


def test_maxmin_values_sum_to_twice_recon(tiny_cfg):
    _, x, out = _forward(tiny_cfg)
    lmin, lmax = maxmin_losses(x, out, lam=3.0)
    assert lmin.item() + lmax.item() == pytest.approx(2 * recon_loss(x, out.recon).item(), rel=1e-12)


def test_maxmin_rejects_nonpositive_lambda(tiny_cfg):
    _, x, out = _forward(tiny_cfg)
    with pytest.raises(ConfigError):
        maxmin_losses(x, out, lam=0.0)


SELF = ("w_q_self", "w_k_self")
MASK = ("w_q_mask", "w_k_mask", "omega")


def _cad_only_grads(cfg, phase):
    p, _, out = _forward(cfg)
    c = cad(out.attn, detach_s=(phase == "min"), detach_a=(phase == "max"))
    sign = -1.0 if phase == "min" else 1.0
    T.backward(T.l1_norm(c) * sign)
    return p


@pytest.mark.parametrize("phase, blocked, live", [("min", SELF, MASK), ("max", MASK, SELF)])
def test_detach_blocks_branch(tiny_cfg, phase, blocked, live):
    p = _cad_only_grads(tiny_cfg, phase)
    for name in blocked:
        g = p.layer(0, name).grad
        assert g is None or not g.any()
    for name in live:
        assert np.abs(p.layer(0, name).grad).max() > 0


def test_detach_last_layer_with_depth():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, window_len=6, input_dim=3)
    p = _cad_only_grads(cfg, "min")
    for name in SELF:
        g = p.layer(1, name).grad
        assert g is None or not g.any()


# -- contrastive -------------------------------------------------------------
def test_cross_entropy_examples():
    assert cross_entropy(Tensor([[0.0, 0.0], [0.0, 0.0]]), [0, 1]).item() == pytest.approx(LN2, abs=1e-15)
    assert cross_entropy(Tensor([[5.0, 0.0], [0.0, 5.0]]), [0, 1]).item() == pytest.approx(LOG1P_EXP_M5, abs=1e-12)


@pytest.mark.parametrize("B, L", [(2, 1), (4, 3)])
def test_contrastive_constant_attention_closed_form(rng, B, L):
    As, Ss = [], []
    for _ in range(L):
        a = rows(rng, (1, 2, 5, 5))
        s = rows(rng, (1, 2, 5, 5))
        As.append(Tensor(np.repeat(a, B, axis=0)))
        Ss.append(Tensor(np.repeat(s, B, axis=0)))
    got = contrastive_loss(AttentionPack(As, Ss), tau=0.35).item()
    assert abs(got - L * math.log(B) / B) < 1e-9


def test_contrastive_example_two_rows():
    # flattened maps [1,0] and [0,1]; exp(tau)=5 puts logits at [[5,0],[0,5]]
    A = [Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 1, 1, 2))]
    got = contrastive_loss(AttentionPack(A, A), tau=math.log(5.0)).item()
    assert got == pytest.approx(LOG1P_EXP_M5 / 2, abs=1e-12)


def test_contrastive_uniform_is_ln2_over_2():
    A = [Tensor(np.full((2, 1, 2, 2), 0.5))]
    assert contrastive_loss(AttentionPack(A, A), 0.07).item() == pytest.approx(LN2 / 2, abs=1e-15)


def test_contrastive_needs_negatives():
    A = [Tensor(np.full((1, 1, 2, 2), 0.5))]
    with pytest.raises(ConfigError):
        contrastive_loss(AttentionPack(A, A), 0.35)
    with pytest.raises(ConfigError):
        contrastive_loss(AttentionPack(A * 2, A * 2), 0.0)
