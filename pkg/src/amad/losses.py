"""
Training objectives: Jensen-Shannon divergence, cross-attention divergence
(CAD), the reconstruction loss with its signed CAD term, the Max-Min phase
pair, and the local/global contrastive alignment loss.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .model import AttentionPack, ForwardOutput
from .tensor import Tensor

PROB_FLOOR = 1e-12

# how many times each objective was evaluated; the ablation harness reads these
calls: Counter = Counter()


def js_divergence(p, q, check: bool = True) -> Tensor:
    """JS divergence (natural log) between distributions along the last axis.

    Written as one op: 0.5 * sum(p log p + q log q - 2m log m), m = (p + q) / 2,
    so d/dp = 0.5 * (log p - log m + [p > floor] - [m > floor]).
    Probabilities are floored at 1e-12 inside the logs; zero mass contributes 0.
    """
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"js_divergence: shapes differ {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    if check:
        for name, d in (("p", pd), ("q", qd)):
            if (d < 0).any() or not np.allclose(d.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6):
                raise ContractError(f"js_divergence: {name} is not a probability distribution")
    val, dp, dq = _js_parts(pd, qd)

    def bw(g):
        g = 0.5 * g[..., None]
        gp = g * dp if p.grad_node is not None else None
        gq = g * dq if q.grad_node is not None else None
        return gp, gq

    return T.make_op(val, (p, q), bw)


_js_cache: list = []


def _js_parts(pd: np.ndarray, qd: np.ndarray):
    # The Min and Max phases evaluate JS on the same buffers (detach shares
    # them), so remember the last few results by identity.
    for a, b, res in _js_cache:
        if a is pd and b is qd:
            return res
    md = 0.5 * (pd + qd)
    lp = np.log(np.maximum(pd, PROB_FLOOR))
    lq = np.log(np.maximum(qd, PROB_FLOOR))
    lm = np.log(np.maximum(md, PROB_FLOOR))
    val = np.maximum(0.5 * (pd * lp + qd * lq - 2.0 * md * lm).sum(axis=-1), 0.0)
    lm = lm + (md > PROB_FLOOR)
    dp = lp + (pd > PROB_FLOOR) - lm
    dq = lq + (qd > PROB_FLOOR) - lm
    res = (val, dp, dq)
    _js_cache.append((pd, qd, res))
    del _js_cache[:-8]
    return res


def cad(attn: AttentionPack, detach_a: bool = False, detach_s: bool = False, check: bool = False) -> Tensor:
    """Per-position divergence between AutoMask and self-attention rows, B x N.

    Averaged over layers and heads.
    """
    if len(attn.A) != len(attn.S) or not attn.S:
        raise ContractError(f"cad: {len(attn.A)} AutoMask layers vs {len(attn.S)} self-attention layers")
    if any(a is None for a in attn.A):
        raise ContractError("cad: AutoMask branch was disabled for this forward pass")
    calls["cad"] += 1
    per_layer = []
    for A, S in zip(attn.A, attn.S):
        A = T.detach(A) if detach_a else A
        S = T.detach(S) if detach_s else S
        per_layer.append(js_divergence(A, S, check=check).mean(axis=1))  # over heads
    total = per_layer[0]
    for c in per_layer[1:]:
        total = total + c
    return total / len(per_layer)


def recon_loss(x, recon, cad_vec=None, lambda_signed: float = 0.0, recon_weight: float = 1.0) -> Tensor:
    """Batch mean of ``w * ||x - recon||_F^2 - lambda_signed * ||cad||_1`` per window."""
    x, recon = T.as_tensor(x), T.as_tensor(recon)
    if x.shape != recon.shape:
        raise ShapeError(f"recon_loss: input {x.shape} vs reconstruction {recon.shape}")
    B = x.shape[0]
    diff = x - recon
    loss = T.frobenius_sq(diff) * (recon_weight / B)
    if cad_vec is not None and lambda_signed != 0.0:
        cad_vec = T.as_tensor(cad_vec)
        if cad_vec.shape[0] != B:
            raise ShapeError(f"recon_loss: CAD batch {cad_vec.shape[0]} vs input batch {B}")
        loss = loss - T.l1_norm(cad_vec) * (lambda_signed / B)
    return loss


def maxmin_losses(x, out: ForwardOutput, lam: float, recon_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Min phase: CAD through A only, sign -lam. Max phase: CAD through S only, sign +lam."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    cad_min = cad(out.attn, detach_s=True)
    cad_max = cad(out.attn, detach_a=True)
    loss_min = recon_loss(x, out.recon, cad_min, -lam, recon_weight)
    loss_max = recon_loss(x, out.recon, cad_max, lam, recon_weight)
    return loss_min, loss_max


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    n = logits.shape[0]
    picked = logits[np.arange(n), np.asarray(labels)]
    return (T.logsumexp(logits, axis=-1) - picked).mean()


def contrastive_loss(attn: AttentionPack, tau: float) -> Tensor:
    """Instance discrimination between flattened S (global) and A (local) maps.

    Per layer: logits = S_flat @ A_flat^T * exp(tau), cross-entropy against the
    diagonal; summed over layers and divided by the batch size.
    """
    if any(a is None for a in attn.A):
        raise ContractError("contrastive_loss: AutoMask branch was disabled for this forward pass")
    B = attn.S[0].shape[0]
    if B < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2 (no negatives otherwise)")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    calls["contrastive"] += 1
    labels = np.arange(B)
    total = None
    for A, S in zip(attn.A, attn.S):
        g = S.reshape(B, -1)
        loc = A.reshape(B, -1)
        logits = (g @ loc.transpose()) * math.exp(tau)
        ce = cross_entropy(logits, labels)
        total = ce if total is None else total + ce
    return total / B
