"""Capsule primitives: squash nonlinearity, primary capsules, routed capsules.

A capsule is a small activity vector whose norm is read as class presence.
The primary layer turns convolutional feature maps into capsule vectors;
routed (secondary) layers assign each input capsule's vote to output
capsules through iterative routing by agreement.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

SQUASH_EPS = 1e-7


def _squash_scale(sq_norm):
    # ||s||^2/(1+||s||^2) * 1/||s||, with an epsilon guard so 0 maps to 0.
    return sq_norm / ((1.0 + sq_norm) * np.sqrt(sq_norm + SQUASH_EPS))


def squash_array(s: np.ndarray) -> np.ndarray:
    """Plain-numpy squash over the last axis (used inside routing iterations)."""
    q = (s * s).sum(axis=-1, keepdims=True)
    return _squash_scale(q) * s


def squash(s: Tensor) -> Tensor:
    """Norm-bounding nonlinearity per capsule vector (last axis).

    Output keeps the input direction with norm ||s||^2/(1+||s||^2) in [0,1);
    the zero vector maps to the zero vector.
    """
    q = (s.data * s.data).sum(axis=-1, keepdims=True)
    g = _squash_scale(q)
    out = g * s.data

    def backward(grad):
        if not s.requires_grad:
            return
        # v = g(q) s with q = sum s^2:
        #   ds = g * dv + 2 s g'(q) <dv, s>
        root = np.sqrt(q + SQUASH_EPS)
        gprime = 1.0 / ((1.0 + q) ** 2 * root) - q / (2.0 * (1.0 + q) * root**3)
        inner = (grad * s.data).sum(axis=-1, keepdims=True)
        s.accumulate_grad(g * grad + 2.0 * s.data * gprime * inner)

    return T._result(out, (s,), "squash", backward)


def route(u_hat: Tensor, iters: int, differentiate_couplings: bool = False,
          record: dict | None = None) -> Tensor:
    """Routing by agreement over votes u_hat:[B,N,K,D] -> outputs [B,K,D].

    Logits start at zero each call.  Per iteration the couplings are the
    softmax of the logits over the K axis, outputs are the squashed
    coupling-weighted vote sums, and (except after the last iteration) each
    logit grows by the vote/output dot product.

    By default couplings are constants for differentiation: gradients flow
    through the votes and the final weighted sum + squash only.  With
    ``differentiate_couplings`` every iteration joins the gradient tape.

    ``record``, when given, is filled with per-iteration ``couplings`` and
    ``logits`` (numpy copies) for inspection and testing.
    """
    if iters < 1:
        raise ValueError(f"routing iterations must be >= 1, got {iters}")
    if u_hat.data.ndim != 4:
        raise T.ShapeError(f"route: votes must be [B,N,K,D], got {u_hat.data.shape}")
    if record is not None:
        record["couplings"] = []
        record["logits"] = []

    if differentiate_couplings:
        return _route_on_tape(u_hat, iters, record)

    B, N, K, _ = u_hat.data.shape
    logits = np.zeros((B, N, K), dtype=u_hat.data.dtype)
    votes = u_hat.data
    for it in range(iters):
        c = _softmax_last(logits)
        if record is not None:
            record["logits"].append(logits.copy())
            record["couplings"].append(c.copy())
        if it == iters - 1:
            break
        s = np.einsum("bnk,bnkd->bkd", c, votes)
        v = squash_array(s)
        logits = logits + np.einsum("bnkd,bkd->bnk", votes, v)
    s = T.weighted_sum_const(u_hat, c)
    return squash(s)


def _route_on_tape(u_hat: Tensor, iters: int, record):
    B, N, K, _ = u_hat.data.shape
    logits = T.tensor(np.zeros((B, N, K)))
    v = None
    for it in range(iters):
        c = T.softmax(logits, axis=2)
        if record is not None:
            record["logits"].append(logits.data.copy())
            record["couplings"].append(c.data.copy())
        s = T.sum_along(T.coupling_mul(u_hat, c), axis=1)
        v = squash(s)
        if it < iters - 1:
            logits = T.add(logits, T.agreement(u_hat, v))
    return v


def _softmax_last(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class PrimaryCapsuleLayer:
    """Shared first capsule layer: conv features -> squashed capsule vectors.

    One 3x3 same-padding convolution maps the feature block's output to
    ``capsule_channels * capsule_dim`` channels, which are regrouped into
    ``capsule_channels * H * W`` capsules of ``capsule_dim`` components.
    """

    def __init__(self, in_channels: int, capsule_channels: int, rng,
                 capsule_dim: int = 8):
        self.capsule_dim = capsule_dim
        self.capsule_channels = capsule_channels
        out_channels = capsule_channels * capsule_dim
        std = np.sqrt(2.0 / (in_channels * 9))
        self.kernel = T.tensor(
            rng.normal(0.0, std, size=(out_channels, in_channels, 3, 3)),
            requires_grad=True,
        )
        self.bias = T.tensor(np.zeros(out_channels), requires_grad=True)

    def capsule_count(self, height: int, width: int) -> int:
        return self.capsule_channels * height * width

    def forward(self, features: Tensor) -> Tensor:
        B = features.data.shape[0]
        H, W = features.data.shape[2:]
        out = T.conv2d(features, self.kernel, self.bias)
        # [B, CC*D, H, W] -> [B, CC, D, H, W] -> [B, CC, H, W, D] -> [B, N, D]
        out = T.reshape(out, (B, self.capsule_channels, self.capsule_dim, H, W))
        out = T.transpose(out, (0, 1, 3, 4, 2))
        out = T.reshape(out, (B, self.capsule_count(H, W), self.capsule_dim))
        return squash(out)

    def params(self, prefix: str):
        return {f"{prefix}.kernel": self.kernel, f"{prefix}.bias": self.bias}


class SecondaryCapsuleLayer:
    """Class-level capsules for one hierarchy level, driven by routing.

    Holds one transformation matrix per (input capsule, class) pair; the
    output is one ``out_dim``-vector per class with norm < 1.
    """

    def __init__(self, num_in: int, num_classes: int, rng, in_dim: int = 8,
                 out_dim: int = 16, routing_iters: int = 3, weight_std: float = 0.1,
                 differentiate_couplings: bool = False):
        if routing_iters < 1:
            raise ValueError(f"routing_iters must be >= 1, got {routing_iters}")
        self.num_in = num_in
        self.num_classes = num_classes
        self.routing_iters = routing_iters
        self.differentiate_couplings = differentiate_couplings
        self.W = T.tensor(
            rng.normal(0.0, weight_std, size=(num_in, num_classes, in_dim, out_dim)),
            requires_grad=True,
        )

    def forward(self, u: Tensor, record: dict | None = None) -> Tensor:
        votes = T.caps_transform(u, self.W)
        return route(
            votes,
            self.routing_iters,
            differentiate_couplings=self.differentiate_couplings,
            record=record,
        )

    def params(self, prefix: str):
        return {f"{prefix}.W": self.W}
