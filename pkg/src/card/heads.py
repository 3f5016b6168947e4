"""
Likelihood heads: a categorical over r^3 digit triples and a sequential Beta
mixture over residual 3-vectors.

The Tensor-level functions (``bmm_terms``, ``bmm_log_prob_t``) feed the
differentiable model; the NumPy-level ones (``build_bmm``, ``bmm_log_prob``,
``bmm_sample``, ``digit_*``) are the plain evaluation / sampling surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .nn import MLP, Linear, Module
from .radix import class_triple

EPS = 1e-6
SHAPE_CLAMP = 3.0


@dataclass
class BmmParams:
    """Mixture weights and Beta shapes; arrays share a trailing K axis."""

    weights: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def K(self):
        return self.weights.shape[-1]


def _guard(v):
    return np.clip(np.asarray(v, dtype=np.float64), EPS, 1.0 - EPS)


# -----------------------------------------------------------------------------
# differentiable pieces
# -----------------------------------------------------------------------------

def bmm_terms(raw, K):
    """Split raw features ``(..., 3K)`` into (log weights, alpha, beta) Tensors."""
    if raw.shape[-1] != 3 * K:
        raise ValueError(f"expected {3 * K} raw BMM features, got {raw.shape[-1]}")
    logits = raw[..., :K]
    a_raw = raw[..., K:2 * K]
    b_raw = raw[..., 2 * K:]
    log_w = T.log_softmax(logits, axis=-1)
    alpha = T.exp(T.clamp(a_raw, -SHAPE_CLAMP, SHAPE_CLAMP))
    beta = T.exp(T.clamp(b_raw, -SHAPE_CLAMP, SHAPE_CLAMP))
    return log_w, alpha, beta


def bmm_log_prob_t(log_w, alpha, beta, v):
    """log sum_k w_k Beta(v; alpha_k, beta_k) as a Tensor; ``v`` is a plain array."""
    v = _guard(v)[..., None]
    log_norm = T.log_gamma(alpha) + T.log_gamma(beta) - T.log_gamma(alpha + beta)
    comp = (alpha - 1.0) * np.log(v) + (beta - 1.0) * np.log1p(-v) - log_norm
    return T.logsumexp(log_w + comp, axis=-1)


# -----------------------------------------------------------------------------
# plain evaluation / sampling
# -----------------------------------------------------------------------------

def build_bmm(raw):
    """BmmParams from a raw feature vector of length 3K (K inferred)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] % 3:
        raise ValueError(f"raw BMM features must have length 3K, got {raw.shape[-1]}")
    K = raw.shape[-1] // 3
    with T.no_grad():
        log_w, alpha, beta = bmm_terms(T.Tensor(raw), K)
    return BmmParams(np.exp(log_w.data), alpha.data, beta.data)


def _check_unit(v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or np.any(v >= 1) or not np.all(np.isfinite(v)):
        raise DomainError("BMM argument must lie in [0, 1)")
    return v


def bmm_log_prob(params, v):
    """Log-density of the mixture at ``v`` in [0, 1) (guarded into [eps, 1-eps])."""
    v = _check_unit(v)
    with np.errstate(divide="ignore"):
        log_w = np.log(params.weights)
    with T.no_grad():
        out = bmm_log_prob_t(T.Tensor(log_w), T.Tensor(params.alpha), T.Tensor(params.beta), v)
    return out.data if out.data.ndim else float(out.data)


def _log_standard_gamma(shape, rng):
    """log of Gamma(shape, 1) variates by Marsaglia-Tsang, boosted for shape < 1."""
    shape = np.asarray(shape, dtype=np.float64)
    boost = shape < 1.0
    a = np.where(boost, shape + 1.0, shape)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    while np.any(todo):
        idx = np.nonzero(todo)
        dd, cc = d[idx], c[idx]
        x = rng.standard_normal(dd.shape)
        v = (1.0 + cc * x) ** 3
        u = rng.random(dd.shape)
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            ok &= np.log(u) < 0.5 * x * x + dd - dd * v + dd * np.log(np.where(ok, v, 1.0))
        acc = tuple(ix[ok] for ix in idx)
        out[acc] = np.log(dd[ok] * v[ok])
        todo[acc] = False
    if np.any(boost):
        u = rng.random(out.shape)
        out = np.where(boost, out + np.log(u) / np.where(boost, shape, 1.0), out)
    return out


def sample_beta(alpha, beta, rng):
    """Beta variates as Ga / (Ga + Gb), clipped into [eps, 1 - eps]."""
    lga = _log_standard_gamma(alpha, rng)
    lgb = _log_standard_gamma(beta, rng)
    v = T._sigmoid(np.asarray(lga - lgb, dtype=np.float64))
    return _guard(v)


def sample_categorical(probs, rng):
    """Inverse-CDF draw along the last axis of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    k = (cdf <= u).sum(axis=-1)
    return np.minimum(k, probs.shape[-1] - 1)


def bmm_sample(params, rng):
    """Draw from the mixture: component ~ Categorical(w), then Beta(alpha, beta)."""
    comp = sample_categorical(params.weights, rng)
    a = np.take_along_axis(np.asarray(params.alpha), comp[..., None], axis=-1)[..., 0]
    b = np.take_along_axis(np.asarray(params.beta), comp[..., None], axis=-1)[..., 0]
    v = sample_beta(a, b, rng)
    return v if v.ndim else float(v)


def digit_log_prob(logits, k):
    """Log-softmax of ``logits`` evaluated at class ``k``."""
    logits = np.asarray(logits, dtype=np.float64)
    k = np.asarray(k, dtype=np.int64)
    n = logits.shape[-1]
    if np.any(k < 0) or np.any(k >= n):
        raise DomainError(f"class index out of range [0, {n})")
    with T.no_grad():
        lp = T.log_softmax(T.Tensor(logits)).data
    out = np.take_along_axis(lp, k[..., None], axis=-1)[..., 0]
    return out if out.ndim else float(out)


def digit_sample(logits, rng, r):
    """Sample a class and return (k, digit triple)."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    k = sample_categorical(p / p.sum(axis=-1, keepdims=True), rng)
    return k, class_triple(k, r)


# -----------------------------------------------------------------------------
# head modules
# -----------------------------------------------------------------------------

class DigitHead(Module):
    """Two-layer FFN from features to r^3 log-probabilities (shared across depths)."""

    def __init__(self, H, n_classes, rng, out_scale=1.0):
        self.ffn = MLP(H, H, n_classes, rng, out_scale=out_scale)

    def __call__(self, h):
        return T.log_softmax(self.ffn(h), axis=-1)

    def zero_output_(self):
        self.ffn.fc2.zero_()


class ResidualHead(Module):
    """Sequential BMM chain over the three residual components.

    ``h_x = SiLU(phi1(h))``; ``h_y = SiLU([h_x, v_x] W1)``; ``h_z = SiLU([h_y, v_y] W2)``;
    each feature vector is mapped to 3K mixture parameters by one shared map.
    """

    def __init__(self, H, K, rng, out_scale=1.0):
        self.K = K
        self.phi1 = Linear(H, H, rng)
        self.w1 = Linear(H + 1, H, rng)
        self.w2 = Linear(H + 1, H, rng)
        self.to_params = Linear(H, 3 * K, rng, scale=out_scale)

    def zero_output_(self):
        self.to_params.zero_()

    def first(self, h):
        return T.silu(self.phi1(h))

    def next(self, step, feats, v):
        """Features for component ``step + 1`` given the scaled value ``v`` of ``step``."""
        lin = self.w1 if step == 0 else self.w2
        vcol = T.Tensor(np.asarray(v, dtype=np.float64)[..., None])
        return T.silu(lin(T.concat([feats, vcol], axis=-1)))

    def terms(self, feats):
        return bmm_terms(self.to_params(feats), self.K)

    def log_prob(self, h, y, cfg):
        """log q(y | h) for residuals ``y`` (..., 3) in [0, a/r^L)^3.

        Includes the change of variables 3 (L ln r - ln a).
        """
        y = np.asarray(y, dtype=np.float64)
        if np.any(y < 0) or np.any(y >= cfg.cell):
            raise DomainError("residual outside [0, a/r^L)")
        v = y / cfg.cell
        feats = self.first(h)
        total = None
        for j in range(3):
            if j:
                feats = self.next(j - 1, feats, v[..., j - 1])
            lp = bmm_log_prob_t(*self.terms(feats), v[..., j])
            total = lp if total is None else total + lp
        return total + cfg.log_jacobian


def y_log_prob(head, h, y, cfg):
    """Plain-array wrapper around :meth:`ResidualHead.log_prob`."""
    with T.no_grad():
        out = head.log_prob(T.Tensor(h), y, cfg)
    return out.data if out.data.ndim else float(out.data)
