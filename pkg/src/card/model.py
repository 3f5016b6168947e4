"""
Geometry-aware encoder-decoder transformer giving exact conditional
log-densities over radix-decomposed conformations.

Sequence layout (0-based position ``p``, ``N`` atoms, depth ``L``):
positions ``0 .. NL-1`` carry digit triples, depth ``p // N + 1``, atom
``p % N``; positions ``NL .. N(L+1)-1`` carry the continuous residuals.
The decoder at position ``p`` attends to positions ``p-N .. p-1`` only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import radix
from . import tensor as T
from .conformer import (AtomOrdering, SystemContext, expand_inputs, inference_ordering,
                        pca_align, position_atoms, position_depths)
from .errors import ConfigError, VocabularyError
from .heads import DigitHead, ResidualHead
from .nn import MLP, LayerNorm, Linear, Module
from .radix import RadixConfig

MAX_Z = 119


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``H`` must be divisible by ``heads``."""

    H: int = 64
    heads: int = 4
    layers: int = 4
    K: int = 8
    R: int = 10
    r: int = 4
    L: int = 3
    a: float = 30.0
    mlp_ratio: int = 2
    dist_hidden: int = 16
    ordering: str = "auto"
    align: bool = False

    def __post_init__(self):
        if self.H % self.heads:
            raise ConfigError(f"H={self.H} not divisible by heads={self.heads}")
        if self.layers < 1 or self.K < 1 or self.R < 1:
            raise ConfigError("layers, K and R must be positive")
        self.radix  # validates r, L, a

    @property
    def radix(self):
        return RadixConfig(self.r, self.L, self.a)

    @property
    def head_dim(self):
        return self.H // self.heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def full(cls, **kw):
        """Large preset (H=512, 8 heads, 8 layers); far too slow for this numpy backend."""
        base = dict(H=512, heads=8, layers=8, K=16, R=10, mlp_ratio=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)


class DistanceBias(Module):
    """Per-head scalar MLP applied to reference pair distances."""

    def __init__(self, heads, hidden, rng):
        self.w1 = T.parameter(rng.normal(0.0, 1.0, size=(heads, hidden)))
        self.b1 = T.parameter(rng.normal(0.0, 1.0, size=(heads, hidden)))
        self.w2 = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(heads, hidden)))
        self.b2 = T.parameter(np.zeros(heads))

    def zero_(self):
        self.w2.data[...] = 0.0
        self.b2.data[...] = 0.0

    def __call__(self, dist, pos_atoms):
        """Mean over references of phi(d), expanded to ``(heads, S, S)``."""
        d = T.Tensor(dist[..., None, None])  # (R, N, N, 1, 1)
        hid = T.silu(d * self.w1 + self.b1)  # (R, N, N, heads, hidden)
        out = (hid * self.w2).sum(axis=-1) + self.b2  # (R, N, N, heads)
        out = T.mean(out, axis=0)  # (N, N, heads)
        out = T.transpose(out, (2, 0, 1))
        out = T.take(out, pos_atoms, axis=1)
        return T.take(out, pos_atoms, axis=2)


class AttentionBlock(Module):
    """Pre-LN transformer block with coordinate-conditioned queries/keys and a distance bias."""

    def __init__(self, cfg, rng):
        H = cfg.H
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.phi_q = MLP(3, H, H, rng)
        self.phi_kv = MLP(3, H, H, rng)
        self.ln_q = LayerNorm(H)
        self.ln_kv = LayerNorm(H)
        self.w_q = Linear(H, H, rng)
        self.w_kv = Linear(H, 2 * H, rng)
        self.w_o = Linear(H, H, rng, scale=1.0 / math.sqrt(2 * cfg.layers))
        self.dist = DistanceBias(cfg.heads, cfg.dist_hidden, rng)
        self.ln_mlp = LayerNorm(H)
        self.mlp = MLP(H, cfg.mlp_ratio * H, H, rng, out_scale=1.0 / math.sqrt(2 * cfg.layers))

    def _split(self, t):
        # (..., S, H) -> (..., heads, S, head_dim)
        shape = t.shape[:-1] + (self.heads, self.head_dim)
        return T.swapaxes(T.reshape(t, shape), -2, -3)

    def attention(self, h, xq, xk, bias, mask):
        q = self.w_q(self.ln_q(h + self.phi_q(xq)))
        kv = self.w_kv(self.ln_kv(h + self.phi_kv(xk)))
        H = q.shape[-1]
        k, v = kv[..., :H], kv[..., H:]
        q, k, v = self._split(q), self._split(k), self._split(v)
        logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            logits = logits + bias
        weights = T.masked_softmax(logits, mask)
        o = T.matmul(weights, v)  # (..., heads, S, hd)
        o = T.swapaxes(o, -2, -3)
        o = T.reshape(o, o.shape[:-2] + (H,))
        return self.w_o(o)

    def __call__(self, h, xq, xk, bias, mask, pos_atoms=None):
        h = h + self.attention(h, xq, xk, bias, mask)
        return h + self.mlp(self.ln_mlp(h))


def decoder_mask(n_atoms, n_positions):
    p = np.arange(n_positions)
    d = p[:, None] - p[None, :]
    return (d >= 1) & (d <= n_atoms)


def shift_queries(xprime, n_atoms):
    """Query coordinates: row p holds x'[p - N], zeros for the first N rows."""
    xprime = T.as_tensor(xprime)
    pad = T.Tensor(np.zeros(xprime.shape[:-2] + (n_atoms, 3)))
    return T.concat([pad, xprime[..., :-n_atoms, :]], axis=-2)


@dataclass
class PreparedContext:
    """A context reordered, optionally aligned and expanded for the network."""

    z: np.ndarray
    references: np.ndarray
    ordering: AtomOrdering
    ref_inputs: np.ndarray
    ref_dist: np.ndarray
    pos_atoms: np.ndarray
    depths: np.ndarray
    mask: np.ndarray = field(repr=False)

    @property
    def n_atoms(self):
        return len(self.z)

    @property
    def n_positions(self):
        return len(self.pos_atoms)


class CardModel(Module):
    """Embeddings, encoder, decoder and likelihood heads."""

    def __init__(self, cfg=None, seed=0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.a_embed = T.parameter(rng.normal(0.0, 1.0, size=(MAX_Z, cfg.H)))
        self.d_embed = T.parameter(rng.normal(0.0, 1.0, size=(cfg.L + 1, cfg.H)))
        self.encoder = [AttentionBlock(cfg, rng) for _ in range(cfg.layers)]
        self.decoder = [AttentionBlock(cfg, rng) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(cfg.H)
        self.digit_head = DigitHead(cfg.H, cfg.r ** 3, rng)
        self.residual_head = ResidualHead(cfg.H, cfg.K, rng, out_scale=0.5)

    def zero_heads_(self):
        """Zero the output layers so the model is uniform on the box."""
        self.digit_head.zero_output_()
        self.residual_head.zero_output_()

    # -- context ---------------------------------------------------------------
    def prepare(self, ctx, ordering=None):
        cfg = self.cfg
        if ordering is None:
            ordering = inference_ordering(ctx, cfg.ordering)
        sub = ctx.reordered(ordering.perm)
        refs = sub.references
        if refs.shape[0] == 0:
            raise ConfigError("the encoder needs at least one reference structure")
        if cfg.align:
            refs = np.stack([pca_align(u) for u in refs])
        n = sub.n_atoms
        ref_inputs = expand_inputs(refs, cfg.radix)
        ref_dist = np.linalg.norm(refs[:, :, None, :] - refs[:, None, :, :], axis=-1)
        S = n * (cfg.L + 1)
        return PreparedContext(
            z=sub.z, references=refs, ordering=ordering, ref_inputs=ref_inputs,
            ref_dist=ref_dist, pos_atoms=position_atoms(n, cfg.radix),
            depths=position_depths(n, cfg.radix), mask=decoder_mask(n, S))

    def embed(self, z, depths, pos_atoms):
        z = np.asarray(z)
        if np.any(z < 0) or np.any(z >= MAX_Z):
            raise VocabularyError(f"atomic number outside embedding table: {z}")
        zz = z[pos_atoms]
        return T.take(self.a_embed, zz, axis=0) + T.take(self.d_embed, depths - 1, axis=0)

    def encode(self, prep):
        """Mean over references of the bidirectional encoder output: ``(S, H)``."""
        h = self.embed(prep.z, prep.depths, prep.pos_atoms)
        x = T.Tensor(prep.ref_inputs)  # (R, S, 3)
        xq = shift_queries(x, prep.n_atoms)
        full = np.ones((prep.n_positions, prep.n_positions), dtype=bool)
        for block in self.encoder:
            bias = block.dist(prep.ref_dist, prep.pos_atoms)
            h = block(h, xq, x, bias, full)
        return T.mean(h, axis=0)

    def decode(self, h_e, xprime, prep):
        """Decoder features ``(B, S, H)`` for decomposed coordinates ``xprime``."""
        xprime = T.as_tensor(xprime)
        xq = shift_queries(xprime, prep.n_atoms)
        h = h_e
        for block in self.decoder:
            bias = block.dist(prep.ref_dist, prep.pos_atoms)
            h = block(h, xq, xprime, bias, prep.mask)
        if h.ndim < xprime.ndim:
            h = h + T.Tensor(np.zeros(xprime.shape[:-1] + (h.shape[-1],)))
        return self.ln_out(h)

    def position_log_probs(self, h_d, seq, prep):
        """Per-position log-densities ``(B, S)`` of the targets in ``seq``."""
        cfg = self.cfg
        n, L = prep.n_atoms, cfg.L
        NL = n * L
        classes = radix.class_index(seq.digits, cfg.r)  # (B, N, L)
        classes = np.swapaxes(classes, -1, -2).reshape(classes.shape[:-2] + (NL,))
        logp = self.digit_head(h_d[..., :NL, :])
        digit_lp = T.take_along_last(logp, classes)
        res_lp = self.residual_head.log_prob(h_d[..., NL:, :], seq.residuals, cfg.radix)
        return T.concat([digit_lp, res_lp], axis=-1)

    def decode_log_prob(self, h_e, x, prep):
        """Total and per-position log q for ordered (and aligned) targets ``x``.

        ``x`` has shape ``(B, N, 3)`` in the prepared atom order.  Returns two
        Tensors of shapes ``(B,)`` and ``(B, S)``.
        """
        x = np.asarray(x, dtype=np.float64)
        seq = radix.encode(x, self.cfg.radix)
        xprime = expand_inputs(x, self.cfg.radix)
        h_d = self.decode(h_e, xprime, prep)
        per = self.position_log_probs(h_d, seq, prep)
        return per.sum(axis=-1), per

    # -- convenience -----------------------------------------------------------
    def target_frame(self, x, prep):
        """Reorder (and align) original-order conformations ``(B, N, 3)``."""
        x = prep.ordering.apply(np.asarray(x, dtype=np.float64))
        if self.cfg.align:
            x = np.stack([pca_align(c) for c in x])
        return x

    def log_prob(self, ctx, x, ordering=None, batch=512):
        """Exact log q(x | ctx) for conformations in original atom order."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        x = x[None] if single else x
        with T.no_grad():
            prep = self.prepare(ctx, ordering)
            h_e = self.encode(prep)
            out = []
            for s in range(0, len(x), batch):
                xb = self.target_frame(x[s:s + batch], prep)
                out.append(self.decode_log_prob(h_e, xb, prep)[0].data)
        res = np.concatenate(out) if out else np.zeros(0)
        return float(res[0]) if single else res


def context_from_arrays(z, bonds, references):
    return SystemContext(np.asarray(z), list(bonds), np.asarray(references))
