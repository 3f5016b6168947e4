import math

import numpy as np
import pytest

from card import radix
from card import tensor as T
from card.conformer import AtomOrdering, SystemContext, expand_inputs
from card.errors import ConfigError, ScaleError, VocabularyError
from card.model import AttentionBlock, CardModel, ModelConfig, decoder_mask, shift_queries
from card.radix import truncation

from _util import cube_quadrature

TINY = ModelConfig(H=16, heads=2, layers=2, K=3, R=3, r=2, L=2)


def tiny_context(n=3, seed=0, R=3):
    rng = np.random.default_rng(seed)
    z = [6, 8, 1, 7, 6][:n]
    bonds = [(i, i + 1) for i in range(n - 1)]
    return SystemContext(z, bonds, rng.uniform(-5, 5, (R, n, 3)))


@pytest.fixture(scope="module")
def model():
    return CardModel(TINY, seed=1)


# -- embeddings ---------------------------------------------------------------

def test_embed_same_atom_same_depth_identical(model):
    with T.no_grad():
        h = model.embed(np.array([6, 6]), np.array([1, 1]), np.array([0, 1])).data
    assert np.array_equal(h[0], h[1])


def test_embed_depth_difference_is_additive(model):
    with T.no_grad():
        h = model.embed(np.array([8]), np.array([1, 2]), np.array([0, 0])).data
    diff = model.d_embed.data[0] - model.d_embed.data[1]
    np.testing.assert_allclose(h[0] - h[1], diff, atol=1e-14)


def test_sequence_depth_pattern():
    m = CardModel(ModelConfig(H=8, heads=2, layers=1, K=1, r=2, L=1), seed=0)
    prep = m.prepare(tiny_context(2))
    assert prep.n_positions == 4
    assert prep.depths.tolist() == [1, 1, 2, 2]
    assert prep.pos_atoms.tolist() == [0, 1, 0, 1]


def test_unknown_atomic_number(model):
    with pytest.raises(VocabularyError):
        model.embed(np.array([500]), np.array([1]), np.array([0]))


def test_head_count_must_divide_hidden():
    with pytest.raises(ConfigError):
        ModelConfig(H=10, heads=4)


def test_no_references_is_rejected(model):
    ctx = SystemContext([6, 8], [(0, 1)])
    with pytest.raises(ConfigError):
        model.prepare(ctx)


def test_out_of_box_target_is_rejected(model):
    ctx = tiny_context(2)
    with pytest.raises(ScaleError):
        model.log_prob(ctx, np.array([[0.0, 0.0, 0.0], [15.0, 0.0, 0.0]]))


# -- attention ----------------------------------------------------------------

def test_singleton_window_gets_full_weight():
    rng = np.random.default_rng(0)
    logits = T.Tensor(rng.normal(size=(4, 4)) * 50)
    mask = np.eye(4, k=-1, dtype=bool)
    w = T.masked_softmax(logits, mask).data
    assert np.all(w[1:][mask[1:]] == 1.0)
    assert np.all(w[0] == 0.0)


def block_inputs(cfg, n, seed):
    rng = np.random.default_rng(seed)
    S = n * (cfg.L + 1)
    h = rng.normal(size=(S, cfg.H))
    xp = rng.uniform(-10, 10, (S, 3))
    dist = rng.uniform(0.5, 4.0, (2, n, n))
    dist = 0.5 * (dist + np.swapaxes(dist, 1, 2))
    pos = np.tile(np.arange(n), cfg.L + 1)
    return h, xp, dist, pos, decoder_mask(n, S)


def run_block(block, h, xp, dist, pos, mask, n, use_bias=True):
    with T.no_grad():
        bias = block.dist(dist, pos) if use_bias else None
        return block(T.Tensor(h), shift_queries(xp, n), T.Tensor(xp), bias, mask).data


def test_zero_distance_bias_equals_plain_attention():
    block = AttentionBlock(TINY, np.random.default_rng(3))
    block.dist.zero_()
    n = 3
    args = block_inputs(TINY, n, 1)
    np.testing.assert_array_equal(run_block(block, *args, n),
                                  run_block(block, *args, n, use_bias=False))


@pytest.mark.parametrize("target", [4, 6, 8])
def test_block_window_is_exact(target):
    """Only positions target-N .. target-1 reach the block output at ``target``."""
    n = 3
    block = AttentionBlock(TINY, np.random.default_rng(4))
    h, xp, dist, pos, mask = block_inputs(TINY, n, 2)
    ref = run_block(block, h, xp, dist, pos, mask, n)[target]
    S = len(h)
    rng = np.random.default_rng(9)
    for j in range(S):
        if target - n <= j < target or j == target:
            continue
        h2, x2 = h.copy(), xp.copy()
        h2[j] += rng.normal(size=TINY.H)
        x2[j] += rng.normal(size=3)
        out = run_block(block, h2, x2, dist, pos, mask, n)[target]
        assert np.array_equal(out, ref), j


def test_single_layer_decoder_window():
    cfg = ModelConfig(H=16, heads=2, layers=1, K=2, R=2, r=2, L=2)
    m = CardModel(cfg, seed=5)
    ctx = tiny_context(3, R=2)
    prep = m.prepare(ctx, AtomOrdering((0, 1, 2)))
    rng = np.random.default_rng(0)
    xp = expand_inputs(rng.uniform(-5, 5, (3, 3)), cfg.radix)
    with T.no_grad():
        h_e = m.encode(prep)
        ref = m.decode(h_e, xp[None], prep).data[0]
        for i in range(3, prep.n_positions):
            for j in list(range(0, i - 3)) + list(range(i + 1, prep.n_positions)):
                x2 = xp.copy()
                x2[j] += 0.37
                out = m.decode(h_e, x2[None], prep).data[0]
                assert np.array_equal(out[i], ref[i]), (i, j)


def test_causality_by_gradient(model):
    """d log q_i / d x'_j is exactly zero for every j >= i."""
    ctx = tiny_context(3)
    prep = model.prepare(ctx, AtomOrdering((0, 1, 2)))
    rng = np.random.default_rng(2)
    x = rng.uniform(-5, 5, (1, 3, 3))
    seq = radix.encode(x, TINY.radix)
    h_e = model.encode(prep)
    S = prep.n_positions
    for i in range(S):
        xp = T.parameter(expand_inputs(x, TINY.radix))
        per = model.position_log_probs(model.decode(h_e, xp, prep), seq, prep)
        model.zero_grad()
        per[0, i].backward()
        g = np.abs(xp.grad[0]).sum(axis=-1)
        assert np.all(g[i:] == 0.0), (i, g)
        if i > 0:
            assert np.any(g[:i] != 0.0)


# -- encoder ------------------------------------------------------------------

def test_encoder_reference_permutation_symmetry(model):
    ctx = tiny_context(3, R=3)
    perm_ctx = SystemContext(ctx.z, ctx.bonds, ctx.references[[2, 0, 1]])
    o = AtomOrdering((0, 1, 2))
    with T.no_grad():
        a = model.encode(model.prepare(ctx, o)).data
        b = model.encode(model.prepare(perm_ctx, o)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_duplicated_reference_matches_single(model):
    ctx = tiny_context(3, R=1)
    dup = SystemContext(ctx.z, ctx.bonds, np.concatenate([ctx.references] * 2))
    o = AtomOrdering((0, 1, 2))
    with T.no_grad():
        a = model.encode(model.prepare(ctx, o)).data
        b = model.encode(model.prepare(dup, o)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- likelihood ---------------------------------------------------------------

def test_zeroed_heads_give_uniform_density():
    m = CardModel(TINY, seed=2)
    m.zero_heads_()
    ctx = tiny_context(3)
    x = np.random.default_rng(0).uniform(-14, 14, (5, 3, 3))
    lq = m.log_prob(ctx, x)
    np.testing.assert_allclose(lq, -9 * math.log(30.0), atol=1e-9)
    prep = m.prepare(ctx)
    with T.no_grad():
        _, per = m.decode_log_prob(m.encode(prep), m.target_frame(x, prep), prep)
    np.testing.assert_allclose(per.data[:, :6], -3 * math.log(2), atol=1e-12)


def test_log_prob_is_deterministic(model):
    ctx = tiny_context(3)
    x = np.random.default_rng(1).uniform(-8, 8, (4, 3, 3))
    a = model.log_prob(ctx, x)
    b = CardModel(TINY, seed=1).log_prob(ctx, x)
    assert np.array_equal(a, b)
    assert np.array_equal(a, model.log_prob(ctx, x))


def test_single_atom_density_integrates_to_one():
    cfg = ModelConfig(H=16, heads=2, layers=2, K=3, R=2, r=2, L=1)
    m = CardModel(cfg, seed=3)
    ctx = SystemContext([6], [], np.random.default_rng(0).uniform(-5, 5, (2, 1, 3)))
    Y, W = cube_quadrature(20, cfg.radix.cell)
    g = truncation(np.arange(cfg.r ** cfg.L), cfg.L, cfg.radix)
    total = 0.0
    for b in np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3):
        total += W @ np.exp(m.log_prob(ctx, (b + Y)[:, None, :], batch=4000))
    assert abs(total - 1.0) < 1e-3
