import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from card.conformer import (AtomOrdering, SystemContext, covariance_eigenvalues,
                            degenerate_eigenvalues, detect_degeneracy, distance_order,
                            expand_inputs, floyd_warshall, inference_ordering, pca_align,
                            priority_class, random_ordering, topology_order)
from card.errors import AlignmentError, OrderingError, ScaleError
from card.radix import RadixConfig

CFG = RadixConfig()


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def asymmetric_cloud(rng, n=7):
    return rng.normal(size=(n, 3)) * np.array([3.0, 1.5, 0.5])


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


# -- PCA alignment ------------------------------------------------------------

def test_pca_align_centres_and_preserves_distances():
    rng = np.random.default_rng(1)
    x = asymmetric_cloud(rng) + 5.0
    y = pca_align(x)
    assert np.abs(y.mean(axis=0)).max() < 1e-10
    assert np.abs(pairwise(x) - pairwise(y)).max() < 1e-9
    var = y.var(axis=0)
    assert var[0] >= var[1] >= var[2]


def test_pca_align_translation_invariance():
    rng = np.random.default_rng(2)
    x = asymmetric_cloud(rng)
    for _ in range(10):
        t = rng.normal(size=3) * 10
        assert np.abs(pca_align(x + t) - pca_align(x)).max() < 1e-9


def test_pca_align_rotation_invariance_100_rotations():
    rng = np.random.default_rng(3)
    x = asymmetric_cloud(rng)
    assert not detect_degeneracy(x)
    ref = pca_align(x)
    for _ in range(100):
        R = random_rotation(rng)
        assert np.abs(pca_align(x @ R.T) - ref).max() < 1e-8


def test_pca_align_idempotent_and_right_handed():
    rng = np.random.default_rng(4)
    y = pca_align(asymmetric_cloud(rng))
    assert np.abs(pca_align(y) - y).max() < 1e-9
    # the aligned frame is the identity: a proper rotation of the input
    x = asymmetric_cloud(rng)
    y = pca_align(x)
    xc = x - x.mean(axis=0)
    R, *_ = np.linalg.lstsq(xc, y, rcond=None)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_pca_align_errors():
    with pytest.raises(AlignmentError):
        pca_align(np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(AlignmentError):
        pca_align(line)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(4, 9))
def test_pca_align_se3_property(seed, n):
    rng = np.random.default_rng(seed)
    x = asymmetric_cloud(rng, n)
    if detect_degeneracy(x):
        return
    R, t = random_rotation(rng), rng.normal(size=3)
    assert np.abs(pca_align(x @ R.T + t) - pca_align(x)).max() < 1e-8


# -- degeneracy ---------------------------------------------------------------

def test_degeneracy_examples():
    assert not degenerate_eigenvalues([3.0, 2.0, 1.0])
    assert degenerate_eigenvalues([1.0, 0.99, 0.5])
    tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    assert detect_degeneracy(tetra)
    ev = covariance_eigenvalues(tetra)
    np.testing.assert_allclose(ev, ev[0])


def test_degeneracy_on_clouds():
    rng = np.random.default_rng(5)
    sphere = rng.normal(size=(4000, 3))
    assert detect_degeneracy(sphere)
    chain = np.column_stack([np.arange(8) * 1.5, 0.4 * (-1) ** np.arange(8), 0.1 * np.arange(8) % 0.3])
    assert not detect_degeneracy(chain)


# -- orderings ----------------------------------------------------------------

def water():
    return SystemContext([8, 1, 1], [(0, 1), (0, 2)])


def test_context_validation():
    with pytest.raises(ValueError):
        SystemContext([6, 6], [(0, 0)])
    with pytest.raises(ValueError):
        SystemContext([6, 6], [(0, 2)])
    with pytest.raises(ValueError):
        SystemContext([6, 6], [(0, 1)], np.zeros((2, 3, 3)))


def test_topology_water():
    order = topology_order(water(), 0, np.random.default_rng(0))
    assert order.perm[0] == 0 and sorted(order.perm[1:]) == [1, 2]


def propane():
    # C0-C1-C2, hydrogens 3..10
    z = [6, 6, 6] + [1] * 8
    bonds = [(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7), (2, 8), (2, 9), (2, 10)]
    return SystemContext(z, bonds)


def test_topology_carbon_first():
    for seed in range(10):
        perm = topology_order(propane(), 1, np.random.default_rng(seed)).perm
        assert perm[0] == 1 and perm[1] in (0, 2)


def _oracle_dfs(ctx, start, rng):
    # recursive DFS with the same per-node shuffle sequence
    adj = ctx.neighbours()
    seen, out = set(), []

    def visit(v):
        seen.add(v)
        out.append(v)
        groups = {}
        for w in adj[v]:
            groups.setdefault(priority_class(ctx.z[w]), []).append(w)
        ranked = []
        for c in sorted(groups):
            mem = sorted(groups[c])
            if len(mem) > 1:
                mem = [mem[i] for i in rng.permutation(len(mem))]
            ranked.extend(mem)
        for w in ranked:
            if w not in seen:
                visit(w)

    visit(start)
    return tuple(out)


def ethanol():
    # C0-C1-O2, H on C0 (3,4,5), C1 (6,7), O2 (8)
    return SystemContext([6, 6, 8, 1, 1, 1, 1, 1, 1],
                         [(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7), (2, 8)])


def test_topology_ethanol_matches_oracle():
    ctx = ethanol()
    for seed in range(5):
        for start in range(ctx.n_atoms):
            got = topology_order(ctx, start, np.random.default_rng(seed)).perm
            ref = _oracle_dfs(ctx, start, np.random.default_rng(seed))
            assert got == ref


def test_topology_disconnected():
    ctx = SystemContext([6, 6, 6, 1], [(0, 1)])
    with pytest.raises(OrderingError, match=r"\[2, 3\]"):
        topology_order(ctx, 0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2 ** 31))
def test_topology_is_permutation_and_contiguous(n, seed):
    rng = np.random.default_rng(seed)
    # random spanning tree plus extra edges
    bonds = [(int(rng.integers(i)), i) for i in range(1, n)]
    bonds += [tuple(sorted(rng.choice(n, 2, replace=False))) for _ in range(n // 3)]
    z = rng.choice([1, 6, 7, 8, 16], size=n)
    ctx = SystemContext(z, bonds)
    perm = topology_order(ctx, int(rng.integers(n)), rng).perm
    assert sorted(perm) == list(range(n))
    # every atom after the first is bonded to some earlier atom
    adj = ctx.neighbours()
    for k in range(1, n):
        assert any(p in adj[perm[k]] for p in perm[:k])


def test_distance_order_identical_references():
    refs = np.repeat(np.random.default_rng(0).normal(size=(1, 5, 3)), 3, axis=0)
    ctx = SystemContext([6, 7, 1, 8, 6], [], refs)
    perm = distance_order(ctx, 3, np.random.default_rng(0)).perm
    assert perm[:4] == (3, 0, 1, 4) and perm[4] == 2


def test_distance_order_two_heavy():
    refs = np.random.default_rng(1).normal(size=(2, 4, 3))
    ctx = SystemContext([1, 6, 1, 8], [], refs)
    perm = distance_order(ctx, 3, np.random.default_rng(0)).perm
    assert perm[:2] == (3, 1) and sorted(perm[2:]) == [0, 2]


def _oracle_distance(refs, heavy, start):
    m = len(heavy)
    w = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            d = [np.linalg.norm(u[heavy[a]] - u[heavy[b]]) for u in refs]
            w[a, b] = np.std(d)
    best = {}
    s = heavy.index(start)
    # exhaustive simple paths
    for t in range(m):
        cost = np.inf
        others = [k for k in range(m) if k not in (s, t)]
        for r in range(len(others) + 1):
            for mid in itertools.permutations(others, r):
                path = (s,) + mid + (t,)
                c = sum(w[path[i], path[i + 1]] for i in range(len(path) - 1))
                cost = min(cost, c)
        best[t] = 0.0 if t == s else cost
    ranked = sorted(range(m), key=lambda k: (k != s, best[k], heavy[k]))
    return [heavy[k] for k in ranked]


def test_distance_order_matches_oracle():
    refs = np.array([
        [[0, 0, 0], [1.5, 0, 0], [3.0, 0.3, 0], [4.0, 1.2, 0.1], [0.5, 1.0, 0]],
        [[0, 0, 0], [1.4, 0.1, 0], [2.7, 0.9, 0], [4.4, 0.8, 0.3], [0.6, 0.9, 0.1]],
        [[0, 0, 0], [1.6, -0.1, 0], [3.1, -0.4, 0.2], [3.6, 1.9, 0], [0.4, 1.1, 0]],
    ], dtype=float)
    ctx = SystemContext([6, 7, 6, 8, 1], [], refs)
    heavy = [0, 1, 2, 3]
    for start in heavy:
        perm = distance_order(ctx, start, np.random.default_rng(0)).perm
        assert list(perm[:4]) == _oracle_distance(refs, heavy, start)
        assert perm[4] == 4


def test_distance_order_errors():
    ctx = SystemContext([6, 6, 1], [])
    with pytest.raises(OrderingError):
        distance_order(ctx, 0, np.random.default_rng(0))
    refs = np.zeros((1, 2, 3))
    with pytest.raises(OrderingError):
        distance_order(SystemContext([1, 1], [], refs), 0, np.random.default_rng(0))
    with pytest.raises(OrderingError):
        distance_order(SystemContext([6, 1], [], refs), 1, np.random.default_rng(0))


def test_floyd_warshall_small():
    w = np.array([[0, 5, 1], [5, 0, 1], [1, 1, 0]], float)
    np.testing.assert_allclose(floyd_warshall(w), [[0, 2, 1], [2, 0, 1], [1, 1, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2 ** 31))
def test_distance_order_heavy_before_hydrogen(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.choice([1, 6, 7, 8], size=n)
    z[0] = 6
    ctx = SystemContext(z, [], rng.normal(size=(3, n, 3)))
    perm = random_ordering(ctx, rng).perm
    assert sorted(perm) == list(range(n))
    kinds = [z[p] == 1 for p in perm]
    assert kinds == sorted(kinds)


def test_inference_ordering_is_fixed():
    ctx = ethanol()
    a = inference_ordering(ctx)
    b = inference_ordering(ctx)
    assert a == b and a.perm[0] == 0 and a.strategy == "topology"
    refs = np.random.default_rng(0).normal(size=(2, 3, 3))
    d = inference_ordering(SystemContext([1, 8, 6], [], refs))
    assert d.perm[0] == 1 and d.strategy == "distance"


def test_atom_ordering_apply_restore():
    o = AtomOrdering((2, 0, 1))
    x = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(o.restore(o.apply(x)), x)
    with pytest.raises(OrderingError):
        AtomOrdering((0, 0, 1))


# -- expanded inputs ----------------------------------------------------------

def test_expand_inputs_example():
    x = np.array([[6.0, 0.0, -15.0 + 1e-9]])
    rows = expand_inputs(x, CFG)
    assert rows.shape == (4, 3)
    np.testing.assert_allclose(rows[:, 0], [0.0, 5.625, 5.625, 6.0], atol=1e-12)
    np.testing.assert_array_equal(rows[:3, 2], -15.0)


def test_expand_inputs_layout_and_bounds():
    rng = np.random.default_rng(0)
    x = rng.uniform(-15, 15, size=(5, 3))
    rows = expand_inputs(x, CFG)
    n = 5
    assert rows.shape == (n * 4, 3)
    np.testing.assert_array_equal(rows[3 * n:], x)
    cell = CFG.a / CFG.r ** CFG.L
    err = [np.abs(rows[l * n:(l + 1) * n] - x) for l in range(3)]
    assert np.all(err[2] < cell)
    for l in range(2):
        assert np.all(err[l + 1] <= err[l] + CFG.a * (CFG.r - 1) / CFG.r ** (l + 2) + 1e-12)
    with pytest.raises(ScaleError):
        expand_inputs(np.array([[15.0, 0.0, 0.0]]), CFG)
