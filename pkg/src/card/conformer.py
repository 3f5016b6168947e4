"""
Conformation preprocessing: PCA alignment, degeneracy screening, atom
orderings and the expanded per-position coordinate inputs.

Conformations are plain ``(N, 3)`` float arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import radix
from .errors import AlignmentError, OrderingError
from .radix import RadixConfig

HYDROGEN = 1
_PRIORITY = {6: 0, 7: 1, 8: 2}
INFERENCE_SEED = 20240917


@dataclass
class SystemContext:
    """Atomic numbers, bond list and reference structures of one system."""

    z: np.ndarray
    bonds: list = field(default_factory=list)
    references: np.ndarray = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64)
        n = len(self.z)
        bonds = []
        for i, j in self.bonds:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) out of range for {n} atoms")
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            bonds.append((min(i, j), max(i, j)))
        self.bonds = sorted(set(bonds))
        if self.references is None:
            self.references = np.zeros((0, n, 3))
        self.references = np.asarray(self.references, dtype=np.float64)
        if self.references.ndim != 3 or self.references.shape[1:] != (n, 3):
            raise ValueError(
                f"references must have shape (R, {n}, 3), got {self.references.shape}")

    @property
    def n_atoms(self):
        return len(self.z)

    def neighbours(self):
        adj = [[] for _ in range(self.n_atoms)]
        for i, j in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def reordered(self, perm):
        """Context with atoms relabelled so that new atom k is old atom perm[k]."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        bonds = [(int(inv[i]), int(inv[j])) for i, j in self.bonds]
        return SystemContext(self.z[perm], bonds, self.references[:, perm])


@dataclass(frozen=True)
class AtomOrdering:
    perm: tuple
    strategy: str = "given"

    def __post_init__(self):
        p = tuple(int(i) for i in self.perm)
        if sorted(p) != list(range(len(p))):
            raise OrderingError(f"not a permutation: {p}")
        object.__setattr__(self, "perm", p)

    @property
    def inverse(self):
        return tuple(int(i) for i in np.argsort(self.perm))

    def apply(self, x):
        """Reorder atoms: axis -2 of ``x``."""
        return np.asarray(x)[..., list(self.perm), :]

    def restore(self, x):
        return np.asarray(x)[..., list(self.inverse), :]


# -----------------------------------------------------------------------------
# PCA alignment
# -----------------------------------------------------------------------------

def _principal_axes(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise AlignmentError(f"expected an (N, 3) conformation, got {x.shape}")
    if x.shape[0] < 3:
        raise AlignmentError("PCA alignment needs at least 3 atoms")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(xc)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return xc, evals[order], evecs[:, order]


def covariance_eigenvalues(x):
    """Eigenvalues of the coordinate covariance, largest first."""
    return _principal_axes(x)[1]


def pca_align(x):
    """Centre ``x`` and rotate it onto its principal axes.

    Axes are sorted by decreasing variance.  Each axis is oriented so that the
    standardised third moment of the projections is positive; when that is
    numerically zero the sign of the largest-magnitude projection decides.
    The third axis is flipped last if needed to keep the frame right-handed.

    Raises
    ------
    AlignmentError
        Fewer than three atoms, or collinear atoms (rank < 2 covariance).
    """
    xc, evals, axes = _principal_axes(x)
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise AlignmentError("rank-deficient covariance: atoms are collinear")
    axes = axes.copy()
    proj = xc @ axes
    for k in range(3):
        p = proj[:, k]
        m2 = np.mean(p * p)
        skew = np.mean(p ** 3) / m2 ** 1.5 if m2 > 1e-24 * evals[0] else 0.0
        if abs(skew) >= 1e-9:
            flip = skew < 0
        else:
            flip = p[np.argmax(np.abs(p))] < 0
        if flip:
            axes[:, k] = -axes[:, k]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return xc @ axes


def degenerate_eigenvalues(evals, tol=0.02):
    """True iff some adjacent pair of sorted eigenvalues is closer than ``tol`` relatively."""
    ev = np.sort(np.asarray(evals, dtype=np.float64))[::-1]
    for a, b in zip(ev[:-1], ev[1:]):
        if a <= 0:
            return True
        if (a - b) / a < tol:
            return True
    return False


def detect_degeneracy(x, tol=0.02):
    """Flag conformations whose principal axes are nearly degenerate."""
    return degenerate_eigenvalues(covariance_eigenvalues(x), tol)


# -----------------------------------------------------------------------------
# orderings
# -----------------------------------------------------------------------------

def priority_class(z):
    """C < N < O < other heavy < H (lower is visited first)."""
    if z == HYDROGEN:
        return 4
    return _PRIORITY.get(int(z), 3)


def _components(ctx):
    adj = ctx.neighbours()
    seen = [False] * ctx.n_atoms
    comps = []
    for s in range(ctx.n_atoms):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(sorted(comp))
    return comps


def topology_order(ctx, start, rng):
    """Depth-first traversal of the bond graph with element priorities.

    Bonded neighbours are visited C first, then N, O, other heavy atoms and
    finally H; neighbours in the same class are shuffled with ``rng``.

    Raises
    ------
    OrderingError
        If the bond graph is disconnected or ``start`` is invalid.
    """
    n = ctx.n_atoms
    if not 0 <= start < n:
        raise OrderingError(f"start atom {start} out of range")
    adj = ctx.neighbours()
    visited = [False] * n
    order = []
    # iterative DFS; each frame holds the neighbour list still to try
    visited[start] = True
    order.append(start)
    stack = [_ranked_neighbours(adj[start], ctx.z, rng)]
    while stack:
        frame = stack[-1]
        while frame and visited[frame[0]]:
            frame.pop(0)
        if not frame:
            stack.pop()
            continue
        v = frame.pop(0)
        visited[v] = True
        order.append(v)
        stack.append(_ranked_neighbours(adj[v], ctx.z, rng))
    if len(order) != n:
        missing = sorted(set(range(n)) - set(order))
        raise OrderingError(f"bond graph is disconnected; unreachable atoms: {missing}")
    return AtomOrdering(tuple(order), "topology")


def _ranked_neighbours(nbrs, z, rng):
    groups = {}
    for w in nbrs:
        groups.setdefault(priority_class(z[w]), []).append(w)
    out = []
    for cls in sorted(groups):
        members = sorted(groups[cls])
        if len(members) > 1:
            members = [members[i] for i in rng.permutation(len(members))]
        out.extend(members)
    return out


def floyd_warshall(weights):
    """All-pairs shortest path lengths for a dense non-negative weight matrix."""
    d = np.array(weights, dtype=np.float64)
    n = len(d)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def distance_costs(references, atoms):
    """Std-dev over references of each pairwise distance among ``atoms``."""
    u = np.asarray(references)[:, atoms]
    dist = np.linalg.norm(u[:, :, None, :] - u[:, None, :, :], axis=-1)
    return dist.std(axis=0)


def distance_order(ctx, start, rng):
    """Heavy atoms by shortest-path distance from ``start``, then shuffled H.

    Path lengths run over the complete heavy-atom graph whose edge weights are
    the standard deviations of the pair distances across the references.  Ties
    are broken by atom index.
    """
    if ctx.references.shape[0] == 0:
        raise OrderingError("distance ordering needs at least one reference structure")
    heavy = [i for i in range(ctx.n_atoms) if ctx.z[i] != HYDROGEN]
    if not heavy:
        raise OrderingError("distance ordering needs at least one heavy atom")
    if start not in heavy:
        raise OrderingError(f"start atom {start} is not a heavy atom")
    paths = floyd_warshall(distance_costs(ctx.references, heavy))
    s = heavy.index(start)
    ranked = sorted(range(len(heavy)), key=lambda k: (k != s, paths[s, k], heavy[k]))
    hydrogens = [i for i in range(ctx.n_atoms) if ctx.z[i] == HYDROGEN]
    hydrogens = [hydrogens[i] for i in rng.permutation(len(hydrogens))]
    return AtomOrdering(tuple([heavy[k] for k in ranked] + hydrogens), "distance")


def random_ordering(ctx, rng, strategy="auto"):
    """Training-time ordering: random start atom, strategy by bond availability."""
    if strategy == "auto":
        strategy = "topology" if ctx.bonds else "distance"
    if strategy == "topology":
        return topology_order(ctx, int(rng.integers(ctx.n_atoms)), rng)
    if strategy == "distance":
        heavy = [i for i in range(ctx.n_atoms) if ctx.z[i] != HYDROGEN]
        return distance_order(ctx, int(heavy[rng.integers(len(heavy))]) if heavy else 0, rng)
    if strategy == "given":
        return AtomOrdering(tuple(range(ctx.n_atoms)), "given")
    raise ValueError(f"unknown ordering strategy {strategy!r}")


def inference_ordering(ctx, strategy="auto"):
    """Fixed ordering used at inference time.

    Topology mode starts at the lowest-index carbon (lowest-index heavy atom
    when there is no carbon); distance mode at the lowest-index heavy atom.
    """
    if strategy == "auto":
        strategy = "topology" if ctx.bonds else "distance"
    rng = np.random.default_rng(INFERENCE_SEED)
    heavy = [i for i in range(ctx.n_atoms) if ctx.z[i] != HYDROGEN] or [0]
    if strategy == "topology":
        carbons = [i for i in range(ctx.n_atoms) if ctx.z[i] == 6]
        return topology_order(ctx, (carbons or heavy)[0], rng)
    if strategy == "distance":
        return distance_order(ctx, heavy[0], rng)
    if strategy == "given":
        return AtomOrdering(tuple(range(ctx.n_atoms)), "given")
    raise ValueError(f"unknown ordering strategy {strategy!r}")


# -----------------------------------------------------------------------------
# expanded inputs
# -----------------------------------------------------------------------------

def position_atoms(n_atoms, cfg):
    """Atom index (0-based) of every sequence position, i.e. id(i) - 1."""
    return np.tile(np.arange(n_atoms), cfg.L + 1)


def position_depths(n_atoms, cfg):
    """Depth of every sequence position: 1..L for digits, L + 1 for residuals."""
    return np.repeat(np.arange(1, cfg.L + 2), n_atoms)


def expand_words(words, x, cfg):
    """Decomposed coordinates from per-depth words ``(..., N, L, 3)`` and exact ``x``."""
    words = np.asarray(words)
    rows = [radix.truncation(words[..., l, :], l + 1, cfg) for l in range(cfg.L)]
    rows.append(np.asarray(x, dtype=np.float64))
    return np.concatenate(rows, axis=-2)


def expand_inputs(x, cfg=RadixConfig()):
    """Decomposed coordinates ``(..., N(L+1), 3)`` of conformation(s) ``x``.

    Row ``l * N + k`` (l < L) is atom k truncated to its first ``l + 1``
    digits; the final N rows are the exact coordinates.
    """
    seq = radix.encode(x, cfg)
    return expand_words(radix.depth_words(seq.digits, cfg), x, cfg)
