"""
Synthetic Boltzmann systems with exact energies and known partition
functions, a random-walk Metropolis sampler, and trajectory decorrelation.

All energies are reduced (beta = 1).  Every potential carries a steep quartic
wall starting at 0.9 * a/2 per coordinate so that the probability mass outside
the radix box is negligible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedError

logger = logging.getLogger(__name__)

BOX = 30.0
WALL_K = 100.0
WALL_FRACTION = 0.9
# closed-form wells keep this many standard deviations inside the box (tail mass < 1e-13)
CONFINE_SIGMAS = 7.5


def _flat_log_z(wall_start, wall_k, box):
    """log of the 1D integral of exp(-wall) over the line (over the box if there is no wall)."""
    if wall_k == 0:
        return math.log(box)
    tail = math.gamma(1.25) * wall_k ** -0.25
    return math.log(2.0 * wall_start + 2.0 * tail)


class ToyPotential:
    """Base class: subclasses implement ``_energy`` / ``_gradient``."""

    name = "toy"

    def __init__(self, z, bonds=(), box=BOX, wall_k=WALL_K, offset=0.0):
        self.z = np.asarray(z, dtype=np.int64)
        self.offset = float(offset)
        self.bonds = [tuple(int(i) for i in b) for b in bonds]
        self.box = float(box)
        self.wall_k = float(wall_k)
        self.wall_start = WALL_FRACTION * self.box / 2.0

    @property
    def n_atoms(self):
        return len(self.z)

    def wall(self, x):
        excess = np.maximum(np.abs(x) - self.wall_start, 0.0)
        return self.wall_k * (excess ** 4).sum(axis=(-1, -2))

    def wall_gradient(self, x):
        excess = np.maximum(np.abs(x) - self.wall_start, 0.0)
        return 4.0 * self.wall_k * excess ** 3 * np.sign(x)

    def energy(self, x):
        """Reduced energy of conformation(s) ``x`` with shape ``(..., N, 3)``."""
        x = np.asarray(x, dtype=np.float64)
        return self._energy(x) + self.wall(x) + self.offset

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self._gradient(x) + self.wall_gradient(x)

    def log_partition(self):
        """log Z of exp(-energy) over R^{3N} (the walls make it finite)."""
        return self._log_partition() - self.offset

    def _log_partition(self):
        raise UnsupportedError(f"{type(self).__name__} has no closed-form or low-dimensional partition function")

    def _energy(self, x):
        raise NotImplementedError

    def _gradient(self, x):
        raise NotImplementedError

    def equilibrium(self):
        """A low-energy starting conformation."""
        return np.zeros((self.n_atoms, 3))


class GaussianWells(ToyPotential):
    """Independent harmonic wells per atom and coordinate.

    ``sigma`` entries set to ``inf`` leave that coordinate flat between the walls.
    """

    def __init__(self, centers, sigma, z=None, bonds=(), **kw):
        centers = np.asarray(centers, dtype=np.float64)
        super().__init__(z if z is not None else [6] * len(centers), bonds, **kw)
        self.centers = centers
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), centers.shape).copy()
        finite = np.isfinite(self.sigma)
        if np.any(np.abs(centers[finite]) + CONFINE_SIGMAS * self.sigma[finite] > self.box / 2.0):
            raise ValueError("Gaussian wells must sit well inside the box")
        self._prec = np.where(finite, 1.0 / np.where(finite, self.sigma, 1.0) ** 2, 0.0)

    def _energy(self, x):
        d = x - self.centers
        return 0.5 * (self._prec * d * d).sum(axis=(-1, -2))

    def _gradient(self, x):
        return self._prec * (x - self.centers)

    def _log_partition(self):
        finite = np.isfinite(self.sigma)
        gauss = np.log(self.sigma[finite] * math.sqrt(2.0 * math.pi)).sum()
        return float(gauss + (~finite).sum() * _flat_log_z(self.wall_start, self.wall_k, self.box))

    def equilibrium(self):
        return self.centers.copy()


class HarmonicNetwork(ToyPotential):
    """Per-atom tethers plus vector springs along bonds; exactly Gaussian.

    U = sum_i k_w/2 |x_i - c_i|^2 + sum_(i,j) k_b/2 |x_i - x_j - (c_i - c_j)|^2
    """

    def __init__(self, centers, well_k, bonds, bond_k, z=None, **kw):
        centers = np.asarray(centers, dtype=np.float64)
        super().__init__(z if z is not None else [6] * len(centers), bonds, **kw)
        self.centers = centers
        self.well_k = np.broadcast_to(np.asarray(well_k, dtype=np.float64), (len(centers),)).copy()
        self.bond_k = float(bond_k)
        n = len(centers)
        M = np.diag(self.well_k)
        for i, j in self.bonds:
            M[i, i] += self.bond_k
            M[j, j] += self.bond_k
            M[i, j] -= self.bond_k
            M[j, i] -= self.bond_k
        self.stiffness = M
        sd = np.sqrt(np.diag(np.linalg.inv(M)))
        if np.any(np.abs(centers) + CONFINE_SIGMAS * sd[:, None] > self.box / 2.0):
            raise ValueError("harmonic network too close to the walls")

    def _energy(self, x):
        d = x - self.centers  # (..., N, 3)
        return 0.5 * np.einsum("...ik,ij,...jk->...", d, self.stiffness, d)

    def _gradient(self, x):
        d = x - self.centers
        return np.einsum("ij,...jk->...ik", self.stiffness, d)

    def _log_partition(self):
        n = self.n_atoms
        sign, logdet = np.linalg.slogdet(self.stiffness)
        return float(3.0 * (0.5 * n * math.log(2.0 * math.pi) - 0.5 * logdet))

    def equilibrium(self):
        return self.centers.copy()


class BondedChain(ToyPotential):
    """Harmonic bond lengths, soft Gaussian pair repulsion and a weak tether.

    No closed-form partition function; used for orderings and training data.
    """

    def __init__(self, z, bonds, r0=1.5, bond_k=20.0, rep_eps=1.0, rep_sigma=1.0,
                 tether_k=0.2, **kw):
        super().__init__(z, bonds, **kw)
        self.r0 = float(r0)
        self.bond_k = float(bond_k)
        self.rep_eps = float(rep_eps)
        self.rep_sigma = float(rep_sigma)
        self.tether_k = float(tether_k)
        bonded = set(self.bonds) | {(j, i) for i, j in self.bonds}
        n = self.n_atoms
        self._pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in bonded]

    def _energy(self, x):
        e = 0.5 * self.tether_k * (x * x).sum(axis=(-1, -2))
        for i, j in self.bonds:
            r = np.linalg.norm(x[..., i, :] - x[..., j, :], axis=-1)
            e = e + 0.5 * self.bond_k * (r - self.r0) ** 2
        for i, j in self._pairs:
            r2 = ((x[..., i, :] - x[..., j, :]) ** 2).sum(axis=-1)
            e = e + self.rep_eps * np.exp(-r2 / self.rep_sigma ** 2)
        return e

    def _gradient(self, x):
        g = self.tether_k * x.copy()
        for i, j in self.bonds:
            d = x[..., i, :] - x[..., j, :]
            r = np.linalg.norm(d, axis=-1, keepdims=True)
            f = self.bond_k * (r - self.r0) * d / r
            g[..., i, :] += f
            g[..., j, :] -= f
        for i, j in self._pairs:
            d = x[..., i, :] - x[..., j, :]
            r2 = (d * d).sum(axis=-1, keepdims=True)
            f = -2.0 * self.rep_eps / self.rep_sigma ** 2 * np.exp(-r2 / self.rep_sigma ** 2) * d
            g[..., i, :] += f
            g[..., j, :] -= f
        return g

    def equilibrium(self):
        n = self.n_atoms
        x = np.zeros((n, 3))
        x[:, 0] = (np.arange(n) - (n - 1) / 2) * self.r0
        x[1::2, 1] = 0.5
        return x


class PlanarWell(ToyPotential):
    """One atom whose first one or two coordinates follow a double or single well.

    Double:  U = h ((x/w)^2 - 1)^2 + tilt x [+ k_y/2 y^2 + c x y]
    Single:  U = k_x/2 (x - x0)^2 [+ k_y/2 y^2 + c x y]
    The remaining coordinates are harmonic with stiffness ``k_rest``.
    """

    def __init__(self, dims=2, kind="double", height=3.0, width=1.5, tilt=0.0,
                 k_x=1.0, x0=0.0, k_y=1.0, coupling=0.0, k_rest=1.0, z=(6,), **kw):
        super().__init__(list(z), (), **kw)
        if dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")
        if kind not in ("double", "single"):
            raise ValueError("kind must be 'double' or 'single'")
        self.dims = dims
        self.kind = kind
        self.height, self.width, self.tilt = float(height), float(width), float(tilt)
        self.k_x, self.x0 = float(k_x), float(x0)
        self.k_y, self.coupling = float(k_y), float(coupling)
        self.k_rest = float(k_rest)
        if dims == 2 and self.coupling ** 2 >= self.k_y * max(self.k_x, 1e-12) and kind == "single":
            raise ValueError("single well is not confining for this coupling")

    def planar(self, x, y=None):
        """Energy of the active coordinates."""
        if self.kind == "double":
            e = self.height * ((x / self.width) ** 2 - 1.0) ** 2 + self.tilt * x
        else:
            e = 0.5 * self.k_x * (x - self.x0) ** 2
        if self.dims == 2:
            e = e + 0.5 * self.k_y * y ** 2 + self.coupling * x * y
        return e

    def _planar_grad(self, x, y):
        if self.kind == "double":
            gx = 4.0 * self.height * ((x / self.width) ** 2 - 1.0) * x / self.width ** 2 + self.tilt
        else:
            gx = self.k_x * (x - self.x0)
        gy = np.zeros_like(x)
        if self.dims == 2:
            gx = gx + self.coupling * y
            gy = self.k_y * y + self.coupling * x
        return gx, gy

    def _energy(self, x):
        c = x[..., 0, :]
        if self.dims == 2:
            e = self.planar(c[..., 0], c[..., 1])
            rest = c[..., 2:]
        else:
            e = self.planar(c[..., 0])
            rest = c[..., 1:]
        return e + 0.5 * self.k_rest * (rest * rest).sum(axis=-1)

    def _gradient(self, x):
        c = x[..., 0, :]
        g = np.zeros_like(x)
        gx, gy = self._planar_grad(c[..., 0], c[..., 1])
        g[..., 0, 0] = gx
        if self.dims == 2:
            g[..., 0, 1] = gy
            g[..., 0, 2] = self.k_rest * c[..., 2]
        else:
            g[..., 0, 1:] = self.k_rest * c[..., 1:]
        return g

    def _log_partition(self, tol=1e-4):
        rest = 3 - self.dims
        log_rest = rest * 0.5 * math.log(2.0 * math.pi / self.k_rest)
        half = self.box / 2.0

        def f(*grids):
            e = self.planar(*grids)
            for g in grids:
                e = e + self.wall_k * np.maximum(np.abs(g) - self.wall_start, 0.0) ** 4
            return e

        return float(trapezoid_log_z(f, self.dims, -half, half, tol=tol) + log_rest)

    def equilibrium(self):
        x = np.zeros((1, 3))
        if self.kind == "double":
            x[0, 0] = self.width
        else:
            x[0, 0] = self.x0
        return x


def _trapezoid_weights(n, lo, hi):
    h = (hi - lo) / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    return np.linspace(lo, hi, n), w


def trapezoid_log_z(energy_fn, ndim, lo, hi, n=257, tol=1e-4, max_n=8193):
    """log of int exp(-U) over ``[lo, hi]^ndim`` by grid doubling and Richardson.

    ``energy_fn`` takes ``ndim`` broadcastable coordinate grids.
    """
    prev = None
    prev_rich = None
    while True:
        z = _trapezoid_log_z_fixed(energy_fn, ndim, lo, hi, n)
        if prev is not None:
            # trapezoid error ~ h^2: Richardson on Z, not log Z
            rich = math.log((4.0 * math.exp(z - prev) - 1.0) / 3.0) + prev
            if prev_rich is not None and abs(rich - prev_rich) < tol and abs(z - prev) < tol:
                return rich
            prev_rich = rich
        if 2 * n - 1 > max_n or (ndim == 2 and 2 * n - 1 > 2049):
            if prev_rich is None:
                return z
            return prev_rich
        prev = z
        n = 2 * n - 1


def _trapezoid_log_z_fixed(energy_fn, ndim, lo, hi, n):
    g, w = _trapezoid_weights(n, lo, hi)
    if ndim == 1:
        e = energy_fn(g)
        wt = w
    elif ndim == 2:
        X, Y = np.meshgrid(g, g, indexing="ij")
        e = energy_fn(X, Y)
        wt = np.outer(w, w)
    else:
        raise UnsupportedError("quadrature is limited to two effective dimensions")
    m = e.min()
    return float(math.log(np.sum(wt * np.exp(-(e - m)))) - m)


def reference_free_energy(pot):
    """Exact reduced free energy -log Z of a toy potential."""
    return -pot.log_partition()


# -----------------------------------------------------------------------------
# trajectories and sampling
# -----------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Frames ``(M, N, 3)`` with their exact reduced energies."""

    frames: np.ndarray
    energies: np.ndarray
    z: np.ndarray
    bonds: list = field(default_factory=list)
    chains: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if self.chains is None:
            self.chains = np.zeros(len(self.frames), dtype=np.int64)
        if len(self.energies) != len(self.frames):
            raise ValueError("one energy per frame required")

    def __len__(self):
        return len(self.frames)

    def subset(self, index):
        return Trajectory(self.frames[index], self.energies[index], self.z, self.bonds,
                          self.chains[index], dict(self.meta))


def metropolis_sample(pot, n_steps, step_size, rng, init=None, n_chains=1, burn_in=0,
                      thin=1, tune=True, target=(0.3, 0.5)):
    """Random-walk Metropolis with isotropic Gaussian proposals.

    Runs ``n_chains`` independent chains in lock-step.  The step size is tuned
    toward the ``target`` acceptance band during burn-in only.  Proposals that
    leave the radix box are rejected.

    Returns
    -------
    Trajectory
        ``n_chains * (n_steps // thin)`` frames, chain-major, with metadata
        ``acceptance``, ``step_size``, ``n_steps``, ``burn_in``, ``rejected_box``.
    """
    n = pot.n_atoms
    if init is None:
        init = pot.equilibrium()
    x = np.broadcast_to(np.asarray(init, dtype=np.float64), (n_chains, n, 3)).copy()
    half = pot.box / 2.0
    if np.any(np.abs(x) >= half):
        raise ValueError("initial conformation outside the box")
    e = pot.energy(x)
    step = float(step_size)
    box_rejects = 0

    def advance(x, e, step):
        nonlocal box_rejects
        prop = x + step * rng.standard_normal(x.shape)
        inside = np.all((prop >= -half) & (prop < half), axis=(-1, -2))
        box_rejects += int((~inside).sum())
        e_new = np.where(inside, pot.energy(np.where(inside[:, None, None], prop, x)), np.inf)
        accept = np.log(rng.random(len(x))) < -(e_new - e)
        x = np.where(accept[:, None, None], prop, x)
        e = np.where(accept, e_new, e)
        return x, e, accept

    window = 0
    acc_window = 0
    for t in range(burn_in):
        x, e, acc = advance(x, e, step)
        if tune:
            acc_window += acc.sum()
            window += len(acc)
            if (t + 1) % 50 == 0:
                rate = acc_window / window
                if rate < target[0]:
                    step *= 0.9
                elif rate > target[1]:
                    step *= 1.1
                acc_window = window = 0

    n_keep = n_steps // thin
    frames = np.empty((n_chains, n_keep, n, 3))
    energies = np.empty((n_chains, n_keep))
    accepted = 0
    for t in range(n_keep * thin):
        x, e, acc = advance(x, e, step)
        accepted += int(acc.sum())
        if (t + 1) % thin == 0:
            k = (t + 1) // thin - 1
            frames[:, k] = x
            energies[:, k] = e
    total = max(n_keep * thin * n_chains, 1)
    if box_rejects:
        logger.info("rejected %d proposals outside the box", box_rejects)
    meta = dict(acceptance=accepted / total, step_size=step, n_steps=n_steps,
                burn_in=burn_in, thin=thin, n_chains=n_chains, rejected_box=box_rejects)
    chains = np.repeat(np.arange(n_chains), n_keep)
    return Trajectory(frames.reshape(-1, n, 3), energies.reshape(-1), pot.z, pot.bonds,
                      chains, meta)


def autocorrelation(series):
    """Normalised autocorrelation function C(t), t = 0..n-1, via FFT."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    acf /= np.arange(n, 0, -1)
    return acf / acf[0]


def statistical_inefficiency(series, *more):
    """g = 1 + 2 sum_t (1 - t/n) C(t), summed until C(t) first drops below zero.

    Several series (e.g. one per chain) are pooled by averaging their C(t).
    A constant series is treated as fully correlated: g = len(series).
    """
    all_series = [np.asarray(series, dtype=np.float64)] + [np.asarray(s, dtype=np.float64) for s in more]
    n = min(len(s) for s in all_series)
    if n < 10:
        raise ValueError("statistical inefficiency needs at least 10 points")
    acfs = []
    for s in all_series:
        s = s[:n]
        if np.ptp(s) == 0:
            continue
        acfs.append(autocorrelation(s))
    if not acfs:
        logger.warning("constant series: treating as fully correlated")
        return float(n)
    c = np.mean(acfs, axis=0)
    g = 1.0
    for t in range(1, n):
        if c[t] < 0:
            break
        g += 2.0 * c[t] * (1.0 - t / n)
    return max(g, 1.0)


def decorrelate(traj):
    """Subsample each chain with stride ceil(g) computed from the energy series."""
    ids = np.unique(traj.chains)
    series = [traj.energies[traj.chains == c] for c in ids]
    g = statistical_inefficiency(*series)
    stride = int(math.ceil(g))
    keep = []
    for c in ids:
        idx = np.nonzero(traj.chains == c)[0]
        keep.append(idx[::stride])
    out = traj.subset(np.concatenate(keep))
    out.meta["statistical_inefficiency"] = g
    out.meta["stride"] = stride
    return out


# -----------------------------------------------------------------------------
# named systems
# -----------------------------------------------------------------------------

_H3_CENTERS = np.array([[-1.3, -0.4, 0.1], [0.0, 0.5, -0.2], [1.4, -0.1, 0.3]])


def make_system(name):
    """Build a named toy system.

    ``uniform-1``, ``gaussian-1d``, ``gaussian-3``, ``harmonic3``, ``harmonic3b``, ``chain5``,
    ``doublewell-1d``, ``doublewell-2d``, ``singlewell-2d``.
    """
    if name == "uniform-1":
        return GaussianWells([[0.0, 0.0, 0.0]], np.inf, z=[6], wall_k=0.0)
    if name == "gaussian-1d":
        return GaussianWells([[0.0, 0.0, 0.0]], [2.0, np.inf, np.inf], z=[6])
    if name == "gaussian-3":
        return GaussianWells(_H3_CENTERS, 0.8, z=[6, 6, 8], bonds=[(0, 1), (1, 2)])
    if name == "harmonic3":
        return HarmonicNetwork(_H3_CENTERS, 1.0, [(0, 1), (1, 2)], 2.0, z=[6, 6, 8])
    if name == "harmonic3b":
        centers = _H3_CENTERS + np.array([0.1, -0.1, 0.05])
        return HarmonicNetwork(centers, [1.4, 1.0, 0.8], [(0, 1), (1, 2)], 1.5, z=[6, 6, 8])
    if name == "chain5":
        return BondedChain([6, 6, 7, 8, 1], [(0, 1), (1, 2), (2, 3), (3, 4)])
    if name == "doublewell-1d":
        return PlanarWell(dims=1, kind="double", height=2.5, width=1.5, tilt=0.3)
    if name == "doublewell-2d":
        return PlanarWell(dims=2, kind="double", height=2.0, width=1.2, tilt=0.2,
                          k_y=1.5, coupling=0.3)
    if name == "singlewell-2d":
        return PlanarWell(dims=2, kind="single", k_x=1.2, x0=0.3, k_y=1.0, coupling=0.2)
    raise KeyError(f"unknown toy system {name!r}")


SYSTEMS = ("uniform-1", "gaussian-1d", "gaussian-3", "harmonic3", "harmonic3b", "chain5",
           "doublewell-1d", "doublewell-2d", "singlewell-2d")
