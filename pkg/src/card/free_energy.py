"""
Free energy estimators in reduced units (beta = 1).

Conventions
-----------
``du_f`` holds ``u_b(x) - u_a(x)`` for samples from state a and ``du_r``
holds ``u_a(x) - u_b(x)`` for samples from state b.  Every estimator returns
``F_b - F_a`` with ``F = -log Z``.  Uncertainties come from a stratified
bootstrap with a fixed seed, so reruns are bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ShapeError
from .toy import decorrelate, metropolis_sample

logger = logging.getLogger(__name__)

KB_KCAL = 0.0019872041  # kcal/(mol K)
TEMPERATURE = 300.0
KT_KCAL = KB_KCAL * TEMPERATURE
N_BOOTSTRAP = 200


def to_kcal(value):
    """Reduced free energy -> kcal/mol at 300 K."""
    return value * KT_KCAL


@dataclass
class FreeEnergyEstimate:
    """One free energy (difference) with its uncertainty and diagnostics.

    ``value`` and ``stderr`` are in reduced units; ``kcal`` and ``stderr_kcal``
    convert at 300 K.
    """

    value: float
    stderr: float
    estimator: str
    n_samples: tuple = ()
    n_eff: tuple = ()
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def kcal(self):
        return to_kcal(self.value)

    @property
    def stderr_kcal(self):
        return to_kcal(self.stderr)

    def as_dict(self):
        out = dict(estimator=self.estimator, value=self.value, stderr=self.stderr,
                   value_kcal=self.kcal, stderr_kcal=self.stderr_kcal,
                   iterations=self.iterations)
        for i, n in enumerate(self.n_samples):
            out[f"n_samples_{i}"] = n
        for i, n in enumerate(self.n_eff):
            out[f"ess_{i}"] = n
        out.update(self.diagnostics)
        if self.warnings:
            out["warnings"] = "; ".join(self.warnings)
        return out


@dataclass
class ReducedEnergyMatrix:
    """Reduced energies ``u_kn`` of every sample under every state.

    Samples are grouped by the state that generated them: the first ``N_0``
    columns come from state 0, the next ``N_1`` from state 1, and so on.
    """

    u_kn: np.ndarray
    N_k: np.ndarray
    labels: list = None

    def __post_init__(self):
        self.u_kn = np.asarray(self.u_kn, dtype=np.float64)
        self.N_k = np.asarray(self.N_k, dtype=np.int64)
        if self.u_kn.ndim != 2 or len(self.N_k) != self.u_kn.shape[0]:
            raise ShapeError("u_kn must be (K, M) with one count per state")
        if self.N_k.sum() != self.u_kn.shape[1] or np.any(self.N_k < 0):
            raise ShapeError("sample counts must be non-negative and sum to M")
        if not np.all(np.isfinite(self.u_kn)):
            raise ValueError("reduced energies must be finite")
        if self.labels is None:
            self.labels = [f"state{k}" for k in range(len(self.N_k))]

    @property
    def K(self):
        return len(self.N_k)

    @classmethod
    def from_blocks(cls, blocks, labels=None):
        """Build from per-state sample blocks; ``blocks[i]`` is ``(K, N_i)``."""
        blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        return cls(np.concatenate(blocks, axis=1), [b.shape[1] for b in blocks], labels)

    def state_slices(self):
        edges = np.concatenate([[0], np.cumsum(self.N_k)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def resample(self, rng):
        cols = []
        for sl in self.state_slices():
            n = sl.stop - sl.start
            if n:
                cols.append(sl.start + rng.integers(0, n, size=n))
        return ReducedEnergyMatrix(self.u_kn[:, np.concatenate(cols)], self.N_k, self.labels)


def _lse(a, axis=-1):
    m = a.max(axis=axis, keepdims=True)
    return np.log(np.exp(a - m).sum(axis=axis)) + np.squeeze(m, axis)


def logsumexp(a):
    return float(_lse(np.asarray(a, dtype=np.float64), 0))


# -----------------------------------------------------------------------------
# diagnostics
# -----------------------------------------------------------------------------

def ess_overlap(logw):
    """Effective sample size (sum w)^2 / sum w^2 of importance log-weights."""
    logw = np.asarray(logw, dtype=np.float64).ravel()
    if logw.size == 0:
        raise ValueError("at least one weight is required")
    w = np.exp(logw - logw.max())
    return float(w.sum() ** 2 / (w * w).sum())


def _bootstrap(fn, arrays, n_boot, seed):
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        vals.append(fn(*[a[rng.integers(0, len(a), size=len(a))] for a in arrays]))
    return float(np.std(vals, ddof=1)) if n_boot > 1 else 0.0


# -----------------------------------------------------------------------------
# two-state estimators
# -----------------------------------------------------------------------------

def _fep_value(du):
    return -(logsumexp(-du) - math.log(len(du)))


def zwanzig_fep(du, n_boot=N_BOOTSTRAP, seed=0):
    """Exponential averaging: -log < exp(-du) >_a."""
    du = np.asarray(du, dtype=np.float64).ravel()
    if du.size < 2:
        raise ValueError("FEP needs at least two samples")
    value = _fep_value(du)
    err = _bootstrap(_fep_value, [du], n_boot, seed)
    return FreeEnergyEstimate(value, err, "fep", (du.size,), (ess_overlap(-du),))


def _log_fermi(x):
    # log 1/(1+e^x)
    return -np.logaddexp(0.0, x)


def _bar_residual(df, du_f, du_r, M):
    return logsumexp(_log_fermi(M + du_f - df)) - logsumexp(_log_fermi(-M + du_r + df))


def _bar_solve(du_f, du_r, tol=1e-10, max_iter=500):
    """Self-consistent Bennett iteration with a bisection fallback."""
    nf, nr = len(du_f), len(du_r)
    M = math.log(nf / nr)
    # start from the mean of the two one-sided estimates
    df = 0.5 * (_fep_value(du_f) - _fep_value(du_r))
    if not np.isfinite(df):
        df = 0.0
    for it in range(1, max_iter + 1):
        C = df - M
        new = (C + logsumexp(_log_fermi(du_r + C)) - math.log(nr)
               - logsumexp(_log_fermi(du_f - C)) + math.log(nf))
        if abs(new - df) < tol:
            return float(new), it
        df = new
    # bisection on the monotone residual
    lo, hi = df - 1.0, df + 1.0
    for _ in range(200):
        if _bar_residual(lo, du_f, du_r, M) < 0 < _bar_residual(hi, du_f, du_r, M):
            break
        lo, hi = lo - 2 * (hi - lo), hi + 2 * (hi - lo)
    else:
        raise ConvergenceError("BAR root could not be bracketed", last=df, bracket=(lo, hi))
    for it2 in range(200):
        mid = 0.5 * (lo + hi)
        if _bar_residual(mid, du_f, du_r, M) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            return float(0.5 * (lo + hi)), max_iter + it2 + 1
    raise ConvergenceError("BAR bisection did not converge", last=0.5 * (lo + hi), bracket=(lo, hi))


def bar(du_f, du_r, n_boot=N_BOOTSTRAP, seed=0):
    """Bennett acceptance ratio with the Fermi function and self-consistent offset."""
    du_f = np.asarray(du_f, dtype=np.float64).ravel()
    du_r = np.asarray(du_r, dtype=np.float64).ravel()
    if du_f.size == 0 or du_r.size == 0:
        raise ValueError("BAR needs samples from both states")
    value, iters = _bar_solve(du_f, du_r)
    err = _bootstrap(lambda f, r: _bar_solve(f, r)[0], [du_f, du_r], n_boot, seed)
    n_eff = (ess_overlap(-du_f), ess_overlap(-du_r))
    return FreeEnergyEstimate(value, err, "bar", (du_f.size, du_r.size), n_eff, iters)


# -----------------------------------------------------------------------------
# MBAR
# -----------------------------------------------------------------------------

@dataclass
class MbarResult:
    f: np.ndarray
    cov: np.ndarray
    iterations: int
    labels: list

    @property
    def stderr(self):
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def delta(self, i=0, j=-1):
        """F_j - F_i with its bootstrap standard error."""
        K = len(self.f)
        i, j = i % K, j % K
        var = self.cov[i, i] + self.cov[j, j] - 2.0 * self.cov[i, j]
        return float(self.f[j] - self.f[i]), float(math.sqrt(max(var, 0.0)))


def _mbar_log_denominator(u_kn, log_N, f):
    return _lse(log_N[:, None] + f[:, None] - u_kn, 0)


def _mbar_self_consistent(u_kn, log_N, f):
    log_d = _mbar_log_denominator(u_kn, log_N, f)
    new = -_lse(-u_kn - log_d[None, :], 1)
    return new - new[0]


def _mbar_solve(u_kn, N_k, f0=None, tol=1e-9, max_iter=10000):
    """Newton iterations on the convex MBAR objective over sampled states.

    Falls back to a self-consistent sweep whenever the Newton step is not
    usable.  Unsampled states are filled in by one final sweep.
    """
    K = len(N_k)
    with np.errstate(divide="ignore"):
        log_N = np.log(N_k.astype(np.float64))
    idx = np.nonzero(N_k > 0)[0]
    Ns = N_k[idx].astype(np.float64)
    u_s = u_kn[idx]
    f = _mbar_self_consistent(u_kn, log_N, np.zeros(K)) if f0 is None else np.array(f0, dtype=np.float64)
    fs = f[idx] - f[idx[0]]
    delta = math.inf
    for it in range(1, max_iter + 1):
        logw = fs[:, None] - u_s
        log_d = _lse(np.log(Ns)[:, None] + logw, 0)
        W = np.exp(logw - log_d[None, :])
        colsum = W.sum(axis=1)
        grad = Ns * colsum - Ns
        NW = Ns[:, None] * W
        Hm = np.diag(Ns * colsum) - NW @ NW.T
        new = None
        if len(idx) > 1:
            try:
                step = np.linalg.solve(Hm[1:, 1:], grad[1:])
                if np.all(np.isfinite(step)) and np.max(np.abs(step)) < 10.0:
                    new = fs.copy()
                    new[1:] -= step
            except np.linalg.LinAlgError:
                pass
        if new is None:
            sc = -_lse(-u_s - log_d[None, :], 1)
            new = sc - sc[0]
        delta = float(np.max(np.abs(new - fs)))
        fs = new
        if delta < tol:
            break
    else:
        raise ConvergenceError("MBAR did not converge", residual=delta, iterations=max_iter)
    f = np.zeros(K)
    f[idx] = fs
    if len(idx) < K:
        f = _mbar_self_consistent(u_kn, log_N, f)
    else:
        f = f - f[0]
    return f, it


def mbar(m, n_boot=N_BOOTSTRAP, seed=0):
    """Solve the MBAR equations; free energies anchored at state 0.

    Parameters
    ----------
    m : ReducedEnergyMatrix
    n_boot : int
        Stratified bootstrap resamples used for the covariance.

    Returns
    -------
    MbarResult
    """
    if m.K < 2:
        raise ValueError("MBAR needs at least two states")
    if np.count_nonzero(m.N_k) < 1:
        raise ValueError("MBAR needs samples")
    f, iters = _mbar_solve(m.u_kn, m.N_k)
    cov = np.zeros((m.K, m.K))
    if n_boot > 1:
        rng = np.random.default_rng(seed)
        boots = np.array([_mbar_solve(m.resample(rng).u_kn, m.N_k, f)[0] for _ in range(n_boot)])
        cov = np.cov(boots, rowvar=False)
    return MbarResult(f, np.atleast_2d(cov), iters, list(m.labels))


def mbar_estimate(m, i=0, j=-1, n_boot=N_BOOTSTRAP, seed=0):
    """MBAR result for F_j - F_i wrapped as a FreeEnergyEstimate."""
    res = mbar(m, n_boot, seed)
    value, err = res.delta(i, j)
    return FreeEnergyEstimate(value, err, "mbar", tuple(int(n) for n in m.N_k),
                              iterations=res.iterations,
                              diagnostics=dict(states=",".join(m.labels)))


# -----------------------------------------------------------------------------
# absolute free energy against a normalised proposal
# -----------------------------------------------------------------------------

MIN_ESS = 10.0


def absolute_free_energy(logq_model, u_model, logq_target, u_target, n_boot=N_BOOTSTRAP, seed=0):
    """Absolute reduced free energy of a target from a normalised proposal.

    The proposal energy is ``-log q`` and has free energy exactly zero, so the
    MBAR difference between the two states is the target's ``-log Z``.

    Parameters
    ----------
    logq_model, u_model : array_like
        ``log q`` and the target reduced energy on proposal samples.
    logq_target, u_target : array_like
        ``log q`` and the target reduced energy on target samples.

    Returns
    -------
    FreeEnergyEstimate
        ``n_eff`` holds the ESS of reweighting proposal samples to the target
        and of target samples to the proposal.
    """
    lqm = np.asarray(logq_model, dtype=np.float64).ravel()
    um = np.asarray(u_model, dtype=np.float64).ravel()
    lqt = np.asarray(logq_target, dtype=np.float64).ravel()
    ut = np.asarray(u_target, dtype=np.float64).ravel()
    if len(lqm) != len(um) or len(lqt) != len(ut):
        raise ShapeError("log q and energies must be paired per sample")
    m = ReducedEnergyMatrix.from_blocks(
        [np.stack([-lqm, um]), np.stack([-lqt, ut])], labels=["proposal", "target"])
    res = mbar(m, n_boot, seed)
    value, err = res.delta(0, 1)
    ess_f = ess_overlap(lqm - um)
    ess_r = ess_overlap(ut + lqt)
    est = FreeEnergyEstimate(value, err, "absolute", (len(lqm), len(lqt)), (ess_f, ess_r),
                             res.iterations, diagnostics=dict(states="proposal,target"))
    if ess_f < MIN_ESS and ess_r < MIN_ESS:
        msg = f"poor overlap: ESS {ess_f:.1f} (proposal->target), {ess_r:.1f} (target->proposal)"
        logger.warning(msg)
        est.warnings.append(msg)
    return est


def harmonic_mean_ess(est):
    """Harmonic mean of the two directional ESS values of an estimate."""
    a, b = est.n_eff
    if a <= 0 or b <= 0:
        return 0.0
    return 2.0 * a * b / (a + b)


# -----------------------------------------------------------------------------
# lambda-interpolated multistate reference
# -----------------------------------------------------------------------------

class InterpolatedPotential:
    """U_lambda = (1 - lambda) U_a + lambda U_b on a shared configuration space."""

    def __init__(self, pot_a, pot_b, lam):
        if pot_a.n_atoms != pot_b.n_atoms:
            raise ShapeError("end states must have the same number of atoms")
        self.a, self.b, self.lam = pot_a, pot_b, float(lam)
        self.z, self.bonds, self.box = pot_a.z, pot_a.bonds, pot_a.box

    @property
    def n_atoms(self):
        return self.a.n_atoms

    def energy(self, x):
        return (1.0 - self.lam) * self.a.energy(x) + self.lam * self.b.energy(x)

    def equilibrium(self):
        return self.a.equilibrium() if self.lam < 0.5 else self.b.equilibrium()


def mfes_reference(pot_a, pot_b, rng, n_windows=11, n_steps=20000, step_size=0.5,
                   n_chains=8, burn_in=2000, n_boot=N_BOOTSTRAP, seed=0):
    """Endstate free energy difference from an evenly spaced lambda ladder.

    Each window is sampled by Metropolis, decorrelated, and all frames are
    evaluated under every window energy for a joint MBAR solve.
    """
    lams = np.linspace(0.0, 1.0, n_windows)
    states = [InterpolatedPotential(pot_a, pot_b, l) for l in lams]
    blocks = []
    frames = []
    for st in states:
        traj = decorrelate(metropolis_sample(st, n_steps, step_size, rng, n_chains=n_chains,
                                             burn_in=burn_in))
        frames.append(traj.frames)
    for fr in frames:
        blocks.append(np.stack([s.energy(fr) for s in states]))
    m = ReducedEnergyMatrix.from_blocks(blocks, labels=[f"lambda={l:.2f}" for l in lams])
    est = mbar_estimate(m, 0, -1, n_boot, seed)
    est.estimator = "mfes"
    return est
