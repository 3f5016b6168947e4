"""
Training and autoregressive inference.

Training minimises ``lam1 * NLL + lam2 * energy_alignment`` with AdamW, a
linear warm-up followed by cosine decay, and global-norm gradient clipping.
A new atom ordering is drawn for every mini-batch.  Inference draws digit
triples coarse-to-fine and then the residuals, recording the exact log-density
of every draw.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import radix
from . import tensor as T
from .conformer import SystemContext, random_ordering
from .errors import ConfigError, NumericalError
from .heads import bmm_log_prob_t, digit_sample, sample_beta, sample_categorical

logger = logging.getLogger(__name__)


# -----------------------------------------------------------------------------
# losses
# -----------------------------------------------------------------------------

def nll_loss(logq, n_atoms):
    """Mean negative log-likelihood per atom: -sum(logq) / (B N)."""
    logq = T.as_tensor(logq)
    B = logq.shape[0] if logq.ndim else 1
    if B < 1:
        raise ConfigError("empty batch")
    return logq.sum() * (-1.0 / (B * n_atoms))


def energy_loss(u_model, u_target):
    """Mean absolute deviation between batch-centred model and target energies.

    ``u_model`` is ``-log q`` (a Tensor or array); ``u_target`` holds exact
    reduced energies.  Needs at least two samples.
    """
    u_model = T.as_tensor(u_model)
    u_target = np.asarray(u_target, dtype=np.float64)
    B = u_model.shape[0]
    if B < 2 or len(u_target) != B:
        raise ConfigError("energy alignment needs a batch of at least two matched energies")
    um = u_model - T.mean(u_model)
    ut = u_target - u_target.mean()
    return T.mean(T.abs_(um - ut))


# -----------------------------------------------------------------------------
# configuration, optimiser, schedule
# -----------------------------------------------------------------------------

STAGES = {
    "I": dict(lam1=1.0, lam2=0.0, lr=1e-3),
    "II": dict(lam1=1.0, lam2=0.01, lr=2e-4),
}


@dataclass
class TrainConfig:
    """Optimisation settings for one training stage."""

    stage: str = "I"
    batch: int = 64
    lam1: float = 1.0
    lam2: float = 0.0
    lr: float = 1e-3
    warmup: int = 4000
    cycle: int = 100000
    min_lr: float = 1e-6
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-2
    clip: float = 1.0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected I or II")
        if self.batch < 1:
            raise ConfigError("batch must be positive")
        if self.lam2 > 0 and self.batch < 2:
            raise ConfigError("energy alignment needs batch >= 2")
        if self.lr <= 0 or self.warmup < 0 or self.cycle < 1:
            raise ConfigError("invalid learning-rate schedule")
        self.betas = tuple(self.betas)

    @classmethod
    def for_stage(cls, stage, **kw):
        base = dict(STAGES[stage], stage=stage)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


def lr_at(step, cfg):
    """Learning rate for the ``step``-th update (1-based).

    Linear ramp to ``cfg.lr`` over ``cfg.warmup`` updates, then a cosine decay
    to ``cfg.min_lr`` over ``cfg.cycle`` updates, held at the floor afterwards.
    """
    if cfg.warmup and step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup
    t = min((step - cfg.warmup) / cfg.cycle, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.95), weight_decay=1e-2, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return dict(t=self.t, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Conformations ``(B, N, 3)`` in original atom order with exact energies."""

    x: np.ndarray
    energies: np.ndarray
    ctx: SystemContext


def batch_loss(model, batch, cfg, ordering):
    """Total loss Tensor plus its parts for one batch under ``ordering``."""
    prep = model.prepare(batch.ctx, ordering)
    h_e = model.encode(prep)
    x = model.target_frame(batch.x, prep)
    logq, _ = model.decode_log_prob(h_e, x, prep)
    nll = nll_loss(logq, prep.n_atoms)
    loss = nll * cfg.lam1
    parts = dict(nll=float(nll.data))
    if cfg.lam2 > 0:
        el = energy_loss(-logq, batch.energies)
        loss = loss + el * cfg.lam2
        parts["energy"] = float(el.data)
    return loss, parts


class Trainer:
    """Holds the model, optimiser and step counter for one stage."""

    def __init__(self, model, cfg, seed=0):
        self.model = model
        self.cfg = cfg
        self.opt = AdamW(model.parameters(), cfg.betas, cfg.weight_decay, cfg.adam_eps)
        self.rng = np.random.default_rng(seed)
        self.step_count = 0

    def step(self, batch):
        """One optimisation step; raises NumericalError without touching params."""
        ordering = random_ordering(batch.ctx, self.rng, self.model.cfg.ordering)
        loss, parts = batch_loss(self.model, batch, self.cfg, ordering)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss {float(loss.data)} at step {self.step_count + 1}: {parts}")
        self.model.zero_grad()
        loss.backward()
        params = self.opt.params
        gnorm = clip_grad_norm(params, self.cfg.clip)
        if not np.isfinite(gnorm):
            raise NumericalError(f"non-finite gradient norm at step {self.step_count + 1}")
        lr = lr_at(self.step_count + 1, self.cfg)
        self.opt.step(lr)
        self.step_count += 1
        return dict(parts, loss=float(loss.data), lr=lr, grad_norm=gnorm, step=self.step_count)


def train_step(model, batch, cfg, trainer=None):
    """Convenience wrapper: one step with a (possibly fresh) :class:`Trainer`."""
    trainer = trainer or Trainer(model, cfg)
    return trainer.step(batch)


def evaluate(model, ctx, x, energies, batch=512):
    """Validation NLL per atom and energy-alignment loss under the inference ordering."""
    logq = model.log_prob(ctx, x, batch=batch)
    n = ctx.n_atoms
    out = dict(nll=float(-logq.mean() / n))
    if len(logq) >= 2:
        out["energy"] = float(energy_loss(-logq, energies).data)
    return out


def converged(history, tol=1e-3, window=5):
    """True once validation NLL/atom improved by less than ``tol`` over ``window`` epochs."""
    if len(history) <= window:
        return False
    vals = [h["val_nll"] for h in history]
    return vals[-window - 1] - min(vals[-window:]) < tol


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict = None
    stopped_early: bool = False


def fit(model, ctx, train, val, cfg, epochs, seed=0, init_state=None, steps_per_epoch=None,
        stop_on_convergence=False, callback=None, tol=1e-3, window=5):
    """Train for ``epochs`` passes over ``train``.

    Parameters
    ----------
    train, val : Trajectory
        Frames and exact energies; validation scoring uses the fixed inference ordering.
    init_state : dict, optional
        Stage I parameters.  Required for Stage II.
    steps_per_epoch : int, optional
        Cap on mini-batches per epoch (default: one full pass).
    callback : callable, optional
        Called as ``callback(epoch, record, model)`` after each epoch.

    Returns
    -------
    FitResult
    """
    if cfg.stage == "II" and init_state is None:
        raise ConfigError("stage II requires the parameters of a finished stage I run")
    if init_state is not None:
        model.load_state_dict(init_state)
    trainer = Trainer(model, cfg, seed)
    rng = np.random.default_rng(seed + 1)
    res = FitResult()
    best = math.inf
    n = len(train)
    per_epoch = max(1, n // cfg.batch)
    if steps_per_epoch:
        per_epoch = min(per_epoch, steps_per_epoch)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            rec = trainer.step(TrainBatch(train.frames[idx], train.energies[idx], ctx))
            losses.append(rec["loss"])
        ev = evaluate(model, ctx, val.frames, val.energies)
        record = dict(epoch=epoch, train_loss=float(np.mean(losses)), val_nll=ev["nll"],
                      val_energy=ev.get("energy", math.nan), steps=trainer.step_count)
        res.history.append(record)
        logger.info("epoch %d train %.4f val_nll %.4f val_energy %.4f", epoch,
                    record["train_loss"], record["val_nll"], record["val_energy"])
        if record["val_nll"] < best:
            best = record["val_nll"]
            res.best_epoch = epoch
            res.best_state = model.state_dict()
        if callback is not None:
            callback(epoch, record, model)
        if stop_on_convergence and converged(res.history, tol, window):
            res.stopped_early = True
            break
    return res


# -----------------------------------------------------------------------------
# inference
# -----------------------------------------------------------------------------

def sample(model, ctx, n, rng, ordering=None, batch=500):
    """Draw ``n`` conformations and their exact log-densities.

    Returns
    -------
    x : ndarray (n, N, 3)
        Samples in the original atom order.
    logq : ndarray (n,)
        Sum of the log-probabilities of every digit and residual draw.
    """
    xs, lps = [], []
    with T.no_grad():
        prep = model.prepare(ctx, ordering)
        h_e = model.encode(prep)
        for s in range(0, n, batch):
            x, lp = _sample_block(model, prep, h_e, min(batch, n - s), rng)
            xs.append(prep.ordering.restore(x))
            lps.append(lp)
    n_atoms = ctx.n_atoms
    if not xs:
        return np.zeros((0, n_atoms, 3)), np.zeros(0)
    return np.concatenate(xs), np.concatenate(lps)


def _sample_block(model, prep, h_e, B, rng):
    cfg = model.cfg
    rc = cfg.radix
    n, L, r = prep.n_atoms, cfg.L, cfg.r
    S = n * (L + 1)
    NL = n * L
    xprime = np.zeros((B, S, 3))
    words = np.zeros((B, n, 3), dtype=np.int64)
    logq = np.zeros(B)
    for p in range(NL):
        depth, atom = p // n + 1, p % n
        h = model.decode(h_e, xprime, prep)
        logits = model.digit_head(h[:, p, :]).data
        k, triple = digit_sample(logits, rng, r)
        logq += logits[np.arange(B), k]
        words[:, atom] = words[:, atom] * r + triple
        xprime[:, p] = radix.truncation(words[:, atom], depth, rc)
    head = model.residual_head
    x = np.zeros((B, n, 3))
    base = radix.truncation(words, L, rc)
    for atom in range(n):
        p = NL + atom
        h = model.decode(h_e, xprime, prep)
        feats = head.first(h[:, p, :])
        for j in range(3):
            if j:
                feats = head.next(j - 1, feats, v)
            log_w, alpha, beta = head.terms(feats)
            comp = sample_categorical(np.exp(log_w.data), rng)
            pick = comp[:, None]
            a = np.take_along_axis(alpha.data, pick, axis=-1)[:, 0]
            b = np.take_along_axis(beta.data, pick, axis=-1)[:, 0]
            v_raw = sample_beta(a, b, rng)
            # condition and score on the value the codec recovers from the coordinate
            coord = base[:, atom, j] + v_raw * rc.cell
            v = (coord - base[:, atom, j]) / rc.cell
            x[:, atom, j] = coord
            logq += bmm_log_prob_t(log_w, alpha, beta, v).data
        logq += rc.log_jacobian
        xprime[:, p] = x[:, atom]
    return x, logq


def batch_logprob(model, ctx, confs, ordering=None, batch=512):
    """Exact log q for a list/array of conformations in original atom order."""
    confs = np.asarray(confs, dtype=np.float64)
    if confs.ndim == 2:
        confs = confs[None]
    return model.log_prob(ctx, confs, ordering=ordering, batch=batch)


def make_context(z, bonds, frames, R, rng):
    """SystemContext whose references are ``R`` frames drawn without replacement."""
    frames = np.asarray(frames)
    idx = np.sort(rng.choice(len(frames), size=min(R, len(frames)), replace=False))
    return SystemContext(z, list(bonds), frames[idx])
