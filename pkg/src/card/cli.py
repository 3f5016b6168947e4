"""
Command-line entry point: ``card <subcommand> [options]``.

Every option may also come from an INI file passed with ``--config``; the
section named after the subcommand supplies defaults and explicit flags win.
``CARD_SEED`` is the fallback seed when ``--seed`` is not given.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from . import free_energy as fe
from . import io
from . import pipeline
from .conformer import detect_degeneracy
from .errors import (AlignmentError, CardError, ConfigError, ConvergenceError, NumericalError,
                     UnsupportedError)
from .model import CardModel, ModelConfig
from .toy import SYSTEMS, Trajectory, decorrelate, make_system, metropolis_sample

logger = logging.getLogger("card")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CARD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CARD_SEED must be an integer, got {env!r}") from None


def _system(name):
    try:
        return make_system(name)
    except KeyError:
        raise UsageError(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}") from None


def _write_report(path, fields, title):
    text = io.report_text(fields, title)
    if path:
        with io.atomic_write(path, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _base_fields(args, seed):
    return dict(tool="card", version=__version__, command=args.command, seed=seed)


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------

def cmd_gen_data(args):
    seed = _seed(args)
    pot = _system(args.system)
    rng = np.random.default_rng(seed)
    traj = metropolis_sample(pot, args.steps, args.step_size, rng, n_chains=args.chains,
                             burn_in=args.burn_in, thin=args.thin)
    acc = traj.meta["acceptance"]
    if not args.no_decorrelate:
        traj = decorrelate(traj)
    io.write_trajectory(args.out, traj)
    fields = _base_fields(args, seed)
    fields.update(system=args.system, frames=len(traj), acceptance=acc,
                  step_size=traj.meta["step_size"],
                  statistical_inefficiency=traj.meta.get("statistical_inefficiency", 1.0),
                  output=args.out)
    try:
        fields["reference_free_energy"] = -pot.log_partition()
    except UnsupportedError:
        pass
    _write_report(args.report, fields, "gen-data")
    return EXIT_OK


def _model_config(args):
    return ModelConfig(H=args.hidden, heads=args.heads, layers=args.layers, K=args.mixtures,
                       R=args.references, ordering=args.ordering, align=args.align)


def cmd_train(args):
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    seed = _seed(args)
    data = io.read_trajectory(args.data)
    val = io.read_trajectory(args.val) if args.val else None
    rng = np.random.default_rng(seed)
    if val is None:
        perm = rng.permutation(len(data))
        n_val = max(2, len(data) // 10)
        val, data = data.subset(perm[:n_val]), data.subset(perm[n_val:])
    init_state = None
    if args.init:
        ck = io.read_checkpoint(args.init)
        if args.stage == "II" and ck.meta.get("stage") != "I":
            raise ConfigError("stage II must start from a stage I checkpoint")
        model = io.load_model(ck)
        ctx = ck.context
        init_state = ck.state
    else:
        if args.stage == "II":
            raise ConfigError("stage II requires --init with a stage I checkpoint")
        model = CardModel(_model_config(args), seed=seed)
        if args.zero_heads:
            model.zero_heads_()
        ctx = pipeline.make_context(data.z, data.bonds, data.frames, model.cfg.R, rng)
    overrides = {k: v for k, v in dict(lr=args.lr, batch=args.batch, warmup=args.warmup).items()
                 if v is not None}
    tcfg = pipeline.TrainConfig.for_stage(args.stage, **overrides)
    os.makedirs(args.out, exist_ok=True)
    fields = _base_fields(args, seed)
    if args.epochs == 0:
        # untrained checkpoint, e.g. the uniform proposal with --zero-heads
        ck = io.model_checkpoint(model, ctx, stage=args.stage, epoch=-1, seed=seed)
        io.write_checkpoint(os.path.join(args.out, "best.ckpt"), ck)
        fields.update(stage=args.stage, epochs=0)
        _write_report(args.report, fields, "train")
        return EXIT_OK

    def on_epoch(epoch, record, m):
        ck = io.model_checkpoint(m, ctx, stage=args.stage, epoch=epoch, seed=seed,
                                 val_nll=record["val_nll"], train=tcfg.to_dict())
        io.write_checkpoint(os.path.join(args.out, f"epoch_{epoch:03d}.ckpt"), ck)

    res = pipeline.fit(model, ctx, data, val, tcfg, args.epochs, seed=seed, init_state=init_state,
                       steps_per_epoch=args.steps_per_epoch,
                       stop_on_convergence=args.stop_on_convergence, callback=on_epoch)
    model.load_state_dict(res.best_state)
    best = res.history[res.best_epoch]
    ck = io.model_checkpoint(model, ctx, stage=args.stage, epoch=res.best_epoch, seed=seed,
                             val_nll=best["val_nll"], train=tcfg.to_dict())
    io.write_checkpoint(os.path.join(args.out, "best.ckpt"), ck)
    if args.plot:
        from .plotting import training_curve

        training_curve(res.history, os.path.join(args.out, "training.png"))
    fields.update(stage=args.stage, epochs=len(res.history), best_epoch=res.best_epoch,
                  best_val_nll=best["val_nll"], best_val_energy=best["val_energy"],
                  steps=best["steps"], stopped_early=res.stopped_early)
    _write_report(args.report, fields, "train")
    return EXIT_OK


def _load(path):
    ck = io.read_checkpoint(path)
    if ck.context is None:
        raise ConfigError(f"checkpoint {path} carries no system context")
    return io.load_model(ck), ck.context


def cmd_sample(args):
    seed = _seed(args)
    model, ctx = _load(args.checkpoint)
    x, logq = pipeline.sample(model, ctx, args.n, np.random.default_rng(seed))
    traj = Trajectory(x, -logq, ctx.z, ctx.bonds)
    io.write_trajectory(args.out, traj)
    fields = _base_fields(args, seed)
    fields.update(n=args.n, mean_logq=float(logq.mean()) if len(logq) else float("nan"),
                  output=args.out)
    _write_report(args.report, fields, "sample")
    return EXIT_OK


def cmd_logprob(args):
    model, ctx = _load(args.checkpoint)
    traj = io.read_trajectory(args.traj)
    logq = pipeline.batch_logprob(model, ctx, traj.frames)
    lines = ["index\tlogq"] + [f"{i}\t{v!r}" for i, v in enumerate(logq.tolist())]
    with io.atomic_write(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    fields = _base_fields(args, None)
    fields.update(frames=len(logq), mean_logq=float(logq.mean()) if len(logq) else float("nan"),
                  output=args.out)
    _write_report(args.report, fields, "logprob")
    return EXIT_OK


def _energies(pot, frames):
    return pot.energy(frames) if len(frames) else np.zeros(0)


def cmd_estimate(args):
    seed = _seed(args)
    fields = _base_fields(args, seed)
    ref = None
    if args.method in ("fep", "bar"):
        if not (args.system_a and args.traj_a):
            raise UsageError("fep/bar need --system-a and --traj-a")
        pa = _system(args.system_a)
        pb = _system(args.system_b or args.system_a)
        ta = io.read_trajectory(args.traj_a)
        du_f = _energies(pb, ta.frames) - _energies(pa, ta.frames)
        if args.method == "fep":
            est = fe.zwanzig_fep(du_f, args.bootstrap, seed)
        else:
            if not args.traj_b:
                raise UsageError("bar needs --traj-b")
            tb = io.read_trajectory(args.traj_b)
            du_r = _energies(pa, tb.frames) - _energies(pb, tb.frames)
            est = fe.bar(du_f, du_r, args.bootstrap, seed)
        fields.update(states=f"{args.system_a},{args.system_b or args.system_a}")
        ref = _reference_delta(pa, pb)
    elif args.method == "mbar":
        names = [s for s in (args.systems or "").split(",") if s]
        paths = [s for s in (args.trajs or "").split(",") if s]
        if len(names) < 2 or len(names) != len(paths):
            raise UsageError("mbar needs matching --systems and --trajs lists (>= 2)")
        pots = [_system(n) for n in names]
        blocks = []
        for path in paths:
            fr = io.read_trajectory(path).frames
            blocks.append(np.stack([_energies(p, fr) for p in pots]))
        m = fe.ReducedEnergyMatrix.from_blocks(blocks, names)
        est = fe.mbar_estimate(m, 0, -1, args.bootstrap, seed)
        ref = _reference_delta(pots[0], pots[-1])
    elif args.method == "mfes":
        if not (args.system_a and args.system_b):
            raise UsageError("mfes needs --system-a and --system-b")
        pa, pb = _system(args.system_a), _system(args.system_b)
        est = fe.mfes_reference(pa, pb, np.random.default_rng(seed), n_windows=args.windows,
                                n_steps=args.steps, n_chains=args.chains, burn_in=args.burn_in,
                                n_boot=args.bootstrap, seed=seed)
        fields.update(states=f"{args.system_a},{args.system_b}", windows=args.windows)
        ref = _reference_delta(pa, pb)
    elif args.method == "absolute":
        est, ref = _absolute(args, seed)
    else:
        raise UsageError(f"unknown method {args.method!r}")
    fields.update(est.as_dict())
    if est.n_eff and len(est.n_eff) == 2:
        fields["ess_harmonic"] = fe.harmonic_mean_ess(est)
    if ref is not None:
        fields["reference"] = ref
        fields["error"] = est.value - ref
    _write_report(args.report, fields, f"estimate {args.method}")
    return EXIT_OK


def _reference_delta(pa, pb):
    try:
        return pa.log_partition() - pb.log_partition()
    except UnsupportedError:
        return None


def _absolute(args, seed):
    if not (args.checkpoint and args.target and args.system_a):
        raise UsageError("absolute needs --checkpoint, --target and --system-a")
    model, ctx = _load(args.checkpoint)
    pot = _system(args.system_a)
    target = io.read_trajectory(args.target)
    if args.samples:
        s = io.read_trajectory(args.samples)
        xs, lq_s = s.frames, -s.energies
    else:
        xs, lq_s = pipeline.sample(model, ctx, args.n, np.random.default_rng(seed))
    u_t = target.energies if not args.recompute else _energies(pot, target.frames)
    lq_t = pipeline.batch_logprob(model, ctx, target.frames)
    est = fe.absolute_free_energy(lq_s, _energies(pot, xs), lq_t, u_t, args.bootstrap, seed)
    try:
        ref = -pot.log_partition()
    except UnsupportedError:
        ref = None
    return est, ref


def cmd_diagnose(args):
    seed = _seed(args)
    traj = io.read_trajectory(args.traj)
    fields = _base_fields(args, seed)
    fields["frames"] = len(traj)
    if traj.frames.shape[1] >= 3:
        flags = []
        for x in traj.frames:
            try:
                flags.append(detect_degeneracy(x, args.tol))
            except AlignmentError:
                flags.append(True)
        fields["degenerate_fraction"] = float(np.mean(flags)) if flags else 0.0
    else:
        fields["degenerate_fraction"] = "n/a"
    fields["degeneracy_tol"] = args.tol
    if args.checkpoint:
        if not args.system:
            raise UsageError("ESS diagnostics need --system to evaluate target energies")
        model, ctx = _load(args.checkpoint)
        pot = _system(args.system)
        xs, lq_s = pipeline.sample(model, ctx, args.n, np.random.default_rng(seed))
        lq_t = pipeline.batch_logprob(model, ctx, traj.frames)
        fields["ess_proposal_to_target"] = fe.ess_overlap(lq_s - _energies(pot, xs))
        fields["ess_target_to_proposal"] = fe.ess_overlap(traj.energies + lq_t)
        fields["n_proposal"] = args.n
    _write_report(args.report, fields, "diagnose")
    return EXIT_OK


def cmd_plot(args):
    from .plotting import ess_error_panel, reference_scatter

    reports = [io.read_report(p) for p in args.reports]
    rows = [r for r in reports if isinstance(r.get("reference"), float)]
    if not rows:
        raise ConfigError("no report carries a reference value to plot against")
    pred = [r["value"] for r in rows]
    ref = [r["reference"] for r in rows]
    err = [r.get("stderr", 0.0) for r in rows]
    prefix = args.out
    paths = [reference_scatter(pred, ref, err, f"{prefix}_scatter.png")]
    with_ess = [r for r in rows if isinstance(r.get("ess_harmonic"), float)]
    if with_ess:
        paths.append(ess_error_panel([r["ess_harmonic"] for r in with_ess],
                                     [r["value"] - r["reference"] for r in with_ess],
                                     f"{prefix}_ess_error.png"))
    fields = _base_fields(args, None)
    fields.update(n_reports=len(rows), figures=",".join(paths))
    _write_report(args.report, fields, "plot")
    return EXIT_OK


# -----------------------------------------------------------------------------
# parser
# -----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="card", description="Radix autoregressive density models as free energy proposals")
    p.add_argument("--version", action="version", version=f"card {__version__}")
    p.add_argument("--config", help="INI file; section [<subcommand>] supplies defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, report=True):
        sp.add_argument("--seed", type=int, default=None, help="rng seed (default: $CARD_SEED or 0)")
        if report:
            sp.add_argument("--report", help="write the key = value report here as well")

    g = sub.add_parser("gen-data", help="sample a toy system by Metropolis")
    g.add_argument("--system", required=True, choices=SYSTEMS)
    g.add_argument("--steps", type=int, default=20000)
    g.add_argument("--chains", type=int, default=8)
    g.add_argument("--burn-in", type=int, default=2000)
    g.add_argument("--step-size", type=float, default=0.3)
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--no-decorrelate", action="store_true")
    g.add_argument("--out", required=True)
    common(g)

    t = sub.add_parser("train", help="train a model on a trajectory")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--stage", choices=("I", "II"), default="I")
    t.add_argument("--init", help="checkpoint to start from (required for stage II)")
    t.add_argument("--epochs", type=int, default=10, help="0 writes the untrained model")
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--stop-on-convergence", action="store_true")
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--mixtures", type=int, default=8)
    t.add_argument("--references", type=int, default=10)
    t.add_argument("--ordering", choices=("auto", "topology", "distance", "given"), default="auto")
    t.add_argument("--align", action="store_true", help="PCA-align references and targets")
    t.add_argument("--zero-heads", action="store_true",
                   help="start from zeroed output layers (uniform density on the box)")
    t.add_argument("--plot", action="store_true", help="also write training.png")
    t.add_argument("--out", required=True, help="output directory for checkpoints")
    common(t)

    s = sub.add_parser("sample", help="draw conformations with exact log-densities")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--out", required=True)
    common(s)

    lp = sub.add_parser("logprob", help="score a trajectory under a checkpoint")
    lp.add_argument("--checkpoint", required=True)
    lp.add_argument("--traj", required=True)
    lp.add_argument("--out", required=True)
    common(lp)

    e = sub.add_parser("estimate", help="free energy estimation")
    e.add_argument("method", choices=("fep", "bar", "mbar", "absolute", "mfes"))
    e.add_argument("--system-a")
    e.add_argument("--system-b")
    e.add_argument("--traj-a")
    e.add_argument("--traj-b")
    e.add_argument("--systems", help="comma-separated, for mbar")
    e.add_argument("--trajs", help="comma-separated, for mbar")
    e.add_argument("--checkpoint")
    e.add_argument("--target", help="target trajectory for absolute")
    e.add_argument("--samples", help="proposal samples (default: draw --n)")
    e.add_argument("--n", type=int, default=2000)
    e.add_argument("--recompute", action="store_true", help="re-evaluate target energies")
    e.add_argument("--windows", type=int, default=11)
    e.add_argument("--steps", type=int, default=20000)
    e.add_argument("--chains", type=int, default=8)
    e.add_argument("--burn-in", type=int, default=2000)
    e.add_argument("--bootstrap", type=int, default=fe.N_BOOTSTRAP)
    common(e)

    d = sub.add_parser("diagnose", help="ESS overlap and PCA degeneracy rates")
    d.add_argument("--traj", required=True)
    d.add_argument("--checkpoint")
    d.add_argument("--system")
    d.add_argument("--n", type=int, default=2000)
    d.add_argument("--tol", type=float, default=0.02)
    common(d)

    pl = sub.add_parser("plot", help="figures from estimate reports")
    pl.add_argument("reports", nargs="+")
    pl.add_argument("--out", default="card", help="figure path prefix")
    common(pl)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "logprob": cmd_logprob, "estimate": cmd_estimate, "diagnose": cmd_diagnose,
            "plot": cmd_plot}


def _apply_config(parser, argv):
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cfg = io.read_config(known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for section, values in cfg.items():
        sp = subparsers.choices.get(section)
        if sp is None:
            raise UsageError(f"config section [{section}] is not a subcommand")
        typed = {}
        for key, raw in values.items():
            dest = key.replace("-", "_")
            action = next((a for a in sp._actions if a.dest == dest), None)
            if action is None:
                raise UsageError(f"unknown option {key!r} in config section [{section}]")
            if isinstance(action, argparse._StoreTrueAction):
                typed[dest] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                typed[dest] = action.type(raw)
            else:
                typed[dest] = raw
            action.required = False
        sp.set_defaults(**typed)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required; see --help")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CardError) as exc:
        print(f"card: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, NumericalError, FloatingPointError) as exc:
        print(f"card: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CardError, ValueError, KeyError) as exc:
        print(f"card: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
