"""Command-line entry point: ``varmcmc <command> [options]``.

Every output file carries the resolved config hash in its header. Rerunning
into a directory whose outputs were produced under a different config is
refused unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from varmcmc import experiments as ex
from varmcmc.adaptive import run_adaptive_chain
from varmcmc.io import (
    FormatError,
    atomic_write_text,
    read_dataset,
    read_network,
    read_state,
    read_table,
    write_dataset,
    write_network,
    write_state,
    write_table,
)
from varmcmc.kernels import (
    MIXTURE,
    RANDOM_WALK,
    VARIATIONAL,
    ChainError,
    GaussianProposal,
    posterior_cov,
    posterior_mean,
    run_chain,
    write_trace,
)
from varmcmc.model import GaussianPrior, LogPosterior, ModelError
from varmcmc.oracle import GridError, build_grid, grid_moments, write_grid_csv, write_moments_csv
from varmcmc.variational import VariationalError, fit_variational


class RerunMismatch(RuntimeError):
    pass


def _global_options(parser: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="experiment config file ([experiment] section)")
    parser.add_argument("--seed", type=int, default=d, help="master seed; overrides the config")
    parser.add_argument("--out", type=Path, default=d if suppress else Path("out"), help="output directory")
    parser.add_argument("--threads", type=int, default=d if suppress else 1, help="worker threads for independent cells")
    parser.add_argument("--force", action="store_true", default=d if suppress else False,
                        help="overwrite outputs made under a different config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varmcmc", description="Variational MCMC for logistic belief networks.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a network and a synthetic dataset")
    g.add_argument("--experiment", choices=["unimodal", "multimodal", "adaptive"], default=None)
    g.add_argument("--dim", type=int, default=None, help="number of parents (default: first entry of dims)")
    g.add_argument("-T", type=int, default=None, help="number of slices")
    g.add_argument("--repeat", type=int, default=0, help="data counter feeding the seed")

    f = sub.add_parser("fit-var", parents=[common], help="fit the variational approximation")
    f.add_argument("--network", type=Path, required=True)
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--max-iters", type=int, default=None)
    f.add_argument("--tol", type=float, default=None)

    s = sub.add_parser("sample", parents=[common], help="run one Markov chain")
    s.add_argument("--network", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--kernel", choices=[RANDOM_WALK, VARIATIONAL, MIXTURE, "adaptive"], default=MIXTURE)
    s.add_argument("--state", type=Path, help="variational state file (needed by var, mix and adaptive)")
    s.add_argument("--n-samples", type=int, default=None)
    s.add_argument("--burn-in", type=int, default=None)
    s.add_argument("--init", choices=["variational", "prior"], default=None)

    r = sub.add_parser("grid", parents=[common], help="dense-grid posterior for 1 or 2 parameters")
    r.add_argument("--network", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--box", type=float, nargs="+", required=True, help="lo hi per dimension")
    r.add_argument("--resolution", type=int, default=None)
    r.add_argument("--no-boundary-check", action="store_true")

    for p in (f, s, r):
        p.add_argument("--prior-mean", type=float, default=None, help="isotropic prior mean (default from config)")
        p.add_argument("--prior-var", type=float, default=None, help="isotropic prior variance (default from config)")

    e = sub.add_parser("experiment", parents=[common], help="reproduce one of the comparison experiments")
    e.add_argument("name", choices=["unimodal", "multimodal", "adaptive"])
    return parser


def resolve_config(args, name: str | None = None) -> ex.ExperimentConfig:
    if args.config is not None:
        base = ex.preset(name) if name else None
        cfg = ex.parse_config(Path(args.config).read_text(), base)
    else:
        cfg = ex.preset(name or "unimodal")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    for key in ("prior_mean", "prior_var"):
        if getattr(args, key, None) is not None:
            cfg = dataclasses.replace(cfg, **{key: getattr(args, key)})
    return cfg


def _comments(cfg: ex.ExperimentConfig, **extra) -> list[str]:
    out = [f"config_hash={cfg.hash()}", f"seed={cfg.seed}", f"burn_in_frac={cfg.burn_in_frac!r}"]
    return out + [f"{k}={v}" for k, v in extra.items()]


def check_rerun(path: Path, cfg: ex.ExperimentConfig, force: bool):
    """Refuse to overwrite ``path`` if it was written under another config."""
    if force or not path.exists():
        return
    meta, _ = read_table(path)
    found = meta.get("config_hash")
    if found is not None and found != cfg.hash():
        raise RerunMismatch(f"{path} was written with config {found}, current config is {cfg.hash()} (use --force)")


def _prior(cfg, net):
    return GaussianPrior.isotropic(net, cfg.prior_mean, cfg.prior_var)


# commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args, args.experiment)
    if args.T is not None:
        cfg = dataclasses.replace(cfg, T=args.T)
    dim = args.dim if args.dim is not None else cfg.dims[0]
    prob = ex.make_problem(cfg, dim, args.repeat)
    out = Path(args.out)
    com = _comments(cfg, dim=dim, repeat=args.repeat)
    write_network(prob.net, out / "network.txt", com)
    write_dataset(prob.data, out / "data.csv", com)
    print(f"wrote {out / 'network.txt'} and {out / 'data.csv'} ({prob.data.T} slices, {dim} parents)")
    return 0


def cmd_fit_var(args) -> int:
    cfg = resolve_config(args)
    net, data = read_network(args.network), read_dataset(args.data)
    max_iters = args.max_iters or cfg.em_iters
    tol = cfg.em_tol if args.tol is None else args.tol
    state, reports = fit_variational(net, _prior(cfg, net), data, max_iters=max_iters, tol=tol)
    out = Path(args.out)
    com = _comments(cfg)
    write_state(state, net, out / "state.txt", com)
    write_table(out / "bound.csv", ["iteration", "lower_bound", "delta"],
                [[r.iteration, r.lower_bound, r.delta] for r in reports], com)
    last = reports[-1] if reports else None
    print(f"{len(reports)} sweeps, lower bound {last.lower_bound:.6f}" if last else "no sweeps run")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    net, data = read_network(args.network), read_dataset(args.data)
    prior = _prior(cfg, net)
    target = LogPosterior(net, prior, data)
    n = args.n_samples or cfg.n_samples[0]
    burn = cfg.burn_in(n) if args.burn_in is None else args.burn_in
    proposal = None
    if args.state is not None:
        st = read_state(args.state, net)
        proposal = GaussianProposal(st.flat_mean(net), st.flat_cov(net))
    elif args.kernel != RANDOM_WALK:
        raise FormatError(f"--state is required for kernel {args.kernel!r}")
    which = args.init or (cfg.init_rw if args.kernel == RANDOM_WALK else cfg.init_var)
    if which == "variational" and proposal is None:
        raise FormatError("--init variational needs --state")
    seed = np.random.SeedSequence([cfg.seed, net.n_theta])
    init_rng = np.random.default_rng(seed.spawn(1)[0])
    init = proposal.mean.copy() if which == "variational" else prior.sample(net, init_rng)
    if args.kernel == "adaptive":
        trace, final = run_adaptive_chain(init, proposal, target, n, seed=seed, burn_in=burn, adapt=cfg.adapt)
    else:
        spec = ex.kernel_specs(cfg, proposal or GaussianProposal(np.zeros(net.n_theta), np.eye(net.n_theta)))[args.kernel]
        trace = run_chain(init, spec, target, n, burn_in=burn, seed=seed)
    out = Path(args.out)
    write_trace(trace, out / "trace.ndjson", {"config_hash": cfg.hash(), "seed": cfg.seed, "kernel": args.kernel})
    mean, cov = posterior_mean(trace), posterior_cov(trace)
    rows = [["mean", i, "", m] for i, m in enumerate(mean)]
    rows += [["cov", i, j, cov[i, j]] for i in range(cov.shape[0]) for j in range(cov.shape[1])]
    for kid in sorted(set(trace.kernel[trace.burn_in:])):
        rows.append(["acceptance", kid, "", trace.acceptance_rate(kid)])
    write_table(out / "summary.csv", ["quantity", "i", "j", "value"], rows, _comments(cfg, kernel=args.kernel, n_samples=n, burn_in=burn))
    print(f"{n} samples after {burn} burn-in, acceptance {trace.acceptance_rate():.3f}")
    return 0


def cmd_grid(args) -> int:
    cfg = resolve_config(args)
    net, data = read_network(args.network), read_dataset(args.data)
    if len(args.box) != 2 * net.n_theta:
        raise GridError(f"--box needs {2 * net.n_theta} numbers for {net.n_theta} parameters")
    box = [(args.box[2 * k], args.box[2 * k + 1]) for k in range(net.n_theta)]
    target = LogPosterior(net, _prior(cfg, net), data)
    grid = build_grid(target, box, args.resolution or cfg.resolution, check_boundary=not args.no_boundary_check)
    out = Path(args.out)
    com = _comments(cfg, log_norm=repr(grid.log_norm))
    mean, cov = grid_moments(grid)
    write_grid_csv(grid, out / "grid.csv", com)
    write_moments_csv(mean, cov, out / "moments.csv", comments=com)
    print(f"log normalizer {grid.log_norm:.6f}, mean {np.array2string(mean, precision=4)}")
    return 0


def cmd_experiment(args) -> int:
    cfg = resolve_config(args, args.name)
    out = Path(args.out)
    threads = max(1, args.threads)
    atomic_write_text(out / "config.ini", "".join(f"# {c}\n" for c in _comments(cfg)) + ex.config_to_text(cfg))
    if args.name == "unimodal":
        return _experiment_unimodal(cfg, out, threads, args.force)
    if args.name == "multimodal":
        return _experiment_multimodal(cfg, out, args.force)
    return _experiment_adaptive(cfg, out, threads, args.force)


def _timing(rows, keys):
    return [{k: r.get(k) for k in keys + ["seconds"]} for r in rows]


def _experiment_unimodal(cfg, out, threads, force) -> int:
    check_rerun(out / "unimodal_runs.csv", cfg, force)
    rows = ex.run_unimodal(cfg, threads)
    com = _comments(cfg)
    cols = [c for c in ex.UNIMODAL_COLUMNS if c != "seconds"]
    write_table(out / "unimodal_runs.csv", cols, rows, com)
    summary = ex.summarize(rows)
    write_table(out / "unimodal_summary.csv", [c for c in ex.SUMMARY_COLUMNS if c != "mean_seconds"], summary, com)
    timing_rows = _timing(rows, ["dim", "repeat", "n_samples", "method"])
    write_table(out / "timing.csv", ["dim", "repeat", "n_samples", "method", "seconds"], timing_rows, com)
    failed = sum(1 for r in rows if r.get("error"))
    for s in summary:
        if s["method"] != "RW":
            print(f"dim {s['dim']:>3} n {s['n_samples']:>5} {s['method']:<11} rel loglik {s['mean_rel_loglik']:+.4f}"
                  f" ({s['n_positive']}/{s['n_ok']} > 0)")
    if failed:
        print(f"{failed} cells failed; see the error column", file=sys.stderr)
    return 0


def _experiment_multimodal(cfg, out, force) -> int:
    check_rerun(out / "modes.csv", cfg, force)
    res = ex.run_multimodal(cfg)
    com = _comments(cfg, data_counter=res.counter, modes=len(res.modes))
    write_grid_csv(res.grid, out / "grid.csv", com)
    ex_, ey = res.hist_edges
    for m, h in res.histograms.items():
        rows = [[ex_[i], ex_[i + 1], ey[j], ey[j + 1], h[i, j]] for i in range(h.shape[0]) for j in range(h.shape[1])]
        write_table(out / f"hist_{m}.csv", ["x_lo", "x_hi", "y_lo", "y_hi", "fraction"], rows, com)
    cols = [c for c in ex.MODES_COLUMNS if c != "seconds"]
    write_table(out / "modes.csv", cols, res.rows, com)
    timing = [{"method": r["method"], "seconds": r.get("seconds")} for r in res.rows if r.get("seconds") is not None]
    write_table(out / "timing.csv", ["method", "seconds"], _dedupe(timing), com)
    print(f"data counter {res.counter}: {len(res.modes)} modes")
    for r in res.rows:
        if r["method"] != "grid" and r.get("fraction") is not None:
            print(f"{r['method']:<11} basin {r['basin']} fraction {r['fraction']:.3f}")
    return 0


def _dedupe(rows):
    seen, out = set(), []
    for r in rows:
        if r["method"] not in seen:
            seen.add(r["method"])
            out.append(r)
    return out


def _experiment_adaptive(cfg, out, threads, force) -> int:
    check_rerun(out / "adaptive.csv", cfg, force)
    rows, densities = ex.run_adaptive(cfg, threads)
    com = _comments(cfg)
    write_table(out / "adaptive.csv", [c for c in ex.ADAPTIVE_COLUMNS if c != "seconds"], rows, com)
    write_table(out / "timing.csv", ["dim", "repeat", "seconds"], _timing(rows, ["dim", "repeat"]), com)
    for repeat, d in densities:
        cols = ["x", "posterior", "before", "after", "samples_kde"]
        write_table(out / f"density_dim1_rep{repeat}.csv", cols, list(zip(*(d[c] for c in cols))), com)
    for dim in cfg.dims:
        acc = [r["acceptance"] for r in rows if r["dim"] == dim and not r["error"]]
        if acc:
            print(f"fan-in {dim:>2}: mean acceptance {np.mean(acc):.4f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit-var": cmd_fit_var,
    "sample": cmd_sample,
    "grid": cmd_grid,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ex.ConfigError, FormatError, ModelError, GridError, ChainError, VariationalError, RerunMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
