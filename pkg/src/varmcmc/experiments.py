"""Experiment drivers: unimodal comparison, two-mode preset, adaptive sweep.

Each driver takes an ``ExperimentConfig`` and returns plain rows (dicts) plus
any arrays the caller should write out; file handling lives in ``cli``.
Randomness is keyed per cell: the master seed, the parent count, the repeat
index and a fixed method id feed one ``SeedSequence``, so adding a method or
a dimension never perturbs an existing cell.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde, norm

from varmcmc.adaptive import run_adaptive_chain
from varmcmc.kernels import (
    MIXTURE,
    RANDOM_WALK,
    VARIATIONAL,
    BlockPartition,
    GaussianProposal,
    KernelSpec,
    config_hash,
    effective_sample_size,
    histogram,
    posterior_cov,
    posterior_mean,
    run_chain,
)
from varmcmc.model import Dataset, GaussianPrior, LogPosterior, generate, single_child_network
from varmcmc.oracle import GridPosterior, basin_of, basin_partition, build_grid, grid_moments, local_maxima
from varmcmc.variational import fit_variational

EXPERIMENTS = ("unimodal", "multimodal", "adaptive", "custom")

# never renumber: these ids are part of every cell's seed
METHOD_IDS = {"data": 0, "init": 1, "rw": 2, "var": 3, "mix": 4, "adaptive": 5}

METHOD_LABELS = {"em": "EM", "rw": "RW", "var": "VarMCMC", "mix": "VarMixMCMC", "adaptive": "Adaptive"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "unimodal"
    dims: list = field(default_factory=lambda: [1, 5, 10, 20, 50])
    T: int = 1000
    n_samples: list = field(default_factory=lambda: [500, 5000])
    repeats: int = 10
    seed: int = 0
    rw_variance: float = 0.01
    nu: float = 0.5
    block_size: int = 5
    burn_in_frac: float = 0.1
    alpha: float = 0.5
    prior_mean: float = 0.0
    prior_var: float = 100.0
    parent_prob: float = 0.5
    # fixed generating weights; empty means uniform on (0, 1]
    theta: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    hidden_prob: float = 0.5
    em_iters: int = 200
    em_tol: float = 1e-12
    # where chains start: "variational" (EM mean) or "prior" (a prior draw)
    init_rw: str = "prior"
    init_var: str = "variational"
    box: list = field(default_factory=list)
    resolution: int = 400
    hist_stride: int = 8
    mode_threshold: float = 0.95
    # two-mode experiment: scan data counters 0.. for the first dataset whose
    # grid has this many modes (0 disables the scan and uses counter 0)
    want_modes: int = 0
    max_scan: int = 50
    adapt: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        counts = [self.T, self.repeats, self.block_size, self.em_iters, self.resolution, self.hist_stride]
        if not self.dims or not self.n_samples or min(counts + list(self.dims) + list(self.n_samples)) < 1:
            raise ConfigError("all counts must be at least 1")
        if not self.rw_variance > 0 or not self.prior_var > 0:
            raise ConfigError("variances must be positive")
        if not 0.0 <= self.nu <= 1.0 or not 0.0 <= self.burn_in_frac < 1.0:
            raise ConfigError("nu must lie in [0, 1] and burn_in_frac in [0, 1)")
        for p in (self.parent_prob, self.hidden_prob):
            if not 0.0 < p < 1.0:
                raise ConfigError("Bernoulli means must lie in (0, 1)")
        for init in (self.init_rw, self.init_var):
            if init not in ("variational", "prior"):
                raise ConfigError("init must be 'variational' or 'prior'")
        if self.theta and any(len(self.theta) != d for d in self.dims):
            raise ConfigError("theta length must equal every entry of dims")
        if self.box and len(self.box) != 2 * self.dims[0]:
            raise ConfigError("box needs a lo/hi pair per dimension")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.as_dict())

    def burn_in(self, n: int) -> int:
        return int(round(self.burn_in_frac * n))


def preset(name: str) -> ExperimentConfig:
    if name in ("unimodal", "custom"):
        return ExperimentConfig(experiment=name)
    if name == "multimodal":
        return ExperimentConfig(
            experiment="multimodal",
            dims=[2],
            T=50,
            n_samples=[5000],
            repeats=1,
            alpha=2.0,
            prior_mean=3.0,
            prior_var=10.0,
            theta=[2.0, -1.0],
            hidden=[0],
            hidden_prob=0.6,
            box=[-10.0, 16.0, -12.0, 12.0],
            want_modes=2,
        )
    if name == "adaptive":
        return ExperimentConfig(experiment="adaptive", dims=list(range(1, 11)), n_samples=[5000], init_rw="variational")
    raise ConfigError(f"unknown experiment {name!r}")


# config files: one [experiment] section of key = value lines

_LIST_KEYS = {"dims": int, "n_samples": int, "theta": float, "hidden": int, "box": float}


def config_to_text(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    sec = {}
    for k, v in cfg.as_dict().items():
        sec[k] = " ".join(repr(x) for x in v) if isinstance(v, list) else repr(v) if isinstance(v, float) else str(v)
    cp["experiment"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read ``[experiment]`` keys over the preset named by ``experiment``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if "experiment" not in cp:
        raise ConfigError("config needs an [experiment] section")
    sec = cp["experiment"]
    name = sec.get("experiment", base.experiment if base else "unimodal")
    values = (base or preset(name)).as_dict()
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    for key, raw in sec.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key in _LIST_KEYS:
                values[key] = [_LIST_KEYS[key](x) for x in raw.replace(",", " ").split()]
            elif key == "adapt":
                values[key] = sec.getboolean(key)
            elif types[key] in ("int", int):
                values[key] = int(raw)
            elif types[key] in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return ExperimentConfig(**values)


# cells


def cell_seed(master: int, dim: int, repeat: int, method: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(dim), int(repeat), METHOD_IDS[method]])


@dataclass
class Problem:
    net: object
    prior: GaussianPrior
    data: Dataset
    target: LogPosterior
    theta_true: np.ndarray


def make_problem(cfg: ExperimentConfig, dim: int, repeat: int) -> Problem:
    rng = np.random.default_rng(cell_seed(cfg.seed, dim, repeat, "data"))
    theta = np.asarray(cfg.theta, dtype=float) if cfg.theta else 1.0 - rng.random(dim)
    probs = np.full(dim, cfg.parent_prob)
    probs[list(cfg.hidden)] = cfg.hidden_prob
    net = single_child_network(dim, theta, cfg.alpha, parent_prob=probs, hidden_parents=tuple(cfg.hidden))
    data = generate(net, cfg.T, rng)
    prior = GaussianPrior.isotropic(net, cfg.prior_mean, cfg.prior_var)
    return Problem(net, prior, data, LogPosterior(net, prior, data), theta)


def fit(cfg: ExperimentConfig, prob: Problem):
    state, reports = fit_variational(prob.net, prob.prior, prob.data, max_iters=cfg.em_iters, tol=cfg.em_tol)
    return state, reports


def _init(cfg, prob, which, mean, seed):
    if which == "variational":
        return mean.copy()
    return prob.prior.sample(prob.net, np.random.default_rng(seed))


def kernel_specs(cfg: ExperimentConfig, proposal: GaussianProposal) -> dict:
    part = BlockPartition.contiguous(proposal.dim, cfg.block_size)
    return {
        "rw": KernelSpec(RANDOM_WALK, part, rw_variance=cfg.rw_variance),
        "var": KernelSpec(VARIATIONAL, part, proposal=proposal),
        "mix": KernelSpec(MIXTURE, part, rw_variance=cfg.rw_variance, nu=cfg.nu, proposal=proposal),
    }


def run_methods(cfg, prob, state, n, dim, repeat, methods=("rw", "var", "mix")):
    """Run each sampler for ``n`` retained samples; returns ``{method: (trace, seconds)}`` or errors."""
    proposal = GaussianProposal(state.flat_mean(prob.net), state.flat_cov(prob.net))
    specs = kernel_specs(cfg, proposal)
    out = {}
    for m in methods:
        seed = cell_seed(cfg.seed, dim, repeat, m)
        init_seed = cell_seed(cfg.seed, dim, repeat, "init")
        which = cfg.init_rw if m == "rw" else cfg.init_var
        t0 = time.perf_counter()
        try:
            init = _init(cfg, prob, which, proposal.mean, init_seed)
            trace = run_chain(init, specs[m], prob.target, n, burn_in=cfg.burn_in(n), seed=seed)
            out[m] = (trace, time.perf_counter() - t0, None)
        except Exception as exc:  # one failed sampler must not sink the run
            out[m] = (None, time.perf_counter() - t0, _describe(exc))
    return out


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# unimodal

UNIMODAL_COLUMNS = [
    "dim", "repeat", "n_samples", "method", "rel_loglik", "loglik",
    "acceptance", "ess_min", "seconds", "em_iters", "lower_bound", "error",
]


def unimodal_cell(cfg: ExperimentConfig, dim: int, repeat: int) -> list[dict]:
    rows = []
    base = {"dim": dim, "repeat": repeat}
    try:
        t0 = time.perf_counter()
        prob = make_problem(cfg, dim, repeat)
        state, reports = fit(cfg, prob)
        em_seconds = time.perf_counter() - t0
    except Exception as exc:
        for n in cfg.n_samples:
            rows.append({**base, "n_samples": n, "method": "EM", "error": _describe(exc)})
        return rows
    mu = state.flat_mean(prob.net)
    em_info = {"em_iters": len(reports), "lower_bound": reports[-1].lower_bound if reports else np.nan}
    for n in cfg.n_samples:
        runs = run_methods(cfg, prob, state, n, dim, repeat)
        estimates = {"em": mu}
        for m, (trace, _, err) in runs.items():
            if err is None:
                estimates[m] = posterior_mean(trace)
        ll = {m: prob.target.log_likelihood(th) for m, th in estimates.items()}
        ref = ll.get("rw", np.nan)
        rows.append({**base, **em_info, "n_samples": n, "method": "EM", "loglik": ll["em"],
                     "rel_loglik": ll["em"] - ref, "seconds": em_seconds, "error": ""})
        for m, (trace, secs, err) in runs.items():
            row = {**base, **em_info, "n_samples": n, "method": METHOD_LABELS[m], "seconds": secs, "error": err or ""}
            if err is None:
                row.update(
                    loglik=ll[m],
                    rel_loglik=ll[m] - ref,
                    acceptance=trace.acceptance_rate(),
                    ess_min=min(effective_sample_size(c) for c in trace.retained().T),
                )
            rows.append(row)
    return rows


def run_unimodal(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    cells = [(d, r) for d in cfg.dims for r in range(cfg.repeats)]
    parts = _map(lambda c: unimodal_cell(cfg, *c), cells, threads)
    return [row for part in parts for row in part]


SUMMARY_COLUMNS = ["dim", "n_samples", "method", "mean_rel_loglik", "se_rel_loglik", "n_positive", "n_ok", "mean_seconds"]


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and standard error of the relative log-likelihood per (dim, n_samples, method)."""
    keys = sorted({(r["dim"], r["n_samples"], r["method"]) for r in rows}, key=lambda k: (k[0], k[1], k[2]))
    out = []
    for d, n, m in keys:
        sel = [r for r in rows if (r["dim"], r["n_samples"], r["method"]) == (d, n, m) and not r.get("error")]
        v = np.array([r["rel_loglik"] for r in sel], dtype=float)
        v = v[np.isfinite(v)]
        secs = np.array([r["seconds"] for r in sel], dtype=float)
        out.append({
            "dim": d,
            "n_samples": n,
            "method": m,
            "mean_rel_loglik": float(v.mean()) if v.size else np.nan,
            "se_rel_loglik": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else np.nan,
            "n_positive": int(np.sum(v > 0)),
            "n_ok": int(v.size),
            "mean_seconds": float(secs.mean()) if secs.size else np.nan,
        })
    return out


# multimodal

MODES_COLUMNS = [
    "method", "basin", "fraction", "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy",
    "cov_det", "se_x", "se_y", "grid_mean_x", "grid_mean_y", "grid_cov_det", "dominant", "acceptance", "seconds", "error",
]


@dataclass
class MultimodalResult:
    counter: int
    grid: GridPosterior
    labels: np.ndarray
    modes: list
    rows: list
    histograms: dict
    hist_edges: list
    var_cov: np.ndarray
    var_mean: np.ndarray


def _box(cfg) -> list[tuple[float, float]]:
    return [(cfg.box[2 * k], cfg.box[2 * k + 1]) for k in range(len(cfg.box) // 2)]


def run_multimodal(cfg: ExperimentConfig, threads: int = 1) -> MultimodalResult:
    dim = cfg.dims[0]
    if dim != 2 or len(cfg.box) != 4:
        raise ConfigError("the two-mode experiment needs dims = 2 and a 2-D box")
    counter, prob, grid = select_dataset(cfg)
    labels = basin_partition(grid)
    modes = local_maxima(grid)
    weights = grid.weights()
    state, _ = fit(cfg, prob)
    n = cfg.n_samples[0]
    runs = run_methods(cfg, prob, state, n, dim, counter)
    edges = [e[:: cfg.hist_stride] for e in grid.edges]
    rows, hists = [], {}
    grid_stats = {}
    for b in range(len(modes)):
        mask = labels == b
        gm, gc = grid_moments(grid, mask)
        grid_stats[b] = (gm, gc, float(weights[mask].sum()))
        rows.append({"method": "grid", "basin": b, "fraction": grid_stats[b][2], "mean_x": gm[0], "mean_y": gm[1],
                     "cov_xx": gc[0, 0], "cov_xy": gc[0, 1], "cov_yy": gc[1, 1], "cov_det": np.linalg.det(gc), "error": ""})
    var_cov = state.flat_cov(prob.net)
    var_mean = state.flat_mean(prob.net)
    rows.append({"method": "EM", "basin": int(basin_of(grid, labels, var_mean)[0]), "mean_x": var_mean[0], "mean_y": var_mean[1],
                 "cov_xx": var_cov[0, 0], "cov_xy": var_cov[0, 1], "cov_yy": var_cov[1, 1],
                 "cov_det": np.linalg.det(var_cov), "error": ""})
    for m, (trace, secs, err) in runs.items():
        label = METHOD_LABELS[m]
        if err is not None:
            rows.append({"method": label, "seconds": secs, "error": err})
            continue
        hists[m] = histogram(trace, edges, dims=(0, 1))
        samples = trace.retained()
        lab = basin_of(grid, labels, samples)
        fracs = np.bincount(lab, minlength=len(modes)) / lab.size
        dominant = int(np.argmax(fracs))
        for b in range(len(modes)):
            row = {"method": label, "basin": b, "fraction": fracs[b], "dominant": int(b == dominant),
                   "acceptance": trace.acceptance_rate(), "seconds": secs, "error": ""}
            gm, gc, _ = grid_stats[b]
            row.update(grid_mean_x=gm[0], grid_mean_y=gm[1], grid_cov_det=np.linalg.det(gc))
            inside = samples[lab == b]
            if inside.shape[0] > 2:
                mean = inside.mean(axis=0)
                cov = np.cov(inside, rowvar=False)
                # standard errors from the in-basin indicator-weighted chain keep the time order
                se = [_basin_se(samples[:, k], lab == b) for k in range(2)]
                row.update(mean_x=mean[0], mean_y=mean[1], cov_xx=cov[0, 0], cov_xy=cov[0, 1], cov_yy=cov[1, 1],
                           cov_det=np.linalg.det(cov), se_x=se[0], se_y=se[1])
            rows.append(row)
    return MultimodalResult(counter, grid, labels, modes, rows, hists, edges, var_cov, var_mean)


def select_dataset(cfg: ExperimentConfig):
    """First data counter whose grid shows ``want_modes`` local maxima.

    Only the grid is consulted, never a sampler, so the choice cannot favour
    any method.
    """
    for counter in range(cfg.max_scan if cfg.want_modes else 1):
        prob = make_problem(cfg, cfg.dims[0], counter)
        grid = build_grid(prob.target, _box(cfg), cfg.resolution)
        if not cfg.want_modes or len(local_maxima(grid)) == cfg.want_modes:
            return counter, prob, grid
    raise ConfigError(f"no dataset with {cfg.want_modes} modes in {cfg.max_scan} tries")


def _basin_se(x: np.ndarray, inside: np.ndarray) -> float:
    """Monte Carlo standard error of the within-basin mean of ``x``.

    The within-basin mean is a ratio of two ergodic averages; its delta-method
    influence series ``1[in] (x - m) / p`` is fed to the ESS estimator.
    """
    p = inside.mean()
    if p == 0:
        return np.nan
    m = x[inside].mean()
    z = np.where(inside, x - m, 0.0) / p
    return float(z.std(ddof=1) / np.sqrt(effective_sample_size(z)))


# adaptive

ADAPTIVE_COLUMNS = [
    "dim", "repeat", "acceptance", "initial_var", "adapted_var", "grid_var", "tours", "adaptations", "seconds", "error",
]


def adaptive_cell(cfg: ExperimentConfig, dim: int, repeat: int) -> tuple[dict, dict | None]:
    row = {"dim": dim, "repeat": repeat, "error": ""}
    try:
        prob = make_problem(cfg, dim, repeat)
        state, _ = fit(cfg, prob)
        proposal = GaussianProposal(state.flat_mean(prob.net), state.flat_cov(prob.net))
        init = _init(cfg, prob, cfg.init_var, proposal.mean, cell_seed(cfg.seed, dim, repeat, "init"))
        n = cfg.n_samples[0]
        t0 = time.perf_counter()
        trace, final = run_adaptive_chain(
            init, proposal, prob.target, n, seed=cell_seed(cfg.seed, dim, repeat, "adaptive"),
            burn_in=cfg.burn_in(n), adapt=cfg.adapt,
        )
        row.update(
            acceptance=trace.acceptance_rate(),
            # mean marginal variance, so one number per fan-in
            initial_var=float(np.mean(np.diag(proposal.cov))),
            adapted_var=float(np.mean(np.diag(final.proposal.cov))),
            tours=final.tours,
            adaptations=final.adaptations,
            seconds=time.perf_counter() - t0,
        )
    except Exception as exc:
        row["error"] = _describe(exc)
        return row, None
    density = None
    if dim == 1:
        density = _density_summary(prob, proposal, final.proposal, trace)
        row["grid_var"] = density["grid_var"]
    return row, density


def _density_summary(prob, before: GaussianProposal, after: GaussianProposal, trace) -> dict:
    mu, sd = before.mean[0], np.sqrt(before.cov[0, 0])
    lo, hi = mu - 8 * sd, mu + 8 * sd
    grid = build_grid(prob.target, [(lo, hi)], 400, check_boundary=False)
    x = grid.centers[0]
    samples = trace.retained()[:, 0]
    kde = gaussian_kde(samples)(x) if np.ptp(samples) > 0 else np.full_like(x, np.nan)
    _, gvar = grid_moments(grid)
    return {
        "x": x,
        "posterior": grid.density(),
        "before": norm.pdf(x, mu, sd),
        "after": norm.pdf(x, after.mean[0], np.sqrt(after.cov[0, 0])),
        "samples_kde": kde,
        "grid_var": float(gvar[0, 0]),
    }


def run_adaptive(cfg: ExperimentConfig, threads: int = 1):
    cells = [(d, r) for d in cfg.dims for r in range(cfg.repeats)]
    results = _map(lambda c: adaptive_cell(cfg, *c), cells, threads)
    rows = [r for r, _ in results]
    densities = [(r["repeat"], d) for r, d in results if d is not None]
    return rows, densities
