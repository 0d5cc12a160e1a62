"""Metropolis-Hastings transition kernels and the chain runner.

Random draws follow a fixed order so that runs are bit-reproducible: every
block step draws its normals (one per block coordinate, in coordinate order)
and then one uniform for the accept test; a mixture step draws one uniform to
pick its component before delegating, except when the weight is exactly 0 or
1, where no choice is drawn.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

RANDOM_WALK = "rw"
VARIATIONAL = "var"
MIXTURE = "mix"


class ChainError(RuntimeError):
    pass


def mh_accept_prob(log_p_cur, log_p_prop, log_q_cur_given_prop=0.0, log_q_prop_given_cur=0.0) -> float:
    """``min(1, p(prop) q(cur|prop) / (p(cur) q(prop|cur)))`` computed on logs."""
    if log_p_cur == -np.inf:
        raise ChainError("chain at zero-density state")
    if log_p_prop == -np.inf:
        return 0.0
    log_ratio = (log_p_prop - log_p_cur) + (log_q_cur_given_prop - log_q_prop_given_cur)
    if np.isnan(log_ratio):
        raise ChainError("acceptance ratio is NaN")
    return float(np.exp(min(0.0, log_ratio)))


class GaussianProposal:
    """Multivariate normal with a cached Cholesky factor."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and covariance shapes disagree")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ValueError("proposal covariance is not positive definite") from None
        self._log_norm = -np.sum(np.log(np.diag(self.chol))) - 0.5 * self.mean.size * np.log(2.0 * np.pi)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x) -> float:
        z = solve_triangular(self.chol, np.asarray(x, dtype=float) - self.mean, lower=True)
        return float(self._log_norm - 0.5 * z @ z)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.chol @ rng.standard_normal(self.dim)

    def marginal(self, block: slice) -> GaussianProposal:
        return GaussianProposal(self.mean[block], self.cov[block, block])


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint, nonempty ``[start, stop)`` ranges covering ``0..n-1``."""

    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pos = 0
        for start, stop in self.blocks:
            if start != pos or stop <= start:
                raise ValueError("blocks must be contiguous, ordered and nonempty")
            pos = stop

    @classmethod
    def contiguous(cls, n: int, size: int = 5) -> BlockPartition:
        if n < 1 or size < 1:
            raise ValueError("need n >= 1 and size >= 1")
        return cls(tuple((s, min(s + size, n)) for s in range(0, n, size)))

    @classmethod
    def single(cls, n: int) -> BlockPartition:
        return cls(((0, n),))

    @property
    def dim(self) -> int:
        return self.blocks[-1][1] if self.blocks else 0

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def slices(self) -> list[slice]:
        return [slice(a, b) for a, b in self.blocks]


@dataclass
class KernelSpec:
    """Which transition to run.

    ``kind`` is ``"rw"`` (random-walk Metropolis), ``"var"`` (independence
    proposals from ``proposal``) or ``"mix"`` (``nu`` on ``"var"``, the rest on
    ``"rw"``). Every kind sweeps the blocks of ``partition`` in order; a
    one-block partition gives the unblocked kernel.
    """

    kind: str
    partition: BlockPartition
    rw_variance: float = 0.01
    nu: float = 0.5
    proposal: GaussianProposal | None = None

    def __post_init__(self):
        if self.kind not in (RANDOM_WALK, VARIATIONAL, MIXTURE):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.rw_variance > 0:
            raise ValueError("rw_variance must be positive")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError("nu must lie in [0, 1]")
        if self.kind != RANDOM_WALK:
            if self.proposal is None:
                raise ValueError("variational kernels need a proposal")
            if self.proposal.dim != self.partition.dim:
                raise ValueError("proposal dimension does not match the partition")

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "blocks": [list(b) for b in self.partition.blocks],
            "rw_variance": self.rw_variance,
            "nu": self.nu,
        }


def rw_block_step(theta, block: slice, rw_variance: float, target, rng, log_p=None):
    """Gaussian random-walk Metropolis update of ``theta[block]``.

    Returns ``(theta, log_p, accepted)``; ``theta`` is a new array only when
    the move is accepted.
    """
    if log_p is None:
        log_p = target(theta)
    k = block.stop - block.start
    prop = theta.copy()
    prop[block] = theta[block] + np.sqrt(rw_variance) * rng.standard_normal(k)
    log_p_prop = target(prop)
    a = mh_accept_prob(log_p, log_p_prop)
    if rng.random() < a:
        return prop, log_p_prop, True
    return theta, log_p, False


def var_block_step(theta, block: slice, proposal: GaussianProposal, target, rng, log_p=None):
    """Independence update of ``theta[block]`` from ``proposal`` (block marginal)."""
    if log_p is None:
        log_p = target(theta)
    prop = theta.copy()
    prop[block] = proposal.draw(rng)
    log_p_prop = target(prop)
    a = mh_accept_prob(log_p, log_p_prop, proposal.logpdf(theta[block]), proposal.logpdf(prop[block]))
    if rng.random() < a:
        return prop, log_p_prop, True
    return theta, log_p, False


def cycle_step(theta, partition: BlockPartition, inner: Callable, target, rng, log_p=None):
    """Sweep ``inner(theta, block, log_p)`` over the blocks in order.

    Each block sees the freshest values of the others. Returns
    ``(theta, log_p, flags)`` with one accept flag per block.
    """
    if log_p is None:
        log_p = target(theta)
    flags = np.zeros(partition.n_blocks, dtype=bool)
    for j, block in enumerate(partition.slices()):
        theta, log_p, flags[j] = inner(theta, block, log_p)
    return theta, log_p, flags


class Kernel:
    """Callable transition built from a ``KernelSpec``."""

    def __init__(self, spec: KernelSpec, target):
        self.spec = spec
        self.target = target
        self.slices = spec.partition.slices()
        self.block_proposals = [spec.proposal.marginal(b) for b in self.slices] if spec.proposal is not None else None

    def _rw_inner(self, rng):
        v = self.spec.rw_variance

        def inner(theta, block, log_p):
            return rw_block_step(theta, block, v, self.target, rng, log_p)

        return inner

    def _var_inner(self, rng):
        props = {b.start: q for b, q in zip(self.slices, self.block_proposals)}

        def inner(theta, block, log_p):
            return var_block_step(theta, block, props[block.start], self.target, rng, log_p)

        return inner

    def rw_cycle(self, theta, log_p, rng):
        return cycle_step(theta, self.spec.partition, self._rw_inner(rng), self.target, rng, log_p)

    def var_cycle(self, theta, log_p, rng):
        return cycle_step(theta, self.spec.partition, self._var_inner(rng), self.target, rng, log_p)

    def __call__(self, theta, log_p, rng):
        """One transition; returns ``(theta, log_p, component_id, flags)``."""
        kind = self.spec.kind
        if kind == MIXTURE:
            return mixture_step(theta, self.spec.nu, self.var_cycle, self.rw_cycle, rng, log_p)
        if kind == VARIATIONAL:
            theta, log_p, flags = self.var_cycle(theta, log_p, rng)
            return theta, log_p, VARIATIONAL, flags
        theta, log_p, flags = self.rw_cycle(theta, log_p, rng)
        return theta, log_p, RANDOM_WALK, flags


def mixture_step(theta, nu: float, k_var: Callable, k_rw: Callable, rng, log_p):
    """Run ``k_var`` with probability ``nu``, else ``k_rw``.

    Both components take ``(theta, log_p, rng)`` and return
    ``(theta, log_p, flags)``. Returns ``(theta, log_p, component_id, flags)``.
    """
    if not 0.0 <= nu <= 1.0:
        raise ValueError("nu must lie in [0, 1]")
    if nu == 1.0:
        use_var = True
    elif nu == 0.0:
        use_var = False
    else:
        use_var = rng.random() < nu
    if use_var:
        theta, log_p, flags = k_var(theta, log_p, rng)
        return theta, log_p, VARIATIONAL, flags
    theta, log_p, flags = k_rw(theta, log_p, rng)
    return theta, log_p, RANDOM_WALK, flags


@dataclass
class ChainTrace:
    """Per-iteration chain output; rows ``burn_in:`` are the retained samples.

    ``extras`` holds optional per-record columns (the adaptive sampler stores
    log importance weights and adaptation counters there).
    """

    theta: np.ndarray
    log_post: np.ndarray
    kernel: np.ndarray
    accepted: np.ndarray
    regeneration: np.ndarray
    burn_in: int = 0
    seed: object = None
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(len(self))

    def retained(self) -> np.ndarray:
        return self.theta[self.burn_in :]

    def acceptance_rate(self, kernel: str | None = None, retained_only: bool = True) -> float:
        """Fraction of accepted block moves, optionally for one component."""
        sel = slice(self.burn_in, None) if retained_only else slice(None)
        acc, kid = self.accepted[sel], self.kernel[sel]
        if kernel is not None:
            acc = acc[kid == kernel]
        return float(acc.mean()) if acc.size else float("nan")

    def records(self) -> Iterator[dict]:
        for i in range(len(self)):
            rec = {
                "iteration": i,
                "theta": self.theta[i].tolist(),
                "log_posterior": float(self.log_post[i]),
                "kernel": str(self.kernel[i]),
                "accepted": self.accepted[i].tolist(),
                "regeneration": bool(self.regeneration[i]),
                "burn_in": i < self.burn_in,
            }
            for key, col in self.extras.items():
                v = col[i]
                rec[key] = v.item() if hasattr(v, "item") else v
            yield rec


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def trace_text(trace: ChainTrace, header: dict | None = None) -> str:
    """NDJSON: a header object, then one object per iteration.

    Parameter values are written with 17 significant digits. ``header``
    entries are merged into the first line.
    """
    head = {"config_hash": config_hash(trace.config), "seed": str(trace.seed), "burn_in": trace.burn_in, "config": trace.config}
    head.update(header or {})
    lines = [json.dumps(head, default=str)]
    for rec in trace.records():
        rec["theta"] = ",".join(_fmt(v) for v in rec["theta"])
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def write_trace(trace: ChainTrace, path, header: dict | None = None):
    from varmcmc.io import atomic_write_text

    atomic_write_text(path, trace_text(trace, header))


def read_trace(path) -> ChainTrace:
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    known = {"iteration", "theta", "log_posterior", "kernel", "accepted", "regeneration", "burn_in"}
    extras = {}
    for key in recs[0] if recs else []:
        if key not in known:
            extras[key] = np.array([r[key] for r in recs])
    return ChainTrace(
        theta=np.array([[float(v) for v in r["theta"].split(",")] if r["theta"] else [] for r in recs], dtype=float),
        log_post=np.array([r["log_posterior"] for r in recs], dtype=float),
        kernel=np.array([r["kernel"] for r in recs]),
        accepted=np.array([r["accepted"] for r in recs], dtype=bool),
        regeneration=np.array([r["regeneration"] for r in recs], dtype=bool),
        burn_in=int(header.get("burn_in", 0)),
        seed=header.get("seed"),
        config=header.get("config", {}),
        extras=extras,
    )


def default_burn_in(n_samples: int) -> int:
    return n_samples // 10


def run_chain(init, kernel: KernelSpec, target, n_samples: int, burn_in: int | None = None, seed=0) -> ChainTrace:
    """Run ``burn_in + n_samples`` transitions from ``init``.

    ``seed`` is anything ``numpy.random.default_rng`` accepts. The trace keeps
    the burn-in rows; estimators skip them.
    """
    if n_samples < 1:
        raise ChainError("n_samples must be at least 1")
    burn_in = default_burn_in(n_samples) if burn_in is None else int(burn_in)
    theta = np.array(init, dtype=float)
    log_p = target(theta)
    if not np.isfinite(log_p):
        raise ChainError("chain at zero-density state")
    rng = np.random.default_rng(seed)
    step = Kernel(kernel, target)
    total = burn_in + n_samples
    d, nb = theta.size, kernel.partition.n_blocks
    thetas = np.empty((total, d))
    logs = np.empty(total)
    kinds = np.empty(total, dtype="<U3")
    acc = np.zeros((total, nb), dtype=bool)
    for i in range(total):
        theta, log_p, kid, flags = step(theta, log_p, rng)
        thetas[i], logs[i], kinds[i], acc[i] = theta, log_p, kid, flags
    return ChainTrace(
        theta=thetas,
        log_post=logs,
        kernel=kinds,
        accepted=acc,
        regeneration=np.zeros(total, dtype=bool),
        burn_in=burn_in,
        seed=seed,
        config=kernel.describe(),
    )


def _retained_or_fail(trace: ChainTrace) -> np.ndarray:
    samples = trace.retained()
    if samples.shape[0] == 0:
        raise ChainError("no samples retained after burn-in")
    return samples


def estimate(trace: ChainTrace, f: Callable) -> float | np.ndarray:
    """Ergodic average of ``f(theta)`` over the retained samples."""
    samples = _retained_or_fail(trace)
    vals = np.array([f(th) for th in samples], dtype=float)
    return vals.mean(axis=0)


def posterior_mean(trace: ChainTrace) -> np.ndarray:
    return _retained_or_fail(trace).mean(axis=0)


def posterior_cov(trace: ChainTrace) -> np.ndarray:
    samples = _retained_or_fail(trace)
    return np.atleast_2d(np.cov(samples, rowvar=False, ddof=1)) if samples.shape[0] > 1 else np.zeros((samples.shape[1],) * 2)


def histogram(trace: ChainTrace, edges, dims=(0,)):
    """Normalized 1-D or 2-D histogram of retained samples on given bin edges."""
    samples = _retained_or_fail(trace)[:, list(dims)]
    if len(dims) == 1:
        h, _ = np.histogram(samples[:, 0], bins=edges)
    else:
        h, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=edges)
    return h / samples.shape[0]


def effective_sample_size(x) -> float:
    """ESS of a scalar chain using Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n] / (n * var)
    # sums of adjacent autocorrelation pairs, truncated at the first negative
    pairs = acf[: 2 * ((n - 1) // 2)].reshape(-1, 2).sum(axis=1)
    neg = np.nonzero(pairs <= 0)[0]
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / np.log10(n)))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(effective_sample_size(x)))
