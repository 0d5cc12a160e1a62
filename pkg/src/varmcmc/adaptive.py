"""Independence sampler whose proposal is adapted only at regeneration times.

The independence kernel with importance weights ``w = p / q`` is split with
the small-set function ``s(x) = min(1, c / w(x))`` and the atom measure
``nu(dy) ∝ min(q(y), p(y) / c)``. After an accepted move ``x -> y`` a coin with
probability ``regen_prob(w(x), w(y), c)`` decides, retrospectively, whether the
chain regenerated; if so ``y`` starts a new tour and the proposal may be
refitted from the samples collected so far. Between regenerations the kernel
is frozen.

Regeneration coins come from their own random stream, so the sampling path
is identical to a plain independence chain whenever the proposal never
changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from varmcmc.kernels import (
    VARIATIONAL,
    ChainError,
    ChainTrace,
    GaussianProposal,
    default_burn_in,
    mh_accept_prob,
)

RIDGE = 1e-6
WARMUP_STEPS = 200


def log_regen_prob(log_w_cur: float, log_w_prop: float, log_c: float) -> float:
    """Log of the regeneration probability for an accepted move."""
    if log_c == np.inf:
        return -np.inf
    num = min(0.0, log_c - log_w_cur) + min(0.0, log_w_prop - log_c)
    den = min(0.0, log_w_prop - log_w_cur)
    return min(0.0, num - den)


def regen_prob(w_cur: float, w_prop: float, c: float) -> float:
    """``min(1, c/w_cur) min(1, w_prop/c) / min(1, w_prop/w_cur)``, clamped to [0, 1]."""
    with np.errstate(divide="ignore"):
        lr = log_regen_prob(np.log(w_cur), np.log(w_prop), np.log(c))
    return float(np.clip(np.exp(lr), 0.0, 1.0))


@dataclass
class RunningMoments:
    """Welford accumulator for the sample mean and covariance."""

    n: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def push(self, x: np.ndarray) -> RunningMoments:
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return RunningMoments(1, x.copy(), np.zeros((x.size, x.size)))
        n = self.n + 1
        delta = x - self.mean
        mean = self.mean + delta / n
        return RunningMoments(n, mean, self.m2 + np.outer(delta, x - mean))

    def cov(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


@dataclass
class AdaptiveState:
    proposal: GaussianProposal
    log_c: float
    tours: int = 0
    accum: RunningMoments = field(default_factory=RunningMoments)
    adaptations: int = 0
    tour_theta: list = field(default_factory=list)
    tour_log_p: list = field(default_factory=list)
    enabled: bool = True
    ridge: float = RIDGE

    @property
    def c(self) -> float:
        return float(np.exp(self.log_c))


def adapt_proposal(state: AdaptiveState) -> AdaptiveState:
    """Moment-match the proposal to all samples seen so far.

    The atom level ``c`` is reset to the median importance weight, under the
    new proposal, of the states visited in the tour that just ended. No-op
    when adaptation is disabled or fewer than ``dim + 2`` samples exist.
    """
    d = state.proposal.dim
    if not state.enabled or state.accum.n < d + 2:
        return state
    cov = state.accum.cov() + state.ridge * np.eye(d)
    proposal = GaussianProposal(state.accum.mean.copy(), 0.5 * (cov + cov.T))
    log_c = state.log_c
    if state.tour_theta:
        lw = [lp - proposal.logpdf(th) for th, lp in zip(state.tour_theta, state.tour_log_p)]
        log_c = float(np.median(lw))
    return replace(state, proposal=proposal, log_c=log_c, adaptations=state.adaptations + 1)


def _child_seed(seed, k: int) -> np.random.SeedSequence:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(entropy=ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,))


def _independence_move(theta, log_p, log_q_cur, proposal, target, rng):
    prop = proposal.draw(rng)
    log_p_prop = target(prop)
    log_q_prop = proposal.logpdf(prop)
    a = mh_accept_prob(log_p, log_p_prop, log_q_cur, log_q_prop)
    accepted = rng.random() < a
    return prop, log_p_prop, log_q_prop, accepted


def warmup_log_c(init, proposal: GaussianProposal, target, seed, steps: int = WARMUP_STEPS) -> float:
    """Median log importance weight over a short frozen-kernel run."""
    rng = np.random.default_rng(seed)
    theta = np.array(init, dtype=float)
    log_p, log_q = target(theta), proposal.logpdf(theta)
    lws = []
    for _ in range(steps):
        prop, lpp, lqp, ok = _independence_move(theta, log_p, log_q, proposal, target, rng)
        if ok:
            theta, log_p, log_q = prop, lpp, lqp
        lws.append(log_p - log_q)
    return float(np.median(lws))


def run_adaptive_chain(
    init,
    proposal: GaussianProposal,
    target,
    n_samples: int,
    c_init: float | None = None,
    seed=0,
    burn_in: int | None = None,
    adapt: bool = True,
):
    """Independence chain with regeneration-gated adaptation.

    ``c_init`` is the atom level on the weight scale; ``None`` estimates it
    from a warm-up run, ``numpy.inf`` disables regeneration. Returns
    ``(trace, final_state)``.
    """
    if n_samples < 1:
        raise ChainError("n_samples must be at least 1")
    burn_in = default_burn_in(n_samples) if burn_in is None else int(burn_in)
    theta = np.array(init, dtype=float)
    log_p = target(theta)
    if not np.isfinite(log_p):
        raise ChainError("chain at zero-density state")
    if c_init is None:
        log_c = warmup_log_c(theta, proposal, target, _child_seed(seed, 1))
    else:
        log_c = np.inf if c_init == np.inf else float(np.log(c_init))
    state = AdaptiveState(proposal=proposal, log_c=log_c, enabled=adapt)
    rng = np.random.default_rng(seed)
    coins = np.random.default_rng(_child_seed(seed, 0))

    total = burn_in + n_samples
    d = theta.size
    thetas = np.empty((total, d))
    logs = np.empty(total)
    acc = np.zeros((total, 1), dtype=bool)
    regen = np.zeros(total, dtype=bool)
    log_w = np.empty(total)
    events = np.zeros(total, dtype=int)

    log_q = state.proposal.logpdf(theta)
    for i in range(total):
        prop, lpp, lqp, ok = _independence_move(theta, log_p, log_q, state.proposal, target, rng)
        did_regen = False
        if ok:
            lr = log_regen_prob(log_p - log_q, lpp - lqp, state.log_c)
            if lr > -np.inf:
                did_regen = bool(coins.random() < np.exp(lr))
            theta, log_p, log_q = prop, lpp, lqp
        state.accum = state.accum.push(theta)
        if did_regen:
            state = adapt_proposal(replace(state, tours=state.tours + 1))
            state.tour_theta, state.tour_log_p = [], []
            log_q = state.proposal.logpdf(theta)
        state.tour_theta.append(theta)
        state.tour_log_p.append(log_p)
        thetas[i], logs[i], acc[i, 0], regen[i] = theta, log_p, ok, did_regen
        log_w[i] = log_p - log_q
        events[i] = state.adaptations

    trace = ChainTrace(
        theta=thetas,
        log_post=logs,
        kernel=np.full(total, VARIATIONAL, dtype="<U3"),
        accepted=acc,
        regeneration=regen,
        burn_in=burn_in,
        seed=seed,
        config={"kind": "adaptive", "adapt": adapt, "c_init": None if c_init is None else float(c_init)},
        extras={"log_weight": log_w, "adaptations": events},
    )
    return trace, state


def tour_lengths(trace: ChainTrace) -> np.ndarray:
    """Lengths of the complete tours between consecutive regenerations."""
    idx = np.nonzero(trace.regeneration)[0]
    return np.diff(idx)
