"""Logistic belief networks: structure, densities and ancestral sampling.

Node values live in {-1, +1}. A node ``i`` with parents ``pi(i)`` takes the
value ``x`` with probability ``g(x * (alpha + theta_i' x_pi(i)))`` where ``g``
is the logistic function and ``alpha`` a bias shared by every node. Parentless
nodes carry no parameters; their probability of ``+1`` is ``g(alpha)`` unless
overridden through ``root_prob``.
"""

from __future__ import annotations

import itertools
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

H_MAX = 10


class ModelError(ValueError):
    pass


def logistic(a):
    """Logistic sigmoid ``1 / (1 + exp(-a))``, elementwise."""
    return expit(a)


def log_logistic(a):
    """``log g(a)`` without overflow for large ``|a|``."""
    a = np.asarray(a, dtype=float)
    out = np.where(a >= 0, -np.log1p(np.exp(-np.abs(a))), a - np.log1p(np.exp(-np.abs(a))))
    return out if out.ndim else float(out)


@dataclass
class BeliefNetwork:
    """Directed acyclic network of binary logistic nodes.

    ``nodes`` must be topologically sorted. ``theta[i]`` holds one weight per
    parent of ``i``, in the order of ``parents[i]``.
    """

    nodes: list[str]
    parents: dict[str, list[str]]
    theta: dict[str, np.ndarray]
    alpha: float
    hidden: dict[str, bool]
    root_prob: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = [str(n) for n in self.nodes]
        if len(set(self.nodes)) != len(self.nodes):
            raise ModelError("duplicate node ids")
        seen = set()
        for node in self.nodes:
            pars = list(self.parents.get(node, []))
            for p in pars:
                if p not in seen:
                    raise ModelError(f"parent {p!r} of {node!r} does not precede it (cycle or bad order)")
            if len(set(pars)) != len(pars):
                raise ModelError(f"repeated parent for node {node!r}")
            self.parents[node] = pars
            th = np.asarray(self.theta.get(node, np.zeros(len(pars))), dtype=float).reshape(-1)
            if th.shape[0] != len(pars):
                raise ModelError(f"theta for {node!r} has length {th.shape[0]}, expected {len(pars)}")
            self.theta[node] = th
            self.hidden[node] = bool(self.hidden.get(node, False))
            seen.add(node)
        extra = set(self.parents) - seen
        if extra:
            raise ModelError(f"parents given for unknown nodes {sorted(extra)}")
        for node, p in self.root_prob.items():
            if node not in seen or self.parents[node]:
                raise ModelError(f"root_prob given for non-root node {node!r}")
            if not 0.0 < p < 1.0:
                raise ModelError(f"root_prob for {node!r} must lie in (0, 1)")
        self.alpha = float(self.alpha)
        self._index = {n: k for k, n in enumerate(self.nodes)}

    @property
    def n_x(self) -> int:
        return len(self.nodes)

    @property
    def n_theta(self) -> int:
        return sum(len(self.parents[n]) for n in self.nodes)

    def index(self, node: str) -> int:
        return self._index[node]

    def parent_index(self, node: str) -> np.ndarray:
        return np.array([self._index[p] for p in self.parents[node]], dtype=int)

    @property
    def hidden_nodes(self) -> list[str]:
        return [n for n in self.nodes if self.hidden[n]]

    def is_root(self, node: str) -> bool:
        return not self.parents[node]

    def children(self, node: str) -> list[str]:
        return [c for c in self.nodes if node in self.parents[c]]

    def param_slices(self) -> dict[str, slice]:
        """Location of each node's weights inside the flat parameter vector."""
        out, start = {}, 0
        for n in self.nodes:
            k = len(self.parents[n])
            out[n] = slice(start, start + k)
            start += k
        return out

    def flat_theta(self) -> np.ndarray:
        return np.concatenate([self.theta[n] for n in self.nodes]) if self.n_theta else np.zeros(0)

    def split_theta(self, theta) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_theta:
            raise ModelError(f"theta has dimension {theta.shape[-1]}, network needs {self.n_theta}")
        return {n: theta[..., s] for n, s in self.param_slices().items()}

    def with_theta(self, theta) -> BeliefNetwork:
        return BeliefNetwork(
            nodes=list(self.nodes),
            parents={n: list(p) for n, p in self.parents.items()},
            theta={n: np.array(v) for n, v in self.split_theta(theta).items()},
            alpha=self.alpha,
            hidden=dict(self.hidden),
            root_prob=dict(self.root_prob),
        )

    def root_log_prob(self, node: str, x):
        """Log probability of a parentless node taking value(s) ``x``."""
        if node in self.root_prob:
            p = self.root_prob[node]
            return np.where(np.asarray(x) > 0, np.log(p), np.log1p(-p))
        return log_logistic(np.asarray(x, dtype=float) * self.alpha)


@dataclass
class Dataset:
    """``T`` slices of node values; hidden columns are masked.

    ``values`` is a masked int8 array: masked entries are unobserved, which is
    a state of its own and never a number. ``complete`` optionally keeps the
    generating values of the hidden columns for diagnostics.
    """

    nodes: list[str]
    values: np.ma.MaskedArray
    complete: np.ndarray | None = None

    def __post_init__(self):
        self.nodes = [str(n) for n in self.nodes]
        vals = np.ma.asarray(self.values)
        if vals.ndim != 2 or vals.shape[1] != len(self.nodes):
            raise ModelError(f"values must have shape (T, {len(self.nodes)})")
        mask = np.ma.getmaskarray(vals)
        data = np.asarray(vals.filled(0))
        if np.any(~mask & (data != 1) & (data != -1)):
            raise ModelError("observed entries must be -1 or +1")
        self.values = np.ma.MaskedArray(np.where(mask, 0, data).astype(np.int8), mask=mask)
        col = mask.all(axis=0)
        if np.any(mask.any(axis=0) & ~col):
            raise ModelError("a column is either fully observed or fully unobserved")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def unobserved_columns(self) -> list[str]:
        if self.T == 0:
            return []
        col = np.ma.getmaskarray(self.values).all(axis=0)
        return [n for n, c in zip(self.nodes, col) if c]

    @classmethod
    def from_complete(cls, net: BeliefNetwork, complete) -> Dataset:
        complete = np.asarray(complete, dtype=np.int8).reshape(-1, net.n_x)
        mask = np.zeros(complete.shape, dtype=bool)
        for n in net.hidden_nodes:
            mask[:, net.index(n)] = True
        keep = complete.copy() if net.hidden_nodes else None
        return cls(list(net.nodes), np.ma.MaskedArray(complete, mask=mask), complete=keep)

    def check_compatible(self, net: BeliefNetwork):
        if self.nodes != net.nodes:
            raise ModelError("dataset columns do not match network nodes")
        if self.T and set(self.unobserved_columns) != set(net.hidden_nodes):
            raise ModelError("unobserved columns must coincide with hidden nodes")

    def dense(self) -> np.ndarray:
        """Observed values as floats with unobserved entries set to 0."""
        return np.asarray(self.values.filled(0), dtype=float)


@dataclass
class GaussianPrior:
    """Independent Gaussian prior on each node's weight vector."""

    mu0: dict[str, np.ndarray]
    sigma0: dict[str, np.ndarray]

    def __post_init__(self):
        self._chol = {}
        for node, s in self.sigma0.items():
            s = np.atleast_2d(np.asarray(s, dtype=float))
            m = np.asarray(self.mu0[node], dtype=float).reshape(-1)
            if s.shape != (m.size, m.size):
                raise ModelError(f"prior covariance for {node!r} has wrong shape")
            if m.size:
                if not np.allclose(s, s.T, rtol=0, atol=1e-12):
                    raise ModelError(f"prior covariance for {node!r} is not symmetric")
                try:
                    self._chol[node] = np.linalg.cholesky(s)
                except np.linalg.LinAlgError:
                    raise ModelError(f"prior covariance for {node!r} is not positive definite") from None
            self.sigma0[node] = s.reshape(m.size, m.size)
            self.mu0[node] = m

    @classmethod
    def isotropic(cls, net: BeliefNetwork, mean: float = 0.0, var: float = 100.0) -> GaussianPrior:
        mu0 = {n: np.full(len(net.parents[n]), float(mean)) for n in net.nodes}
        sigma0 = {n: float(var) * np.eye(len(net.parents[n])) for n in net.nodes}
        return cls(mu0, sigma0)

    def flat_mean(self, net: BeliefNetwork) -> np.ndarray:
        return np.concatenate([self.mu0[n] for n in net.nodes]) if net.n_theta else np.zeros(0)

    def flat_cov(self, net: BeliefNetwork) -> np.ndarray:
        from scipy.linalg import block_diag

        blocks = [self.sigma0[n] for n in net.nodes if net.parents[n]]
        return block_diag(*blocks) if blocks else np.zeros((0, 0))

    def logpdf(self, net: BeliefNetwork, theta) -> np.ndarray | float:
        parts = net.split_theta(theta)
        total = 0.0
        for node, th in parts.items():
            k = th.shape[-1]
            if k == 0:
                continue
            L = self._chol[node]
            z = np.linalg.solve(L, (th - self.mu0[node]).T if th.ndim > 1 else th - self.mu0[node])
            quad = np.sum(z * z, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            total = total - 0.5 * (quad + logdet + k * np.log(2.0 * np.pi))
        return total

    def sample(self, net: BeliefNetwork, rng: np.random.Generator) -> np.ndarray:
        out = []
        for node in net.nodes:
            k = len(net.parents[node])
            if k:
                out.append(self.mu0[node] + self._chol[node] @ rng.standard_normal(k))
        return np.concatenate(out) if out else np.zeros(0)


def _slice_vector(net: BeliefNetwork, slice_values) -> list:
    if isinstance(slice_values, Mapping):
        return [slice_values.get(n) for n in net.nodes]
    vals = list(slice_values)
    if len(vals) != net.n_x:
        raise ModelError("incomplete slice")
    return vals


def _missing(v) -> bool:
    return v is None or v is np.ma.masked or (isinstance(v, float) and np.isnan(v))


def log_conditional(net: BeliefNetwork, node: str, slice_values) -> float:
    """``log p(x_node | x_parents)`` for one slice.

    ``slice_values`` is either a mapping from node id to value or a sequence
    aligned with ``net.nodes``; ``None`` marks a missing entry.
    """
    vals = _slice_vector(net, slice_values)
    x = vals[net.index(node)]
    if _missing(x):
        raise ModelError("incomplete slice")
    if net.is_root(node):
        return float(net.root_log_prob(node, x))
    pv = []
    for p in net.parents[node]:
        v = vals[net.index(p)]
        if _missing(v):
            raise ModelError("incomplete slice")
        pv.append(float(v))
    a = net.alpha + float(net.theta[node] @ np.array(pv))
    return float(log_logistic(float(x) * a))


def log_prior(prior: GaussianPrior, net: BeliefNetwork, theta) -> float:
    return prior.logpdf(net, np.asarray(theta, dtype=float))


class LogPosterior:
    """Unnormalized log posterior ``log p(theta) + log p(x_visible | theta)``.

    Hidden nodes are summed out exactly, slice by slice, over all
    ``2**n_hidden`` joint configurations. Calls accept a single parameter
    vector or a batch of shape ``(B, n_theta)``.
    """

    def __init__(self, net: BeliefNetwork, prior: GaussianPrior, data: Dataset, h_max: int = H_MAX):
        data.check_compatible(net)
        hidden = [net.index(n) for n in net.hidden_nodes]
        if len(hidden) > h_max:
            raise ModelError("hidden enumeration limit exceeded")
        self.net, self.prior, self.data = net, prior, data
        self.n_theta = net.n_theta
        configs = np.array(list(itertools.product([-1.0, 1.0], repeat=len(hidden))), dtype=float)
        X = np.broadcast_to(data.dense(), (len(configs), data.T, net.n_x)).copy()
        if hidden:
            X[:, :, hidden] = configs[:, None, :]
        self._X = X
        self._slices = net.param_slices()
        const = np.zeros(X.shape[:2])
        self._terms = []
        for node in net.nodes:
            i = net.index(node)
            if net.is_root(node):
                const = const + net.root_log_prob(node, X[:, :, i])
            else:
                self._terms.append((self._slices[node], X[:, :, net.parent_index(node)], X[:, :, i]))
        self._const = const
        self._chunk = max(1, 2_000_000 // max(1, X.shape[0] * X.shape[1]))

    def log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_theta:
            raise ModelError(f"theta has dimension {theta.shape[-1]}, network needs {self.n_theta}")
        if theta.ndim == 1:
            return float(self._loglik_batch(theta[None, :])[0])
        out = np.empty(theta.shape[0])
        for s in range(0, theta.shape[0], self._chunk):
            out[s : s + self._chunk] = self._loglik_batch(theta[s : s + self._chunk])
        return out

    def _loglik_batch(self, theta: np.ndarray) -> np.ndarray:
        alpha = self.net.alpha
        total = np.repeat(self._const[:, :, None], theta.shape[0], axis=2)
        for sl, parents_x, child_x in self._terms:
            a = alpha + parents_x @ theta[:, sl].T
            total += log_logistic(child_x[:, :, None] * a)
        if total.shape[0] == 1:
            per_slice = total[0]
        else:
            per_slice = logsumexp(total, axis=0)
        return per_slice.sum(axis=0)

    def __call__(self, theta):
        return self.prior.logpdf(self.net, theta) + self.log_likelihood(theta)


def log_posterior_unnorm(net: BeliefNetwork, prior: GaussianPrior, data: Dataset, theta, h_max: int = H_MAX):
    return LogPosterior(net, prior, data, h_max=h_max)(theta)


def log_likelihood(net: BeliefNetwork, data: Dataset, theta, h_max: int = H_MAX):
    """``log p(x_visible | theta)`` with hidden nodes summed out."""
    dummy = GaussianPrior.isotropic(net)
    return LogPosterior(net, dummy, data, h_max=h_max).log_likelihood(theta)


def generate(net: BeliefNetwork, T: int, seed) -> Dataset:
    """Ancestral sampling of ``T`` slices; hidden columns come back masked.

    Uniforms are drawn node by node in topological order, ``T`` per node.
    """
    if T < 1:
        raise ModelError("T must be at least 1")
    rng = np.random.default_rng(seed)
    X = np.zeros((T, net.n_x), dtype=np.int8)
    for node in net.nodes:
        i = net.index(node)
        if net.is_root(node):
            p = np.full(T, np.exp(net.root_log_prob(node, 1.0)))
        else:
            p = logistic(net.alpha + X[:, net.parent_index(node)].astype(float) @ net.theta[node])
        X[:, i] = np.where(rng.random(T) < p, 1, -1)
    return Dataset.from_complete(net, X)


def single_child_network(n_parents: int, theta, alpha: float, parent_prob=0.5, hidden_parents=()) -> BeliefNetwork:
    """One child ``y`` with parents ``p1..pk``; the layout used by the experiments.

    ``parent_prob`` is a scalar or one probability per parent for taking +1.
    """
    pars = [f"p{k + 1}" for k in range(n_parents)]
    probs = np.broadcast_to(np.asarray(parent_prob, dtype=float), (n_parents,))
    hidden = {p: (k in hidden_parents or p in hidden_parents) for k, p in enumerate(pars)}
    hidden["y"] = False
    return BeliefNetwork(
        nodes=pars + ["y"],
        parents={**{p: [] for p in pars}, "y": pars},
        theta={"y": np.asarray(theta, dtype=float)},
        alpha=alpha,
        hidden=hidden,
        root_prob={p: float(q) for p, q in zip(pars, probs)},
    )
