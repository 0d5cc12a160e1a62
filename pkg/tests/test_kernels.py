import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from varmcmc.kernels import (
    MIXTURE,
    RANDOM_WALK,
    VARIATIONAL,
    BlockPartition,
    ChainError,
    GaussianProposal,
    KernelSpec,
    cycle_step,
    effective_sample_size,
    mc_standard_error,
    mh_accept_prob,
    mixture_step,
    posterior_cov,
    posterior_mean,
    read_trace,
    run_chain,
    rw_block_step,
    var_block_step,
    write_trace,
)

COV = np.array([[1.0, 0.6], [0.6, 2.0]])
MEAN = np.array([0.5, -1.0])


def gauss_target(theta):
    d = np.asarray(theta) - MEAN
    return float(-0.5 * d @ np.linalg.solve(COV, d))


def test_accept_prob_basics():
    assert mh_accept_prob(0.0, 1.0) == 1.0
    assert mh_accept_prob(0.0, -np.log(4)) == pytest.approx(0.25)
    assert mh_accept_prob(0.0, -np.inf) == 0.0
    with pytest.raises(ChainError, match="zero-density"):
        mh_accept_prob(-np.inf, 0.0)
    with pytest.raises(ChainError, match="NaN"):
        mh_accept_prob(0.0, np.nan)


def test_rw_step_draw_order():
    # |block| normals then one uniform, nothing else
    theta = np.zeros(4)
    rng = np.random.default_rng(3)
    out, _, acc = rw_block_step(theta, slice(1, 3), 0.25, gauss_target4, rng)
    ref = np.random.default_rng(3)
    z = ref.standard_normal(2)
    u = ref.random()
    prop = theta.copy()
    prop[1:3] = 0.5 * z
    expect = u < mh_accept_prob(gauss_target4(theta), gauss_target4(prop))
    assert acc == expect
    np.testing.assert_array_equal(out, prop if acc else theta)
    assert rng.random() == ref.random()


def gauss_target4(theta):
    return float(-0.5 * np.sum(np.asarray(theta) ** 2))


def test_var_step_exact_target_always_accepts():
    q = GaussianProposal(MEAN, COV)
    rng = np.random.default_rng(0)
    theta = np.array([3.0, 3.0])
    lp = gauss_target(theta)
    for _ in range(200):
        theta, lp, acc = var_block_step(theta, slice(0, 2), q, gauss_target, rng, lp)
        assert acc


def test_var_step_leaves_other_block_untouched():
    q = GaussianProposal([0.0], [[1.0]])
    theta = np.array([1.0, 2.0, 3.0])
    out, _, _ = var_block_step(theta, slice(1, 2), q, gauss_target4, np.random.default_rng(1))
    assert out[0] == 1.0 and out[2] == 3.0


def test_single_block_cycle_equals_inner_step():
    part = BlockPartition.single(2)
    inner_rng, cyc_rng = np.random.default_rng(5), np.random.default_rng(5)
    theta = np.array([0.1, 0.2])
    a = rw_block_step(theta, slice(0, 2), 0.3, gauss_target, inner_rng)
    b = cycle_step(theta, part, lambda th, bl, lp: rw_block_step(th, bl, 0.3, gauss_target, cyc_rng, lp), gauss_target, cyc_rng)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2][0]


def test_partition_validation():
    assert BlockPartition.contiguous(12, 5).blocks == ((0, 5), (5, 10), (10, 12))
    with pytest.raises(ValueError):
        BlockPartition(((0, 2), (3, 4)))
    with pytest.raises(ValueError):
        BlockPartition(((0, 0),))


@given(st.integers(1, 60), st.integers(1, 9))
def test_partition_covers(n, size):
    p = BlockPartition.contiguous(n, size)
    covered = np.concatenate([np.arange(a, b) for a, b in p.blocks])
    np.testing.assert_array_equal(covered, np.arange(n))


@pytest.mark.parametrize("nu", [0.0, 1.0])
def test_degenerate_mixture_is_pure_kernel(nu):
    q = GaussianProposal(MEAN, 1.5 * COV)
    part = BlockPartition.single(2)
    pure = KernelSpec(VARIATIONAL if nu == 1.0 else RANDOM_WALK, part, rw_variance=0.5, proposal=q)
    mix = KernelSpec(MIXTURE, part, rw_variance=0.5, nu=nu, proposal=q)
    a = run_chain([0.0, 0.0], pure, gauss_target, 500, seed=9)
    b = run_chain([0.0, 0.0], mix, gauss_target, 500, seed=9)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.accepted.tobytes() == b.accepted.tobytes()


def test_mixture_uses_both_components():
    q = GaussianProposal(MEAN, COV)
    spec = KernelSpec(MIXTURE, BlockPartition.single(2), rw_variance=0.5, nu=0.3, proposal=q)
    tr = run_chain([0.0, 0.0], spec, gauss_target, 3000, seed=1)
    frac = np.mean(tr.kernel == VARIATIONAL)
    assert 0.25 < frac < 0.35


def test_mixture_step_rejects_bad_weight():
    with pytest.raises(ValueError):
        mixture_step(np.zeros(1), 1.5, None, None, np.random.default_rng(0), 0.0)


def test_chain_is_reproducible():
    spec = KernelSpec(RANDOM_WALK, BlockPartition.contiguous(2, 1), rw_variance=0.4)
    a = run_chain([0, 0], spec, gauss_target, 300, seed=7)
    b = run_chain([0, 0], spec, gauss_target, 300, seed=7)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert len(a) == 330 and a.burn_in == 30


def test_chain_rejects_zero_density_start():
    spec = KernelSpec(RANDOM_WALK, BlockPartition.single(1))
    with pytest.raises(ChainError):
        run_chain([0.0], spec, lambda t: -np.inf, 10)


def test_zero_samples_rejected():
    spec = KernelSpec(RANDOM_WALK, BlockPartition.single(1))
    with pytest.raises(ChainError):
        run_chain([0.0], spec, gauss_target4, 0)


def test_detailed_balance_rw_lattice():
    # 5-state lattice, +-1 symmetric proposals (reflecting ends count as rejections)
    p = np.array([0.1, 0.3, 0.25, 0.05, 0.3])
    n = p.size
    K = np.zeros((n, n))
    for x in range(n):
        for y in (x - 1, x + 1):
            if 0 <= y < n:
                K[x, y] = 0.5 * mh_accept_prob(np.log(p[x]), np.log(p[y]))
        K[x, x] = 1.0 - K[x].sum()
    flow = p[:, None] * K
    np.testing.assert_allclose(flow, flow.T, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p @ K, p, rtol=0, atol=1e-12)


def test_detailed_balance_independence_lattice():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6))
    q = rng.dirichlet(np.ones(6))
    K = np.zeros((6, 6))
    for x in range(6):
        for y in range(6):
            if x != y:
                K[x, y] = q[y] * mh_accept_prob(np.log(p[x]), np.log(p[y]), np.log(q[x]), np.log(q[y]))
        K[x, x] = 1.0 - K[x].sum()
    flow = p[:, None] * K
    np.testing.assert_allclose(flow, flow.T, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", [RANDOM_WALK, VARIATIONAL, MIXTURE])
def test_short_chain_moments(kind):
    q = GaussianProposal(MEAN + 0.2, 1.6 * COV)
    spec = KernelSpec(kind, BlockPartition.contiguous(2, 1), rw_variance=1.0, nu=0.5, proposal=q)
    tr = run_chain(MEAN, spec, gauss_target, 20000, seed=2)
    m = posterior_mean(tr)
    se = np.array([mc_standard_error(c) for c in tr.retained().T])
    assert np.all(np.abs(m - MEAN) < 4 * se)
    assert np.linalg.norm(posterior_cov(tr) - COV) / np.linalg.norm(COV) < 0.15


def test_ess_iid_and_correlated():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20000)
    assert effective_sample_size(x) == pytest.approx(20000, rel=0.1)
    ar = np.zeros(20000)
    for i in range(1, ar.size):
        ar[i] = 0.9 * ar[i - 1] + x[i]
    # AR(1) with rho = 0.9 has ESS n (1 - rho) / (1 + rho)
    assert effective_sample_size(ar) == pytest.approx(20000 * 0.1 / 1.9, rel=0.25)


def test_trace_round_trip(tmp_path):
    q = GaussianProposal(MEAN, COV)
    spec = KernelSpec(MIXTURE, BlockPartition.contiguous(2, 1), nu=0.5, proposal=q)
    tr = run_chain([0.1, 0.2], spec, gauss_target, 50, seed=4)
    path = tmp_path / "t.ndjson"
    write_trace(tr, path, {"note": "x"})
    head = json.loads(path.read_text().splitlines()[0])
    assert head["note"] == "x" and "config_hash" in head
    back = read_trace(path)
    assert back.theta.tobytes() == tr.theta.tobytes()
    np.testing.assert_array_equal(back.accepted, tr.accepted)
    np.testing.assert_array_equal(back.kernel, tr.kernel)
    assert back.burn_in == tr.burn_in


def test_acceptance_rate_by_component():
    q = GaussianProposal(MEAN, COV)
    spec = KernelSpec(MIXTURE, BlockPartition.single(2), rw_variance=100.0, nu=0.5, proposal=q)
    tr = run_chain(MEAN, spec, gauss_target, 4000, seed=3)
    assert tr.acceptance_rate(VARIATIONAL) == 1.0
    assert tr.acceptance_rate(RANDOM_WALK) < 0.2


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("hmc", BlockPartition.single(1))
    with pytest.raises(ValueError):
        KernelSpec(VARIATIONAL, BlockPartition.single(2))
    with pytest.raises(ValueError):
        KernelSpec(RANDOM_WALK, BlockPartition.single(1), rw_variance=0.0)
