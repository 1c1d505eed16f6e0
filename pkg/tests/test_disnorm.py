import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsdat.disnorm import BranchSet, DatasourceTag, Strategy, make_branch_plan
from kwsdat.errors import ContractError, RoutingError
from kwsdat.tensor import Tensor, backward

F64 = np.float64


def t64(a, rg=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=rg, dtype=F64)


def _snapshot(bs):
    return [(b.running_mean.copy(), b.running_var.copy(), b.update_count) for b in bs.branches]


def reference_bn(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def test_normalizes_to_zero_mean_unit_var():
    x = np.random.default_rng(0).normal(2.0, 1.0, size=(16, 3, 5, 5))
    y = BranchSet(3, 1, dtype=F64)(t64(x), 0, "train").data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_tag_one_leaves_branch_zero_untouched():
    bs = BranchSet(3, 2, dtype=F64)
    before = _snapshot(bs)
    bs(t64(np.random.default_rng(1).normal(size=(4, 3, 2, 2))), 1, "train")
    after = _snapshot(bs)
    assert before[0][0].tobytes() == after[0][0].tobytes()
    assert before[0][1].tobytes() == after[0][1].tobytes()
    assert after[0][2] == 0 and after[1][2] == 1


def test_eval_ignores_tag():
    bs = BranchSet(3, 4, dtype=F64)
    rng = np.random.default_rng(2)
    for k in range(4):
        bs(t64(rng.normal(k, 1 + k, size=(4, 3, 2, 2))), k, "train")
    x = t64(rng.normal(size=(2, 3, 2, 2)))
    assert bs(x, 3, "eval").data.tobytes() == bs(x, 0, "eval").data.tobytes()


def test_running_stats_follow_momentum():
    bs = BranchSet(2, 1, dtype=F64)
    x = np.random.default_rng(3).normal(1.0, 2.0, size=(8, 2, 3, 3))
    bs(t64(x), 0, "train")
    b = bs.branches[0]
    np.testing.assert_allclose(b.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-14)
    np.testing.assert_allclose(b.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-14)


def test_update_stats_false_keeps_running_stats():
    bs = BranchSet(2, 2, dtype=F64)
    before = _snapshot(bs)
    bs(t64(np.ones((2, 2, 2, 2))), 1, "train", update_stats=False)
    assert [s[2] for s in _snapshot(bs)] == [s[2] for s in before]


def test_out_of_range_tag_is_routing_error():
    with pytest.raises(RoutingError):
        BranchSet(3, 2)(t64(np.ones((2, 3, 2, 2))), 2, "train")


def test_single_branch_matches_reference_bn():
    rng = np.random.default_rng(4)
    bs = BranchSet(4, 1, dtype=F64)
    bs.branches[0].gamma = t64(rng.uniform(0.5, 2, 4), rg=True)
    bs.branches[0].beta = t64(rng.normal(size=4), rg=True)
    x = rng.normal(size=(5, 4, 3, 3))
    got = bs(t64(x), 0, "train").data
    np.testing.assert_allclose(got, reference_bn(x, bs.branches[0].gamma.data, bs.branches[0].beta.data), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=12), st.integers(0, 2**31 - 1))
def test_branch_isolation_by_replay(tags, seed):
    rng = np.random.default_rng(seed)
    batches = [rng.normal(t, 1 + t, size=(3, 2, 2, 2)) for t in tags]
    full = BranchSet(2, 3, dtype=F64)
    for t, xb in zip(tags, batches):
        full(t64(xb), t, "train")
    for k in range(3):
        # replay only the tag-k batches into a fresh set; branch k must come out identical
        solo = BranchSet(2, 3, dtype=F64)
        for t, xb in zip(tags, batches):
            if t == k:
                solo(t64(xb), t, "train")
        assert full.branches[k].running_mean.tobytes() == solo.branches[k].running_mean.tobytes()
        assert full.branches[k].running_var.tobytes() == solo.branches[k].running_var.tobytes()
        assert full.branches[k].update_count == tags.count(k)


def test_gamma_beta_gradients_only_on_routed_branch():
    bs = BranchSet(2, 3, dtype=F64)
    y = bs(t64(np.random.default_rng(5).normal(size=(3, 2, 2, 2))), 2, "train")
    backward((y * y).sum())
    assert bs.branches[0].gamma.grad is None and bs.branches[1].beta.grad is None
    assert bs.branches[2].gamma.grad is not None


def test_running_stats_never_on_the_tape():
    bs = BranchSet(2, 1, dtype=F64)
    params = bs.parameters()
    assert all(p.requires_grad for p in params)
    assert not any(isinstance(p, np.ndarray) for p in params)
    assert len(params) == 2


# -- plans -------------------------------------------------------------------------------------


@pytest.mark.parametrize("strategy,sources,levels,k", [
    ("AT", 3, 1, 1), ("NONE", 3, 1, 1), ("DAT", 3, 1, 2), ("FG_DAT", 1, 4, 5), ("DA_DAT", 3, 1, 6), ("DA_DAT", 1, 1, 2),
])
def test_plan_sizes(strategy, sources, levels, k):
    plan = make_branch_plan(strategy, sources, levels)
    assert plan.num_branches == k
    assert [t.id for t in plan] == list(range(k))
    assert plan[0] == DatasourceTag.clean()


def test_da_dat_layout_names():
    assert [str(t) for t in make_branch_plan("DA_DAT", 3)] == ["DS1", "DS2", "DS3", "Adv1", "Adv2", "Adv3"]


def test_da_dat_routing():
    plan = make_branch_plan(Strategy.DA_DAT, 3)
    assert plan.original_branch(1) == 1 and plan.adversarial_branch(1) == 4
    with pytest.raises(RoutingError):
        plan.original_branch(3)


def test_fg_dat_level_out_of_range():
    with pytest.raises(RoutingError):
        make_branch_plan("FG_DAT", 1, 2).adversarial_branch(0, 2)


def test_collapsed_plan_routes_everything_to_main():
    plan = make_branch_plan("DA_DAT", 3, collapsed=True)
    assert plan.num_branches == 6
    assert {plan.original_branch(s) for s in range(3)} | {plan.adversarial_branch(s) for s in range(3)} == {0}


@pytest.mark.parametrize("sources,levels", [(0, 1), (1, 0), (-2, 1)])
def test_nonpositive_counts_rejected(sources, levels):
    with pytest.raises(ContractError):
        make_branch_plan("DAT", sources, levels)


def test_unknown_strategy_rejected():
    with pytest.raises(ContractError):
        make_branch_plan("MIXUP")
