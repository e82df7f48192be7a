import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bnnas import engine
from bnnas.indicator import (BnScorer, acc_indicator, gamma_score, op_score, score_table,
                             score_table_from_gammas, subnet_score, subnet_scores, top1_accuracy,
                             write_score_table_csv)
from bnnas.space import build_supernet, extract_subnet, forward_path


def randomize_gammas(net, seed):
    rng = np.random.default_rng(seed)
    for op in net.all_ops():
        g = op.project_bn.gamma
        g[:] = rng.standard_normal(g.shape).astype(g.dtype)


def brute_force_score(net, arch) -> float:
    total = 0.0
    for l, a in enumerate(arch):
        gamma = net.ops[l][a].project.bn.gamma
        s = 0.0
        for v in gamma:
            s += abs(float(v))
        total += s / len(gamma)
    return total


def test_every_toy_arch_matches_brute_force(space):
    net = build_supernet(space, 0)
    randomize_gammas(net, 1)
    table = score_table(net)
    for arch in itertools.product(range(6), repeat=3):
        assert abs(subnet_score(table, arch) - brute_force_score(net, arch)) <= 1e-7


def test_score_uses_only_last_bn(space):
    net = build_supernet(space, 0)
    before = score_table(net).copy()
    for op in net.all_ops():
        op.expand.bn.gamma[:] = 5.0
        op.depthwise.bn.gamma[:] = -3.0
    assert np.array_equal(score_table(net), before)
    net.ops[1][2].project_bn.gamma[:] = -2.0
    assert score_table(net)[1, 2] == 2.0


def test_table_is_read_only(space):
    table = score_table(build_supernet(space, 0))
    with pytest.raises(ValueError):
        table[0, 0] = 1.0


def test_op_score_bounds(space):
    net = build_supernet(space, 0)
    assert op_score(net, 2, 5).value == 1.0
    with pytest.raises(IndexError):
        op_score(net, 3, 0)
    with pytest.raises(IndexError):
        op_score(net, 0, 6)


@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-1e3, 1e3, width=32)))
def test_gamma_score_is_mean_abs(g):
    assert gamma_score(g) == pytest.approx(float(np.mean(np.abs(g.astype(np.float64)))), rel=1e-12, abs=1e-12)
    assert gamma_score(g) >= 0.0
    assert gamma_score(-g) == gamma_score(g)


@given(st.integers(0, 2**31), st.integers(1, 6))
@settings(max_examples=40)
def test_vectorised_scores_agree_with_sequential(seed, layers):
    rng = np.random.default_rng(seed)
    table = rng.uniform(0, 3, (layers, 6))
    archs = rng.integers(0, 6, (50, layers))
    fast = subnet_scores(table, archs)
    slow = [subnet_score(table, a) for a in archs]
    assert fast.tolist() == slow


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_score_is_additive_across_layers(seed):
    rng = np.random.default_rng(seed)
    table = rng.uniform(0, 3, (4, 6))
    a = tuple(rng.integers(0, 6, 4))
    b = list(a)
    b[2] = (a[2] + 1) % 6
    diff = subnet_score(table, b) - subnet_score(table, a)
    assert diff == pytest.approx(table[2, b[2]] - table[2, a[2]], abs=1e-12)


def test_gamma_list_path_matches_network_path(space):
    net = build_supernet(space, 0)
    randomize_gammas(net, 3)
    gammas = [[op.project_bn.gamma for op in row] for row in net.ops]
    assert np.array_equal(score_table_from_gammas(gammas), score_table(net))


def test_bn_scorer_runs_no_tensor_ops(space):
    scorer = BnScorer(score_table(build_supernet(space, 0)))
    engine.reset_counters()
    for a in itertools.product(range(6), repeat=3):
        scorer(a)
    assert engine.counters["forward_path"] == 0 and engine.counters["conv2d_forward"] == 0


def test_acc_indicator_matches_manual_eval(space, tiny_data):
    net = build_supernet(space, 0)
    arch = (1, 2, 3)
    acc = acc_indicator(net, arch, tiny_data.x, tiny_data.y)
    logits, _ = forward_path(net, arch, tiny_data.x)
    assert acc == np.mean(logits.argmax(1) == tiny_data.y)
    assert top1_accuracy(net, arch, tiny_data.x, tiny_data.y, batch_size=7) == acc


def test_recalibration_leaves_supernet_untouched(space, tiny_data):
    net = build_supernet(space, 0)
    before = {n: a.copy() for n, (_, a) in net.tensors().items()}
    acc = acc_indicator(net, (0, 1, 2), tiny_data.x, tiny_data.y, recalibrate=True, x_train=tiny_data.x)
    assert 0.0 <= acc <= 1.0
    assert all(np.array_equal(before[n], a) for n, (_, a) in net.tensors().items())
    with pytest.raises(ValueError):
        acc_indicator(net, (0, 1, 2), tiny_data.x, tiny_data.y, recalibrate=True)


def test_recalibrated_stats_equal_dataset_moments(space, tiny_data):
    from bnnas.indicator import recalibrate_bn
    sub = extract_subnet(build_supernet(space, 0), (0, 0, 0))
    recalibrate_bn(sub, None, tiny_data.x, batch_size=16)
    x = tiny_data.x.astype(np.float32)
    y = engine.conv2d_forward(x, sub.stem.weight, 1, 1)
    np.testing.assert_allclose(sub.stem.bn.running_mean, y.mean(axis=(0, 2, 3)), rtol=1e-4, atol=1e-5)


def test_score_csv(tmp_path, space):
    table = score_table(build_supernet(space, 0))
    path = tmp_path / "scores.csv"
    write_score_table_csv(path, table)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,candidate,kernel,expansion,score"
    assert len(lines) == 1 + 18
    assert lines[2] == "0,1,3,6,1.0"
