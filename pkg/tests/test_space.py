import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnnas import engine
from bnnas.engine import BnParams
from bnnas.space import (CANDIDATES, SpaceConfig, StaleCacheError, Subnet, backward_path, build_subnet,
                         build_supernet, extract_subnet, flops, flops_table, forward_path, sample_fair_round,
                         sample_uniform, trainable_filter, validate_arch)
from conftest import central_diff, rel_err, toy_space


def oracle_macs(space: SpaceConfig, arch) -> tuple[int, list[int]]:
    """Closed-form MAC count written independently of the library."""
    h = math.ceil(space.image_size / space.stem_stride)
    total = h * h * space.stem_channels * space.in_channels * 9
    cin, per_layer = space.stem_channels, []
    for (cout, s), a in zip(space.layers, arch):
        k, t = CANDIDATES[a]
        ho = math.ceil(h / s)
        m = h * h * cin * (t * cin) + ho * ho * (t * cin) * k * k + ho * ho * (t * cin) * cout
        per_layer.append(m)
        h, cin = ho, cout
    total += sum(per_layer) + h * h * cin * space.head_channels + space.head_channels * space.num_classes
    return total, per_layer


def test_candidate_order_and_minimal_op():
    assert [str(c) for c in CANDIDATES] == ["k3e3", "k3e6", "k5e3", "k5e6", "k7e3", "k7e6"]
    table, _ = flops_table(toy_space())
    assert (table.argmin(axis=1) == 0).all()


def test_flops_match_closed_form_for_every_toy_arch(space):
    table, fixed = flops_table(space)
    for arch in itertools.product(range(6), repeat=3):
        rep = flops(space, arch)
        total, per_layer = oracle_macs(space, arch)
        assert rep.per_layer == per_layer
        assert rep.total == total == fixed + sum(table[l, a] for l, a in enumerate(arch))


@pytest.mark.parametrize("sp", [toy_space(), SpaceConfig(), toy_space(stem_stride=2, image_size=9)])
def test_flops_monotone_in_expansion_and_kernel(sp):
    table, _ = flops_table(sp)
    for row in table:
        for k in range(3):
            assert row[2 * k + 1] > row[2 * k]
        for e in range(2):
            assert row[e] < row[2 + e] < row[4 + e]


def test_default_space_flops_closed_form():
    sp = SpaceConfig()
    rng = np.random.default_rng(0)
    for _ in range(50):
        arch = sample_uniform(sp, rng)
        assert flops(sp, arch).total == oracle_macs(sp, arch)[0]


def test_residual_only_for_stride1_same_width(space):
    net = build_supernet(space, 0)
    for l, spec in enumerate(space.layer_specs()):
        expect = spec.stride == 1 and spec.in_channels == spec.out_channels
        assert all(op.residual == expect for op in net.ops[l])
    assert [s.residual for s in space.layer_specs()] == [True, False, True]


def test_supernet_has_independent_weights_per_candidate(space):
    net = build_supernet(space, 0)
    names = list(net.tensors())
    assert len(names) == len(set(names))
    assert net.ops[0][0].project_bn is not net.ops[0][1].project_bn


def test_forward_shapes_and_determinism(space, tiny_data):
    a = build_supernet(space, 5)
    b = build_supernet(space, 5)
    x = tiny_data.x[:8]
    la, _ = forward_path(a, (1, 2, 3), x)
    lb, _ = forward_path(b, (1, 2, 3), x)
    assert la.shape == (8, space.num_classes)
    assert la.tobytes() == lb.tobytes()


def test_extracted_subnet_matches_supernet_path(space, tiny_data):
    net = build_supernet(space, 1)
    arch = (4, 0, 5)
    sub = extract_subnet(net, arch)
    x = tiny_data.x[:6]
    np.testing.assert_array_equal(forward_path(net, arch, x)[0], forward_path(sub, None, x)[0])
    sub.ops[0].project_bn.gamma[:] = 7
    assert not np.any(net.ops[0][4].project_bn.gamma == 7)


def _to_float64(net):
    units = [net.stem, net.head] + [u for op in net.all_ops() for u in op.units()]
    for u in units:
        u.weight = u.weight.astype(np.float64)
        b = u.bn
        u.bn = BnParams(b.gamma.astype(np.float64), b.beta.astype(np.float64),
                        b.running_mean.astype(np.float64), b.running_var.astype(np.float64), b.momentum, b.eps)
    net.fc_weight = net.fc_weight.astype(np.float64)
    net.fc_bias = net.fc_bias.astype(np.float64)


@pytest.mark.parametrize("mode", ["bn_only", "all_params"])
def test_path_gradients_match_finite_differences(space, tiny_data, mode):
    net = build_supernet(space, 2)
    _to_float64(net)
    rng = np.random.default_rng(0)
    for op in net.all_ops():
        op.project_bn.gamma[:] = rng.uniform(0.5, 1.5, op.project_bn.gamma.shape)
    arch = (3, 1, 0)
    x, y = tiny_data.x[:4].astype(np.float64), tiny_data.y[:4]

    def loss():
        return engine.softmax_ce_label_smoothing(forward_path(net, arch, x, train=True)[0], y, 0.1)[0]

    logits, cache = forward_path(net, arch, x, train=True)
    grads = backward_path(net, cache, engine.softmax_ce_label_smoothing(logits, y, 0.1)[1], mode)
    params = net.parameters()
    want = trainable_filter(mode)
    expected = {n for n, (k, _) in net.tensors().items()
                if want(n, k) and (not n.startswith("layers.") or n.split(".")[2] == str(arch[int(n.split(".")[1])]))}
    assert set(grads) == expected
    checked = ["layers.0.3.project.bn.gamma", "layers.1.1.expand.bn.beta", "stem.bn.gamma"]
    if mode == "all_params":
        checked += ["layers.2.0.depthwise.conv", "fc.weight", "head.conv"]
    for name in checked:
        assert rel_err(grads[name], central_diff(loss, params[name])) <= 1e-3, name


def test_backward_rejects_stale_and_eval_caches(space, tiny_data):
    net = build_supernet(space, 0)
    x, y = tiny_data.x[:4], tiny_data.y[:4]
    logits, cache = forward_path(net, (0, 0, 0), x, train=True)
    g = engine.softmax_ce_label_smoothing(logits, y)[1]
    backward_path(net, cache, g)
    with pytest.raises(StaleCacheError):
        backward_path(net, cache, g)
    _, eval_cache = forward_path(net, (0, 0, 0), x, train=False)
    with pytest.raises(StaleCacheError):
        backward_path(net, eval_cache, g)
    _, cache = forward_path(net, (0, 0, 0), x, train=True)
    with pytest.raises(StaleCacheError):
        backward_path(build_supernet(space, 0), cache, g)


def test_forward_counter(space, tiny_data):
    net = build_supernet(space, 0)
    engine.reset_counters()
    forward_path(net, (0, 1, 2), tiny_data.x[:2])
    assert engine.counters["forward_path"] == 1
    assert engine.counters["conv2d_forward"] == 2 + 3 * 3


@given(seed=st.integers(0, 2**32 - 1), layers=st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_fair_round_uses_each_candidate_once_per_layer(seed, layers):
    sp = toy_space(layers=tuple((4, 1) for _ in range(layers)))
    archs = sample_fair_round(sp, np.random.default_rng(seed))
    assert len(archs) == 6
    for l in range(layers):
        assert sorted(a[l] for a in archs) == list(range(6))


def test_uniform_sampling_is_roughly_uniform(space):
    rng = np.random.default_rng(0)
    counts = np.zeros((3, 6))
    for _ in range(6000):
        for l, a in enumerate(sample_uniform(space, rng)):
            counts[l, a] += 1
    assert np.all(np.abs(counts - 1000) < 150)


def test_validate_arch_errors(space):
    with pytest.raises(ValueError):
        validate_arch(space, (0, 1))
    with pytest.raises(ValueError):
        validate_arch(space, (0, 1, 6))
    with pytest.raises(ValueError):
        Subnet(space, (0, 0, 0), seed=0).path((1, 0, 0))


def test_space_config_roundtrip_and_digest():
    sp = toy_space()
    again = SpaceConfig.from_dict(sp.to_dict())
    assert again == sp and again.digest() == sp.digest()
    assert toy_space(head_channels=32).digest() != sp.digest()
    plan = {"stem_channels": 4, "layers": [{"in": 4, "out": 8, "stride": 2}, {"in": 8, "out": 8}]}
    assert SpaceConfig.from_dict(plan).layers == ((8, 2), (8, 1))
    with pytest.raises(ValueError, match="inconsistent"):
        SpaceConfig.from_dict({"stem_channels": 4, "layers": [{"in": 4, "out": 8}, {"in": 6, "out": 8}]})
    with pytest.raises(ValueError):
        SpaceConfig(layers=((8, 3),))


def test_subnet_seeded_init(space, tiny_data):
    a = build_subnet(space, (1, 1, 1), 3)
    b = build_subnet(space, (1, 1, 1), 3)
    assert all(np.array_equal(a.tensors()[n][1], b.tensors()[n][1]) for n in a.tensors())
    assert forward_path(a, None, tiny_data.x[:2])[0].shape == (2, space.num_classes)
