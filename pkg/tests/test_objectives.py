import itertools

import mpmath
import numpy as np
import pytest

from dnad.objectives import (
    KDConfig, KDVariant, LossBreakdown, at_loss, attention_map, composite_loss, entropy_bounds, kd_loss,
    node_sparsity_entropy, prediction_loss, st_loss, total_sparsity_entropy,
)
from dnad.search_space import NetConfig, build_supernet
from dnad.tensor import Tape, Tensor, grad_check, ops

mpmath.mp.dps = 40
LN51 = float(mpmath.log(51))
TWO_LN26 = float(2 * mpmath.log(26))


def simplex_grid(m, step=0.01):
    n = int(round(1 / step))
    for head in itertools.product(range(n + 1), repeat=m - 1):
        rest = n - sum(head)
        if rest >= 0:
            yield np.array(head + (rest,)) / n


# ------------------------------------------------------------- entropy

def test_one_hot_entropy_matches_oracle():
    assert abs(node_sparsity_entropy([1.0]) - LN51) < 1e-6
    assert abs(node_sparsity_entropy([0.0, 1.0, 0.0]) - LN51) < 1e-12
    assert abs(LN51 - 3.9318) < 1e-4


def test_uniform_pair_entropy_matches_oracle():
    assert abs(node_sparsity_entropy([0.5, 0.5]) - TWO_LN26) < 1e-6
    assert abs(TWO_LN26 - 6.51619) < 1e-5


@pytest.mark.parametrize("m", [2, 3])
def test_entropy_extremes_on_grid(m):
    vals = [(node_sparsity_entropy(d), d) for d in simplex_grid(m)]
    hi, d_hi = max(vals, key=lambda v: v[0])
    lo = min(v[0] for v in vals)
    lo_pts = [d for v, d in vals if abs(v - lo) < 1e-12]
    bounds = entropy_bounds(m)
    assert abs(lo - bounds[0]) < 1e-12
    assert all(np.count_nonzero(d) == 1 for d in lo_pts) and len(lo_pts) == m
    # the grid only contains the exact barycentre for m=2; for m=3 it is within one step
    assert np.abs(d_hi - 1.0 / m).max() <= 0.01 + 1e-12
    assert hi <= bounds[1] + 1e-12
    assert bounds[1] - hi < 1e-3


def test_uniform_entropy_dominates_one_hot():
    for m in range(1, 12):
        u = node_sparsity_entropy(np.full(m, 1.0 / m))
        assert u >= LN51 - 1e-12
        assert (abs(u - LN51) < 1e-12) == (m == 1)


def test_entropy_rejects_negative_weights():
    with pytest.raises(ValueError):
        node_sparsity_entropy([1.2, -0.2])
    with pytest.raises(ValueError):
        node_sparsity_entropy([1.0], K=0)


def test_total_entropy_closed_forms(f64):
    net = build_supernet(NetConfig(cells=5, nodes=4, channels=2, input_shape=(3, 8, 8)), seed=0)
    dense = total_sparsity_entropy(net, differentiable=False)
    assert abs(total_sparsity_entropy(net).item() - dense) < 1e-9
    for node in net.iter_nodes():
        node.alive[:] = False
        node.alive[0] = True
    assert abs(total_sparsity_entropy(net, differentiable=False) - 5 * 2 * LN51) < 1e-9
    assert dense > 5 * 2 * LN51


def test_total_entropy_rescaling_invariance(f64, rng):
    net = build_supernet(NetConfig(cells=5, nodes=4, channels=2, input_shape=(3, 8, 8)), seed=0)
    for node in net.iter_nodes():
        node.alpha.data[:] = rng.uniform(0.1, 2, node.alpha.shape)
    a = net.sparsity_entropy()
    for node in net.iter_nodes():
        node.alpha.data *= rng.uniform(0.5, 4)
    assert abs(net.sparsity_entropy() - a) < 1e-9


def test_entropy_gradient_through_attention(f64, rng):
    alpha = Tensor(rng.uniform(0.2, 1.5, size=5), requires_grad=True)

    def f():
        r = ops.relu(alpha)
        return node_sparsity_entropy(r / r.sum())
    assert grad_check(f, [alpha]) < 1e-6


# ------------------------------------------------------ prediction loss

def test_prediction_loss_uniform_and_limit(f64):
    assert abs(prediction_loss(Tensor(np.zeros((4, 7))), np.arange(4)).item() - np.log(7)) < 1e-12
    z = np.full((3, 5), -50.0)
    z[np.arange(3), [0, 2, 4]] = 50.0
    assert prediction_loss(Tensor(z), np.array([0, 2, 4])).item() < 1e-30


def test_prediction_loss_gradient(f64, rng):
    z = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    y = rng.integers(0, 5, 6)
    assert grad_check(lambda: prediction_loss(z, y), [z]) < 1e-6


def test_prediction_loss_rejects_nonfinite(f64):
    with pytest.raises(FloatingPointError):
        prediction_loss(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))


# ------------------------------------------------------------ composite

def test_composite_arithmetic():
    assert abs(composite_loss(1.0, 200.0, 1e-4, 0.01) - 1.0202) < 1e-12
    assert composite_loss(3.7, 200.0, 0.0, 5.0) == 3.7
    with pytest.raises(ValueError):
        composite_loss(1.0, 1.0, -1e-3, 0.0)


def test_composite_gradient_decomposition(f64, rng):
    w = Tensor(rng.normal(size=4), requires_grad=True)
    a = Tensor(rng.uniform(0.3, 1.0, size=4), requires_grad=True)
    gamma, mu = 0.03, 0.4

    def parts():
        core = (w * w).sum() + (w * a).sum()
        r = ops.relu(a)
        ls = node_sparsity_entropy(r / r.sum())
        return core, ls

    with Tape() as t:
        core, ls = parts()
        total = composite_loss(core, ls, gamma, mu)
    whole = t.backward(total)
    with Tape() as t:
        core, _ = parts()
    g_core = t.backward(core)
    with Tape() as t:
        _, ls = parts()
    g_ls = t.backward(ls)
    c, s = core.item(), ls.item()
    for p in (w, a):
        assembled = (1 + gamma * s) * g_core.get(p, 0) + (gamma * c + gamma * mu) * g_ls.get(p, 0)
        np.testing.assert_allclose(whole[p], assembled, rtol=0, atol=1e-9)


def test_composite_alpha_gradient_when_core_is_constant(f64, rng):
    a = Tensor(rng.uniform(0.3, 1.0, size=3), requires_grad=True)
    gamma, mu, core = 0.01, 0.2, 1.7
    with Tape() as t:
        r = ops.relu(a)
        ls = node_sparsity_entropy(r / r.sum())
        total = composite_loss(Tensor(core), ls, gamma, mu)
    g_total = t.backward(total)[a]
    with Tape() as t:
        r = ops.relu(a)
        ls = node_sparsity_entropy(r / r.sum())
    g_ls = t.backward(ls)[a]
    np.testing.assert_allclose(g_total, (gamma * core + gamma * mu) * g_ls, rtol=1e-12)


def test_loss_breakdown_recomputes_total():
    b = LossBreakdown(task=1.0, sparsity=200.0, total=1.0202, gamma=1e-4, mu=0.01, core=1.0)
    assert abs(b.recomputed_total() - b.total) < 1e-9


# -------------------------------------------------------- distillation

def test_attention_map_example(f64):
    a = np.array([[[[1, -1], [2, 0]], [[0, 3], [-2, 1]]]], dtype=float)
    np.testing.assert_array_equal(attention_map(Tensor(a)).data[0], [[1, 4], [4, 1]])
    np.testing.assert_array_equal(attention_map(Tensor(-a)).data, attention_map(Tensor(a)).data)
    pos = np.abs(a[:, :1])
    np.testing.assert_array_equal(attention_map(Tensor(pos)).data, pos[:, 0])


def test_at_loss_zero_for_equal_and_scaled_maps(f64, rng):
    s = [Tensor(rng.normal(size=(3, 4, 8, 8))), Tensor(rng.normal(size=(3, 6, 4, 4)))]
    assert at_loss(s, s).item() == 0.0
    scaled = [Tensor(2.5 * m.data) for m in s]
    assert abs(at_loss(scaled, s).item()) < 1e-12


def test_at_loss_scale_invariance(f64, rng):
    s = [Tensor(rng.normal(size=(2, 4, 4, 4)))]
    t = [Tensor(rng.normal(size=(2, 8, 4, 4)))]
    base = at_loss(s, t).item()
    assert abs(at_loss([Tensor(3 * s[0].data)], [Tensor(0.2 * t[0].data)]).item() - base) < 1e-12


def test_at_loss_orthogonal_block_contributes_two(f64):
    s = np.zeros((1, 1, 2, 2))
    t = np.zeros((1, 1, 2, 2))
    s[0, 0, 0, 0] = 1.0
    t[0, 0, 1, 1] = 1.0
    same = np.ones((1, 2, 4, 4))
    loss = at_loss([Tensor(s), Tensor(same)], [Tensor(t), Tensor(same)])
    assert abs(loss.item() - 2.0) < 1e-12


def test_at_loss_zero_norm_contributes_nothing(f64):
    s = np.zeros((2, 1, 2, 2))
    s[1, 0, 0, 0] = 1.0
    t = np.ones((2, 1, 2, 2))
    loss = at_loss([Tensor(s)], [Tensor(t)]).item()
    u = np.array([1.0, 0, 0, 0])
    v = np.full(4, 0.5)
    assert abs(loss - ((u - v) ** 2).sum() / 2) < 1e-12


def test_at_loss_spatial_mismatch_names_block(f64):
    with pytest.raises(Exception, match="block 2"):
        at_loss([Tensor(np.ones((1, 1, 4, 4)))] * 2, [Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2)))])


def test_at_loss_gradient_reaches_student_only(f64, rng):
    s = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    t = Tensor(rng.normal(size=(2, 5, 4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = at_loss([s], [t])
    grads = tape.backward(loss)
    assert t not in grads and t.grad is None
    assert np.abs(grads[s]).sum() > 0
    s.grad = None
    assert grad_check(lambda: at_loss([s], [t]), [s]) < 1e-6


def test_st_loss_examples(f64, rng):
    z = Tensor(rng.normal(size=(4, 6)))
    assert abs(st_loss(z, z, 4.0).item()) < 1e-15
    zero = Tensor(np.zeros((2, 2)))
    for t in (1.0, 4.0, 10.0):
        assert abs(st_loss(zero, zero, t).item()) < 1e-15
    for _ in range(20):
        a, b = Tensor(rng.normal(size=(3, 5)) * 3), Tensor(rng.normal(size=(3, 5)) * 3)
        assert st_loss(a, b, 4.0).item() >= 0
        assert st_loss(a, b, 4.0, "teacher_student").item() >= 0


def test_st_loss_direction_matches_definition(f64, rng):
    zs, zt = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    t = 4.0

    def p(z):
        e = np.exp(z / t - (z / t).max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    ps, pt = p(zs), p(zt)
    want = (ps * np.log(ps / pt)).sum() / 2
    assert abs(st_loss(Tensor(zs), Tensor(zt), t).item() - want) < 1e-12
    want_rev = (pt * np.log(pt / ps)).sum() / 2
    assert abs(st_loss(Tensor(zs), Tensor(zt), t, "teacher_student").item() - want_rev) < 1e-12


def test_st_loss_gradient(f64, rng):
    zs = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    zt = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: st_loss(zs, zt, 4.0), [zs]) < 1e-6


def test_kd_loss_arithmetic():
    assert abs(kd_loss("at", 1.0, at=0.002, beta=1000) - 2.0) < 1e-12
    assert abs(kd_loss("st", 1.0, st=0.01, t=4) - 1.16) < 1e-12
    assert abs(kd_loss("st+at", 1.0, at=0.002, st=0.01, beta=1000, t=4) - 2.16) < 1e-12
    assert kd_loss(KDVariant.NONE, 1.3) == 1.3
    with pytest.raises(ValueError, match="attention-transfer"):
        kd_loss("at", 1.0)
    with pytest.raises(ValueError, match="soft-target"):
        kd_loss("st+at", 1.0, at=0.1)


def test_kd_config_validation():
    KDConfig()
    for bad in (dict(beta=0), dict(temperature=0.5), dict(blocks=0), dict(kl_direction="sideways")):
        with pytest.raises(ValueError):
            KDConfig(**bad)
