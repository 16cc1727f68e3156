import numpy as np
import pytest

from cspm import gradcheck
from cspm import tensor as T
from cspm.stif import GateParams, gate_table, gate_table_csv, init_gate, stif_forward
from cspm.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_initial_gates_are_half(rng):
    p = init_gate(6, 4, 3, rng)
    z = [t64(rng.normal(size=(5, 4))) for _ in range(3)]
    out = stif_forward(t64(rng.normal(size=(5, 6))), z, p)
    np.testing.assert_array_equal(out.gates.data, 0.5)
    np.testing.assert_array_equal(out.o.data, np.concatenate([x.data / 2 for x in z], axis=-1))


def test_saturated_gate_passes_through(rng):
    p = init_gate(6, 4, 2, rng)
    p.b2.data[:] = 60.0
    z = [t64(rng.normal(size=4)) for _ in range(2)]
    out = stif_forward(t64(rng.normal(size=6)), z, p).o.data
    np.testing.assert_allclose(out, np.concatenate([x.data for x in z]), rtol=1e-15)


def test_one_hidden_unit_by_hand():
    s, z1, z2 = np.array([0.5, -1.0]), np.array([2.0, 1.0]), np.array([-1.0, 3.0])
    p = GateParams(
        w_s=t64([[1.0], [0.5]]), w_z=t64([[0.25], [-0.5]]), feat_emb=t64([[1.0], [-2.0]]),
        w_e=t64([[0.3]]), b1=t64([0.1]), w2=t64([[1.5]]), b2=t64([-0.2]),
    )
    out = stif_forward(t64(s), [t64(z1), t64(z2)], p)
    # feature 1: h = relu(0.5 - 0.5 + 0.5 - 0.5 + 0.3 + 0.1) = 0.4 ; logit = 0.6 - 0.2
    # feature 2: h = relu(0 - 0.25 - 1.5 - 0.6 + 0.1) = 0      ; logit = -0.2
    g1, g2 = 1 / (1 + np.exp(-0.4)), 1 / (1 + np.exp(0.2))
    np.testing.assert_allclose(out.gates.data, [g1, g2], atol=1e-12, rtol=0)
    np.testing.assert_allclose(out.o.data, np.concatenate([g1 * z1, g2 * z2]), atol=1e-12, rtol=0)


def test_gates_bounded_and_shrink_features(rng):
    p = init_gate(6, 4, 3, rng)
    for t in p.tensors().values():
        t.data = rng.normal(size=t.shape) * 0.5
    z = [t64(rng.normal(size=(50, 4))) for _ in range(3)]
    out = stif_forward(t64(rng.normal(size=(50, 6))), z, p)
    g = out.gates.data
    assert ((g > 0) & (g < 1)).all()
    for j in range(3):
        o_j = out.o.data[:, 4 * j:4 * j + 4]
        assert (np.linalg.norm(o_j, axis=1) <= np.linalg.norm(z[j].data, axis=1)).all()


def test_gradient_two_features():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = init_gate(5, 3, 2, rng, hidden=4, d_f=2)
        p.w2.data = rng.normal(size=p.w2.shape)
        p.b2.data = rng.normal(size=1)
        s = t64(rng.normal(size=(3, 5)), True)
        z = [t64(rng.normal(size=(3, 3)), True) for _ in range(2)]
        w = rng.normal(size=(3, 6))
        f = lambda: T.sum(T.mul(stif_forward(s, z, p).o, Tensor(w)))
        assert gradcheck.check(f, [s, *z, *p.tensors().values()]) < 1e-4


def test_paper_literal_output(rng):
    p = init_gate(4, 3, 2, rng)
    s = t64(rng.normal(size=4))
    out = stif_forward(s, [t64(np.ones(3)), t64(np.ones(3))], p, paper_literal=True)
    np.testing.assert_allclose(out.o.data, s.data * 1.0)


def test_feature_count_and_width_checked(rng):
    p = init_gate(4, 3, 2, rng)
    with pytest.raises(T.DimensionError):
        stif_forward(t64(np.ones(4)), [t64(np.ones(3))], p)
    with pytest.raises(T.DimensionError):
        stif_forward(t64(np.ones(4)), [t64(np.ones(3)), t64(np.ones(2))], p)
    with pytest.raises(T.DimensionError):
        stif_forward(t64(np.ones(4)), [], p)


def test_gate_table_sorted_and_csv():
    g = np.array([[0.2, 0.9, 0.5], [0.4, 0.7, 0.5]])
    rows = gate_table(g, ["a", "b", "c"])
    assert [r[0] for r in rows] == ["b", "c", "a"]
    assert rows[2][2] == pytest.approx(0.01)
    assert gate_table_csv(rows).splitlines()[0] == "feature_name,mean_gate,var_gate"
