import math

import numpy as np
import pytest
from scipy import special, stats

from samsfleet import diffnet as dn
from samsfleet.diffnet import tensor as T
from samsfleet.diffnet.checkpoint import MAGIC, CheckpointError

RNG = np.random.default_rng(0)


def test_relu_and_softplus_values():
    assert T.relu(np.array([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    assert T.softplus(np.array([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-12)
    big = T.softplus(np.array([800.0, -800.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 800.0 and big[1] >= 0


UNARY = {
    "relu": T.relu,
    "leaky_relu": T.leaky_relu,
    "softplus": T.softplus,
    "exp": T.exp,
    "square": T.square,
    "transpose": lambda x: x.T,
    "softmax_rows": T.softmax_rows,
    "sum_axis0": lambda x: T.sum(x, axis=0, keepdims=True),
    "sum_axis1": lambda x: T.sum(x, axis=1),
    "mean": T.mean,
    "neg": lambda x: -x,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    # keep away from the relu kink
    x = RNG.uniform(0.2, 1.5, (3, 4)) * RNG.choice([-1, 1], (3, 4))
    assert dn.check_input_gradient(UNARY[name], x) < 1e-4


@pytest.mark.parametrize("name", ["log", "lgamma", "digamma"])
def test_positive_domain_gradients(name):
    fn = {"log": T.log, "lgamma": T.lgamma, "digamma": dn.dirichlet.digamma}[name]
    assert dn.check_input_gradient(fn, RNG.uniform(0.3, 4.0, (2, 3))) < 1e-4


def test_binary_op_gradients():
    b = RNG.standard_normal((3, 4))
    c = RNG.standard_normal((4, 2))
    row = RNG.standard_normal((1, 4))
    cases = [
        lambda x: x + b, lambda x: x - b, lambda x: x * b, lambda x: x @ c,
        lambda x: T.matmul(c.T, T.transpose(x)), lambda x: x + row, lambda x: x * row,
        lambda x: T.concat([x, T.exp(x)], axis=1), lambda x: T.concat([x, x], axis=0),
        lambda x: 3.0 - x,
    ]
    for fn in cases:
        assert dn.check_input_gradient(fn, RNG.standard_normal((3, 4))) < 1e-4


def test_broadcast_gradient_reduces_to_parameter_shape():
    p = dn.ParamStore(1)
    p.add("b", (1, 3))
    x = RNG.standard_normal((5, 3))
    errs = dn.check_gradients(lambda: T.sum(T.square(x + p["b"])), p)
    assert max(errs.values()) < 1e-4


def _graph(n=4, f=3):
    h = RNG.uniform(0, 1, (n, f))
    m = RNG.uniform(0.1, 1, (n, n))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 0)
    return h, m / m.max()


def test_dense_gradients():
    p = dn.ParamStore(2)
    dn.add_dense(p, "d", 3, 5)
    x = RNG.standard_normal((4, 3))
    errs = dn.check_gradients(lambda: T.sum(T.softplus(dn.dense_forward(x, p, "d"))), p)
    assert max(errs.values()) < 1e-4
    with pytest.raises(dn.ShapeError):
        dn.dense_forward(np.ones((2, 4)), p, "d")


def test_gat_gradients():
    h, m = _graph()
    p = dn.ParamStore(3)
    dn.add_gat(p, "g", 3, 6)
    p["g.b_edge"].data[:] = 0.7
    errs = dn.check_gradients(lambda: T.sum(T.softplus(dn.gat_forward(h, m, p, "g"))), p)
    assert max(errs.values()) < 1e-4
    assert dn.check_input_gradient(lambda x: dn.gat_forward(x, m, p, "g"), h) < 1e-4


def test_gcn_gradients():
    h, m = _graph(f=5)
    a = dn.normalized_adjacency(m)
    p = dn.ParamStore(4)
    dn.add_gcn(p, "c", 5)
    errs = dn.check_gradients(lambda: T.sum(T.softplus(dn.gcn_forward(h, a, p, "c"))), p)
    assert max(errs.values()) < 1e-4


def test_pool_gradients():
    h, _ = _graph()
    assert dn.check_input_gradient(lambda x: dn.sum_pool(x), h) < 1e-4
    assert dn.check_input_gradient(lambda x: dn.sum_pool(x, "global"), h) < 1e-4


def test_gat_single_node_returns_projection():
    p = dn.ParamStore(5)
    dn.add_gat(p, "g", 3, 4)
    h = RNG.standard_normal((1, 3))
    out = dn.gat_forward(h, np.zeros((1, 1)), p, "g").data
    assert np.allclose(out, h @ p["g.W"].data, atol=1e-12)


def test_gat_symmetric_nodes_equal_outputs():
    p = dn.ParamStore(6)
    dn.add_gat(p, "g", 2, 3)
    h = np.array([[0.3, 0.9], [0.3, 0.9]])
    out = dn.gat_forward(h, np.array([[0, 1.0], [1.0, 0]]), p, "g").data
    assert np.allclose(out[0], out[1])


def test_gat_attention_rows_sum_to_one():
    h, m = _graph(5)
    p = dn.ParamStore(7)
    dn.add_gat(p, "g", 3, 4)
    att = dn.layers.attention_weights(h, m, p, "g")
    assert np.allclose(att.sum(axis=1), 1.0) and np.all(att >= 0)


def test_gcn_zero_weight_is_identity_and_single_node():
    h, m = _graph(f=4)
    p = dn.ParamStore(8)
    dn.add_gcn(p, "c", 4)
    p["c.W"].data[:] = 0
    assert np.array_equal(dn.gcn_forward(h, dn.normalized_adjacency(m), p, "c").data, h)
    a1 = dn.normalized_adjacency(np.zeros((1, 1)))
    assert a1[0, 0] == pytest.approx(1.0)
    p2 = dn.ParamStore(9)
    dn.add_gcn(p2, "c", 4)
    x = np.abs(RNG.standard_normal((1, 4)))
    exp = np.maximum(x @ p2["c.W"].data, 0) + x
    assert np.allclose(dn.gcn_forward(x, a1, p2, "c").data, exp)


def test_normalized_adjacency_symmetric_rowsum():
    _, m = _graph(6)
    a = dn.normalized_adjacency(m)
    assert np.allclose(a, a.T)
    # spectral radius of the symmetric normalization is 1
    assert np.max(np.abs(np.linalg.eigvalsh(a))) == pytest.approx(1.0, abs=1e-12)


def test_pool_two_nodes_and_permutation():
    h = np.array([[1.0, 2.0], [3.0, 5.0]])
    assert dn.sum_pool(h).data.tolist() == [[1, 2, 3, 5], [3, 5, 1, 2]]
    assert dn.sum_pool(h, "global").data.tolist() == [[4, 7]]
    x, _ = _graph(5)
    perm = RNG.permutation(5)
    assert np.allclose(dn.sum_pool(x[perm]).data, dn.sum_pool(x).data[perm])
    assert np.allclose(dn.sum_pool(x[perm], "global").data, dn.sum_pool(x, "global").data)
    with pytest.raises(ValueError):
        dn.sum_pool(x, "max")


# -- Dirichlet ---------------------------------------------------------------

def test_dirichlet_logpdf_examples():
    v = dn.dirichlet_logpdf_value(np.array([[2.0, 2.0]]), np.array([[0.5, 0.5]]))
    assert v == pytest.approx(math.log(6) + 2 * math.log(0.5), abs=1e-12)
    assert v == pytest.approx(0.405465, abs=1e-6)
    assert dn.dirichlet_logpdf_value(np.ones((1, 2)), np.array([[0.3, 0.7]])) == pytest.approx(0, abs=1e-12)
    t = dn.dirichlet_logpdf(np.array([[2.0, 2.0]]), np.array([[0.5, 0.5]]))
    assert t.item() == pytest.approx(v, abs=1e-12)


def test_dirichlet_logpdf_matches_scipy():
    for k in (2, 3, 5):
        a = RNG.uniform(0.3, 5, (4, k))
        x = RNG.dirichlet(np.ones(k), 4)
        ref = sum(stats.dirichlet.logpdf(x[i], a[i]) for i in range(4))
        assert dn.dirichlet_logpdf_value(a, x) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_dirichlet_density_integrates_to_one(k):
    rng = np.random.default_rng(k)
    a = rng.uniform(1.0, 3.0, (1, k))
    u = rng.dirichlet(np.ones(k), 200000)
    dens = np.exp([dn.dirichlet_logpdf_value(a, row[None]) for row in u[:20000]])
    # uniform simplex density is (k-1)!
    est = dens.mean() / math.factorial(k - 1)
    assert abs(est - 1.0) < 0.02


def test_dirichlet_sample_moments_and_simplex():
    rng = np.random.default_rng(1)
    a = np.array([[2.0, 3.0, 5.0]])
    xs = np.vstack([dn.dirichlet_sample(a, rng) for _ in range(20000)])
    assert np.allclose(xs.sum(axis=1), 1.0) and np.all(xs > 0)
    mu = dn.dirichlet_mean(a)[0]
    a0 = a.sum()
    sd = np.sqrt(mu * (1 - mu) / (a0 + 1))
    assert np.all(np.abs(xs.mean(axis=0) - mu) <= 3 * sd / np.sqrt(len(xs)))
    assert np.allclose(dn.dirichlet_mean(np.array([[1.0, 1.0, 2.0]])), [[0.25, 0.25, 0.5]])


def test_dirichlet_tiny_concentrations_stay_on_simplex():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x = dn.dirichlet_sample(np.full((3, 4), 1e-3), rng)
        assert np.all(np.isfinite(x)) and np.allclose(x.sum(axis=1), 1) and np.all(x > 0)
        assert np.isfinite(dn.dirichlet_logpdf_value(np.full((3, 4), 1e-3), x))


def test_dirichlet_rejects_bad_concentrations():
    for bad in ([[0.0, 1.0]], [[-1.0, 1.0]], [[np.nan, 1.0]]):
        with pytest.raises(dn.DistributionError):
            dn.dirichlet_sample(np.array(bad), RNG)
        with pytest.raises(dn.DistributionError):
            dn.dirichlet_logpdf_value(np.array(bad), np.array([[0.5, 0.5]]))


def test_dirichlet_logpdf_gradient_closed_form():
    a = RNG.uniform(0.5, 4, (3, 4))
    x = RNG.dirichlet(np.ones(4), 3)
    at = T.Tensor(a, requires_grad=True)
    with T.Tape() as tape:
        lp = T.sum(dn.dirichlet_logpdf(at, x))
    tape.backward(lp)
    ref = special.digamma(a.sum(axis=1, keepdims=True)) - special.digamma(a) + np.log(x)
    assert np.allclose(at.grad, ref, atol=1e-12)
    fd = dn.check_input_gradient(lambda c: dn.dirichlet_logpdf(c, x), a)
    assert fd < 1e-4


def test_dirichlet_entropy_matches_scipy_and_gradient():
    a = RNG.uniform(0.5, 4, (3, 4))
    ent = dn.dirichlet_entropy(a).data.ravel()
    assert np.allclose(ent, [stats.dirichlet.entropy(r) for r in a], atol=1e-10)
    assert dn.check_input_gradient(dn.dirichlet_entropy, a) < 1e-4


# -- optimizer ---------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    x = np.array([1.0, -2.0])
    opt = dn.Adam([("x", (2,))], lr=0.1)
    for _ in range(5):
        opt.step({"x": x}, {"x": np.zeros(2)})
    assert x.tolist() == [1.0, -2.0]


def test_adam_converges_on_quadratic():
    x = np.array([1.0])
    opt = dn.Adam([("x", (1,))], lr=0.1)
    for _ in range(200):
        opt.step({"x": x}, {"x": 2 * x})
    assert abs(x[0]) < 1e-2


def test_adam_first_step_size_is_lr():
    x = np.array([3.0, -1.0])
    opt = dn.Adam([("x", (2,))], lr=0.05)
    opt.step({"x": x}, {"x": np.array([10.0, -0.001])})
    assert np.allclose(x, [2.95, -0.95], atol=1e-6)


def test_adam_deterministic():
    def run():
        x = np.array([0.5, 0.2])
        opt = dn.Adam([("x", (2,))], lr=0.01)
        for i in range(50):
            opt.step({"x": x}, {"x": np.sin(x * (i + 1))})
        return x

    assert np.array_equal(run(), run())


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    tensors = {"b": RNG.standard_normal((2, 3)), "a": np.array(1.5), "c": np.zeros((0,))}
    meta = {"episode": 7, "note": "x"}
    dn.save_checkpoint(tmp_path / "c.ckpt", tensors, meta)
    got, m = dn.load_checkpoint(tmp_path / "c.ckpt")
    assert m == meta and set(got) == set(tensors)
    for k in tensors:
        assert got[k].tobytes() == np.asarray(tensors[k], float).tobytes()
        assert got[k].shape == np.shape(tensors[k])


def test_checkpoint_byte_layout(tmp_path):
    import json
    import struct
    p = tmp_path / "c.ckpt"
    dn.save_checkpoint(p, {"w": np.array([[1.0, 2.0]])}, {"k": 1})
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    ver, hlen = struct.unpack("<IQ", raw[8:20])
    header = json.loads(raw[20:20 + hlen])
    assert ver == 1 and header["tensors"] == [{"name": "w", "shape": [1, 2], "offset": 0}]
    assert np.frombuffer(raw[20 + hlen:], "<f8").tolist() == [1.0, 2.0]
    # identical inputs give identical bytes
    dn.save_checkpoint(tmp_path / "d.ckpt", {"w": np.array([[1.0, 2.0]])}, {"k": 1})
    assert (tmp_path / "d.ckpt").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        dn.load_checkpoint(p)


def test_paramstore_load_shape_mismatch():
    p = dn.ParamStore(0)
    p.add("w", (2, 2))
    with pytest.raises(dn.ShapeError):
        p.load({"w": np.zeros((3, 2))})
    with pytest.raises(KeyError):
        p.add("w", (1,))


def test_backward_requires_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(dn.ShapeError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        with dn.no_grad():
            T.exp(x)
    assert tape.nodes == []
