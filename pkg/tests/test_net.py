import numpy as np
import pytest

from surfnet import autodiff as ad
from surfnet import ops, shapes
from surfnet.errors import NonQuadChannels, ShapeMismatch
from surfnet.net import (
    AdamState,
    Checkpoint,
    Network,
    NetworkSpec,
    adam_step,
    avgpool_layer,
    dirac_down_layer,
    dirac_up_layer,
    laplace_layer,
    lipschitz_bound,
    load_checkpoint,
    receptive_field_hops,
    save_checkpoint,
)

from conftest import assert_grads_close


@pytest.fixture(scope="module")
def small_mesh():
    return shapes.icosphere(0)  # 12 vertices, 20 faces


@pytest.fixture(scope="module")
def packs(small_mesh):
    return ops.assemble_laplacian(small_mesh), ops.assemble_dirac(small_mesh)


def test_laplace_layer_identity_passthrough(small_mesh, packs):
    lap, _ = packs
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((small_mesh.n_vertices, 5))
    tape = ad.Tape()
    out = laplace_layer(ad.leaf(tape, x0), lap,
                        ad.leaf(tape, np.zeros((5, 5))),
                        ad.leaf(tape, np.eye(5)), rho=None)
    np.testing.assert_allclose(out.value, x0, atol=1e-14)


def test_laplace_layer_constants_killed(small_mesh, packs):
    lap, _ = packs
    rng = np.random.default_rng(1)
    tape = ad.Tape()
    x = ad.leaf(tape, np.tile(rng.standard_normal(5), (small_mesh.n_vertices, 1)))
    out = laplace_layer(x, lap, ad.leaf(tape, rng.standard_normal((5, 5))),
                        ad.leaf(tape, np.zeros((5, 5))), rho=None)
    assert np.abs(out.value).max() < 1e-12


def test_laplace_layer_grad(small_mesh, packs):
    lap, _ = packs
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((small_mesh.n_vertices, 4))
    tgt = rng.standard_normal((small_mesh.n_vertices, 3))
    params = {"A": 0.3 * rng.standard_normal((3, 4)),
              "B": 0.3 * rng.standard_normal((3, 4))}

    def loss(tape, pt):
        return ad.mse_loss(laplace_layer(ad.leaf(tape, x0), lap, pt["A"], pt["B"]), tgt)

    assert_grads_close(loss, params)


def test_dirac_down_constant_input(small_mesh, packs):
    _, dpk = packs
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    x = ad.leaf(tape, np.tile(rng.standard_normal(8), (small_mesh.n_vertices, 1)))
    y = ad.leaf(tape, np.zeros((small_mesh.n_faces, 8)))
    out = dirac_down_layer(x, y, dpk, ad.leaf(tape, rng.standard_normal((2, 2))),
                           ad.leaf(tape, np.zeros((2, 2))))
    np.testing.assert_allclose(out.value, 0.0, atol=1e-12)


def test_dirac_down_zero_C_ignores_x(small_mesh, packs):
    _, dpk = packs
    rng = np.random.default_rng(4)
    y0 = rng.standard_normal((small_mesh.n_faces, 8))
    E = rng.standard_normal((2, 2))
    tape = ad.Tape()
    x = ad.leaf(tape, rng.standard_normal((small_mesh.n_vertices, 8)),
                requires_grad=True)
    out = dirac_down_layer(x, ad.leaf(tape, y0), dpk,
                           ad.leaf(tape, np.zeros((2, 2))), ad.leaf(tape, E))
    ad.backward(ad.sum_all(out))
    np.testing.assert_array_equal(x.grad, np.zeros_like(x.grad))


def test_dirac_layers_grad(small_mesh, packs):
    _, dpk = packs
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((small_mesh.n_vertices, 8))
    y0 = rng.standard_normal((small_mesh.n_faces, 8))
    tgt_f = rng.standard_normal((small_mesh.n_faces, 8))
    tgt_v = rng.standard_normal((small_mesh.n_vertices, 8))
    params = {"C": 0.3 * rng.standard_normal((2, 2)),
              "E": 0.3 * rng.standard_normal((2, 2)),
              "A": 0.3 * rng.standard_normal((2, 2)),
              "B": 0.3 * rng.standard_normal((2, 2))}

    def loss(tape, pt):
        x = ad.leaf(tape, x0)
        y = ad.leaf(tape, y0)
        y1 = dirac_down_layer(x, y, dpk, pt["C"], pt["E"])
        x1 = dirac_up_layer(y1, x, dpk, pt["A"], pt["B"])
        return ad.add(ad.mse_loss(y1, tgt_f), ad.mse_loss(x1, tgt_v))

    assert_grads_close(loss, params)


def test_down_up_identity_recovers_laplacian(small_mesh, packs):
    # D* (D x) on a real-lane signal reproduces Delta x in the real lane
    lap, dpk = packs
    rng = np.random.default_rng(6)
    xr = rng.standard_normal((small_mesh.n_vertices, 2))
    xfeat = np.zeros((small_mesh.n_vertices, 8))
    xfeat[:, 0] = xr[:, 0]  # real lane of slot 0
    xfeat[:, 4] = xr[:, 1]  # real lane of slot 1
    tape = ad.Tape()
    x = ad.leaf(tape, xfeat)
    # identity mixes, no activation
    eye = ad.leaf(tape, np.eye(2))
    zero = ad.leaf(tape, np.zeros((2, 2)))
    yz = ad.leaf(tape, np.zeros((small_mesh.n_faces, 8)))
    y1 = dirac_down_layer(x, yz, dpk, eye, zero, rho=None)
    x1 = dirac_up_layer(y1, x, dpk, eye, zero, rho=None)
    got = x1.value[:, [0, 4]]
    from surfnet.la import spmv
    want = spmv(lap.delta, xr)
    assert np.abs(got - want).max() < 1e-9 * max(1.0, np.abs(want).max())


def test_avgpool_zero_mean(small_mesh):
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((small_mesh.n_vertices, 5))
    x0 -= x0.mean(axis=0, keepdims=True)
    tape = ad.Tape()
    out = avgpool_layer(ad.leaf(tape, x0), ad.leaf(tape, rng.standard_normal((5, 5))),
                        ad.leaf(tape, np.zeros((5, 5))), rho=None)
    assert np.abs(out.value).max() < 1e-13


def test_avgpool_single_row():
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((1, 5))
    A, B = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    tape = ad.Tape()
    out = avgpool_layer(ad.leaf(tape, x0), ad.leaf(tape, A), ad.leaf(tape, B),
                        rho=None)
    np.testing.assert_allclose(out.value, x0 @ (A + B).T, atol=1e-13)


def test_avgpool_permutation_equivariance(small_mesh):
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((small_mesh.n_vertices, 5))
    A, B = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    perm = rng.permutation(small_mesh.n_vertices)

    def run(xin):
        tape = ad.Tape()
        return avgpool_layer(ad.leaf(tape, xin), ad.leaf(tape, A),
                             ad.leaf(tape, B)).value

    np.testing.assert_allclose(run(x0)[perm], run(x0[perm]), atol=1e-13)


def test_resnet_block_zero_params_is_identity(small_mesh, packs):
    lap, dpk = packs
    for kind, needs in (("laplace", "lap"), ("mlp", None), ("avgpool", None),
                        ("dirac", "dirac")):
        channels = 8
        spec = NetworkSpec(kind=kind, blocks=1, channels=channels,
                           in_channels=channels, out_channels=channels,
                           avgpool_period=0)
        netw = Network.init(spec, seed=0)
        for k in netw.params:
            if ".A" in k or ".B" in k or ".C" in k or ".E" in k:
                netw.params[k] = np.zeros_like(netw.params[k])
        # identity input/output projections
        if spec.lifted:
            netw.params["in.W"] = np.eye(2)
            netw.params["out.W"] = np.eye(2)
        else:
            netw.params["in.W"] = np.eye(channels)
            netw.params["out.W"] = np.eye(channels)
        rng = np.random.default_rng(10)
        x0 = rng.standard_normal((small_mesh.n_vertices, channels))
        out = netw.forward_plain(x0, lap=lap, dirac=dpk)
        np.testing.assert_allclose(out, x0, atol=1e-12)


def test_mlp_block_permutation_invariance(small_mesh):
    spec = NetworkSpec(kind="mlp", blocks=2, channels=8, in_channels=3,
                       out_channels=4)
    netw = Network.init(spec, seed=1)
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal((small_mesh.n_vertices, 3))
    perm = rng.permutation(small_mesh.n_vertices)
    out = netw.forward_plain(x0)
    out_p = netw.forward_plain(x0[perm])
    np.testing.assert_allclose(out[perm], out_p, atol=1e-12)


def test_vertex_permutation_equivariance_laplace(small_mesh):
    from surfnet.mesh import Mesh

    spec = NetworkSpec(kind="laplace", blocks=2, channels=8, in_channels=3,
                       out_channels=4, avgpool_period=2)
    netw = Network.init(spec, seed=2)
    rng = np.random.default_rng(12)
    perm = rng.permutation(small_mesh.n_vertices)
    inv = np.argsort(perm)
    lap = ops.assemble_laplacian(small_mesh)
    out = netw.forward_plain(small_mesh.vertices, lap=lap)
    permuted = Mesh(small_mesh.vertices[perm], inv[small_mesh.faces])
    lap_p = ops.assemble_laplacian(permuted)
    out_p = netw.forward_plain(permuted.vertices, lap=lap_p)
    np.testing.assert_allclose(out[perm], out_p, atol=1e-10)


def test_vertex_permutation_equivariance_dirac(small_mesh):
    from surfnet.mesh import Mesh

    spec = NetworkSpec(kind="dirac", blocks=2, channels=8, in_channels=4,
                       out_channels=4, avgpool_period=0)
    netw = Network.init(spec, seed=3)
    rng = np.random.default_rng(13)
    perm = rng.permutation(small_mesh.n_vertices)
    inv = np.argsort(perm)
    x0 = np.concatenate([np.zeros((small_mesh.n_vertices, 1)),
                         small_mesh.vertices], axis=1)
    dpk = ops.assemble_dirac(small_mesh)
    out = netw.forward_plain(x0, dirac=dpk)
    permuted = Mesh(small_mesh.vertices[perm], inv[small_mesh.faces])
    dpk_p = ops.assemble_dirac(permuted)
    out_p = netw.forward_plain(x0[perm], dirac=dpk_p)
    np.testing.assert_allclose(out[perm], out_p, atol=1e-10)


def test_network_grad_full(small_mesh, packs):
    lap, dpk = packs
    rng = np.random.default_rng(14)
    for kind, in_ch in (("laplace", 3), ("dirac", 4), ("avgpool", 3), ("mlp", 3)):
        out_ch = 4
        spec = NetworkSpec(kind=kind, blocks=2, channels=8, in_channels=in_ch,
                           out_channels=out_ch, avgpool_period=0)
        netw = Network.init(spec, seed=15)
        x0 = rng.standard_normal((small_mesh.n_vertices, in_ch))
        tgt = rng.standard_normal((small_mesh.n_vertices, out_ch))

        def loss(tape, pt):
            out = netw.forward(tape, x0, pt, lap=lap, dirac=dpk, train=True)
            return ad.mse_loss(out, tgt)

        assert_grads_close(loss, netw.params)


def test_dirac_requires_quad_channels():
    with pytest.raises(NonQuadChannels):
        NetworkSpec(kind="dirac", blocks=1, channels=6, in_channels=4,
                    out_channels=4)


def test_fifteen_block_forward_deterministic(small_mesh, packs):
    lap, _ = packs
    spec = NetworkSpec(kind="laplace", blocks=15, channels=16, in_channels=3,
                       out_channels=8, avgpool_period=3)
    netw = Network.init(spec, seed=4)
    out1 = netw.forward_plain(small_mesh.vertices, lap=lap)
    netw2 = Network.init(spec, seed=4)
    out2 = netw2.forward_plain(small_mesh.vertices, lap=lap)
    np.testing.assert_array_equal(out1, out2)
    assert out1.shape == (small_mesh.n_vertices, 8)


def test_receptive_field_diagnostic():
    spec = NetworkSpec(kind="laplace", blocks=6, channels=8, in_channels=3,
                       out_channels=3, avgpool_period=3)
    # blocks 3 and 6 become avgpool: 4 laplace blocks x 2 hops
    assert receptive_field_hops(spec) == 8


def test_adam_zero_grad_no_motion():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.zeros(2)}
    st = AdamState()
    adam_step(p, g, st, lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_bounded_update():
    p = {"w": np.zeros(3)}
    st = AdamState()
    prev = p["w"].copy()
    for _ in range(200):
        adam_step(p, {"w": np.ones(3)}, st, lr=1e-3, weight_decay=0.0)
        step = np.abs(p["w"] - prev).max()
        assert step <= 1e-3 * 1.2
        prev = p["w"].copy()
    # late steps approach lr-sized moves against the gradient sign
    assert step == pytest.approx(1e-3, rel=0.05)


def test_adam_quadratic_bowl_decreases():
    rng = np.random.default_rng(16)
    p = {"w": rng.standard_normal(10)}
    st = AdamState()
    losses = []
    for _ in range(300):
        losses.append(0.5 * np.sum(p["w"] ** 2))
        adam_step(p, {"w": p["w"].copy()}, st, lr=1e-3, weight_decay=0.0)
    warm = losses[20:]
    assert all(b <= a + 1e-12 for a, b in zip(warm, warm[1:]))
    assert losses[-1] < losses[0]


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())


def test_checkpoint_roundtrip_bit_exact(tmp_path, small_mesh, packs):
    lap, _ = packs
    spec = NetworkSpec(kind="laplace", blocks=2, channels=8, in_channels=3,
                       out_channels=4)
    netw = Network.init(spec, seed=5)
    st = AdamState()
    rng = np.random.default_rng(17)
    # a couple of training steps to populate moments and bn state
    for _ in range(3):
        tape = ad.Tape()
        pt = netw.wrap(tape)
        out = netw.forward(tape, small_mesh.vertices, pt, lap=lap, train=True)
        loss = ad.mse_loss(out, rng.standard_normal(out.value.shape))
        ad.backward(loss)
        adam_step(netw.params, {k: t.grad for k, t in pt.items()}, st)
    before = netw.forward_plain(small_mesh.vertices, lap=lap)
    ck = Checkpoint(spec=spec, params=netw.params, adam=st,
                    bn_state=netw.bn_state, step=3, seed=5,
                    rng_state=rng.bit_generator.state)
    save_checkpoint(tmp_path / "ck", ck)
    loaded = load_checkpoint(tmp_path / "ck")
    after = loaded.network().forward_plain(small_mesh.vertices, lap=lap)
    np.testing.assert_array_equal(before, after)
    assert loaded.step == 3 and loaded.adam.step == 3
    assert loaded.rng_state == rng.bit_generator.state
    for k in netw.params:
        np.testing.assert_array_equal(loaded.params[k], netw.params[k])


def test_training_determinism(small_mesh, packs):
    lap, _ = packs

    def train(seed):
        spec = NetworkSpec(kind="laplace", blocks=2, channels=8, in_channels=3,
                           out_channels=2)
        netw = Network.init(spec, seed=seed)
        st = AdamState()
        rng = np.random.default_rng(seed)
        for _ in range(5):
            tgt = rng.standard_normal((small_mesh.n_vertices, 2))
            tape = ad.Tape()
            pt = netw.wrap(tape)
            out = netw.forward(tape, small_mesh.vertices, pt, lap=lap, train=True)
            ad.backward(ad.mse_loss(out, tgt))
            adam_step(netw.params, {k: t.grad for k, t in pt.items()}, st)
        return netw.params

    p1, p2 = train(7), train(7)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


def test_lipschitz_bound_holds_random_net(small_mesh, packs):
    lap, dpk = packs
    rng = np.random.default_rng(18)
    for kind, in_ch in (("laplace", 3), ("dirac", 4)):
        spec = NetworkSpec(kind=kind, blocks=4, channels=8, in_channels=in_ch,
                           out_channels=4, avgpool_period=3)
        netw = Network.init(spec, seed=19)
        bound = lipschitz_bound(netw, lap=lap, dirac=dpk)
        worst = 0.0
        for _ in range(50):
            a = rng.standard_normal((small_mesh.n_vertices, in_ch))
            b = rng.standard_normal((small_mesh.n_vertices, in_ch))
            fa = netw.forward_plain(a, lap=lap, dirac=dpk)
            fb = netw.forward_plain(b, lap=lap, dirac=dpk)
            worst = max(worst, np.linalg.norm(fa - fb) / np.linalg.norm(a - b))
        assert worst <= bound, (kind, worst, bound)
