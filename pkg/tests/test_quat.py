import numpy as np
import pytest

from surfnet import quat
from surfnet.errors import InvalidBlock


def test_from_vector3():
    np.testing.assert_array_equal(quat.from_vector3([0, 0, 0]), [0, 0, 0, 0])
    np.testing.assert_array_equal(quat.from_vector3([1, 0, 0]), [0, 1, 0, 0])
    np.testing.assert_array_equal(quat.from_vector3([-1, 1, 0]), [0, -1, 1, 0])


def test_unit_relations():
    i = quat.quaternion(0, 1, 0, 0)
    j = quat.quaternion(0, 0, 1, 0)
    k = quat.quaternion(0, 0, 0, 1)
    one = quat.quaternion(1, 0, 0, 0)
    np.testing.assert_allclose(quat.qmul(i, j), k, atol=0)
    np.testing.assert_allclose(quat.qmul(i, i), -one, atol=0)
    np.testing.assert_allclose(quat.qmul(j, j), -one, atol=0)
    np.testing.assert_allclose(quat.qmul(quat.qmul(i, j), k), -one, atol=0)


def test_identity_element():
    rng = np.random.default_rng(0)
    q = rng.standard_normal(4)
    one = quat.quaternion(1)
    np.testing.assert_allclose(quat.qmul(q, one), q, atol=0)
    np.testing.assert_allclose(quat.qmul(one, q), q, atol=0)


def test_conjugate():
    i = quat.quaternion(0, 1, 0, 0)
    np.testing.assert_array_equal(quat.conjugate(i), [0, -1, 0, 0])
    r = quat.quaternion(3.5)
    np.testing.assert_array_equal(quat.conjugate(r), r)


def test_conjugate_block_is_transpose():
    rng = np.random.default_rng(1)
    for _ in range(100):
        q = rng.standard_normal(4)
        np.testing.assert_allclose(quat.to_block(quat.conjugate(q)),
                                   quat.to_block(q).T, atol=0)


def test_block_layout():
    b = quat.to_block(quat.quaternion(1))
    np.testing.assert_array_equal(b, np.eye(4))
    bi = quat.to_block(quat.quaternion(0, 1, 0, 0))
    assert bi[1, 0] == 1 and bi[0, 1] == -1


def test_block_roundtrip_and_homomorphism():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        q = rng.standard_normal(4)
        np.testing.assert_array_equal(quat.from_block(quat.to_block(q)), q)
    for _ in range(200):
        p, q = rng.standard_normal(4), rng.standard_normal(4)
        lhs = quat.to_block(p) @ quat.to_block(q)
        rhs = quat.to_block(quat.qmul(p, q))
        assert np.abs(lhs - rhs).max() < 1e-12
        # block(p) acting on q as a column is the product p*q
        np.testing.assert_allclose(quat.to_block(p) @ q, quat.qmul(p, q),
                                   rtol=1e-14, atol=1e-14)


def test_invalid_block_rejected():
    m = np.eye(4)
    m[0, 1] = 0.5
    assert not quat.block_is_valid(m)
    with pytest.raises(InvalidBlock):
        quat.from_block(m)


def test_norm_multiplicativity():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p, q = rng.standard_normal(4), rng.standard_normal(4)
        lhs = quat.qnorm(quat.qmul(p, q))
        rhs = quat.qnorm(p) * quat.qnorm(q)
        assert abs(lhs - rhs) <= 1e-12 * rhs


def test_feature_packing_roundtrip():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 12))
    slots = quat.unpack_features(x)
    assert slots.shape == (7, 3, 4)
    # lanes [4t, 4t+4) are (a, b, c, d) of slot t, in order
    np.testing.assert_array_equal(slots[:, 1, :], x[:, 4:8])
    np.testing.assert_array_equal(quat.pack_features(slots), x)
