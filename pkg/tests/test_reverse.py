import numpy as np
import pytest

from racecar.exceptions import BuildError, ContractError
from racecar.nn import Activation, BatchNorm, Conv2d, Dense, MaxPool, Upsample, build_network, forward
from racecar.reverse import build_reverse, reverse_full, reverse_layerwise


def linear_net(mats):
    net = build_network([Dense(m.shape[0], has_bias=False) for m in mats], (mats[0].shape[1],), seed=0)
    for i, m in enumerate(mats):
        net.params[i]["weight"][...] = m
    return net


def test_single_dense_listing():
    net = build_network([Dense(3)], (4,), seed=0)
    assert build_reverse(net).listing() == ["-b1", "F1^T"]


def test_three_conv_listing_matches_worked_example():
    net = build_network(
        [
            Conv2d(5, 20, 1), BatchNorm(), Activation("relu"),
            MaxPool(), Conv2d(4, 40, 1), BatchNorm(), Activation("tanh"),
            MaxPool(), Conv2d(3, 60, 1), BatchNorm(), Activation("sigmoid"),
        ],
        (32, 32, 1),
        seed=0,
    )
    ops = build_reverse(net, "layerwise").listing()
    assert ops == ["-b3", "D3", "BN2", "tanh", "UP", "-b2", "D2", "BN1", "relu", "UP", "-b1", "D1"]


def test_full_variant_rejects_maxpool():
    net = build_network([Dense(4), Activation("relu")], (4,), seed=0)
    build_reverse(net, "full")
    pooled = build_network([Conv2d(3, 2), MaxPool(), Conv2d(3, 1)], (4, 4, 1), seed=0)
    with pytest.raises(BuildError, match="MaxPool"):
        build_reverse(pooled, "full")
    recon = reverse_layerwise(pooled, forward(pooled, np.ones((2, 4, 4, 1)), record=True)[1])
    assert [r.shape for r in recon] == [(2, 4, 4, 1), (2, 4, 4, 2)]


def test_unknown_variant():
    with pytest.raises(BuildError):
        build_reverse(build_network([Dense(1)], (1,), seed=0), "sideways")


def test_orthogonal_layer_inverts():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    net = linear_net([q])
    x = np.random.default_rng(1).normal(size=4)
    out, _ = forward(net, x)
    assert np.abs(reverse_full(build_reverse(net), out)[1] - x).max() < 1e-12


def test_projection_residual():
    net = linear_net([np.array([[1.0, 0], [0, 0]])])
    x = np.array([0.0, 1.0])
    out, _ = forward(net, x)
    d1 = reverse_full(build_reverse(net), out)[1]
    assert np.array_equal(d1, [0, 0])
    assert np.array_equal(x - d1, x)


def test_two_layer_variants_against_matrix_chains():
    rng = np.random.default_rng(3)
    m1, m2 = rng.normal(size=(3, 5)), rng.normal(size=(2, 3))
    net = linear_net([m1, m2])
    x = rng.normal(size=5)
    out, trace = forward(net, x, record=True)
    full = reverse_full(build_reverse(net), out)
    assert np.abs(full[1] - m1.T @ m2.T @ m2 @ m1 @ x).max() < 1e-12
    assert np.abs(full[2] - m2.T @ m2 @ m1 @ x).max() < 1e-12
    lw = reverse_layerwise(net, trace)
    assert np.abs(lw[0] - m1.T @ m1 @ x).max() < 1e-12
    assert np.abs(lw[1] - m2.T @ m2 @ m1 @ x).max() < 1e-12


def test_single_layer_variants_agree():
    net = build_network([Dense(3), Activation("tanh")], (4,), seed=5)
    net.params[0]["bias"][:] = [0.1, -0.2, 0.3]
    x = np.random.default_rng(0).normal(size=(6, 4))
    out, trace = forward(net, x, record=True)
    assert np.array_equal(reverse_full(build_reverse(net), out)[1], reverse_layerwise(net, trace)[0])


def test_bias_subtracted_before_transpose():
    net = build_network([Dense(2)], (2,), seed=0)
    net.params[0]["weight"][...] = [[2.0, 0], [0, 3]]
    net.params[0]["bias"][:] = [1.0, -1.0]
    d1 = reverse_full(build_reverse(net), np.array([5.0, 2.0]))[1]
    assert np.allclose(d1, [[2, 0], [0, 3]] @ np.array([4.0, 3.0]))


def test_weights_are_aliased_not_copied():
    net = linear_net([np.eye(3)])
    plan = build_reverse(net)
    y = np.array([1.0, 2.0, 3.0])
    before = reverse_full(plan, y)[1]
    net.params[0]["weight"] *= 2.0
    after = reverse_full(plan, y)[1]
    assert np.allclose(after, 2 * before)


@pytest.mark.parametrize(
    "layers, shape",
    [
        ([Dense(6), BatchNorm(), Activation("tanh"), Dense(3), Activation("relu")], (5,)),
        ([Conv2d(3, 4), BatchNorm(), Activation("lrelu"), Conv2d(3, 2, stride=2), Activation("sigmoid")], (6, 6, 1)),
        ([Conv2d(3, 2), Upsample(), Conv2d(1, 3)], (4, 4, 1)),
        ([Conv2d(3, 2), Activation("relu"), Dense(4)], (4, 4, 2)),
    ],
)
def test_reconstruction_shapes_match_forward(layers, shape):
    net = build_network(layers, shape, seed=1)
    x = np.random.default_rng(2).normal(size=(3,) + shape)
    out, trace = forward(net, x, record=True)
    full = reverse_full(build_reverse(net), out)
    lw = reverse_layerwise(net, trace)
    for m in range(1, net.n_stages + 1):
        assert full[m].shape == trace[m].shape
        assert lw[m - 1].shape == trace[m].shape


def test_conv_transpose_is_adjoint():
    net = build_network([Conv2d(3, 2, stride=2, has_bias=False)], (6, 6, 1), seed=4)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 6, 1))
    y = rng.normal(size=(1,) + net.output_shape)
    fx, _ = forward(net, x)
    aty = reverse_full(build_reverse(net), y)[1]
    assert abs(np.sum(fx * y) - np.sum(x * aty)) < 1e-10


def test_variants_coincide_at_optimum():
    rng = np.random.default_rng(8)
    q1, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    q2, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    net = linear_net([q1, q2])
    x = rng.normal(size=(5, 4))
    out, trace = forward(net, x, record=True)
    full = reverse_full(build_reverse(net), out)
    lw = reverse_layerwise(net, trace)
    for m in (1, 2):
        assert np.abs(full[m] - trace[m]).max() < 1e-12
        assert np.abs(lw[m - 1] - trace[m]).max() < 1e-12


def test_output_activation_flag():
    net = linear_net([-np.eye(2)])
    plan = build_reverse(net, output_activation="relu")
    assert plan.listing()[-1] == "relu"
    assert np.array_equal(reverse_full(plan, np.array([1.0, -1.0]))[1], [0, 1])


def test_contract_errors():
    net = build_network([Dense(2), Dense(2)], (3,), seed=0)
    with pytest.raises(ContractError):
        reverse_full(build_reverse(net), np.ones(5))
    with pytest.raises(ContractError):
        reverse_full(build_reverse(net, "layerwise"), np.ones(2))
    _, trace = forward(build_network([Dense(2)], (3,), seed=0), np.ones(3), record=True)
    with pytest.raises(ContractError):
        reverse_layerwise(net, trace)
