import numpy as np
import pytest

from racecar import autograd as ag
from racecar.exceptions import ContractError
from racecar.nn import Activation, BatchNorm, Conv2d, Dense, build_network, forward
from racecar.regularizers import (
    RacecarConfig,
    cross_entropy,
    kernel_matrix,
    ortho_loss_soft,
    ortho_soft_term,
    racecar_loss,
    srip_loss,
    srip_term,
    total_loss,
)
from racecar.reverse import build_reverse, reverse_full, reverse_layerwise
from racecar.training import finite_diff_check, make_loss


def test_racecar_loss_examples():
    cfg = RacecarConfig(1.0)
    assert racecar_loss([np.array([0.0, 1.0]), np.zeros(1)], [np.array([0.0, 0.0])], cfg) == 1.0
    d = [np.ones(3), np.ones(2)]
    assert racecar_loss(d, [np.ones(3)], cfg) == 0.0


def test_racecar_loss_linear_in_lambda_and_nonnegative():
    rng = np.random.default_rng(0)
    ds = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2))]
    rec = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
    a = racecar_loss(ds, rec, RacecarConfig([0.3, 0.7]))
    b = racecar_loss(ds, rec, RacecarConfig([0.6, 1.4]))
    assert a > 0 and abs(b - 2 * a) < 1e-12


def test_reductions_differ_by_batch_size():
    rng = np.random.default_rng(1)
    ds = [rng.normal(size=(5, 3)), rng.normal(size=(5, 1))]
    rec = [rng.normal(size=(5, 3))]
    mean = racecar_loss(ds, rec, RacecarConfig(1.0))
    total = racecar_loss(ds, rec, RacecarConfig(1.0, reduction="sum"))
    assert abs(total - 5 * mean) < 1e-12
    assert abs(total - np.sum((ds[0] - rec[0]) ** 2)) < 1e-12


def test_racecar_loss_shape_mismatch():
    with pytest.raises(ContractError):
        racecar_loss([np.ones(3), np.ones(2)], [np.ones(2)], RacecarConfig(1.0))


@pytest.mark.parametrize(
    "kwargs", [dict(lambdas=0.0), dict(lambdas=[1.0, 2.0, 3.0]), dict(constrained_layers=[3]), dict(lambdas=-1.0)]
)
def test_config_resolution_errors(kwargs):
    with pytest.raises(ContractError):
        RacecarConfig(**kwargs).resolve(2)


def test_config_validation():
    with pytest.raises(ContractError):
        RacecarConfig(variant="other")
    with pytest.raises(ContractError):
        RacecarConfig(reduction="max")
    assert RacecarConfig(0.5, constrained_layers=[1]).resolve(3) == ([1], [0.5])


def test_racecar_zero_on_orthogonal_layer():
    q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(4, 4)))
    net = build_network([Dense(4, has_bias=False)], (4,), seed=0)
    net.params[0]["weight"][...] = q
    x = np.random.default_rng(3).normal(size=(10, 4))
    out, trace = forward(net, x, record=True)
    assert racecar_loss(trace, reverse_full(build_reverse(net), out), RacecarConfig(1.0)) < 1e-24


def test_racecar_zero_iff_data_in_unit_eigenspace():
    # M^T M has eigenvalue 1 on span(e1, e2) and 0.25 on e3
    m = np.diag([1.0, 1.0, 0.5])
    net = build_network([Dense(3, has_bias=False)], (3,), seed=0)
    net.params[0]["weight"][...] = m
    cfg = RacecarConfig(1.0)
    inside = np.array([[1.0, -2.0, 0.0], [0.5, 0.5, 0.0]])
    outside = np.array([[1.0, 0.0, 1.0]])
    for x, zero in ((inside, True), (outside, False)):
        out, trace = forward(net, x, record=True)
        loss = racecar_loss(trace, reverse_full(build_reverse(net), out), cfg)
        assert (loss < 1e-24) == zero


def test_ortho_soft_examples():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))
    assert ortho_loss_soft([q]) < 1e-24
    assert abs(ortho_loss_soft([2 * np.eye(2)]) - 18.0) < 1e-12
    assert ortho_loss_soft([np.zeros((4, 4))]) == 4.0


def test_kernel_reshape_convention():
    w = np.arange(2 * 2 * 3 * 5, dtype=float).reshape(2, 2, 3, 5)
    assert kernel_matrix(w).shape == (12, 5)
    assert np.array_equal(kernel_matrix(w)[:, 0], w[..., 0].ravel())


def test_srip_examples():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))
    assert srip_loss([q], 5.0) < 1e-9
    assert abs(srip_loss([np.diag([3.0, 2.0])], 1.0) - 8.0) < 1e-9
    assert srip_loss([np.random.default_rng(1).normal(size=(3, 3))], 0.0) == 0.0
    with pytest.raises(ContractError):
        srip_loss([q], -1.0)


def test_cross_entropy_examples():
    assert abs(cross_entropy(np.zeros((3, 4)), [0, 1, 2]) - np.log(4)) < 1e-12
    logits = np.zeros((2, 3))
    logits[[0, 1], [2, 0]] = 20.0
    assert cross_entropy(logits, [2, 0]) < 1e-6 * 5
    assert abs(cross_entropy([[1.0, 0.0]], [0]) - (-np.log(np.e / (np.e + 1)))) < 1e-12
    assert abs(-np.log(np.e / (np.e + 1)) - 0.3133) < 1e-4
    with pytest.raises(ContractError):
        cross_entropy(np.zeros((0, 2)), [])


def test_total_loss():
    assert total_loss(1.0, 0.0) == 1.0
    assert total_loss(2.5) == 2.5
    with pytest.raises(ContractError):
        total_loss(np.nan, 0.0)


def test_differentiable_terms_match_numpy_forms():
    rng = np.random.default_rng(4)
    for shape in ((3, 5), (5, 3), (2, 2, 3, 4)):
        w = rng.normal(size=shape)
        assert abs(float(ortho_soft_term(ag.leaf(w), 0.5).value) - 0.5 * ortho_loss_soft([w])) < 1e-9
        assert abs(float(srip_term(ag.leaf(w), 0.5).value) - srip_loss([w], 0.5)) < 1e-6


@pytest.mark.parametrize("ortho", ["soft", "srip"])
def test_ortho_gradients(ortho):
    net = build_network([Dense(4), Activation("tanh"), Dense(3)], (5,), seed=1)
    rng = np.random.default_rng(0)
    loss = make_loss(rng.normal(size=(6, 5)), rng.integers(0, 3, 6), ortho=ortho, ortho_weight=0.3, srip_beta=0.3)
    # power iteration stops at tol 1e-6, which limits the SRIP gradient accuracy
    assert finite_diff_check(net, loss) < (1e-6 if ortho == "soft" else 1e-2)


def test_tied_weight_gradient_two_layer():
    net = build_network([Dense(4), Activation("tanh"), Dense(2)], (3,), seed=2)
    rng = np.random.default_rng(5)
    loss = make_loss(rng.normal(size=(5, 3)), rng.integers(0, 2, 5), racecar=RacecarConfig(0.5))
    assert finite_diff_check(net, loss) < 1e-4


def test_stop_gradient_changes_gradient_only():
    net = build_network([Dense(3), Activation("tanh"), Dense(2)], (3,), seed=0)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 3)), rng.integers(0, 2, 4)
    tied = make_loss(x, y, racecar=RacecarConfig(1.0))(net)
    stopped = make_loss(x, y, racecar=RacecarConfig(1.0, stop_gradient=True))(net)
    assert tied[0] == stopped[0]
    assert not np.allclose(tied[3][0]["weight"], stopped[3][0]["weight"])


def test_layerwise_vanishes_iff_ortho_soft_vanishes_full_rank():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(12, 4))  # spans R^4
    cfg = RacecarConfig(1.0, variant="layerwise")
    net = build_network([Dense(4, has_bias=False)], (4,), seed=0)
    for w, zero in ((np.linalg.qr(rng.normal(size=(4, 4)))[0], True), (rng.normal(size=(4, 4)), False)):
        net.params[0]["weight"][...] = w
        _, trace = forward(net, x, record=True)
        rl = racecar_loss(trace, reverse_layerwise(net, trace), cfg)
        assert (rl < 1e-20) == zero
        assert (ortho_loss_soft([w]) < 1e-20) == zero


def test_conv_racecar_gradients():
    net = build_network([Conv2d(3, 2), BatchNorm(), Activation("tanh"), Conv2d(3, 2), Dense(2)], (4, 4, 1), seed=3)
    rng = np.random.default_rng(2)
    for variant in ("full", "layerwise"):
        loss = make_loss(rng.normal(size=(3, 4, 4, 1)), rng.integers(0, 2, 3), racecar=RacecarConfig(0.2, variant))
        assert finite_diff_check(net, loss, max_params=200) < 1e-4
