"""Racecar loss, orthogonality baselines and the task loss.

Each loss has a plain numpy form operating on arrays and a ``*_term`` form
that builds a differentiable :class:`~racecar.autograd.Var` for training.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .exceptions import ContractError, ShapeError
from .linalg import as_matrix, power_iteration, spectral_norm

__all__ = [
    "RacecarConfig",
    "racecar_loss",
    "ortho_loss_soft",
    "srip_loss",
    "cross_entropy",
    "total_loss",
    "racecar_term",
    "ortho_soft_term",
    "srip_term",
    "kernel_matrix",
]

DEFAULT_LAMBDA = 1e-4


@dataclass
class RacecarConfig:
    """Which reconstructions are penalized and how strongly.

    ``constrained_layers`` holds 1-based indices ``m`` of the activations
    ``d_m`` compared with their reverse-pass reconstruction; ``None`` means
    every layer input ``d_1 .. d_n``. ``lambdas`` is either one weight per
    constrained layer or a single float applied to all of them.

    ``reduction`` says how per-sample squared distances combine over a
    batch: ``"mean"`` keeps the loss scale independent of batch size,
    ``"sum"`` is the squared Frobenius norm of the batch activation matrix.
    """

    lambdas: object = DEFAULT_LAMBDA
    variant: str = "full"
    constrained_layers: object = None
    output_activation: str = None
    stop_gradient: bool = False
    reduction: str = "mean"

    def __post_init__(self):
        if self.variant not in ("full", "layerwise"):
            raise ContractError(f"unknown racecar variant {self.variant!r}")
        if self.reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {self.reduction!r}")

    def resolve(self, n_stages):
        """Return ``(layers, lambdas)`` for a network with ``n_stages`` stages."""
        layers = list(range(1, n_stages + 1)) if self.constrained_layers is None else sorted(self.constrained_layers)
        if not layers or any(not 1 <= m <= n_stages for m in layers):
            raise ContractError(f"constrained layers {layers} not within 1..{n_stages}")
        if np.ndim(self.lambdas) == 0:
            lambdas = [float(self.lambdas)] * len(layers)
        else:
            lambdas = [float(l) for l in self.lambdas]
        if len(lambdas) != len(layers):
            raise ContractError(f"{len(lambdas)} lambdas for {len(layers)} constrained layers")
        if any(l < 0 for l in lambdas) or not any(l > 0 for l in lambdas):
            raise ContractError("racecar lambdas must be >= 0 with at least one positive")
        return layers, lambdas


def _per_sample_sq(a, b, reduction="mean"):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.ndim <= 1 or reduction == "sum":
        return float(np.sum(diff * diff))
    return float(np.sum(diff * diff) / diff.shape[0])


def racecar_loss(trace, recon, cfg):
    """``sum_m lambda_m * ||d_m - d'_m||^2`` over the constrained layers.

    ``trace`` is a forward :class:`~racecar.nn.ActivationTrace` (or the list
    ``d_1 .. d_{n+1}``) and ``recon`` maps ``m`` to ``d'_m`` (a dict, a
    trace, or a list whose entry ``m - 1`` is ``d'_m``). For batches the
    squared distance is averaged (or summed, see ``cfg.reduction``) over samples.
    """
    ds = trace.arrays() if hasattr(trace, "arrays") else list(trace)
    if hasattr(recon, "arrays"):
        recon = recon.arrays()
    if not isinstance(recon, dict):
        recon = {m + 1: r for m, r in enumerate(recon)}
    layers, lambdas = cfg.resolve(len(ds) - 1)
    total = 0.0
    for m, lam in zip(layers, lambdas):
        d = np.asarray(ds[m - 1])
        r = np.asarray(recon[m])
        if d.shape != r.shape:
            raise ContractError(f"layer {m}: forward shape {d.shape} vs reconstruction {r.shape}")
        total += lam * _per_sample_sq(d, r, cfg.reduction)
    return total


def racecar_term(forward_vars, recon_vars, layers, lambdas, stop_gradient=False, reduction="mean"):
    terms = []
    for m, lam in zip(layers, lambdas):
        r = recon_vars[m]
        if stop_gradient:
            r = ag.detach(r)
        d = forward_vars[m - 1]
        if reduction == "sum":
            lam = lam * ag.const(d).shape[0]
        terms.append(ag.scale(ag.sq_diff_mean(d, r), lam))
    return ag.total(*terms)


def kernel_matrix(w):
    """2-D view used by the orthogonality losses.

    Dense weights are used as stored (``out x in``); convolution kernels
    (k, k, c_in, c_out) are reshaped to ``(k*k*c_in) x c_out``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        return w.reshape(-1, w.shape[-1])
    return as_matrix(w)


def ortho_loss_soft(weights):
    """``sum_m ||M_m^T M_m - I||_F^2``."""
    total = 0.0
    for w in weights:
        m = kernel_matrix(w)
        g = m.T @ m - np.eye(m.shape[1])
        total += float(np.sum(g * g))
    return total


def srip_loss(weights, beta):
    """``beta * sum_m sigma_max(M_m^T M_m - I)`` with a 100-step power iteration."""
    if beta < 0:
        raise ContractError("beta must be >= 0")
    if beta == 0:
        return 0.0
    total = 0.0
    for w in weights:
        m = kernel_matrix(w)
        a = m.T @ m - np.eye(m.shape[1])
        total += spectral_norm(a, max_iters=100)
    return beta * total


def cross_entropy(logits, labels):
    """Mean negative log-softmax probability of the true class."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if z.shape[0] == 0:
        raise ContractError("cross_entropy of an empty batch")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logits")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ContractError("label out of range")
    return float(ag.softmax_cross_entropy(z, labels.astype(np.intp)).value)


def total_loss(base, racecar=0.0):
    if not (np.isfinite(base) and np.isfinite(racecar)):
        raise ContractError("loss terms must be finite")
    return float(base) + float(racecar)


# --------------------------------------------------------------- differentiable


def ortho_soft_term(w_var, weight=1.0):
    """Differentiable ``weight * ||M^T M - I||_F^2`` for one weight Var."""
    wv = ag.const(w_var)
    shape = wv.shape
    m = kernel_matrix(wv)
    rows, cols = m.shape
    # ||M^T M - I||^2 = ||M M^T||^2 - 2 ||M||^2 + cols; use the smaller Gram
    small = m @ m.T if rows < cols else m.T @ m
    value = float(np.sum(small * small) - 2.0 * np.sum(m * m) + cols)

    def vjp(g):
        if rows < cols:
            gm = 4.0 * (small @ m - m)
        else:
            gm = 4.0 * (m @ small - m)
        return (g * weight * gm.reshape(shape),)

    return ag._node(np.asarray(weight * value), (w_var,), vjp)


def srip_term(w_var, beta):
    """Differentiable ``beta * sigma_max(M^T M - I)`` for one weight Var."""
    wv = ag.const(w_var)
    shape = wv.shape
    m = kernel_matrix(wv)
    a = m.T @ m - np.eye(m.shape[1])
    sigma, v = power_iteration(a, max_iters=100)
    sign = 1.0 if v @ (a @ v) >= 0 else -1.0

    def vjp(g):
        gm = 2.0 * sign * np.outer(m @ v, v)
        return (g * beta * gm.reshape(shape),)

    return ag._node(np.asarray(beta * sigma), (w_var,), vjp)
