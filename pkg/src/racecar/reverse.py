"""Reverse network with tied, transposed weights.

Reverse stage ``m`` maps ``d'_{m+1}`` (full variant) or the forward
``d_{m+1}`` (layer-wise variant) back to the shape of ``d_m``::

    subtract b_m -> transposed weight op of stage m
                 -> batch norm / activation of stage m-1 (none for m = 1)
                 -> undo the resampling that preceded stage m

No parameters are copied: every evaluation reads the forward network's
arrays, so a plan stays valid while the weights are trained.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .exceptions import BuildError, ContractError, NumericError
from .nn import ActivationTrace, BatchNorm, Conv2d, Dense, MaxPool, apply_post, param_leaves

__all__ = ["ReversePlan", "build_reverse", "reverse_full", "reverse_layerwise", "reconstruct"]

VARIANTS = ("full", "layerwise")


@dataclass(frozen=True)
class ReversePlan:
    net: object
    variant: str
    output_activation: str = None

    def listing(self):
        """Reverse op names from the network output down to ``d'_1``."""
        ops = []
        net = self.net
        for m in range(net.n_stages, 0, -1):
            st = net.stages[m - 1]
            layer = net.layers[st.weight]
            if layer.has_bias:
                ops.append(f"-b{m}")
            ops.append(f"D{m}" if isinstance(layer, Conv2d) else f"F{m}^T")
            if m > 1:
                for i in net.stages[m - 2].post:
                    post = net.layers[i]
                    ops.append(f"BN{m - 1}" if isinstance(post, BatchNorm) else post.kind)
            for i in reversed(st.pre):
                ops.append("UP" if isinstance(net.layers[i], MaxPool) else "AVG")
        if self.output_activation:
            ops.append(self.output_activation)
        return ops


def build_reverse(net, variant="full", output_activation=None):
    """Plan the reverse pass of ``net``.

    The full variant chains reverse stages from the output, so every
    connection between stages must be bijective; max pooling is rejected.
    """
    if variant not in VARIANTS:
        raise BuildError(f"unknown reverse variant {variant!r}")
    if output_activation is not None and output_activation not in ag.ACTIVATIONS:
        raise BuildError(f"unknown activation {output_activation!r}")
    if variant == "full":
        for i, layer in enumerate(net.layers):
            if isinstance(layer, MaxPool):
                raise BuildError(f"full reverse pass needs bijective connections; layer {i} (MaxPool) is not")
    return ReversePlan(net, variant, output_activation)


def reverse_stage(plan, leaves, m, incoming):
    """Reconstruct ``d'_m`` from ``incoming`` (shape of ``d_{m+1}``) as a Var."""
    net = plan.net
    st = net.stages[m - 1]
    layer = net.layers[st.weight]
    p = leaves[st.weight]
    if isinstance(layer, Dense):
        cur = ag.dense_transpose(incoming, p["weight"], p.get("bias"))
        n = ag.const(cur).shape[0]
        if st.weight_in_shape != (ag.const(cur).shape[1],):
            cur = ag.reshape(cur, (n,) + st.weight_in_shape)
    else:
        cur = ag.conv2d_transpose(incoming, p["weight"], st.weight_in_shape, p.get("bias"), layer.stride)
    if m > 1:
        for i in net.stages[m - 2].post:
            # running statistics: the reverse pass never sees batch stats
            cur = apply_post(net, leaves, i, cur, False, None)
    for i in reversed(st.pre):
        cur = ag.upsample2(cur) if isinstance(net.layers[i], MaxPool) else ag.avgpool2(cur)
    if m == 1 and plan.output_activation:
        cur = ag.ACTIVATIONS[plan.output_activation](cur)
    if not np.all(np.isfinite(ag.const(cur))):
        raise NumericError(f"non-finite value in reverse stage {m}")
    return cur


def reconstruct(plan, forward_vars, leaves, stages=None):
    """Reverse-pass Vars keyed by ``m``, computed on the graph of ``forward_vars``.

    ``stages`` restricts which ``d'_m`` are returned; the full variant still
    evaluates every stage above the lowest requested one.
    """
    n = plan.net.n_stages
    wanted = set(range(1, n + 1) if stages is None else stages)
    out = {}
    if plan.variant == "full":
        lowest = min(wanted) if wanted else n + 1
        cur = forward_vars[n]
        for m in range(n, lowest - 1, -1):
            cur = reverse_stage(plan, leaves, m, cur)
            if m in wanted:
                out[m] = cur
    else:
        for m in sorted(wanted):
            out[m] = reverse_stage(plan, leaves, m, forward_vars[m])
    return out


def reverse_full(plan, output):
    """Propagate ``output`` (``d'_{n+1}``) through every reverse stage.

    Returns an :class:`ActivationTrace` whose entry ``m`` is ``d'_m``; the
    last entry is ``output`` itself.
    """
    if plan.variant != "full":
        raise ContractError("reverse_full needs a plan built with variant='full'")
    net = plan.net
    y = np.asarray(output, dtype=np.float64)
    single = y.shape == net.output_shape
    if single:
        y = y[None]
    if y.shape[1:] != net.output_shape:
        raise ContractError(f"output shape {y.shape[1:]} does not match network output {net.output_shape}")
    leaves = param_leaves(net)
    cur = ag.leaf(y)
    recon = {net.n_stages + 1: y}
    for m in range(net.n_stages, 0, -1):
        cur = reverse_stage(plan, leaves, m, cur)
        recon[m] = cur.value
    return ActivationTrace([(m, recon[m][0] if single else recon[m]) for m in range(1, net.n_stages + 2)])


def reverse_layerwise(net, trace, output_activation=None):
    """Reconstruct each ``d'_m`` from the recorded forward ``d_{m+1}``.

    Returns a list whose entry ``m - 1`` is ``d'_m`` for ``m = 1..n``.
    """
    if trace is None or len(trace) != net.n_stages + 1:
        raise ContractError("trace does not match the network's stage count")
    plan = ReversePlan(net, "layerwise", output_activation)
    leaves = param_leaves(net)
    single = trace.entries[0][1].shape == net.input_shape
    out = []
    for m in range(1, net.n_stages + 1):
        d_next = trace[m + 1]
        expected = net.stages[m - 1].out_shape
        if d_next.shape[-len(expected):] != expected:
            raise ContractError(f"trace entry {m + 1} has shape {d_next.shape}, expected {expected}")
        v = reverse_stage(plan, leaves, m, ag.leaf(d_next[None] if single else d_next)).value
        out.append(v[0] if single else v)
    return out
