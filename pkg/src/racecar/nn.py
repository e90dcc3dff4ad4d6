"""Layer specs, parameter storage and the recording forward pass.

A network is a flat list of layer specs. Consecutive layers are grouped into
*stages*: optional pooling/upsampling, one weight layer (``Dense`` or
``Conv2d``), then any batch-norm/activation layers. Stage ``m`` maps the
recorded activation ``d_m`` to ``d_{m+1}``; activations are recorded after
the activation function and before any pooling of the next stage.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .exceptions import BuildError, ContractError, NumericError, ShapeError

__all__ = [
    "Dense",
    "Conv2d",
    "BatchNorm",
    "Activation",
    "MaxPool",
    "Upsample",
    "Network",
    "ActivationTrace",
    "build_network",
    "forward",
    "backward",
    "save_network",
    "load_network",
]

LRELU_SLOPE = 0.2
BN_MOMENTUM = 0.99
BN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dense:
    out_features: int
    has_bias: bool = True

    def __post_init__(self):
        if self.out_features < 1:
            raise BuildError("Dense needs out_features >= 1")


@dataclass(frozen=True)
class Conv2d:
    kernel: int
    out_channels: int
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.out_channels < 1:
            raise BuildError(f"invalid Conv2d{(self.kernel, self.out_channels, self.stride)}")


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ag.ACTIVATIONS:
            raise BuildError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Upsample:
    pass


LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2d, BatchNorm, Activation, MaxPool, Upsample)}
WEIGHT_LAYERS = (Dense, Conv2d)
RESAMPLE_LAYERS = (MaxPool, Upsample)


@dataclass
class Stage:
    """Indices of the layers forming one constrained layer and the shapes around it."""

    pre: list
    weight: int
    post: list
    in_shape: tuple  # shape of d_m
    weight_in_shape: tuple  # after pre ops, before the weight layer
    out_shape: tuple  # shape of d_{m+1}


@dataclass
class Network:
    layers: tuple
    input_shape: tuple
    params: list
    bn_state: dict
    stages: list = field(repr=False)
    layer_shapes: list = field(repr=False)

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def output_shape(self):
        return self.stages[-1].out_shape

    def parameters(self):
        for i, p in enumerate(self.params):
            for name, arr in p.items():
                yield i, name, arr

    def n_parameters(self):
        return sum(arr.size for _, _, arr in self.parameters())

    def weight_matrix(self, stage):
        """Forward operator of stage ``stage`` (1-based) as an ``out x in`` matrix.

        Convolution kernels (k, k, c_in, c_out) become ``c_out x (k*k*c_in)``.
        """
        st = self._stage(stage)
        w = self.params[st.weight]["weight"]
        if w.ndim == 4:
            return w.reshape(-1, w.shape[-1]).T
        return w

    def weight_matrices(self):
        return [self.weight_matrix(m) for m in range(1, self.n_stages + 1)]

    def _stage(self, stage):
        if not 1 <= stage <= self.n_stages:
            raise ContractError(f"stage {stage} out of range 1..{self.n_stages}")
        return self.stages[stage - 1]

    def copy(self):
        return Network(
            layers=self.layers,
            input_shape=self.input_shape,
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            bn_state={i: {k: v.copy() for k, v in s.items()} for i, s in self.bn_state.items()},
            stages=self.stages,
            layer_shapes=self.layer_shapes,
        )

    def update_bn(self, batch_stats, momentum=BN_MOMENTUM):
        for i, (mean, var) in batch_stats.items():
            st = self.bn_state[i]
            st["running_mean"] *= momentum
            st["running_mean"] += (1.0 - momentum) * mean
            st["running_var"] *= momentum
            st["running_var"] += (1.0 - momentum) * var


@dataclass
class ActivationTrace:
    """Recorded activations ``d_1 .. d_{n+1}`` (``entries[m-1]`` is ``d_m``)."""

    entries: list
    graph: object = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, m):
        """``trace[m]`` is ``d_m`` with 1-based ``m``."""
        return self.entries[m - 1][1]

    @property
    def output(self):
        return self.entries[-1][1]

    def arrays(self):
        return [arr for _, arr in self.entries]


def _infer_shapes(layers, input_shape):
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        name = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Dense):
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3:
                raise BuildError(f"{name} needs an (H, W, C) input, got {shape}")
            h, w, _ = shape
            shape = (-(-h // layer.stride), -(-w // layer.stride), layer.out_channels)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise BuildError(f"{name} needs an (H, W, C) input, got {shape}")
            h, w, c = shape
            if h % 2 or w % 2:
                raise BuildError(f"{name} needs even spatial dims, got {shape}")
            shape = (h // 2, w // 2, c)
        elif isinstance(layer, Upsample):
            if len(shape) != 3:
                raise BuildError(f"{name} needs an (H, W, C) input, got {shape}")
            h, w, c = shape
            shape = (2 * h, 2 * w, c)
        elif not isinstance(layer, (BatchNorm, Activation)):
            raise BuildError(f"{name}: unsupported layer type")
        shapes.append(shape)
    return shapes


def _group_stages(layers, input_shape, shapes):
    stages = []
    pre = []
    current = None
    prev_shape = tuple(input_shape)
    d_shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, RESAMPLE_LAYERS):
            if current is not None:
                stages.append(current)
                d_shape = current.out_shape
                current = None
            pre.append(i)
        elif isinstance(layer, WEIGHT_LAYERS):
            if current is not None:
                stages.append(current)
                d_shape = current.out_shape
            current = Stage(pre=pre, weight=i, post=[], in_shape=d_shape, weight_in_shape=prev_shape, out_shape=shapes[i])
            pre = []
        else:
            if current is None or pre:
                raise BuildError(f"layer {i} ({type(layer).__name__}) must follow a Dense or Conv2d layer")
            current.post.append(i)
            current.out_shape = shapes[i]
        prev_shape = shapes[i]
    if pre or current is None:
        raise BuildError("network must end with a Dense or Conv2d stage")
    stages.append(current)
    return stages


def build_network(spec, input_shape, seed=0):
    """Instantiate parameters for ``spec`` on inputs of shape ``input_shape``.

    Weights are drawn uniformly from ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``
    with ``numpy.random.default_rng(seed)``; biases start at zero, batch norm
    at unit scale and zero shift.
    """
    layers = tuple(spec)
    if not layers:
        raise BuildError("empty layer list")
    input_shape = tuple(int(s) for s in input_shape)
    shapes = _infer_shapes(layers, input_shape)
    stages = _group_stages(layers, input_shape, shapes)
    rng = np.random.default_rng(seed)
    params = []
    bn_state = {}
    prev = input_shape
    for i, layer in enumerate(layers):
        p = {}
        if isinstance(layer, Dense):
            fan_in = int(np.prod(prev))
            bound = np.sqrt(6.0 / fan_in)
            p["weight"] = rng.uniform(-bound, bound, size=(layer.out_features, fan_in))
            if layer.has_bias:
                p["bias"] = np.zeros(layer.out_features)
        elif isinstance(layer, Conv2d):
            fan_in = layer.kernel * layer.kernel * prev[-1]
            bound = np.sqrt(6.0 / fan_in)
            p["weight"] = rng.uniform(-bound, bound, size=(layer.kernel, layer.kernel, prev[-1], layer.out_channels))
            if layer.has_bias:
                p["bias"] = np.zeros(layer.out_channels)
        elif isinstance(layer, BatchNorm):
            c = prev[-1]
            p["gamma"] = np.ones(c)
            p["beta"] = np.zeros(c)
            bn_state[i] = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
        params.append(p)
        prev = shapes[i]
    return Network(layers, input_shape, params, bn_state, stages, shapes)


# ------------------------------------------------------------------ forward


def param_leaves(net):
    return [{k: ag.leaf(v, name=f"{i}.{k}") for k, v in p.items()} for i, p in enumerate(net.params)]


def apply_post(net, leaves, idx, x, training, batch_stats):
    layer = net.layers[idx]
    if isinstance(layer, Activation):
        return ag.ACTIVATIONS[layer.kind](x)
    p = leaves[idx]
    if training:
        out, mean, var = ag.batchnorm_train(x, p["gamma"], p["beta"], BN_EPS)
        batch_stats[idx] = (mean, var)
        return out
    st = net.bn_state[idx]
    return ag.batchnorm_eval(x, p["gamma"], p["beta"], st["running_mean"], st["running_var"], BN_EPS)


def _check(v, net, idx):
    if not np.all(np.isfinite(ag.const(v))):
        raise NumericError(f"non-finite activation after layer {idx} ({type(net.layers[idx]).__name__})")


def forward_graph(net, x, leaves, training=False):
    """Differentiable forward pass; returns ``[d_1, ..., d_{n+1}]`` as Vars and BN batch stats."""
    cur = x if isinstance(x, ag.Var) else ag.leaf(x, requires=False)
    ds = [cur]
    batch_stats = {}
    for st in net.stages:
        for i in st.pre:
            cur = ag.maxpool2(cur) if isinstance(net.layers[i], MaxPool) else ag.upsample2(cur)
        layer = net.layers[st.weight]
        p = leaves[st.weight]
        if isinstance(layer, Dense):
            if ag.const(cur).ndim > 2:
                cur = ag.reshape(cur, (ag.const(cur).shape[0], -1))
            cur = ag.dense(cur, p["weight"], p.get("bias"))
        else:
            cur = ag.conv2d(cur, p["weight"], p.get("bias"), layer.stride)
        _check(cur, net, st.weight)
        for i in st.post:
            cur = apply_post(net, leaves, i, cur, training, batch_stats)
            _check(cur, net, i)
        ds.append(cur)
    return ds, batch_stats


def _batched(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return x, False


def forward(net, x, record=False, training=False):
    """Run the network on a batch (or a single sample).

    Returns ``(output, trace)``; ``trace`` is ``None`` unless ``record``.
    Batch norm uses batch statistics when ``training`` and running
    statistics otherwise; running statistics are never modified here.
    """
    xb, single = _batched(net, x)
    leaves = param_leaves(net)
    ds, stats = forward_graph(net, xb, leaves, training)
    out = ds[-1].value
    if single:
        out = out[0]
    if not record:
        return out, None
    entries = [(m + 1, d.value[0] if single else d.value) for m, d in enumerate(ds)]
    trace = ActivationTrace(entries, graph={"net": net, "vars": ds, "leaves": leaves, "single": single, "stats": stats})
    return out, trace


def backward(net, trace, output_grad):
    """Gradients of ``<output, output_grad>`` for every parameter.

    Returns a list parallel to ``net.params`` of dicts of gradient arrays.
    """
    if trace is None or trace.graph is None or trace.graph["net"] is not net:
        raise ContractError("trace was not recorded on this network")
    g = np.asarray(output_grad, dtype=np.float64)
    out_var = trace.graph["vars"][-1]
    if trace.graph["single"]:
        g = g[None]
    if g.shape != out_var.value.shape:
        raise ShapeError(f"output_grad shape {g.shape} does not match output {out_var.value.shape}")
    return grads_for(trace.graph["leaves"], out_var, seed=g)


def grads_for(leaves, out_var, seed=None):
    flat = [(i, k, v) for i, p in enumerate(leaves) for k, v in p.items()]
    gs = ag.grad(out_var, [v for _, _, v in flat], seed=seed)
    out = [{} for _ in leaves]
    for (i, k, _), g in zip(flat, gs):
        out[i][k] = g
    return out


# ------------------------------------------------------------------ checkpoints


def save_network(net, path):
    """Write ``net`` to ``path`` as an ``.npz`` container with a JSON header."""
    meta = {
        "format": "racecar-network",
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [{"type": type(l).__name__, **asdict(l)} for l in net.layers],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, name, arr in net.parameters():
        arrays[f"param/{i}/{name}"] = arr
    for i, st in net.bn_state.items():
        for name, arr in st.items():
            arrays[f"bn/{i}/{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path):
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("format") != "racecar-network":
            raise ContractError(f"{path} is not a racecar network checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta['version']}")
        layers = [LAYER_TYPES[d.pop("type")](**d) for d in meta["layers"]]
        net = build_network(layers, meta["input_shape"], seed=0)
        for i, name, arr in list(net.parameters()):
            net.params[i][name] = data[f"param/{i}/{name}"].copy()
        for i, st in net.bn_state.items():
            for name in st:
                st[name] = data[f"bn/{i}/{name}"].copy()
    return net
