"""Training loop, fine-tuning and gradient verification."""
import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .exceptions import ContractError, NumericError, TrainingError
from .nn import forward_graph, grads_for, param_leaves
from .regularizers import RacecarConfig, ortho_soft_term, racecar_term, srip_term
from .reverse import build_reverse, reconstruct

__all__ = [
    "TrainConfig",
    "MetricsLog",
    "Adam",
    "SGD",
    "make_loss",
    "train",
    "finetune",
    "finite_diff_check",
    "accuracy",
]

METRIC_COLUMNS = ("epoch", "base_loss", "reg_loss", "train_acc", "test_acc", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    racecar: RacecarConfig = None
    ortho: str = "off"
    ortho_weight: float = 1e-4
    srip_beta: float = 1e-4
    base_loss: str = "cross_entropy"
    log_every: int = 1

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.ortho not in ("off", "soft", "srip"):
            raise ContractError(f"unknown ortho mode {self.ortho!r}")
        if self.base_loss not in ("cross_entropy", "none"):
            raise ContractError(f"unknown base loss {self.base_loss!r}")
        if self.racecar is not None and self.ortho != "off":
            raise ContractError("racecar and orthogonality regularization are mutually exclusive")
        if self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ContractError("epochs >= 0, batch_size >= 1 and log_every >= 1 required")

    @property
    def regularized(self):
        return self.racecar is not None or self.ortho != "off"

    def without_regularization(self, **changes):
        return replace(self, racecar=None, ortho="off", **changes)


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, base_loss, reg_loss, train_acc, test_acc, wall_seconds):
        if self.rows and epoch <= self.rows[-1][0]:
            raise ContractError("metrics rows must have strictly increasing epochs")
        self.rows.append((int(epoch), float(base_loss), float(reg_loss), float(train_acc), float(test_acc), float(wall_seconds)))

    def column(self, name):
        i = METRIC_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def deterministic_rows(self):
        """Rows without the wall-clock column."""
        return [r[:-1] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != METRIC_COLUMNS:
                raise ContractError(f"unexpected metrics header {header}")
            for row in reader:
                log.append(int(row[0]), *map(float, row[1:]))
        return log

    def __len__(self):
        return len(self.rows)


# ------------------------------------------------------------------ optimizers


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, net, grads):
        for i, name, arr in net.parameters():
            arr -= self.lr * grads[i][name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, net, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, name, arr in net.parameters():
            g = grads[i][name]
            key = (i, name)
            if key not in self.m:
                self.m[key] = np.zeros_like(arr)
                self.v[key] = np.zeros_like(arr)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            arr -= (self.lr / c1) * m / denom


def _optimizer(cfg):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


# ------------------------------------------------------------------ objective


def make_loss(x, y, racecar=None, ortho="off", ortho_weight=1e-4, srip_beta=1e-4, base_loss="cross_entropy", training=True):
    """Loss closure ``net -> (total, base, reg, grads, batch_stats)`` on one batch.

    The racecar term is built on the same parameter leaves as the forward
    pass, so its gradient includes the contribution through the transposed
    weights of the reverse pass.
    """
    obj = _Objective(racecar, ortho, ortho_weight, srip_beta, base_loss)
    x = np.asarray(x, dtype=np.float64)
    y = None if y is None else np.asarray(y, dtype=np.intp)

    def loss(net, need_grad=True):
        return obj(net, x, y, need_grad, training)

    return loss


class _Objective:
    def __init__(self, racecar, ortho, ortho_weight, srip_beta, base_loss):
        self.racecar = racecar
        self.ortho = ortho
        self.ortho_weight = ortho_weight
        self.srip_beta = srip_beta
        self.base_loss = base_loss
        self._net = None

    def _prepare(self, net):
        # reverse plans only read the network's arrays, so one per network suffices
        if self._net is not net:
            self._net = net
            if self.racecar is not None:
                self._resolved = self.racecar.resolve(net.n_stages)
                self._plan = build_reverse(net, self.racecar.variant, self.racecar.output_activation)

    def __call__(self, net, x, y, need_grad=True, training=True):
        # overflow surfaces as the NumericError below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return self._evaluate(net, x, y, need_grad, training)

    def _evaluate(self, net, x, y, need_grad, training):
        self._prepare(net)
        leaves = param_leaves(net)
        ds, stats = forward_graph(net, x, leaves, training)
        terms = []
        base = 0.0
        if self.base_loss == "cross_entropy":
            b = ag.softmax_cross_entropy(ds[-1], y)
            base = float(b.value)
            terms.append(b)
        reg_terms = []
        rc = self.racecar
        if rc is not None:
            layers, lambdas = self._resolved
            recon = reconstruct(self._plan, ds, leaves, layers)
            reg_terms.append(racecar_term(ds, recon, layers, lambdas, rc.stop_gradient, rc.reduction))
        elif self.ortho == "soft":
            reg_terms.extend(ortho_soft_term(leaves[st.weight]["weight"], self.ortho_weight) for st in net.stages)
        elif self.ortho == "srip":
            reg_terms.extend(srip_term(leaves[st.weight]["weight"], self.srip_beta) for st in net.stages)
        reg = float(sum(float(t.value) for t in reg_terms))
        total = ag.total(*(terms + reg_terms))
        if not np.isfinite(total.value):
            raise NumericError("non-finite loss")
        grads = grads_for(leaves, total) if need_grad else None
        return float(total.value), base, reg, grads, stats


def _objective(cfg):
    return _Objective(cfg.racecar, cfg.ortho, cfg.ortho_weight, cfg.srip_beta, cfg.base_loss)


def accuracy(net, data):
    from .nn import forward

    out, _ = forward(net, data.inputs)
    return float(np.mean(np.argmax(out.reshape(len(data), -1), axis=1) == data.labels))


def _evaluate(net, obj, cfg, data, test):
    _, base, reg, _, _ = obj(net, data.inputs, data.labels, need_grad=False, training=False)
    train_acc = accuracy(net, data) if cfg.base_loss == "cross_entropy" else float("nan")
    test_acc = accuracy(net, test) if test is not None and len(test) else float("nan")
    return base, reg, train_acc, test_acc


def train(net, data, cfg, test=None):
    """Optimize ``net`` in place on ``data``; returns ``(net, MetricsLog)``.

    Log rows are written every ``cfg.log_every`` epochs from the parameters
    entering that epoch (evaluated in inference mode on the full training
    set), plus a final row for the trained state. Shuffling uses
    ``numpy.random.default_rng(cfg.seed)``.
    """
    if data.inputs.shape[1:] != net.input_shape:
        raise ContractError(f"data shape {data.inputs.shape[1:]} does not match network input {net.input_shape}")
    rng = np.random.default_rng(cfg.seed)
    opt = _optimizer(cfg)
    obj = _objective(cfg)
    log = MetricsLog()
    start = time.perf_counter()
    n = len(data)
    for epoch in range(cfg.epochs + 1):
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            try:
                metrics = _evaluate(net, obj, cfg, data, test)
            except NumericError as exc:
                raise TrainingError(f"divergence: {exc}", epoch) from exc
            log.append(epoch, *metrics, time.perf_counter() - start)
        if epoch == cfg.epochs:
            break
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            try:
                _, _, _, grads, stats = obj(net, data.inputs[idx], data.labels[idx])
            except NumericError as exc:
                raise TrainingError(f"divergence: {exc}", epoch) from exc
            opt.step(net, grads)
            net.update_bn(stats)
    return net, log


def finetune(net, data, cfg, test=None):
    """Continue training without any regularizer (task A fine-tune or task B transfer)."""
    if cfg.regularized:
        raise ContractError("fine-tuning runs without racecar or orthogonality terms")
    return train(net, data, cfg, test)


# ------------------------------------------------------------------ gradient check


def finite_diff_check(net, lossfn, eps=1e-5, max_params=None, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``lossfn(net)`` must return ``(loss, grads, ...)`` or a loss closure from
    :func:`make_loss`. Every parameter is checked unless the network has more
    than ``max_params`` of them, in which case a seeded random subset of that
    size is used. The relative error uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError("eps must lie in [1e-7, 1e-3]")

    def value_and_grads(need_grad):
        res = lossfn(net, need_grad=need_grad) if _accepts_need_grad(lossfn) else lossfn(net)
        if len(res) == 5:
            return res[0], res[3]
        return res[0], res[1]

    _, grads = value_and_grads(True)
    coords = [(i, name, j) for i, name, arr in net.parameters() for j in range(arr.size)]
    if max_params is not None and len(coords) > max_params:
        rng = np.random.default_rng(seed)
        coords = [coords[k] for k in sorted(rng.choice(len(coords), size=max_params, replace=False))]
    worst = 0.0
    for i, name, j in coords:
        arr = net.params[i][name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + eps
        plus, _ = value_and_grads(False)
        arr[j] = orig - eps
        minus, _ = value_and_grads(False)
        arr[j] = orig
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[i][name].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def _accepts_need_grad(fn):
    import inspect

    try:
        return "need_grad" in inspect.signature(fn).parameters
    except (TypeError, ValueError):
        return False
