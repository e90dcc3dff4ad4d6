"""Experiment definitions: config parsing, per-(model, seed) runs and summaries.

A config file is flat ``key = value`` text with ``#`` comments, e.g.::

    experiment = peak
    model = std, ort, rr
    seeds = 0..4
"""
import copy
import csv
import hashlib
import os
import platform
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .analysis import dump_features, extract_features, mi_plane, write_mi_plane_csv
from .datasets import fixture_paths, gen_bitsphere_task, gen_peak_dataset, load_idx, peak_templates, select_two_digits
from .exceptions import ConfigError, ContractError
from .nn import Activation, BatchNorm, Dense, build_network
from .regularizers import RacecarConfig
from .training import TrainConfig, finetune, finite_diff_check, make_loss, train

__all__ = [
    "ExperimentConfig",
    "EXPERIMENTS",
    "MODELS",
    "parse_config",
    "parse_seeds",
    "model_train_config",
    "run_model",
    "run_experiment",
    "write_summary",
    "read_summary",
    "compare_summaries",
]

EXPERIMENTS = ("peak", "mnist2", "mi", "gradcheck")
MODELS = ("std", "ort", "srip", "rr", "rr1", "lrr")

# per-experiment training defaults; see the notes in README for the sources
DEFAULTS = {
    "peak": dict(epochs=5000, batch_size=10, learning_rate=1e-4, racecar_lambda=1e-6, racecar_reduction="sum"),
    "mnist2": dict(epochs=1000, batch_size=2, learning_rate=1e-4, racecar_lambda=1e-5, racecar_reduction="sum"),
    "mi": dict(epochs=2000, batch_size=256, learning_rate=1e-3, racecar_lambda=3e-2, finetune_epochs=1000, transfer_epochs=1000),
    "gradcheck": dict(epochs=0, batch_size=8, learning_rate=1e-4, racecar_lambda=1e-2),
}


@dataclass
class ExperimentConfig:
    experiment: str
    models: tuple = ("std", "rr")
    seeds: tuple = (0, 1, 2, 3, 4)
    out: str = None
    epochs: int = None
    batch_size: int = None
    learning_rate: float = None
    optimizer: str = "adam"
    racecar_lambda: float = None
    racecar_reduction: str = "mean"
    ortho_weight: float = 1e-4
    srip_beta: float = 1e-4
    finetune_epochs: int = 0
    transfer_epochs: int = 0
    log_every: int = None
    bins: int = 30
    mnist_images: str = None
    mnist_labels: str = None
    eps: float = 1e-5
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r} (choose from {', '.join(EXPERIMENTS)})")
        for key, value in DEFAULTS[self.experiment].items():
            if key not in self.explicit and (getattr(self, key) is None or key in ("racecar_reduction", "finetune_epochs", "transfer_epochs")):
                setattr(self, key, value)
        if self.log_every is None:
            self.log_every = max(1, self.epochs // 100) if self.epochs else 1
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ConfigError(f"unknown model(s) {', '.join(bad)}")

    def resolved(self):
        """``key = value`` lines of every setting (for the manifest)."""
        skip = {"explicit"}
        return [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self) if f.name not in skip]


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_seeds(text):
    """``"0..4"`` (inclusive range) or a comma list ``"0, 3, 7"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    seeds = tuple(int(s) for s in text.split(",") if s.strip())
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


_CONVERTERS = {
    "experiment": str.strip,
    "model": lambda v: tuple(m.strip() for m in v.split(",") if m.strip()),
    "seeds": parse_seeds,
    "out": str.strip,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "optimizer": str.strip,
    "racecar_lambda": float,
    "racecar_reduction": str.strip,
    "ortho_weight": float,
    "srip_beta": float,
    "finetune_epochs": int,
    "transfer_epochs": int,
    "log_every": int,
    "bins": int,
    "mnist_images": str.strip,
    "mnist_labels": str.strip,
    "eps": float,
}


def parse_config(path):
    """Read a config file into an :class:`ExperimentConfig`.

    Unknown keys, malformed lines and bad values raise :class:`ConfigError`
    carrying the 1-based line number.
    """
    values, lines = {}, {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _CONVERTERS:
                raise ConfigError(f"unknown key {key!r}", lineno)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", lineno)
            try:
                values[key] = _CONVERTERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
            lines[key] = lineno
    if "experiment" not in values:
        raise ConfigError("missing required key 'experiment'", None)
    if "model" in values:
        values["models"] = values.pop("model")
    explicit = set(values) - {"experiment", "models", "seeds", "out"}
    try:
        cfg = ExperimentConfig(explicit=explicit, **values)
        TrainConfig(optimizer=cfg.optimizer)
        RacecarConfig(reduction=cfg.racecar_reduction)
    except (ConfigError, ContractError) as exc:
        key = next((k for k in ("experiment", "model", "optimizer", "racecar_reduction") if k in lines and k in str(exc)), None)
        line = lines.get(key, lines.get("experiment"))
        raise ConfigError(str(exc), line) from None
    return cfg


# ------------------------------------------------------------------ models


def racecar_for(model, lam, reduction="mean"):
    if model == "rr":
        return RacecarConfig(lam, "full", reduction=reduction)
    if model == "rr1":
        return RacecarConfig(lam, "full", constrained_layers=[1], reduction=reduction)
    if model == "lrr":
        return RacecarConfig(lam, "layerwise", reduction=reduction)
    return None


def model_train_config(cfg, model, seed):
    """TrainConfig for the regularized (or plain) training phase of ``model``."""
    ortho = {"ort": "soft", "srip": "srip"}.get(model, "off")
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        seed=seed,
        racecar=racecar_for(model, cfg.racecar_lambda, cfg.racecar_reduction),
        ortho=ortho,
        ortho_weight=cfg.ortho_weight,
        srip_beta=cfg.srip_beta,
        log_every=cfg.log_every,
    )


def mi_architecture():
    layers = []
    for width in (10, 7, 5, 4, 3):
        layers += [Dense(width), Activation("tanh")]
    return layers + [Dense(2)]


def gradcheck_architecture():
    # bias before batch norm has an identically zero gradient; leave it out
    return [Dense(6, has_bias=False), BatchNorm(), Activation("tanh"), Dense(4), Activation("tanh"), Dense(3)]


@dataclass
class RunResult:
    model: str
    seed: int
    log: object
    metrics: dict
    mi_points: list = None
    features: object = None
    checksum: str = ""
    phase_logs: dict = field(default_factory=dict)


def _digest(*datasets):
    h = hashlib.sha256()
    for ds in datasets:
        h.update(np.ascontiguousarray(ds.inputs).tobytes())
        h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def _feature_run(cfg, model, seed, data, test, exemplars, layers):
    net = build_network(layers, data.inputs.shape[1:], seed=seed)
    net, log = train(net, data, model_train_config(cfg, model, seed), test)
    report = extract_features(net, 1, exemplars=exemplars)
    top = report.similarity[:2]
    metrics = {
        "train_acc": log.rows[-1][3],
        "test_acc": log.rows[-1][4],
        "similarity": float(np.mean(top)),
        "sigma_1": float(report.sigma[0]),
    }
    return RunResult(model, seed, log, metrics, features=report, checksum=_digest(data) if test is None else _digest(data, test))


def run_model(cfg, model, seed):
    """Train and analyse one ``(model, seed)`` combination."""
    if cfg.experiment == "peak":
        train_set, test_set = gen_peak_dataset(seed)
        return _feature_run(cfg, model, seed, train_set, test_set, list(peak_templates()), [Dense(2)])
    if cfg.experiment == "mnist2":
        paths = (cfg.mnist_images, cfg.mnist_labels) if cfg.mnist_images else fixture_paths()
        pair = select_two_digits(load_idx(*paths), seed, relabel=True)
        return _feature_run(cfg, model, seed, pair, None, list(pair.inputs), [Dense(2)])
    if cfg.experiment == "mi":
        return _mi_run(cfg, model, seed)
    return _gradcheck_run(cfg, model, seed)


def _mi_run(cfg, model, seed):
    task_a, test_a = gen_bitsphere_task(seed=seed)
    net = build_network(mi_architecture(), (12,), seed=seed)
    net, log = train(net, task_a, model_train_config(cfg, model, seed), test_a)
    points = mi_plane(net, task_a, bins=cfg.bins, seed=seed)
    acc_a = log.rows[-1][4]
    plain = model_train_config(cfg, "std", seed)
    # both later phases start from the stage-A weights
    phases = {}
    acc_a_ft = float("nan")
    if cfg.finetune_epochs:
        _, phases["aa"] = finetune(copy.deepcopy(net), task_a, plain.without_regularization(epochs=cfg.finetune_epochs, log_every=cfg.log_every), test_a)
        acc_a_ft = phases["aa"].rows[-1][4]
    task_b, test_b = task_a.swapped(), test_a.swapped()
    acc_b = float("nan")
    if cfg.transfer_epochs:
        _, phases["ab"] = finetune(copy.deepcopy(net), task_b, plain.without_regularization(epochs=cfg.transfer_epochs, log_every=cfg.log_every), test_b)
        acc_b = phases["ab"].rows[-1][4]
    metrics = {
        "test_acc_a": acc_a,
        "test_acc_a_finetuned": acc_a_ft,
        "test_acc_ab": acc_b,
        "min_i_x": min(p.i_x for p in points),
        "min_i_y": min(p.i_y for p in points),
    }
    return RunResult(model, seed, log, metrics, mi_points=points, checksum=_digest(task_a, test_a), phase_logs=phases)


def _gradcheck_run(cfg, model, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cfg.batch_size, 5))
    y = rng.integers(0, 3, size=cfg.batch_size)
    net = build_network(gradcheck_architecture(), (5,), seed=seed)
    tc = model_train_config(cfg, model, seed)
    loss = make_loss(x, y, tc.racecar, tc.ortho, tc.ortho_weight, tc.srip_beta)
    err = finite_diff_check(net, loss, eps=cfg.eps, seed=seed)
    from .training import MetricsLog

    log = MetricsLog()
    total, base, reg, _, _ = loss(net, need_grad=False)
    log.append(0, base, reg, float("nan"), float("nan"), 0.0)
    h = hashlib.sha256(x.tobytes() + y.tobytes()).hexdigest()
    return RunResult(model, seed, log, {"max_rel_error": err}, checksum=h)


# ------------------------------------------------------------------ output


def run_experiment(cfg, out=None, progress=None):
    """Run every (model, seed) pair, writing logs, figures data and a summary.

    Returns the list of :class:`RunResult`. A training failure propagates as
    :class:`~racecar.exceptions.TrainingError` with ``model``/``seed``
    attributes attached.
    """
    out = out or cfg.out or os.path.join("runs", cfg.experiment)
    os.makedirs(out, exist_ok=True)
    if cfg.experiment in ("peak", "mnist2"):
        os.makedirs(os.path.join(out, "features"), exist_ok=True)
    results = []
    for model in cfg.models:
        for seed in cfg.seeds:
            if progress:
                progress(f"{cfg.experiment}: model={model} seed={seed}")
            try:
                res = run_model(cfg, model, seed)
            except Exception as exc:
                exc.model, exc.seed = model, seed
                raise
            res.log.to_csv(os.path.join(out, f"metrics_{model}_{seed}.csv"))
            for phase, plog in res.phase_logs.items():
                plog.to_csv(os.path.join(out, f"metrics_{model}_{seed}_{phase}.csv"))
            if res.mi_points is not None:
                write_mi_plane_csv(os.path.join(out, f"miplane_{model}_{seed}.csv"), [(model, seed, res.mi_points)])
            if res.features is not None:
                dump_features(res.features, os.path.join(out, "features", f"{model}_{seed}"))
            results.append(res)
    write_summary(os.path.join(out, "summary.csv"), results)
    _write_manifest(os.path.join(out, "manifest.txt"), cfg, results)
    return results


def _write_manifest(path, cfg, results):
    with open(path, "w") as fh:
        fh.write(f"racecar {__version__}\nnumpy {np.__version__}\npython {platform.python_version()}\n\n[config]\n")
        for line in cfg.resolved():
            fh.write(line + "\n")
        fh.write("\n[data sha256]\n")
        for r in results:
            fh.write(f"{r.model} {r.seed} {r.checksum}\n")


def write_summary(path, results):
    """``model,seed,<metrics>`` per run, then ``mean``/``std`` rows per model."""
    names = list(results[0].metrics) if results else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed"] + names)
        models = list(dict.fromkeys(r.model for r in results))
        for model in models:
            rows = [r for r in results if r.model == model]
            for r in rows:
                w.writerow([model, r.seed] + [repr(float(r.metrics[n])) for n in names])
            table = np.array([[r.metrics[n] for n in names] for r in rows], dtype=np.float64)
            w.writerow([model, "mean"] + [repr(float(v)) for v in table.mean(axis=0)])
            w.writerow([model, "std"] + [repr(float(v)) for v in table.std(axis=0)])


def read_summary(path):
    """Per-seed rows as ``{(model, seed): {metric: value}}`` plus the metric names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["model", "seed"]:
            raise ContractError(f"{path} is not a summary file")
        names = header[2:]
        rows = {}
        for row in reader:
            if row[1] in ("mean", "std"):
                continue
            rows[(row[0], int(row[1]))] = dict(zip(names, map(float, row[2:])))
    return names, rows


def compare_summaries(path_a, path_b, model_a=None, model_b=None):
    """Mean difference (a - b) and per-seed wins of ``a`` for each shared metric.

    Runs are paired by seed. With a single seed the report reduces to the
    plain difference. Returns ``(report_text, {metric: (mean_diff, wins, n)})``.
    """
    names_a, rows_a = read_summary(path_a)
    names_b, rows_b = read_summary(path_b)
    if names_a != names_b:
        raise ContractError(f"metric columns differ: {names_a} vs {names_b}")
    sel_a = _select(rows_a, model_a)
    sel_b = _select(rows_b, model_b)
    seeds = sorted(set(sel_a) & set(sel_b))
    if not seeds:
        raise ContractError("the two summaries share no seeds")
    lines = [f"a={path_a}{'[' + model_a + ']' if model_a else ''}  b={path_b}{'[' + model_b + ']' if model_b else ''}  seeds={len(seeds)}"]
    stats = {}
    for name in names_a:
        diffs = np.array([sel_a[s][name] - sel_b[s][name] for s in seeds])
        wins = int(np.sum(diffs > 0))
        stats[name] = (float(np.mean(diffs)), wins, len(seeds))
        if len(seeds) == 1:
            lines.append(f"{name}: difference {diffs[0]:+.6g}")
        else:
            lines.append(f"{name}: mean difference {np.mean(diffs):+.6g}, a wins {wins}/{len(seeds)}")
    return "\n".join(lines) + "\n", stats


def _select(rows, model):
    models = {m for m, _ in rows}
    if model is None:
        if len(models) != 1:
            raise ContractError(f"summary holds several models {sorted(models)}; pick one")
        model = next(iter(models))
    picked = {s: v for (m, s), v in rows.items() if m == model}
    if not picked:
        raise ContractError(f"model {model!r} not in summary")
    return picked
