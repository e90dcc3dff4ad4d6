"""Post-hoc analysis: singular-vector features, similarity scores and MI planes."""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .linalg import svd
from .nn import Activation, forward

__all__ = [
    "FeatureReport",
    "MIPlanePoint",
    "extract_features",
    "similarity_score",
    "mi_estimate",
    "mi_plane",
    "entropy_bits",
    "write_pgm",
    "read_pgm",
    "dump_features",
    "write_mi_plane_csv",
    "read_mi_plane_csv",
]

DEFAULT_BINS = 30
MAX_JOINT_UNITS = 12


@dataclass
class FeatureReport:
    layer_index: int
    right_singular_vectors: list
    sigma: list
    similarity: list = field(default_factory=list)


@dataclass(frozen=True)
class MIPlanePoint:
    layer_index: int
    i_x: float
    i_y: float


def extract_features(net, layer=1, exemplars=None, image_shape=None):
    """Right singular vectors of the weight matrix of stage ``layer``, by descending sigma.

    Vectors of the first stage are reshaped to the network's input geometry
    (or ``image_shape``); if ``exemplars`` are given each vector is scored
    with :func:`similarity_score`.
    """
    if not 1 <= layer <= net.n_stages:
        raise ContractError(f"layer {layer} has no weight matrix (network has {net.n_stages} stages)")
    m = net.weight_matrix(layer)
    res = svd(m)
    k = min(m.shape)
    if image_shape is None and layer == 1 and len(net.input_shape) > 1:
        image_shape = net.input_shape
    vectors = []
    for j in range(k):
        v = res.v[:, j]
        vectors.append(v.reshape(image_shape) if image_shape is not None else v)
    scores = [similarity_score(v, exemplars) for v in vectors] if exemplars is not None else []
    return FeatureReport(layer, vectors, list(res.sigma[:k]), scores)


def _centered_unit(a):
    a = np.asarray(a, dtype=np.float64).ravel()
    a = a - a.mean()
    norm = np.linalg.norm(a)
    return a / norm if norm > 0 else None


def similarity_score(vector, exemplars):
    """Best absolute cosine similarity between the mean-centred ``vector`` and any
    mean-centred exemplar; 1 is a perfect match up to sign and scale."""
    v = _centered_unit(vector)
    if v is None:
        return 0.0
    best = 0.0
    for e in exemplars:
        if np.size(e) != v.size:
            raise ContractError(f"exemplar of size {np.size(e)} does not match vector of size {v.size}")
        u = _centered_unit(e)
        if u is not None:
            best = max(best, abs(float(v @ u)))
    return min(best, 1.0)


# ------------------------------------------------------------------ mutual information


def _discretize(t, bins, value_range=None):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    t = t.reshape(len(t), -1)
    if value_range is not None:
        lo = np.full(t.shape[1], float(value_range[0]))
        hi = np.full(t.shape[1], float(value_range[1]))
    else:
        lo, hi = t.min(axis=0), t.max(axis=0)
    width = np.where(hi > lo, (hi - lo) / bins, 1.0)
    codes = np.floor((t - lo) / width).astype(np.int64)
    return np.clip(codes, 0, bins - 1)


def _labels_of_rows(codes):
    if codes.ndim == 1:
        codes = codes[:, None]
    _, inv = np.unique(codes, axis=0, return_inverse=True)
    return inv.ravel()


def entropy_bits(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mi_estimate(x_samples, t_samples, bins=DEFAULT_BINS, value_range=None, max_units=None, seed=0):
    """Plug-in estimate of ``I(X;T)`` in bits.

    ``x_samples`` are discrete labels; each dimension of ``t_samples`` is cut
    into ``bins`` equal-width bins over its own [min, max] (or over
    ``value_range``). If ``max_units`` is set and ``T`` is wider, a seeded
    random subset of that many dimensions is used for the joint histogram.
    """
    if bins < 2:
        raise ContractError("bins must be >= 2")
    x = np.asarray(x_samples)
    t = np.asarray(t_samples, dtype=np.float64)
    if len(x) != len(t):
        raise ContractError(f"{len(x)} x samples but {len(t)} t samples")
    t = t.reshape(len(t), -1)
    if max_units is not None and t.shape[1] > max_units:
        cols = np.sort(np.random.default_rng(seed).choice(t.shape[1], size=max_units, replace=False))
        t = t[:, cols]
    tl = _labels_of_rows(_discretize(t, bins, value_range))
    xl = _labels_of_rows(x.reshape(len(x), -1))
    joint = xl * (tl.max() + 1) + tl
    return max(entropy_bits(xl) + entropy_bits(tl) - entropy_bits(joint), 0.0)


def _layer_range(net, m):
    """Fixed [-1, 1] binning range for tanh-activated layer outputs."""
    st = net.stages[m - 2]
    if st.post and isinstance(net.layers[st.post[-1]], Activation) and net.layers[st.post[-1]].kind == "tanh":
        return (-1.0, 1.0)
    return None


def mi_plane(net, data, bins=DEFAULT_BINS, x_ids=None, layers=None, max_units=MAX_JOINT_UNITS, seed=0):
    """MI-plane points ``(I(X;d_m), I(d_m;Y))`` for the layer outputs ``d_2 .. d_{n+1}``.

    ``X`` is identified by ``x_ids`` (defaults to ``data.pattern`` when the
    dataset provides it, else to the row index of each distinct input).
    """
    if x_ids is None:
        x_ids = getattr(data, "pattern", None)
    if x_ids is None:
        x_ids = _labels_of_rows(data.inputs.reshape(len(data), -1))
    _, trace = forward(net, data.inputs, record=True)
    if layers is None:
        layers = range(2, net.n_stages + 2)
    points = []
    for m in layers:
        d = trace[m].reshape(len(data), -1)
        rng = _layer_range(net, m) if m >= 2 else None
        ix = mi_estimate(x_ids, d, bins, rng, max_units, seed)
        iy = mi_estimate(data.labels, d, bins, rng, max_units, seed)
        points.append(MIPlanePoint(m, ix, iy))
    return points


MI_COLUMNS = ("layer", "i_x_bits", "i_y_bits", "model", "seed")


def write_mi_plane_csv(path, rows):
    """``rows`` are ``(model, seed, points)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MI_COLUMNS)
        for model, seed, points in rows:
            for p in points:
                w.writerow([p.layer_index, repr(p.i_x), repr(p.i_y), model, seed])


def read_mi_plane_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames) != MI_COLUMNS:
            raise ContractError(f"unexpected MI plane header {reader.fieldnames}")
        return [(r["model"], int(r["seed"]), MIPlanePoint(int(r["layer"]), float(r["i_x_bits"]), float(r["i_y_bits"]))) for r in reader]


# ------------------------------------------------------------------ images


def write_pgm(path, image):
    """Binary 8-bit PGM (P5), min-max normalized to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape(img.shape[0], -1) if img.ndim == 3 else img
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContractError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def dump_features(report, directory):
    """Write one PGM per singular vector; returns the file paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, (v, s) in enumerate(zip(report.right_singular_vectors, report.sigma), start=1):
        img = np.asarray(v)
        if img.ndim == 3:
            img = img[..., 0] if img.shape[-1] == 1 else img.reshape(img.shape[0], -1)
        elif img.ndim == 1:
            img = img[None, :]
        path = os.path.join(directory, f"layer{report.layer_index}_sv{k}_sigma{s:.4e}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths
