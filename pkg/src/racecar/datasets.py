"""Synthetic task generators, the MNIST IDX reader and a small dataset cache."""
import hashlib
import json
import struct
from dataclasses import dataclass, replace
from importlib import resources
from itertools import combinations

import numpy as np

from .exceptions import CalibrationError, ContractError, ParseError

__all__ = [
    "Dataset",
    "BitSphereTaskConfig",
    "gen_peak_dataset",
    "peak_templates",
    "gen_bitsphere_task",
    "bitsphere_patterns",
    "bitsphere_mutual_information",
    "icosahedron",
    "icosahedron_symmetries",
    "load_idx",
    "write_idx",
    "fixture_paths",
    "select_two_digits",
    "save_dataset",
    "load_dataset",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CACHE_VERSION = 1


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.inputs)):
            raise ContractError("dataset inputs must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def one_hot(self, n_classes=None):
        k = n_classes or self.n_classes
        out = np.zeros((len(self), k))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def swapped(self):
        """Two-class task B: the same inputs with the one-hot entries swapped."""
        if self.labels.size and self.labels.max() > 1:
            raise ContractError("label swapping is defined for two classes")
        return replace(self, labels=1 - self.labels, provenance=self.provenance + "+swapped")

    def flat(self):
        return self.inputs.reshape(len(self), -1)


# ---------------------------------------------------------------- peak images

PEAK_SIZE = 28
PEAK_CENTERS = ((7.0, 7.0), (20.0, 20.0))
PEAK_SIGMA = 3.0


def peak_templates(size=PEAK_SIZE, sigma=PEAK_SIGMA):
    """Clean class templates: a Gaussian peak in the upper-left / lower-right quadrant."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / PEAK_SIZE
    out = []
    for cy, cx in PEAK_CENTERS:
        cy, cx = cy * scale, cx * scale
        out.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)))
    return np.stack(out)


def _scribble(rng, size, n_walks, steps, intensity):
    img = np.zeros((size, size))
    moves = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])
    for _ in range(n_walks):
        pos = rng.integers(0, size, size=2)
        img[pos[0], pos[1]] = intensity
        for step in rng.integers(0, len(moves), size=steps):
            pos = np.clip(pos + moves[step], 0, size - 1)
            img[pos[0], pos[1]] = intensity
    return img


def gen_peak_dataset(seed=0, n_per_class=55, n_test=10, size=PEAK_SIZE, walks=3, steps=20, intensity=0.5):
    """Two-class peak images with random-walk scribbles.

    Returns ``(train, test)``; the test split takes ``n_test // 2`` images of
    each class. Images have shape ``(size, size, 1)`` with values in [0, 1].
    """
    rng = np.random.default_rng(seed)
    templates = peak_templates(size)
    images, labels = [], []
    for cls in (0, 1):
        for _ in range(n_per_class):
            images.append(np.maximum(templates[cls], _scribble(rng, size, walks, steps, intensity)))
            labels.append(cls)
    images = np.stack(images)[..., None]
    labels = np.asarray(labels)
    test_idx = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        test_idx.extend(rng.choice(members, size=n_test // 2, replace=False))
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    order = rng.permutation(np.flatnonzero(~test_mask))
    tag = f"peak(seed={seed})"
    return (
        Dataset(images[order], labels[order], "train", tag),
        Dataset(images[test_mask], labels[test_mask], "test", tag),
    )


# ---------------------------------------------------------------- bit sphere


def icosahedron():
    """The 12 unit vectors of a regular icosahedron (uniform points on the sphere)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    pts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            pts.extend([(0.0, a, b), (a, b, 0.0), (b, 0.0, a)])
    pts = np.asarray(pts)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def _as_permutation(pts, transform):
    moved = pts @ transform.T
    perm = np.argmin(np.linalg.norm(moved[:, None, :] - pts[None, :, :], axis=2), axis=1)
    if not np.allclose(pts[perm], moved, atol=1e-9):
        raise AssertionError("transform is not a symmetry of the point set")
    return perm


def icosahedron_symmetries():
    """Generators of the full icosahedral group as permutations of the 12 bit positions.

    A 5-fold rotation about a vertex, a 3-fold rotation about a face centre
    and the point inversion; together they generate all 120 isometries.
    """
    pts = icosahedron()
    dots = pts @ pts.T
    nbrs = np.flatnonzero(np.isclose(dots[0], 1.0 / np.sqrt(5.0)))
    face = pts[0] + pts[nbrs[0]] + pts[[j for j in nbrs[1:] if np.isclose(dots[nbrs[0], j], 1 / np.sqrt(5))][0]]
    return [
        _as_permutation(pts, _rotation(pts[0], 2 * np.pi / 5)),
        _as_permutation(pts, _rotation(face, 2 * np.pi / 3)),
        _as_permutation(pts, -np.eye(3)),
    ]


def bitsphere_patterns():
    """All 4096 12-bit patterns; row ``i`` is the binary expansion of ``i``."""
    idx = np.arange(4096)
    return ((idx[:, None] >> np.arange(12)[None, :]) & 1).astype(np.float64)


def pair_distance_rule(x):
    """Rotation-invariant score of a pattern: mean chord length between its set bits.

    ``x`` has shape (N, 12). Depends on the pattern only through pairwise
    distances of active sphere points, so it is invariant under every
    isometry of the icosahedron.
    """
    pts = icosahedron()
    dist = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.sum(axis=1)
    pair_sum = 0.5 * np.einsum("ni,ij,nj->n", x, dist, x)
    pairs = np.maximum(n * (n - 1) / 2.0, 1.0)
    return pair_sum / pairs + 0.05 * n


RULES = {"pair_distance": pair_distance_rule}


@dataclass(frozen=True)
class BitSphereTaskConfig:
    """Stochastic rule ``p(y=1|x) = 1 / (1 + exp(-gamma * (f(x) - theta)))``."""

    gamma: float
    theta: float
    f: str = "pair_distance"

    def p_y1(self, x):
        u = RULES[self.f](x) - self.theta
        return 0.5 * (1.0 + np.tanh(0.5 * self.gamma * u))

    @classmethod
    def calibrated(cls, f="pair_distance", target_bits=0.99):
        """Choose ``theta`` at the gap in ``f`` closest to the median and
        ``gamma`` by bisection so that ``I(X;Y)`` equals ``target_bits``."""
        values = np.sort(np.unique(np.round(RULES[f](bitsphere_patterns()), 12)))
        scores = RULES[f](bitsphere_patterns())
        best = None
        for lo, hi in zip(values[:-1], values[1:]):
            frac = float(np.mean(scores > lo + 1e-9))
            if best is None or abs(frac - 0.5) < abs(best[0] - 0.5):
                best = (frac, 0.5 * (lo + hi))
        theta = best[1]
        lo_g, hi_g = 1e-3, 1e6
        for _ in range(200):
            mid = np.sqrt(lo_g * hi_g)
            if bitsphere_mutual_information(cls(mid, theta, f)) < target_bits:
                lo_g = mid
            else:
                hi_g = mid
        cfg = cls(float(hi_g), float(theta), f)
        _validate(cfg)
        return cfg


def _hb(p):
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log2(p) + q * np.log2(q))


def bitsphere_mutual_information(cfg):
    """Exact ``I(X;Y)`` in bits for uniform ``x`` over all 4096 patterns."""
    p = cfg.p_y1(bitsphere_patterns())
    return float(_hb(np.mean(p)) - np.mean(_hb(p)))


def _validate(cfg):
    p = float(np.mean(cfg.p_y1(bitsphere_patterns())))
    mi = bitsphere_mutual_information(cfg)
    if not 0.45 <= p <= 0.55:
        raise CalibrationError(f"p(y=1) = {p:.3f} outside [0.45, 0.55]")
    if not 0.95 <= mi <= 1.0:
        raise CalibrationError(f"I(X;Y) = {mi:.3f} bits outside [0.95, 1.0]")


_DEFAULT_CFG = None


def gen_bitsphere_task(cfg=None, seed=0, n_train=3277):
    """12-bit sphere task: every pattern once, labels drawn from the stochastic rule.

    Returns ``(train, test)`` with 3277 / 819 samples. Each Dataset carries
    ``pattern_index`` (the integer whose bits form the input) in its
    ``inputs``-aligned attribute ``pattern``.
    """
    global _DEFAULT_CFG
    if cfg is None:
        if _DEFAULT_CFG is None:
            _DEFAULT_CFG = BitSphereTaskConfig.calibrated()
        cfg = _DEFAULT_CFG
    else:
        _validate(cfg)
    rng = np.random.default_rng(seed)
    x = bitsphere_patterns()
    y = (rng.random(len(x)) < cfg.p_y1(x)).astype(np.int64)
    order = rng.permutation(len(x))
    tag = f"bitsphere(gamma={cfg.gamma:.6g},theta={cfg.theta:.6g},f={cfg.f},seed={seed})"
    tr, te = order[:n_train], order[n_train:]
    train = Dataset(x[tr], y[tr], "train", tag)
    test = Dataset(x[te], y[te], "test", tag)
    train.pattern = tr
    test.pattern = te
    return train, test


# ---------------------------------------------------------------- IDX files


def _read_u32(buf, offset):
    if offset + 4 > len(buf):
        raise ParseError("truncated header", offset)
    return struct.unpack_from(">I", buf, offset)[0]


def _parse_idx(buf, magic, ndims):
    found = _read_u32(buf, 0)
    if found != magic:
        raise ParseError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    dims = [_read_u32(buf, 4 + 4 * i) for i in range(ndims)]
    start = 4 + 4 * ndims
    need = int(np.prod(dims))
    if len(buf) - start < need:
        raise ParseError(f"expected {need} data bytes, found {len(buf) - start}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an MNIST-style image/label IDX pair; pixels are scaled to [0, 1].

    Images come back as ``(count, rows, cols, 1)``.
    """
    with open(images_path, "rb") as fh:
        images = _parse_idx(fh.read(), IMAGE_MAGIC, 3)
    with open(labels_path, "rb") as fh:
        labels = _parse_idx(fh.read(), LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", 4)
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), "train", f"idx({len(images)} images)")


def write_idx(images, labels, images_path, labels_path):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def fixture_paths():
    """Bundled 28x28 digit images in IDX format (upscaled scikit-learn digits)."""
    root = resources.files("racecar") / "data"
    return str(root / "digits-images-idx3-ubyte"), str(root / "digits-labels-idx1-ubyte")


def select_two_digits(mnist, seed=0, relabel=False):
    """Two random images with distinct labels from a training split.

    With ``relabel`` the pair gets class indices 0 and 1 (in draw order) so it
    can train a two-output network; the digits stay in the provenance.
    """
    if mnist.split != "train":
        raise ContractError("digit pairs are drawn from the training split")
    if len(np.unique(mnist.labels)) < 2:
        raise ContractError("need at least two distinct labels")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(len(mnist)))
    others = np.flatnonzero(mnist.labels != mnist.labels[first])
    second = int(others[rng.integers(len(others))])
    idx = [first, second]
    digits = mnist.labels[idx]
    prov = f"{mnist.provenance}:pair(seed={seed},digits={digits[0]}/{digits[1]})"
    return Dataset(mnist.inputs[idx], np.arange(2) if relabel else digits, "train", prov)


# ---------------------------------------------------------------- cache


def _checksum(ds):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def save_dataset(ds, path):
    meta = {"version": CACHE_VERSION, "split": ds.split, "provenance": ds.provenance, "sha256": _checksum(ds)}
    with open(path, "wb") as fh:
        np.savez(fh, inputs=ds.inputs, labels=ds.labels, meta=np.frombuffer(json.dumps(meta).encode(), np.uint8))


def load_dataset(path):
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("version") != CACHE_VERSION:
            raise ContractError(f"unsupported dataset cache version {meta.get('version')}")
        ds = Dataset(data["inputs"].copy(), data["labels"].copy(), meta["split"], meta["provenance"])
    if _checksum(ds) != meta["sha256"]:
        raise ContractError(f"checksum mismatch in {path}")
    return ds
