"""Dataset ingestion and synthetic generators.

MNIST arrives as IDX files, EGSS as the UCI grid-stability CSV. Synthetic
generators cover CI-scale runs without any downloads; their generative
formulas are documented on :func:`synthetic`.
"""

import csv
import os
import struct

import numpy as np

from .errors import DatasetError
from .nncore import Dataset

DATA_DIR_ENV = "MOFHEI_DATA_DIR"

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

EGSS_FEATURES = ["tau1", "tau2", "tau3", "tau4",
                 "p1", "p2", "p3", "p4",
                 "g1", "g2", "g3", "g4"]


def data_dir():
    return os.environ.get(DATA_DIR_ENV, os.path.join(os.path.expanduser("~"), ".mofhei", "data"))


def normalize_images(arr):
    """Scale 8-bit images into [0, 1]; already-normalized input is unchanged."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(float) / 255.0
    arr = arr.astype(float)
    return arr if arr.size == 0 or arr.max() <= 1.0 else arr / 255.0


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _read_idx(path, expect_magic, expect_dims):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header", offset=len(raw))
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expect_magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}",
                           offset=0)
    n_dims = magic & 0xFF
    header_len = 4 + 4 * n_dims
    if len(raw) < header_len:
        raise DatasetError(f"{path}: truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(f">{n_dims}i", raw[4:header_len])
    if len(dims) != expect_dims:
        raise DatasetError(f"{path}: expected {expect_dims} dimensions, found {len(dims)}",
                           offset=4)
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise DatasetError(f"{path}: payload length {len(raw) - header_len} != "
                           f"declared {expected - header_len}", offset=len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """MNIST IDX pair -> Dataset of (n, 28, 28, 1) float images, one-hot(10)."""
    images = _read_idx(images_path, IDX_MAGIC_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_MAGIC_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    x = normalize_images(images)[..., None]
    return Dataset(x, one_hot(labels, 10), name="mnist")


def split_train_val(ds, n_val, seed=0):
    """Deterministic shuffled split: first n-n_val train, last n_val val."""
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:len(ds) - n_val]), ds.subset(order[len(ds) - n_val:])


def load_mnist_dir(root=None, n_val=3000, seed=0):
    """Load the four standard IDX files; returns (train, val, test)."""
    root = root or data_dir()
    names = {
        "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
        "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
        "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
        "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
    }
    paths = {}
    for key, candidates in names.items():
        found = [os.path.join(root, c) for c in candidates if os.path.exists(os.path.join(root, c))]
        if not found:
            raise FileNotFoundError(f"missing MNIST file {candidates[0]} under {root}")
        paths[key] = found[0]
    full = load_mnist_idx(paths["train_images"], paths["train_labels"])
    test = load_mnist_idx(paths["test_images"], paths["test_labels"])
    train, val = split_train_val(full, n_val, seed=seed)
    return train, val, test


def mnist_available(root=None):
    try:
        root = root or data_dir()
        return all(
            any(os.path.exists(os.path.join(root, c)) for c in cands)
            for cands in (("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                          ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
                          ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                          ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"))
        )
    except Exception:
        return False


def load_egss_csv(path, seed=0, splits=(8550, 450, 1000)):
    """UCI grid-stability CSV -> (train, val, test).

    The 12 predictors are min-max scaled to [0, 1] with the scaler fit on the
    training split only; a zero-range column scales to 0. Labels come from the
    categorical ``stabf`` column as a 2-class one-hot (index 1 = stable).
    For row counts other than the sum of ``splits`` the split sizes scale
    proportionally.
    """
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: empty CSV")
        missing = [c for c in EGSS_FEATURES + ["stabf"] if c not in reader.fieldnames]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}")
        for i, row in enumerate(reader, start=2):  # header is row 1
            try:
                feats = [float(row[c]) for c in EGSS_FEATURES]
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: non-numeric cell", row=i) from exc
            label = str(row["stabf"]).strip().lower()
            if label not in ("stable", "unstable"):
                raise DatasetError(f"{path}: bad stabf value {row['stabf']!r}", row=i)
            rows.append((feats, 1 if label == "stable" else 0))

    if not rows:
        raise DatasetError(f"{path}: no data rows")
    x = np.array([r[0] for r in rows])
    y = one_hot([r[1] for r in rows], 2)

    n = len(x)
    total = sum(splits)
    if n == total:
        n_train, n_val, n_test = splits
    else:
        n_train = int(round(n * splits[0] / total))
        n_val = int(round(n * splits[1] / total))
        n_test = n - n_train - n_val
    order = np.random.default_rng(seed).permutation(n)
    tr, va, te = np.split(order, [n_train, n_train + n_val])

    lo = x[tr].min(axis=0)
    hi = x[tr].max(axis=0)
    span = hi - lo
    span[span == 0] = 1.0

    def scale(block):
        out = (block - lo) / span
        out[:, hi == lo] = 0.0
        return out

    return (Dataset(scale(x[tr]), y[tr], name="egss-train"),
            Dataset(scale(x[va]), y[va], name="egss-val"),
            Dataset(scale(x[te]), y[te], name="egss-test"))


# seven-segment corner points in a unit box, y pointing down
_SEG_POINTS = {
    "tl": (0.28, 0.18), "tr": (0.72, 0.18),
    "ml": (0.28, 0.50), "mr": (0.72, 0.50),
    "bl": (0.28, 0.82), "br": (0.72, 0.82),
}
_SEGMENTS = {
    "a": ("tl", "tr"), "b": ("tr", "mr"), "c": ("mr", "br"), "d": ("bl", "br"),
    "e": ("ml", "bl"), "f": ("tl", "ml"), "g": ("ml", "mr"),
}
_DIGIT_SEGMENTS = [
    "abcdef", "bc", "abged", "abgcd", "fgbc",
    "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
]


def _render_glyph(digit, rng, size=28):
    """Rasterize one jittered seven-segment digit into a (size, size) image."""
    theta = rng.uniform(-0.20, 0.20)
    scale = rng.uniform(0.80, 1.15)
    shift = rng.uniform(-0.08, 0.08, size=2)
    thickness = rng.uniform(0.045, 0.075)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])

    px = (np.arange(size) + 0.5) / size
    gx, gy = np.meshgrid(px, px, indexing="xy")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (size*size, 2)

    img = np.zeros(size * size)
    for seg in _DIGIT_SEGMENTS[digit]:
        a = np.array(_SEG_POINTS[_SEGMENTS[seg][0]])
        b = np.array(_SEG_POINTS[_SEGMENTS[seg][1]])
        a = (rot @ (a - 0.5)) * scale + 0.5 + shift
        b = (rot @ (b - 0.5)) * scale + 0.5 + shift
        ab = b - a
        denom = float(ab @ ab) or 1.0
        t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        dist = np.linalg.norm(pts - closest, axis=1)
        img = np.maximum(img, np.clip(1.0 - dist / thickness, 0.0, 1.0))
    img += rng.normal(0.0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0).reshape(size, size)


def synthetic(kind, n, seed=0, **kwargs):
    """Deterministic synthetic datasets.

    - ``xor``: x cycles the four corners of {0,1}^2, y = x0 XOR x1 as (n, 1).
    - ``linear``: x ~ U[-1, 1]^(n, 1), y = 2x + 1 + noise * N(0, 1).
    - ``blobs``: ``classes`` isotropic Gaussian blobs (std 0.12) centered on a
      unit circle, one-hot labels.
    - ``mnist_like``: 28x28x1 seven-segment digit glyphs under random rotation
      (+-0.2 rad), scale (0.8-1.15), shift (+-0.08) and pixel noise, one-hot(10).
    """
    rng = np.random.default_rng(seed)
    if kind == "xor":
        corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        x = corners[np.arange(n) % 4]
        y = (x[:, 0].astype(int) ^ x[:, 1].astype(int)).astype(float)[:, None]
        return Dataset(x, y, name="xor")
    if kind == "linear":
        noise = float(kwargs.get("noise", 0.0))
        x = rng.uniform(-1.0, 1.0, size=(n, 1))
        y = 2.0 * x + 1.0 + noise * rng.normal(size=(n, 1))
        return Dataset(x, y, name="linear")
    if kind == "blobs":
        classes = int(kwargs.get("classes", 3))
        angles = 2 * np.pi * np.arange(classes) / classes
        centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        labels = rng.integers(0, classes, size=n)
        x = centers[labels] + 0.12 * rng.normal(size=(n, 2))
        return Dataset(x, one_hot(labels, classes), name="blobs")
    if kind == "mnist_like":
        labels = rng.integers(0, 10, size=n)
        x = np.stack([_render_glyph(int(d), rng) for d in labels])[..., None]
        return Dataset(x, one_hot(labels, 10), name="mnist_like")
    raise ValueError(f"unknown synthetic kind {kind!r}")


def autoencoder_view(ds):
    """Reconstruction view of an image dataset: targets = flattened inputs."""
    flat = ds.x.reshape(len(ds), -1)
    return Dataset(ds.x, flat, name=f"{ds.name}-ae")


def make_egss_csv(path, n=10000, seed=0):
    """Write a synthetic grid-stability CSV in the UCI schema.

    Predictors follow the published sampling ranges: tau ~ U[0.5, 10],
    p2..p4 ~ U[-2, -0.5] with p1 = -(p2+p3+p4), g ~ U[0.05, 1]. The stability
    score is a smooth stand-in for the real eigenvalue analysis: reaction
    times weighted by price sensitivity minus a coupling margin, thresholded
    at the empirical 36.2% quantile so the class balance matches the source
    data. ``stab`` holds the centered score (negative = stable).
    """
    rng = np.random.default_rng(seed)
    tau = rng.uniform(0.5, 10.0, size=(n, 4))
    p_cons = rng.uniform(-2.0, -0.5, size=(n, 3))
    p = np.concatenate([-p_cons.sum(axis=1, keepdims=True), p_cons], axis=1)
    g = rng.uniform(0.05, 1.0, size=(n, 4))

    score = (tau * (0.4 + 0.6 * g)).mean(axis=1) \
        + 0.8 * (tau.max(axis=1) * g.max(axis=1)) ** 0.5 \
        - 0.5 * np.abs(p).mean(axis=1)
    threshold = np.quantile(score, 0.362)
    stab = score - threshold
    stable = stab < 0

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EGSS_FEATURES + ["stab", "stabf"])
        for i in range(n):
            writer.writerow(
                [f"{v:.6f}" for v in np.concatenate([tau[i], p[i], g[i]])]
                + [f"{stab[i]:.6f}", "stable" if stable[i] else "unstable"]
            )
    return path
