"""Datasets: IDX files, a separable synthetic image set, Dirichlet partitions."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, IDXCountMismatchError, IDXError, IDXMagicError, IDXTruncatedError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Per-client sample counts of the reference nine-client setup, ascending.
REFERENCE_VOLUMES = (1854, 3703, 4429, 4783, 5467, 5634, 5891, 8958, 9281)


@dataclass
class LabeledDataset:
    """``images`` is ``(n, H, W, C)`` in [0, 1]; ``labels`` are ints in [0, classes)."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.classes)


# ---------------------------------------------------------------------------
# IDX format


def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path, expected_magic):
    """Parse one big-endian IDX file of unsigned bytes into a uint8 array."""
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 4:
        raise IDXTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IDXMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise IDXTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    n = int(np.prod(dims)) if dims else 0
    payload = len(blob) - head
    if payload < n:
        raise IDXTruncatedError(f"{path}: payload has {payload} bytes, header promises {n}")
    if payload > n:
        raise IDXError(f"{path}: {payload - n} trailing bytes after payload")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path, classes=None):
    """Load an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), classes)


def write_idx(dataset, images_path, labels_path):
    """Write ``dataset`` as an IDX pair (pixels rounded to 8 bits, single channel)."""
    imgs = dataset.images
    if imgs.shape[-1] != 1:
        raise ContractError("IDX export supports single-channel images only")
    pix = np.clip(np.rint(imgs[..., 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pix.shape
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pix.tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def _templates(classes, height, width, rng):
    yy, xx = np.mgrid[0:height, 0:width]
    h3, w3 = height // 5, width // 5
    fixed = [
        (yy >= h3) & (yy < 2 * h3),                              # bar, top
        (yy >= height - 2 * h3) & (yy < height - h3),            # bar, bottom
        (xx >= w3) & (xx < 2 * w3),                              # bar, left
        (xx >= width - 2 * w3) & (xx < width - w3),              # bar, right
        np.abs(yy - xx * height / width) <= 1.5,                 # diagonal
        np.abs(yy - (height - 1 - xx * height / width)) <= 1.5,  # anti-diagonal
        (np.abs(yy - (height - 1) / 2) < height / 6) & (np.abs(xx - (width - 1) / 2) < width / 6),
        (yy < 2) | (yy >= height - 2) | (xx < 2) | (xx >= width - 2),
        (np.abs(yy - (height - 1) / 2) < 1.5) | (np.abs(xx - (width - 1) / 2) < 1.5),
        ((yy // max(1, height // 4)) + (xx // max(1, width // 4))) % 2 == 0,
    ]
    out = [t.astype(np.float64) for t in fixed[:classes]]
    while len(out) < classes:
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        s = rng.uniform(1.5, 4.0)
        out.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)))
    return np.stack(out)


def synth_dataset(n, classes=10, height=16, width=16, noise=0.1, seed=0):
    """``n`` images of ``classes`` fixed patterns with jitter and Gaussian noise.

    Each sample is ``clip(template * (1 - j) + noise * N(0, 1), 0, 1)`` with
    ``j ~ U(0, min(noise, 1))``; at ``noise=0`` every image of a class is its
    template. Labels are balanced and shuffled.
    """
    if n < classes:
        raise ContractError(f"need at least one sample per class ({n} < {classes})")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    templates = _templates(classes, height, width, rng)
    labels = rng.permutation(np.arange(n) % classes)
    jitter = rng.uniform(0.0, min(noise, 1.0), size=(n, 1, 1)) if noise > 0 else np.zeros((n, 1, 1))
    images = templates[labels] * (1.0 - jitter)
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0)[..., None]
    return LabeledDataset(images, labels, classes)


def train_test_split(dataset, n_test, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B11]))
    order = rng.permutation(len(dataset))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# partitioning


def largest_remainder(weights, total):
    """Integer allocation of ``total`` proportional to ``weights`` (ties to lower index)."""
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if total == 0 or s <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights / s * total
    base = np.floor(exact).astype(np.int64)
    left = int(total - base.sum())
    if left:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:left]] += 1
    return base


def dirichlet_partition(labels, clients, r, seed=0, client_weights=None):
    """Split sample indices across ``clients`` with per-class Dirichlet(r) shares.

    For each class, proportions ``p ~ Dirichlet(r * 1_K)`` (optionally
    multiplied by ``client_weights`` and renormalized) decide how that
    class's shuffled samples are dealt to clients, with largest-remainder
    rounding. Returns ``clients`` sorted, disjoint index arrays covering
    every sample.
    """
    if isinstance(labels, LabeledDataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if clients < 1:
        raise ContractError("need at least one client")
    if r <= 0:
        raise ContractError("Dirichlet concentration r must be positive")
    if labels.size == 0:
        raise ContractError("cannot partition an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD1C1]))
    w = None if client_weights is None else np.asarray(client_weights, dtype=np.float64)
    parts = [[] for _ in range(clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if clients == 1:
            parts[0].append(idx)
            continue
        p = rng.dirichlet(np.full(clients, float(r)))
        if w is not None:
            p = p * w
        counts = largest_remainder(p, len(idx))
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            parts[k].append(chunk)
    out = [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]
    for k, ix in enumerate(out):
        if ix.size == 0:
            log.warning("client %d received no samples (r=%g)", k, r)
    return out


def label_skew(labels, partition, classes):
    """Mean total-variation distance between each client's label mix and the global one."""
    labels = np.asarray(labels)
    glob = np.bincount(labels, minlength=classes) / len(labels)
    tvs = []
    for ix in partition:
        if len(ix) == 0:
            continue
        local = np.bincount(labels[ix], minlength=classes) / len(ix)
        tvs.append(0.5 * np.abs(local - glob).sum())
    return float(np.mean(tvs))


def reference_weights(clients):
    """Relative client volumes following the reference nine-client skew."""
    ref = np.asarray(REFERENCE_VOLUMES, dtype=np.float64)
    if clients == len(ref):
        return ref / ref.sum()
    pos = np.linspace(0, len(ref) - 1, clients)
    w = np.interp(pos, np.arange(len(ref)), ref)
    return w / w.sum()
