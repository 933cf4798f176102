"""Lightweight evaluation heads over patch embeddings.

Patches are preprocessed with the standard recipe (bicubic short-side resize
to 256, center crop 224, scale to [0, 1], ImageNet mean/std normalization)
and embedded either by an external encoder (via the EMB1 file format) or by
the built-in deterministic toy encoder, which pools local statistics into the
same 1536-dimensional layout so the whole pipeline runs at desk scale. On
top of embeddings: cosine k-NN scores and an L2-regularized multinomial
logistic regression trained by full-batch gradient descent with backtracking
line search.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from pathnav.errors import DimensionMismatchError, MetricUndefinedError, PathnavError

EMB_DIM = 1536
EMB_MAGIC = b"EMB1"

RESIZE_SHORT = 256
CROP = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class EmbeddingVector:
    """A case's 1536-d feature vector plus where it came from."""

    values: np.ndarray
    case_id: str
    source: str = "toy"  # "toy" or "bridge"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (EMB_DIM,):
            raise DimensionMismatchError(
                f"embedding for {self.case_id!r} has shape {self.values.shape}, "
                f"need ({EMB_DIM},)"
            )
        if not np.isfinite(self.values).all():
            raise DimensionMismatchError(
                f"embedding for {self.case_id!r} has non-finite components"
            )


# ------------------------------------------------------------- preprocessing


def preprocess(patch: np.ndarray) -> np.ndarray:
    """Normalize a patch to the 3x224x224 float grid encoders expect.

    Bicubic resize so the short side is 256 (long side floor-scaled), center
    crop to 224x224, scale to [0, 1], subtract the per-channel mean and
    divide by the per-channel std. Input must be at least 224 px per side.
    """
    h, w = patch.shape[:2]
    if h < CROP or w < CROP:
        raise PathnavError(f"patch {w}x{h} too small to preprocess (need >= {CROP})")
    if w <= h:
        ow, oh = RESIZE_SHORT, int(RESIZE_SHORT * h / w)
    else:
        ow, oh = int(RESIZE_SHORT * w / h), RESIZE_SHORT
    img = Image.fromarray(np.ascontiguousarray(patch)).resize((ow, oh), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32)
    top = int(round((oh - CROP) / 2.0))
    left = int(round((ow - CROP) / 2.0))
    arr = arr[top : top + CROP, left : left + CROP]
    arr /= 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1)


# -------------------------------------------------------------- toy encoder


def _pool2x(chw: np.ndarray) -> np.ndarray:
    c, h, w = chw.shape
    return chw.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _grid_stats(chw: np.ndarray, cells: int) -> np.ndarray:
    c, h, w = chw.shape
    gh, gw = h // cells, w // cells
    trimmed = chw[:, : gh * cells, : gw * cells]
    blocks = trimmed.reshape(c, cells, gh, cells, gw)
    means = blocks.mean(axis=(2, 4))
    stds = blocks.std(axis=(2, 4))
    return np.concatenate([means.ravel(), stds.ravel()])


def _orientation_hist(chw: np.ndarray, cells: int = 4, bins: int = 16) -> np.ndarray:
    gray = chw.mean(axis=0)
    dy, dx = np.gradient(gray)
    mag = np.hypot(dx, dy)
    ang = np.mod(np.arctan2(dy, dx), np.pi)
    h, w = gray.shape
    gh, gw = h // cells, w // cells
    feats = []
    for i in range(cells):
        for j in range(cells):
            sl = (slice(i * gh, (i + 1) * gh), slice(j * gw, (j + 1) * gw))
            hist, _ = np.histogram(
                ang[sl], bins=bins, range=(0, np.pi), weights=mag[sl]
            )
            total = hist.sum()
            feats.append(hist / total if total > 0 else hist)
    return np.concatenate(feats)


def toy_encode(patch: np.ndarray) -> np.ndarray:
    """Deterministic 1536-d feature vector from pooled local statistics.

    Layout: per-channel value histograms at three scales (288), gradient
    orientation histograms on a 4x4 grid at three scales (768), 8x8 and 4x4
    mean/std grids (384 + 96). A stand-in for a frozen tile encoder, strong
    enough to separate the synthetic lesion textures.
    """
    chw = preprocess(patch)
    scales = [chw, _pool2x(chw), _pool2x(_pool2x(chw))]
    feats = []
    for s in scales:
        for c in range(3):
            hist, _ = np.histogram(s[c], bins=32, range=(-2.7, 2.7))
            feats.append(hist / s[c].size)
    for s in scales:
        feats.append(_orientation_hist(s))
    feats.append(_grid_stats(chw, 8))
    feats.append(_grid_stats(chw, 4))
    vec = np.concatenate(feats).astype(np.float32)
    assert vec.shape == (EMB_DIM,)
    return vec


# ----------------------------------------------------------------- EMB1 I/O


def write_embeddings(path, records: list[tuple[str, np.ndarray]]) -> None:
    """Write (case id, 1536-d float32 vector) records in the EMB1 format."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", len(records), EMB_DIM))
        for case_id, vec in records:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (EMB_DIM,):
                raise DimensionMismatchError(
                    f"embedding for {case_id!r} has shape {vec.shape}, need ({EMB_DIM},)"
                )
            ident = case_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(vec.tobytes())


def read_embeddings(path) -> list[tuple[str, np.ndarray]]:
    """Read an EMB1 file back into (case id, vector) pairs, exact bits."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != EMB_MAGIC:
        raise DimensionMismatchError(f"{path} is not an EMB1 file")
    count, dim = struct.unpack_from("<II", data, 4)
    if dim != EMB_DIM:
        raise DimensionMismatchError(f"{path} has dim {dim}, expected {EMB_DIM}")
    pos = 12
    out = []
    for _ in range(count):
        (ilen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ident = data[pos : pos + ilen].decode("utf-8")
        pos += ilen
        vec = np.frombuffer(data, dtype="<f4", count=EMB_DIM, offset=pos).copy()
        pos += 4 * EMB_DIM
        out.append((ident, vec))
    if pos != len(data):
        raise DimensionMismatchError(f"{path} has trailing bytes after {count} records")
    return out


# ---------------------------------------------------------------------- kNN


@dataclass
class KnnIndex:
    """Flat cosine index over training embeddings."""

    embeddings: np.ndarray
    labels: list
    classes: tuple

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.embeddings, axis=1)
        self._norms = np.where(norms > 0, norms, 1.0)
        self._zero = norms == 0


def knn_scores(index: KnnIndex, query: np.ndarray, k: int = 10) -> np.ndarray:
    """Label fractions among the k nearest train points by cosine distance.

    Distance ties break by ascending train index (stable sort). Zero-norm
    vectors are treated as orthogonal to everything.
    """
    n = index.embeddings.shape[0]
    if n < k:
        raise MetricUndefinedError(f"k-NN needs at least k={k} train points, have {n}")
    q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        sims = np.zeros(n)
    else:
        sims = index.embeddings @ q / (index._norms * qn)
        sims[index._zero] = 0.0
    dists = 1.0 - sims
    nearest = np.argsort(dists, kind="stable")[:k]
    scores = np.zeros(len(index.classes))
    for i in nearest:
        scores[index.classes.index(index.labels[i])] += 1.0
    return scores / k


# ------------------------------------------------- logistic regression head


@dataclass
class LinearHead:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    classes: tuple
    c_reg: float = 1.0


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lr_loss_grad(W, b, X, Y, c_reg):
    """Mean cross-entropy plus ||W||^2 / (2 * c_reg * N); bias unregularized."""
    n = X.shape[0]
    logits = X @ W.T + b
    probs = _softmax(logits)
    eps = 1e-12
    ce = -np.mean(np.log(probs[np.arange(n), Y] + eps))
    loss = ce + (W ** 2).sum() / (2.0 * c_reg * n)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), Y] = 1.0
    delta = (probs - onehot) / n
    grad_w = delta.T @ X + W / (c_reg * n)
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


def lr_train(
    embeddings,
    labels,
    classes=None,
    c_reg: float = 1.0,
    tolerance: float = 1e-6,
    max_iter: int = 500,
) -> LinearHead:
    """Fit the multinomial head by gradient descent with backtracking.

    Stops when the gradient's infinity norm drops below `tolerance` or after
    `max_iter` accepted steps; the loss never increases across accepted
    steps. Raises on single-class input or non-finite loss.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if classes is None:
        classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise MetricUndefinedError("logistic regression needs at least two classes")
    Y = np.array([classes.index(l) for l in labels], dtype=int)
    n, d = X.shape
    C = len(classes)
    W = np.zeros((C, d))
    b = np.zeros(C)
    loss, gw, gb = lr_loss_grad(W, b, X, Y, c_reg)
    step = 1.0
    for _ in range(max_iter):
        if not np.isfinite(loss):
            raise MetricUndefinedError("non-finite loss; check input scaling")
        gnorm = max(np.abs(gw).max(), np.abs(gb).max())
        if gnorm < tolerance:
            break
        g2 = (gw ** 2).sum() + (gb ** 2).sum()
        # Backtracking line search on the Armijo condition.
        t = step
        for _ in range(60):
            W2 = W - t * gw
            b2 = b - t * gb
            new_loss, gw2, gb2 = lr_loss_grad(W2, b2, X, Y, c_reg)
            if new_loss <= loss - 1e-4 * t * g2:
                break
            t *= 0.5
        else:
            break
        W, b, loss, gw, gb = W2, b2, new_loss, gw2, gb2
        step = min(t * 2.0, 1e4)
    return LinearHead(weights=W, bias=b, classes=tuple(classes), c_reg=c_reg)


def lr_scores(head: LinearHead, embedding: np.ndarray) -> np.ndarray:
    """Softmax class scores for one embedding; components sum to 1."""
    z = np.asarray(embedding, dtype=np.float64)
    if z.shape != (head.weights.shape[1],):
        raise DimensionMismatchError(
            f"embedding dim {z.shape} does not match head ({head.weights.shape[1]},)"
        )
    return _softmax(head.weights @ z + head.bias)
