"""Mining prototypical patterns: L2 normalization plus seeded mini-batch
k-means over a pooled reference cohort.

The update rule is epoch-scoped incremental Lloyd: per-center accumulators
reset at each epoch, and after every batch each center that has received
points this epoch moves to the running mean of those points. With a batch
covering the whole dataset, one epoch is therefore exactly one Lloyd step.
After each epoch the full-data objective (mean squared distance to the
nearest center) is evaluated and the best snapshot so far is kept; the
returned centers are the best snapshot and the logged objective is the
running best, so the log is non-increasing by construction.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .feature_store import read_slide_arrays

PROTO_MAGIC = b"H2TP"
PROTO_VERSION = 1
PREFERRED_K = (8, 16, 32)
DEFAULT_EPOCHS = 25
DEFAULT_BATCH_SIZE = 4096

_CHUNK = 65536


def l2_normalize(feature):
    """Scale a vector to unit L2 norm. Raises on the all-zero vector."""
    vec = np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise NumericError("zero-norm feature cannot be normalized")
    return vec / norm


def normalize_rows(features, out=None):
    """Row-wise L2 normalization; raises if any row has zero norm."""
    features = np.asarray(features)
    if not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float64)
    if out is None:
        out = np.empty_like(features, dtype=features.dtype)
    for start in range(0, len(features), _CHUNK):
        block = features[start:start + _CHUNK]
        norms = np.linalg.norm(block.astype(np.float64, copy=False), axis=1)
        if norms.min(initial=np.inf) < 1e-12:
            bad = start + int(np.argmin(norms))
            raise NumericError(f"zero-norm feature at row {bad}")
        out[start:start + _CHUNK] = block / norms[:, None].astype(block.dtype)
    return out


@dataclass(frozen=True)
class PrototypeSet:
    """K unit-norm centroid vectors plus fitting provenance."""

    centroids: np.ndarray           # k x d float32, rows unit within 1e-5
    k: int
    feature_dim: int
    epochs_run: int
    seed: int
    source_manifest_hash: str = ""
    objective_log: tuple = field(default=(), compare=False)

    def __post_init__(self):
        norms = np.linalg.norm(self.centroids.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-5:
            raise DataError("prototype centroids are not unit-norm within 1e-5")


def _check_k(k):
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k not in PREFERRED_K:
        warnings.warn(f"k={k} is outside the usual {{8, 16, 32}} range", stacklevel=3)


def _sq_dists(block, centroids, centroid_sq):
    """Squared Euclidean distances, block x centers, in float64."""
    block = block.astype(np.float64, copy=False)
    d2 = block @ centroids.T
    d2 *= -2.0
    d2 += np.einsum("ij,ij->i", block, block)[:, None]
    d2 += centroid_sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def kmeans_plus_plus(points, k, rng):
    """Seeded k-means++ initialization over the full dataset.

    Raises DataError when fewer than k distinct points exist (all residual
    squared distances hit zero before k centers are chosen).
    """
    n, dim = points.shape
    centers = np.empty((k, dim), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = points[start:start + _CHUNK].astype(np.float64, copy=False)
        diff = block - centers[0]
        d2[start:start + _CHUNK] = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, k):
        total = d2.sum()
        if total <= 1e-24:
            raise DataError(f"insufficient distinct points for k={k}")
        pick = int(rng.choice(n, p=d2 / total))
        centers[i] = points[pick]
        for start in range(0, n, _CHUNK):
            block = points[start:start + _CHUNK].astype(np.float64, copy=False)
            diff = block - centers[i]
            np.minimum(
                d2[start:start + _CHUNK],
                np.einsum("ij,ij->i", diff, diff),
                out=d2[start:start + _CHUNK],
            )
    return centers


def full_objective(points, centroids):
    """Mean squared distance of every point to its nearest centroid."""
    centroid_sq = np.einsum("ij,ij->i", centroids, centroids)
    total = 0.0
    for start in range(0, len(points), _CHUNK):
        d2 = _sq_dists(points[start:start + _CHUNK], centroids, centroid_sq)
        total += d2.min(axis=1).sum()
    return total / len(points)


def minibatch_kmeans(points, k, epochs, batch_size, rng):
    """Epoch-scoped incremental-Lloyd mini-batch k-means.

    Returns (centroids float64 k x d, per-epoch objective log). The log holds
    the best full-data objective reached up to each epoch and the returned
    centroids realize the final log entry.
    """
    n = len(points)
    if n < k:
        raise DataError(f"insufficient distinct points for k={k} (n={n})")
    centroids = kmeans_plus_plus(points, k, rng)
    best = centroids.copy()
    best_obj = full_objective(points, centroids)
    log = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        sums = np.zeros((k, points.shape[1]), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        last_batch = last_d2 = last_assign = None
        for start in range(0, n, batch_size):
            batch = points[perm[start:start + batch_size]].astype(np.float64, copy=False)
            centroid_sq = np.einsum("ij,ij->i", centroids, centroids)
            d2 = _sq_dists(batch, centroids, centroid_sq)
            assign = d2.argmin(axis=1)
            onehot = assign[:, None] == np.arange(k)[None, :]
            counts += onehot.sum(axis=0)
            sums += onehot.T.astype(np.float64) @ batch
            active = counts > 0
            centroids[active] = sums[active] / counts[active, None]
            last_batch, last_d2, last_assign = batch, d2, assign
        dead = np.flatnonzero(counts == 0)
        if dead.size:
            # reseed each dead center to the farthest-from-assigned point of
            # the final batch, in deterministic order
            d_far = np.sqrt(last_d2[np.arange(len(last_batch)), last_assign])
            order = np.argsort(-d_far, kind="stable")
            for rank, center in enumerate(dead):
                centroids[center] = last_batch[order[rank % len(order)]]
        obj = full_objective(points, centroids)
        if obj < best_obj:
            best_obj = obj
            best = centroids.copy()
        log.append(best_obj)
    return best, log


def fit_features(features, k, *, epochs=DEFAULT_EPOCHS, batch_size=DEFAULT_BATCH_SIZE,
                 seed=0, source_manifest_hash="", prenormalized=False):
    """Fit a PrototypeSet directly from a feature matrix.

    Features are L2-normalized first unless ``prenormalized``; the fitted
    centroids are renormalized to unit norm so that assignment distances
    stay in [0, 2].
    """
    _check_k(k)
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    features = np.asarray(features)
    if features.ndim != 2 or len(features) == 0:
        raise DataError("feature matrix must be non-empty and 2D")
    points = features if prenormalized else normalize_rows(features)
    rng = np.random.default_rng(seed)
    raw, log = minibatch_kmeans(points, k, epochs, batch_size, rng)
    norms = np.linalg.norm(raw, axis=1)
    if norms.min() < 1e-12:
        raise NumericError("degenerate zero-norm centroid after fitting")
    centroids = (raw / norms[:, None]).astype(np.float32)
    return PrototypeSet(
        centroids=centroids,
        k=k,
        feature_dim=features.shape[1],
        epochs_run=epochs,
        seed=seed,
        source_manifest_hash=source_manifest_hash,
        objective_log=tuple(log),
    )


def fit_prototypes(manifest, k, *, epochs=DEFAULT_EPOCHS, batch_size=DEFAULT_BATCH_SIZE, seed=0):
    """Pool every patch of every slide in the manifest and mine k patterns.

    All patches enter with equal weight; normalization happens here, not at
    read time. Deterministic for fixed (manifest contents, parameters, seed).
    """
    blocks = []
    dim = None
    for entry in manifest.slides:
        _, feats = read_slide_arrays(manifest.slide_path(entry))
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise DataError(
                f"slide {entry.slide_id!r} has d={feats.shape[1]}, cohort uses d={dim}"
            )
        blocks.append(feats)
    if not blocks:
        raise DataError("manifest lists no slides")
    pooled = np.concatenate(blocks, axis=0)
    del blocks
    normalize_rows(pooled, out=pooled)
    return fit_features(
        pooled, k, epochs=epochs, batch_size=batch_size, seed=seed,
        source_manifest_hash=manifest.content_hash(), prenormalized=True,
    )


def assign_patterns(features, centroids):
    """Vectorized nearest-centroid assignment.

    Returns (indices, distances); ties resolve to the lowest index via argmin.
    """
    features = np.asarray(features)
    centroids = np.asarray(centroids, dtype=np.float64)
    if features.shape[1] != centroids.shape[1]:
        raise DataError(
            f"dimension mismatch: features d={features.shape[1]}, centroids d={centroids.shape[1]}"
        )
    centroid_sq = np.einsum("ij,ij->i", centroids, centroids)
    idx = np.empty(len(features), dtype=np.int64)
    dist = np.empty(len(features), dtype=np.float64)
    for start in range(0, len(features), _CHUNK):
        d2 = _sq_dists(features[start:start + _CHUNK], centroids, centroid_sq)
        block_idx = d2.argmin(axis=1)
        idx[start:start + _CHUNK] = block_idx
        dist[start:start + _CHUNK] = np.sqrt(d2[np.arange(len(d2)), block_idx])
    return idx, dist


def assign_pattern(feature, prototypes: PrototypeSet):
    """Nearest pattern for one unit-norm feature: (index, Euclidean distance)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (prototypes.feature_dim,):
        raise DataError(
            f"dimension mismatch: feature has shape {feature.shape}, expected ({prototypes.feature_dim},)"
        )
    idx, dist = assign_patterns(feature[None, :], prototypes.centroids)
    return int(idx[0]), float(dist[0])


# ---------------------------------------------------------------------------
# Prototype file I/O (.h2tp)
# ---------------------------------------------------------------------------

def save_prototypes(prototypes: PrototypeSet, path):
    header = struct.pack(
        "<4sIIIIQ",
        PROTO_MAGIC, PROTO_VERSION, prototypes.k, prototypes.feature_dim,
        prototypes.epochs_run, prototypes.seed,
    )
    digest = prototypes.source_manifest_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<H", len(digest)))
        fh.write(digest)
        fh.write(prototypes.centroids.astype("<f4", copy=False).tobytes())


def load_prototypes(path) -> PrototypeSet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"unreadable prototype file {path}: {exc}") from exc
    head = struct.Struct("<4sIIIIQ")
    if len(blob) < head.size + 2:
        raise DataError(f"{path}: truncated prototype header")
    magic, version, k, dim, epochs, seed = head.unpack_from(blob)
    if magic != PROTO_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != PROTO_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (hash_len,) = struct.unpack_from("<H", blob, head.size)
    offset = head.size + 2
    digest = blob[offset:offset + hash_len].decode("utf-8")
    offset += hash_len
    expected = k * dim * 4
    if len(blob) - offset != expected:
        raise DataError(f"{path}: centroid block has {len(blob) - offset} bytes, expected {expected}")
    centroids = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim).copy()
    return PrototypeSet(
        centroids=centroids, k=k, feature_dim=dim, epochs_run=epochs,
        seed=seed, source_manifest_hash=digest,
    )
