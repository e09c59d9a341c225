"""Projecting one slide against a prototype set: weighted average pooling
under the five attribution rules (plain mean, inverse-distance weights,
distance-threshold filter, top-closest filter, top-furthest filter).

Every variant yields a fixed k x d matrix; pattern rows with no contributing
patches are zero. Filters that keep everything reproduce the plain mean
bit-exactly because selected patches are always averaged in input order.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .feature_store import read_slide_arrays, records_to_arrays
from .prototypes import PrototypeSet, assign_patterns, normalize_rows

REPR_MAGIC = b"H2TR"

# wire tags; 0..4 are pooling variants, 5..7 carry pattern-map features
VARIANT_TAGS = {"h": 0, "h-w": 1, "h-t": 2, "h-k": 3, "h-fk": 4,
                "hist": 5, "pcm": 6, "hist+pcm": 7}
_TAG_NAMES = {tag: name for name, tag in VARIANT_TAGS.items()}
POOLING_VARIANTS = ("h", "h-w", "h-t", "h-k", "h-fk")


@dataclass(frozen=True)
class SlideRepresentation:
    slide_id: str
    variant: str
    param: float | None
    matrix: np.ndarray      # k x d float32

    def flat(self):
        return self.matrix.reshape(-1).astype(np.float64)


def validate_variant(variant, param):
    """Normalize and check a (variant, param) pair; returns the pair."""
    if variant not in VARIANT_TAGS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant in ("h", "hist"):
        if param is not None:
            raise ConfigError(f"variant {variant} takes no parameter")
    elif variant == "h-w":
        if param is not None:
            raise ConfigError("variant h-w takes no parameter")
    elif variant == "h-t":
        if param is None or not 0.0 <= float(param) <= 2.0:
            raise ConfigError("variant h-t needs a threshold in [0, 2]")
        param = float(param)
    elif variant in ("h-k", "h-fk"):
        if param is None or float(param) != int(float(param)) or int(float(param)) < 1:
            raise ConfigError(f"variant {variant} needs a positive integer count")
        param = float(int(float(param)))
    return variant, param


def project(records, prototypes: PrototypeSet, variant, param=None, *,
            t_mode="above") -> SlideRepresentation:
    """Build the k x d slide representation for one pooling variant.

    Patch features are re-normalized here regardless of how they were
    stored. ``t_mode`` switches the h-t filter between the keep-far reading
    ("above", d >= X, the default) and the keep-near alternative ("below").
    """
    if isinstance(records, tuple) and len(records) == 2:
        positions, feats = records
    else:
        positions, feats = records_to_arrays(records)
    return _project_arrays(feats, prototypes, variant, param, t_mode=t_mode)


def _project_arrays(feats, prototypes, variant, param, *, t_mode="above", slide_id=""):
    variant, param = validate_variant(variant, param)
    if variant not in POOLING_VARIANTS:
        raise ConfigError(f"variant {variant} is not a pooling variant")
    if t_mode not in ("above", "below"):
        raise ConfigError(f"unknown t_mode {t_mode!r}")
    if feats.shape[1] != prototypes.feature_dim:
        raise DataError(
            f"dimension mismatch: slide d={feats.shape[1]}, prototypes d={prototypes.feature_dim}"
        )
    normalized = normalize_rows(feats.astype(np.float64))
    assign, dist = assign_patterns(normalized, prototypes.centroids)

    k = prototypes.k
    matrix = np.zeros((k, prototypes.feature_dim), dtype=np.float64)
    for i in range(k):
        members = np.flatnonzero(assign == i)
        if members.size == 0:
            continue
        if variant == "h":
            matrix[i] = normalized[members].mean(axis=0)
        elif variant == "h-w":
            weights = 1.0 - dist[members]
            matrix[i] = (weights[:, None] * normalized[members]).sum(axis=0) / members.size
        elif variant == "h-t":
            if t_mode == "above":
                kept = members[dist[members] >= param]
            else:
                kept = members[dist[members] <= param]
            if kept.size:
                matrix[i] = normalized[kept].mean(axis=0)
        elif variant == "h-k":
            order = np.argsort(dist[members], kind="stable")[: int(param)]
            kept = np.sort(members[order])
            matrix[i] = normalized[kept].mean(axis=0)
        else:  # h-fk
            order = np.argsort(-dist[members], kind="stable")[: int(param)]
            kept = np.sort(members[order])
            matrix[i] = normalized[kept].mean(axis=0)
    return SlideRepresentation(slide_id, variant, param, matrix.astype(np.float32))


@dataclass
class BatchReport:
    written: list
    skipped: list
    failures: list  # (slide_id, message) in manifest order

    def to_json(self):
        return json.dumps(
            {"written": self.written, "skipped": self.skipped,
             "failures": [{"slide_id": s, "error": m} for s, m in self.failures]},
            indent=2,
        ) + "\n"


def representation_path(out_dir, slide_id):
    return os.path.join(out_dir, f"{slide_id}.h2tr")


def project_batch(manifest, prototypes, variant, param=None, out_dir=".", *,
                  resume=False, threads=1, t_mode="above") -> BatchReport:
    """Project every slide of a manifest; per-slide failures are collected
    into the report instead of aborting. With ``resume``, existing outputs
    are skipped. Failure order follows the manifest."""
    variant, param = validate_variant(variant, param)
    os.makedirs(out_dir, exist_ok=True)
    results = {}

    def run_one(entry):
        target = representation_path(out_dir, entry.slide_id)
        if resume and os.path.exists(target):
            return ("skipped", entry.slide_id)
        _, feats = read_slide_arrays(manifest.slide_path(entry))
        rep = _project_arrays(feats, prototypes, variant, param,
                              t_mode=t_mode, slide_id=entry.slide_id)
        save_representation(rep, target)
        return ("written", entry.slide_id)

    def guarded(entry):
        try:
            return run_one(entry)
        except Exception as exc:  # per-slide isolation
            return ("failed", entry.slide_id, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(guarded, manifest.slides))
    else:
        outcomes = [guarded(entry) for entry in manifest.slides]

    report = BatchReport([], [], [])
    for outcome in outcomes:
        if outcome[0] == "written":
            report.written.append(outcome[1])
        elif outcome[0] == "skipped":
            report.skipped.append(outcome[1])
        else:
            report.failures.append((outcome[1], outcome[2]))
    if report.failures:
        with open(os.path.join(out_dir, "project_failures.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    return report


# ---------------------------------------------------------------------------
# Representation file I/O (.h2tr)
# ---------------------------------------------------------------------------

def save_representation(rep: SlideRepresentation, path):
    sid = rep.slide_id.encode("utf-8")
    param = float("nan") if rep.param is None else float(rep.param)
    k, dim = rep.matrix.shape
    with open(path, "wb") as fh:
        fh.write(REPR_MAGIC)
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<BdII", VARIANT_TAGS[rep.variant], param, k, dim))
        fh.write(rep.matrix.astype("<f4", copy=False).tobytes())


def load_representation(path) -> SlideRepresentation:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"unreadable representation file {path}: {exc}") from exc
    if len(blob) < 6 or blob[:4] != REPR_MAGIC:
        raise DataError(f"{path}: bad magic")
    (sid_len,) = struct.unpack_from("<H", blob, 4)
    offset = 6
    slide_id = blob[offset:offset + sid_len].decode("utf-8")
    offset += sid_len
    tail = struct.Struct("<BdII")
    if len(blob) < offset + tail.size:
        raise DataError(f"{path}: truncated representation header")
    tag, param, k, dim = tail.unpack_from(blob, offset)
    offset += tail.size
    if tag not in _TAG_NAMES:
        raise DataError(f"{path}: unknown variant tag {tag}")
    expected = k * dim * 4
    if len(blob) - offset != expected:
        raise DataError(f"{path}: matrix block has {len(blob) - offset} bytes, expected {expected}")
    matrix = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim).copy()
    return SlideRepresentation(
        slide_id, _TAG_NAMES[tag], None if np.isnan(param) else param, matrix
    )


def load_representation_dir(directory):
    """Load every .h2tr file in a directory as {slide_id: SlideRepresentation}."""
    reps = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".h2tr"):
            rep = load_representation(os.path.join(directory, name))
            reps[rep.slide_id] = rep
    return reps
