"""Persistence layer: slide feature files, cohort manifests, synthetic cohorts.

Slide feature file layout (extension ``.h2t``, everything little-endian):

    bytes 0..3    magic  b"H2T1"
    bytes 4..7    format version, uint32 (currently 1)
    bytes 8..11   num_patches, uint32
    bytes 12..15  feature_dim, uint32
    then          num_patches x 2 int32   patch grid positions (x, y)
    then          num_patches x dim float32, row-major

Positions are in stride units (grid cells), not pixels. The file length is
exact: header + positions + features, nothing else.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

SLIDE_MAGIC = b"H2T1"
SLIDE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class PatchRecord:
    """One patch: its grid position within the slide plus its feature vector."""

    grid_x: int
    grid_y: int
    feature: np.ndarray


def records_to_arrays(records):
    """Split records into (positions int32 n x 2, features float32 n x d)."""
    if not records:
        raise DataError("empty slide: at least one patch record required")
    dim = len(records[0].feature)
    positions = np.empty((len(records), 2), dtype=np.int32)
    features = np.empty((len(records), dim), dtype=np.float32)
    for i, rec in enumerate(records):
        if len(rec.feature) != dim:
            raise DataError(
                f"inconsistent feature dimensions: patch {i} has d={len(rec.feature)}, expected {dim}"
            )
        positions[i, 0] = rec.grid_x
        positions[i, 1] = rec.grid_y
        features[i] = rec.feature
    _validate_positions(positions)
    return positions, features


def arrays_to_records(positions, features):
    return [
        PatchRecord(int(x), int(y), feat)
        for (x, y), feat in zip(positions, np.asarray(features))
    ]


def _validate_positions(positions):
    if positions.min(initial=0) < 0:
        raise DataError("negative grid position")
    seen = set(map(tuple, positions.tolist()))
    if len(seen) != len(positions):
        raise DataError("duplicate patch positions within slide")


def write_slide_features(records, path):
    """Write patch records to ``path`` in the .h2t layout.

    Raises DataError for empty input, inconsistent dimensions, or duplicate
    positions. Writes to a single path are exclusive to one writer.
    """
    positions, features = records_to_arrays(records)
    write_slide_arrays(positions, features, path)


def write_slide_arrays(positions, features, path):
    """Array fast path used by the synthetic generator and batch tooling."""
    positions = np.ascontiguousarray(positions, dtype=np.int32)
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2 or positions.shape != (features.shape[0], 2):
        raise DataError("positions must be n x 2 and features n x d")
    if len(features) == 0:
        raise DataError("empty slide: at least one patch record required")
    _validate_positions(positions)
    header = _HEADER.pack(SLIDE_MAGIC, SLIDE_VERSION, len(features), features.shape[1])
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(positions.astype("<i4", copy=False).tobytes())
            fh.write(features.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise DataError(f"unwritable path {path}: {exc}") from exc


def read_slide_arrays(path):
    """Read a .h2t file as (positions int32 n x 2, features float32 n x d)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"unreadable path {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, n, dim = _HEADER.unpack_from(blob)
    if magic != SLIDE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SLIDE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if n == 0:
        raise DataError(f"{path}: empty slide (num_patches=0)")
    if dim == 0:
        raise DataError(f"{path}: zero feature dimension")
    expected = n * 2 * 4 + n * dim * 4
    body = blob[_HEADER.size:]
    if len(body) < expected:
        raise DataError(
            f"{path}: truncated features section, expected {expected} bytes after header, found {len(body)}"
        )
    if len(body) > expected:
        raise DataError(f"{path}: {len(body) - expected} trailing bytes")
    pos_bytes = n * 2 * 4
    positions = np.frombuffer(body[:pos_bytes], dtype="<i4").reshape(n, 2)
    features = np.frombuffer(body[pos_bytes:], dtype="<f4").reshape(n, dim)
    _validate_positions(positions)
    return positions.astype(np.int32), features.astype(np.float32)


def read_slide_features(path):
    """Read a .h2t file as PatchRecords, in on-disk order."""
    positions, features = read_slide_arrays(path)
    return arrays_to_records(positions, features)


def file_sha256(path, chunk=1 << 20):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Cohort manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    path: str
    label: str
    cohort: str
    patient_id: str


@dataclass
class CohortManifest:
    """Slide inventory: labels, source cohort, and feature file paths.

    Stored as a single JSON document; ``path`` entries are interpreted
    relative to the manifest's own directory unless absolute.
    """

    slides: list[SlideEntry]
    label_set: list[str]
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        for entry in self.slides:
            if entry.slide_id in seen:
                raise DataError(f"duplicate slide_id {entry.slide_id!r} in manifest")
            seen.add(entry.slide_id)
            if entry.label not in self.label_set:
                raise DataError(
                    f"slide {entry.slide_id!r} has label {entry.label!r} not in label_set"
                )

    def slide_path(self, entry: SlideEntry) -> str:
        if os.path.isabs(entry.path):
            return entry.path
        return os.path.join(self.base_dir, entry.path)

    def subset(self, predicate) -> "CohortManifest":
        kept = [e for e in self.slides if predicate(e)]
        return CohortManifest(kept, list(self.label_set), self.base_dir)

    def to_json(self) -> str:
        doc = {
            "label_set": list(self.label_set),
            "slides": [vars(e) for e in self.slides],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def save_manifest(manifest: CohortManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())


def load_manifest(path) -> CohortManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    try:
        slides = [SlideEntry(**entry) for entry in doc["slides"]]
        label_set = list(doc["label_set"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest {path} missing required fields: {exc}") from exc
    return CohortManifest(slides, label_set, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Synthetic cohorts (seeded, for desk-scale testing)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    """A slide class: its name and mixture proportions over archetypes."""

    name: str
    mixture: tuple


@dataclass
class SyntheticSpec:
    """Deterministic generator inputs.

    Each patch feature is drawn as an archetype center plus isotropic
    Gaussian noise; patches fill the slide grid row-major (contiguous).
    ``layout`` controls where archetypes land: "random" scatters them,
    "banded" places each archetype in one contiguous run of grid cells
    (proportions realized by largest-remainder apportionment).
    """

    archetypes: np.ndarray          # G x d centers
    classes: list[ClassSpec]
    slides_per_class: dict = field(default_factory=lambda: {"discovery": 10})
    patches_per_slide: int = 64
    noise_sigma: float = 0.1
    grid_width: int = 8
    grid_height: int = 8
    layout: str = "random"

    def validate(self):
        arch = np.asarray(self.archetypes, dtype=np.float64)
        if arch.ndim != 2 or arch.shape[0] < 2:
            raise ConfigError("at least 2 archetype centers required")
        g = arch.shape[0]
        if not self.classes:
            raise ConfigError("at least one class required")
        for cls in self.classes:
            mix = np.asarray(cls.mixture, dtype=np.float64)
            if mix.shape != (g,):
                raise ConfigError(
                    f"class {cls.name!r}: mixture length {mix.shape} does not match {g} archetypes"
                )
            if mix.min() < 0 or abs(mix.sum() - 1.0) > 1e-6:
                raise ConfigError(
                    f"class {cls.name!r}: mixture proportions must be >= 0 and sum to 1 within 1e-6"
                )
        if self.patches_per_slide < 1:
            raise ConfigError("patches_per_slide must be >= 1")
        if self.patches_per_slide > self.grid_width * self.grid_height:
            raise ConfigError("patches_per_slide exceeds grid capacity")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.layout not in ("random", "banded"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        return arch


def _apportion(mixture, total):
    """Largest-remainder integer apportionment of ``total`` by proportions."""
    raw = np.asarray(mixture, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate_synthetic_cohort(spec: SyntheticSpec, seed: int, out_dir) -> CohortManifest:
    """Generate slide files plus a manifest under ``out_dir``.

    Pure function of (spec, seed): rerunning produces byte-identical files.
    Slides are laid out per cohort (keys of ``slides_per_class``), per class,
    in declared order; slide ids are ``{cohort}-{class}-{index:04d}``.
    """
    arch = spec.validate()
    g, dim = arch.shape
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)

    n_p = spec.patches_per_slide
    cells = np.arange(spec.grid_width * spec.grid_height)[:n_p]
    positions = np.stack(
        [cells % spec.grid_width, cells // spec.grid_width], axis=1
    ).astype(np.int32)

    entries = []
    for cohort, per_class in spec.slides_per_class.items():
        for cls in spec.classes:
            mixture = np.asarray(cls.mixture, dtype=np.float64)
            mixture = mixture / mixture.sum()  # rng.choice wants an exact sum
            for index in range(per_class):
                if spec.layout == "banded":
                    counts = _apportion(mixture, n_p)
                    ids = np.repeat(np.arange(g), counts)
                else:
                    ids = rng.choice(g, size=n_p, p=mixture)
                feats = arch[ids]
                if spec.noise_sigma > 0:
                    feats = feats + spec.noise_sigma * rng.standard_normal((n_p, dim))
                slide_id = f"{cohort}-{cls.name}-{index:04d}"
                fname = slide_id + ".h2t"
                write_slide_arrays(positions, feats.astype(np.float32), os.path.join(out_dir, fname))
                entries.append(SlideEntry(slide_id, fname, cls.name, cohort, slide_id))

    label_set = [cls.name for cls in spec.classes]
    manifest = CohortManifest(entries, label_set, base_dir=str(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def random_unit_archetypes(g, dim, seed):
    """G random unit vectors, rejection-free (Gaussian direction sampling)."""
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((g, dim))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if norms.min() < 1e-12:
        warnings.warn("degenerate archetype draw, resampling")
        return random_unit_archetypes(g, dim, seed + 1)
    return vecs / norms


def paired_unit_archetypes(pairs, dim, angle_rad, seed):
    """2*pairs unit archetypes arranged as close pairs separated by ``angle_rad``.

    Each pair shares a base direction; the second member is rotated by the
    given angle inside the plane spanned with an orthogonal helper direction.
    Useful for building cohorts where pattern assignment is deliberately
    confusable within a pair.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((2 * pairs, dim))
    for p in range(pairs):
        base = rng.standard_normal(dim)
        base /= np.linalg.norm(base)
        helper = rng.standard_normal(dim)
        helper -= helper @ base * base
        helper /= np.linalg.norm(helper)
        out[2 * p] = base
        out[2 * p + 1] = np.cos(angle_rad) * base + np.sin(angle_rad) * helper
    return out
