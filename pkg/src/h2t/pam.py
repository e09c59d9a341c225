"""Pattern assignment maps: building the 2D grid of assigned patterns,
its histogram, the pattern co-localization matrix, and one-hot export.

Co-localization entry (i, j) is the average number of pattern-j grid cells
inside the Chebyshev radius-gamma neighborhood of pattern-i cells, counted
without the center cell. By default only centers with at least one j
neighbor enter the average; ``mode="all-centers"`` divides by every
pattern-i cell instead. Background cells (-1) count neither as centers nor
as neighbors, and map borders simply have fewer neighbors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .feature_store import records_to_arrays
from .prototypes import assign_patterns, normalize_rows
from .tensor_file import write_tensors

PAM_MAGIC = b"H2TM"
BACKGROUND = -1


@dataclass(frozen=True)
class PatternAssignmentMap:
    cells: np.ndarray       # height x width int16, -1 background
    k: int

    def __post_init__(self):
        if self.cells.ndim != 2:
            raise DataError("PAM cells must be a 2D grid")
        if self.cells.max(initial=-1) >= self.k:
            raise DataError("PAM cell value exceeds pattern count")
        if self.cells.min(initial=0) < BACKGROUND:
            raise DataError("PAM cell value below background sentinel")

    @property
    def height(self):
        return self.cells.shape[0]

    @property
    def width(self):
        return self.cells.shape[1]


@dataclass(frozen=True)
class ColocalizationMatrix:
    values: np.ndarray      # k x k float64
    gamma: int


def build_pam(records, prototypes) -> PatternAssignmentMap:
    """Place each patch's assigned pattern at its (grid_y, grid_x) cell."""
    if isinstance(records, tuple) and len(records) == 2:
        positions, feats = records
        positions = np.asarray(positions)
        seen = set(map(tuple, positions.tolist()))
        if len(seen) != len(positions):
            raise DataError("duplicate patch positions within slide")
    else:
        positions, feats = records_to_arrays(records)
    if positions.min(initial=0) < 0:
        raise DataError("negative grid position")
    normalized = normalize_rows(feats.astype(np.float64))
    assign, _ = assign_patterns(normalized, prototypes.centroids)
    width = int(positions[:, 0].max()) + 1
    height = int(positions[:, 1].max()) + 1
    cells = np.full((height, width), BACKGROUND, dtype=np.int16)
    cells[positions[:, 1], positions[:, 0]] = assign.astype(np.int16)
    return PatternAssignmentMap(cells, prototypes.k)


def histogram(pam: PatternAssignmentMap):
    """Proportions of each pattern over non-background cells (sums to 1)."""
    fg = pam.cells[pam.cells != BACKGROUND]
    if fg.size == 0:
        raise DataError("all-background map has no histogram")
    counts = np.bincount(fg, minlength=pam.k).astype(np.float64)
    return counts / counts.sum()


def _neighbor_counts(cells, k, gamma):
    """counts[j, y, x] = number of pattern-j cells within Chebyshev radius
    gamma of (y, x), excluding (y, x) itself."""
    height, width = cells.shape
    counts = np.zeros((k, height, width), dtype=np.int32)
    padded = np.full((height + 2 * gamma, width + 2 * gamma), BACKGROUND, dtype=cells.dtype)
    padded[gamma:gamma + height, gamma:gamma + width] = cells
    for dy in range(-gamma, gamma + 1):
        for dx in range(-gamma, gamma + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[gamma + dy:gamma + dy + height, gamma + dx:gamma + dx + width]
            for j in range(k):
                counts[j] += shifted == j
    return counts


def colocalization(pam: PatternAssignmentMap, gamma=1, mode="surrounded") -> ColocalizationMatrix:
    """Average neighbor occurrence of pattern j around pattern i cells."""
    if gamma < 1:
        raise ConfigError("gamma must be >= 1")
    if mode not in ("surrounded", "all-centers"):
        raise ConfigError(f"unknown pcm mode {mode!r}")
    counts = _neighbor_counts(pam.cells, pam.k, gamma)
    values = np.zeros((pam.k, pam.k), dtype=np.float64)
    for i in range(pam.k):
        centers = pam.cells == i
        if not centers.any():
            continue
        for j in range(pam.k):
            cnt = counts[j][centers]
            if mode == "surrounded":
                cnt = cnt[cnt >= 1]
            if cnt.size:
                values[i, j] = cnt.mean()
    return ColocalizationMatrix(values, gamma)


def stacked_colocalization(pam, gammas, mode="surrounded"):
    """Column-stack C(gamma) for several radii into one k x (n*k) matrix."""
    mats = [colocalization(pam, g, mode).values for g in gammas]
    return np.concatenate(mats, axis=1)


def one_hot_pam(pam: PatternAssignmentMap):
    """k x height x width binary tensor; background cells are all-zero."""
    channels = np.arange(pam.k, dtype=pam.cells.dtype)
    return (pam.cells[None, :, :] == channels[:, None, None]).astype(np.uint8)


def export_one_hot(pam, path):
    write_tensors(path, {"one_hot_pam": one_hot_pam(pam).astype(np.float32)})


# ---------------------------------------------------------------------------
# PAM file I/O (.h2tm) and rendering
# ---------------------------------------------------------------------------

def save_pam(pam: PatternAssignmentMap, path):
    with open(path, "wb") as fh:
        fh.write(PAM_MAGIC)
        fh.write(struct.pack("<III", pam.k, pam.width, pam.height))
        fh.write(pam.cells.astype("<i2", copy=False).tobytes())


def load_pam(path) -> PatternAssignmentMap:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"unreadable PAM file {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != PAM_MAGIC:
        raise DataError(f"{path}: bad magic")
    k, width, height = struct.unpack_from("<III", blob, 4)
    expected = width * height * 2
    if len(blob) - 16 != expected:
        raise DataError(f"{path}: cell block has {len(blob) - 16} bytes, expected {expected}")
    cells = np.frombuffer(blob, dtype="<i2", count=width * height, offset=16).reshape(height, width).copy()
    return PatternAssignmentMap(cells, k)


# background is palette index 0 (black); pattern p maps to index p + 1
_PALETTE = [
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (155, 89, 182), (26, 188, 156), (241, 196, 15),
    (52, 73, 94), (231, 76, 60), (46, 204, 113), (52, 152, 219),
    (230, 126, 34), (149, 165, 166), (142, 68, 173), (22, 160, 133),
]


def render_pam(pam: PatternAssignmentMap, path):
    """Write an indexed-palette lossless PNG for visual inspection."""
    from PIL import Image

    if pam.k + 1 > len(_PALETTE):
        raise ConfigError(f"render palette supports up to {len(_PALETTE) - 1} patterns")
    indices = (pam.cells.astype(np.int32) + 1).astype(np.uint8)
    image = Image.fromarray(indices, mode="P")
    flat = [component for rgb in _PALETTE for component in rgb]
    image.putpalette(flat + [0] * (768 - len(flat)))
    image.save(path, format="PNG")
