"""Dense feature maps, patch grids, pyramids, and the FMAP1 container.

A feature map is a plain ``numpy`` array of shape (height, width, channels)
in row-major order; images are feature maps with 3 channels. ``PatchGrid``
describes the set of square windows a map is sampled into, and
``FeaturePyramid`` holds the four dyadic scales the rest of the pipeline
works on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError, InputError

PYRAMID_LEVELS = 4

_FMAP_MAGIC = b"FMAP1"


def require_feature_map(arr: np.ndarray, name: str = "map") -> np.ndarray:
    """Validate that ``arr`` is a finite rank-3 (H, W, C) array."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise GeometryError(f"{name} must have shape (height, width, channels), got {arr.shape}")
    if 0 in arr.shape:
        raise GeometryError(f"{name} has an empty dimension: {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains NaN or Inf values")
    return arr


@dataclass(frozen=True)
class PatchGrid:
    """Square windows of size ``patch`` sampled with ``stride`` over a map.

    Index ``i`` runs along the width, ``j`` along the height; patch (i, j)
    has its top-left corner at row j*stride, column i*stride. Only windows
    that lie fully inside the source are part of the grid.
    """

    height: int
    width: int
    patch: int
    stride: int

    @property
    def i_max(self) -> int:
        return (self.width - self.patch) // self.stride

    @property
    def j_max(self) -> int:
        return (self.height - self.patch) // self.stride

    @property
    def count(self) -> int:
        return (self.i_max + 1) * (self.j_max + 1)

    def origin(self, i: int, j: int) -> tuple[int, int]:
        """(row, col) of the top-left corner of patch (i, j)."""
        self._check_index(i, j)
        return j * self.stride, i * self.stride

    def _check_index(self, i: int, j: int) -> None:
        if not (0 <= i <= self.i_max and 0 <= j <= self.j_max):
            raise IndexError(
                f"patch index ({i}, {j}) outside grid bounds i<={self.i_max}, j<={self.j_max}"
            )


def make_patch_grid(height: int, width: int, patch: int, stride: int) -> PatchGrid:
    """Build a PatchGrid, rejecting geometry where no full window fits."""
    if patch < 1 or stride < 1:
        raise ConfigError(f"patch size and stride must be >= 1, got B={patch}, s={stride}")
    if patch > height or patch > width:
        raise GeometryError(f"patch size {patch} exceeds source dims ({height}, {width})")
    return PatchGrid(height=height, width=width, patch=patch, stride=stride)


def extract_patch(fmap: np.ndarray, grid: PatchGrid, i: int, j: int) -> np.ndarray:
    """Read-only view of patch (i, j): a (B, B, C) window of ``fmap``."""
    if fmap.shape[:2] != (grid.height, grid.width):
        raise GeometryError(f"map dims {fmap.shape[:2]} do not match grid ({grid.height}, {grid.width})")
    row, col = grid.origin(i, j)
    view = fmap[row : row + grid.patch, col : col + grid.patch]
    view.setflags(write=False)
    return view


def write_patch(fmap: np.ndarray, grid: PatchGrid, i: int, j: int, patch: np.ndarray) -> None:
    """Replace the window (i, j) of a non-overlapping (stride == B) grid."""
    if grid.stride != grid.patch:
        raise ConfigError(
            f"write_patch requires a non-overlapping grid (stride == patch), got stride={grid.stride}, patch={grid.patch}"
        )
    if fmap.shape[:2] != (grid.height, grid.width):
        raise GeometryError(f"map dims {fmap.shape[:2]} do not match grid ({grid.height}, {grid.width})")
    patch = np.asarray(patch)
    expected = (grid.patch, grid.patch, fmap.shape[2])
    if patch.shape != expected:
        raise GeometryError(f"patch shape {patch.shape} does not match window {expected}")
    row, col = grid.origin(i, j)
    fmap[row : row + grid.patch, col : col + grid.patch] = patch


class FeaturePyramid:
    """Four feature maps at dyadic scales: level h has dims (H/2^h, W/2^h, C).

    ``base_height``/``base_width`` are the dims of the full-resolution image
    the pyramid was derived from (level 1 is already half that size).
    """

    def __init__(self, levels):
        levels = [require_feature_map(lv, f"pyramid level {h + 1}") for h, lv in enumerate(levels)]
        if len(levels) != PYRAMID_LEVELS:
            raise GeometryError(f"pyramid needs exactly {PYRAMID_LEVELS} levels, got {len(levels)}")
        h1, w1, c = levels[0].shape
        self.base_height = h1 * 2
        self.base_width = w1 * 2
        self.channels = c
        for h, lv in enumerate(levels, start=1):
            expected = (self.base_height // 2**h, self.base_width // 2**h, c)
            if lv.shape != expected:
                raise GeometryError(f"pyramid level {h} has shape {lv.shape}, expected {expected}")
            if (self.base_height % 2**h) or (self.base_width % 2**h):
                raise GeometryError(
                    f"base dims ({self.base_height}, {self.base_width}) not divisible by {2**h}"
                )
        self._levels = tuple(levels)

    def level(self, h: int) -> np.ndarray:
        """Feature map at scale h in 1..4 (1 = finest)."""
        if not 1 <= h <= PYRAMID_LEVELS:
            raise IndexError(f"pyramid level {h} outside 1..{PYRAMID_LEVELS}")
        return self._levels[h - 1]

    def __iter__(self):
        return iter(self._levels)

    def __eq__(self, other):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self, other))


# ---------------------------------------------------------------------------
# FMAP1 binary container
# ---------------------------------------------------------------------------

def write_fmap(path, arr: np.ndarray) -> None:
    """Write an (H, W, C) array as an FMAP1 file.

    Layout: magic b"FMAP1", three little-endian uint32 dims
    (height, width, channels), then H*W*C little-endian float32 values in
    row-major order.
    """
    arr = require_feature_map(arr, "fmap payload")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_FMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    """Read an FMAP1 file back into a float32 (H, W, C) array."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_FMAP_MAGIC))
        if magic != _FMAP_MAGIC:
            raise InputError(f"{path}: not an FMAP1 file (bad magic {magic!r})")
        header = fh.read(12)
        if len(header) != 12:
            raise InputError(f"{path}: truncated FMAP1 header")
        h, w, c = struct.unpack("<III", header)
        if h == 0 or w == 0 or c == 0:
            raise InputError(f"{path}: zero dimension in header ({h}, {w}, {c})")
        payload = fh.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise InputError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return np.ascontiguousarray(arr, dtype=np.float32)


# ---------------------------------------------------------------------------
# Pyramid bundles (directory of FMAP1 files + manifest)
# ---------------------------------------------------------------------------

def save_pyramid(directory, pyramid: FeaturePyramid) -> None:
    """Write a pyramid as level1..level4 FMAP1 files plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for h in range(1, PYRAMID_LEVELS + 1):
        name = f"level{h}.fmap"
        write_fmap(directory / name, pyramid.level(h))
        names.append(name)
    manifest = {
        "format": "pyramid-v1",
        "base_height": pyramid.base_height,
        "base_width": pyramid.base_width,
        "channels": pyramid.channels,
        "levels": names,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_pyramid(directory) -> FeaturePyramid:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "pyramid-v1":
        raise InputError(f"{directory}: not a pyramid bundle (format={manifest.get('format')!r})")
    levels = [read_fmap(directory / name) for name in manifest["levels"]]
    return FeaturePyramid(levels)
