"""Grid I/O, rasterization, vegetation/land-cover encodings, unit extraction.

Grids are float64 rasters with a pixel-aligned geometry and NaN as the one
nodata convention.  The on-disk format is a small purpose-built binary:

    magic "GRD1" | u32 rows | u32 cols | u32 channels
    | f64 origin_x | f64 origin_y | f64 resolution
    | payload: rows*cols*channels little-endian float64,
      channel-major then row-major

Units for model fitting are extracted one per non-NaN outcome pixel whose
neighborhood patch lies fully inside the grid; patches keep raw treatment
values with the center zeroed.  Single-row grids are treated as line data:
patches become 1-d windows, zero-padded at the ends instead of excluded.
"""

from __future__ import annotations

import configparser
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, FormatError
from .model import SpatialDataset

_MAGIC = b"GRD1"
_HEADER = struct.Struct("<4sIIIddd")
_MAX_CELLS = 4096 * 4096 * 16

NLCD_CODES = (11, 21, 22, 23, 24, 31, 41, 42, 43, 52, 71, 81, 82, 90, 95)


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    origin_x: float = 0.0
    origin_y: float = 0.0
    resolution: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"grid must be nonempty, got {self.rows}x{self.cols}")
        if self.resolution <= 0:
            raise ContractError(f"resolution must be positive, got {self.resolution}")


@dataclass
class Grid:
    data: np.ndarray
    origin_x: float = 0.0
    origin_y: float = 0.0
    resolution: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise DimensionError(f"grid data must be (channels, rows, cols), "
                                 f"got shape {self.data.shape}")
        if self.resolution <= 0:
            raise ContractError(f"resolution must be positive, got {self.resolution}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.rows, self.cols, self.origin_x, self.origin_y,
                            self.resolution)


@dataclass
class PointSet:
    x: np.ndarray
    y: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.value = np.asarray(self.value, dtype=np.float64).ravel()
        if not (self.x.size == self.y.size == self.value.size):
            raise DimensionError("x, y, value must have equal length")
        for name, arr in (("x", self.x), ("y", self.y), ("value", self.value)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite entries in point {name}")


def save_grid(grid: Grid, path: str) -> None:
    header = _HEADER.pack(_MAGIC, grid.rows, grid.cols, grid.channels,
                          grid.origin_x, grid.origin_y, grid.resolution)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.data, dtype="<f8").tobytes())


def load_grid(path: str) -> Grid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: file is {len(blob)} bytes, "
                          f"need {_HEADER.size}")
    magic, rows, cols, channels, ox, oy, res = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {_MAGIC!r}")
    cells = rows * cols * channels
    if cells == 0 or cells > _MAX_CELLS:
        raise FormatError(f"dimension overflow at offset 4: "
                          f"{rows}x{cols}x{channels} cells")
    expected = cells * 8
    payload = len(blob) - _HEADER.size
    if payload != expected:
        raise FormatError(f"payload at offset {_HEADER.size}: expected "
                          f"{expected} bytes, found {payload}")
    data = np.frombuffer(blob, dtype="<f8", count=cells,
                         offset=_HEADER.size).reshape(channels, rows, cols)
    return Grid(data=data.copy(), origin_x=ox, origin_y=oy, resolution=res)


def _check_same_geometry(a: Grid, b: Grid, what: str) -> None:
    if (a.rows, a.cols) != (b.rows, b.cols) or a.origin_x != b.origin_x \
            or a.origin_y != b.origin_y or a.resolution != b.resolution:
        raise DimensionError(f"{what}: geometries differ "
                             f"({a.geometry} vs {b.geometry})")


def ndvi(nir: Grid, red: Grid) -> Grid:
    """(NIR - R) / (NIR + R) per pixel; zero-sum pixels become NaN."""
    if nir.channels != 1 or red.channels != 1:
        raise DimensionError("ndvi needs single-channel bands")
    _check_same_geometry(nir, red, "ndvi bands")
    num = nir.data - red.data
    den = nir.data + red.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den == 0.0, np.nan, num / den)
    return Grid(data=out, origin_x=nir.origin_x, origin_y=nir.origin_y,
                resolution=nir.resolution)


def rasterize_points(points: PointSet, geometry: GridGeometry) -> Grid:
    """Pixel mean of the points inside each cell; empty cells are NaN.

    A point lands in pixel floor((coord - origin) / resolution); boundary
    points therefore belong to the higher-index pixel.
    """
    col = np.floor((points.x - geometry.origin_x) / geometry.resolution).astype(np.int64)
    row = np.floor((points.y - geometry.origin_y) / geometry.resolution).astype(np.int64)
    inside = (col >= 0) & (col < geometry.cols) & (row >= 0) & (row < geometry.rows)
    dropped = int(np.count_nonzero(~inside))
    if dropped:
        warnings.warn(f"{dropped} points outside the target extent were dropped")
    flat = row[inside] * geometry.cols + col[inside]
    sums = np.bincount(flat, weights=points.value[inside],
                       minlength=geometry.rows * geometry.cols)
    counts = np.bincount(flat, minlength=geometry.rows * geometry.cols)
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Grid(data=mean.reshape(geometry.rows, geometry.cols),
                origin_x=geometry.origin_x, origin_y=geometry.origin_y,
                resolution=geometry.resolution)


def onehot_landcover(class_grid: Grid) -> Grid:
    """One channel per land-cover code, fixed catalog order.

    Unknown finite codes produce an all-zero vector and one warning with
    the count; NaN pixels are nodata and stay all-zero silently.
    """
    if class_grid.channels != 1:
        raise DimensionError("land-cover grid must be single-channel")
    codes = class_grid.data[0]
    out = np.zeros((len(NLCD_CODES), class_grid.rows, class_grid.cols))
    matched = np.zeros(codes.shape, dtype=bool)
    for idx, code in enumerate(NLCD_CODES):
        mask = codes == float(code)
        out[idx][mask] = 1.0
        matched |= mask
    unknown = int(np.count_nonzero(np.isfinite(codes) & ~matched))
    if unknown:
        warnings.warn(f"{unknown} pixels carry unknown land-cover codes")
    return Grid(data=out, origin_x=class_grid.origin_x,
                origin_y=class_grid.origin_y, resolution=class_grid.resolution)


@dataclass
class Manifest:
    treatments: tuple
    confounder: str
    outcome: str
    d_s: int
    split_seed: int = 0
    split_ratios: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if not self.treatments:
            raise ConfigError("manifest needs at least one treatment grid")
        if self.d_s < 1 or self.d_s % 2 == 0:
            raise ConfigError(f"d_s must be odd and positive, got {self.d_s}")
        ratios = tuple(float(r) for r in self.split_ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios) \
                or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be 3 positive values summing "
                              f"to 1, got {ratios}")
        self.split_ratios = ratios


def save_manifest(manifest: Manifest, path: str) -> None:
    cp = configparser.ConfigParser()
    cp.add_section("manifest")
    for i, p in enumerate(manifest.treatments, start=1):
        cp.set("manifest", f"treatment.{i}", p)
    cp.set("manifest", "confounder", manifest.confounder)
    cp.set("manifest", "outcome", manifest.outcome)
    cp.set("manifest", "d_s", str(manifest.d_s))
    cp.set("manifest", "split.seed", str(manifest.split_seed))
    cp.set("manifest", "split.ratios",
           ",".join(format(r, "g") for r in manifest.split_ratios))
    with open(path, "w") as fh:
        cp.write(fh)


def load_manifest(path: str) -> Manifest:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FormatError(f"cannot read manifest {path}")
    if not cp.has_section("manifest"):
        raise FormatError("manifest file lacks a [manifest] section")
    keys = dict(cp.items("manifest"))
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    t_keys = sorted((k for k in keys if k.startswith("treatment.")),
                    key=lambda k: int(k.split(".", 1)[1]))
    known = set(t_keys) | {"confounder", "outcome", "d_s", "split.seed",
                           "split.ratios"}
    unknown = set(keys) - known
    if unknown:
        raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
    for req in ("confounder", "outcome", "d_s"):
        if req not in keys:
            raise ConfigError(f"manifest missing required key '{req}'")
    if not t_keys:
        raise ConfigError("manifest missing treatment.<i> keys")
    ratios = tuple(float(r) for r in keys.get("split.ratios", "0.6,0.2,0.2").split(","))
    return Manifest(treatments=tuple(resolve(keys[k]) for k in t_keys),
                    confounder=resolve(keys["confounder"]),
                    outcome=resolve(keys["outcome"]), d_s=int(keys["d_s"]),
                    split_seed=int(keys.get("split.seed", "0")),
                    split_ratios=ratios)


def extract_units(manifest: Manifest) -> SpatialDataset:
    """One unit per interior non-NaN outcome pixel with a clean patch.

    Units whose patch would cross the boundary or contains NaN treatments
    are excluded; on single-row grids the patch is a 1-d window zero-padded
    at the ends instead and coordinates carry only the x column.
    """
    t_grids = [load_grid(p) for p in manifest.treatments]
    conf = load_grid(manifest.confounder)
    out = load_grid(manifest.outcome)
    if out.channels != 1:
        raise DimensionError("outcome grid must be single-channel")
    for g in t_grids:
        if g.channels != 1:
            raise DimensionError("treatment grids must be single-channel")
        _check_same_geometry(g, out, "treatment vs outcome")
    _check_same_geometry(conf, out, "confounder vs outcome")

    rows, cols = out.rows, out.cols
    half = manifest.d_s // 2
    m = len(t_grids)
    line_mode = rows == 1

    if line_mode:
        padded = [np.concatenate([np.zeros(half), g.data[0, 0], np.zeros(half)])
                  for g in t_grids]
        candidates = [(0, c) for c in range(cols)]
    else:
        if rows < manifest.d_s or cols < manifest.d_s:
            raise DataError(f"{rows}x{cols} grid too small for d_s={manifest.d_s}")
        candidates = [(r, c) for r in range(half, rows - half)
                      for c in range(half, cols - half)]

    units = []
    for r, c in candidates:
        if not np.isfinite(out.data[0, r, c]):
            continue
        if not np.all(np.isfinite(conf.data[:, r, c])):
            continue
        patches = []
        ok = True
        for j in range(m):
            if line_mode:
                window = padded[j][c:c + manifest.d_s].copy()
            else:
                window = t_grids[j].data[0, r - half:r + half + 1,
                                         c - half:c + half + 1].copy()
            if not np.all(np.isfinite(window)):
                ok = False
                break
            patches.append(window)
        if not ok:
            continue
        units.append((r, c, patches))
    if not units:
        raise DataError("no eligible units: every outcome pixel is missing, "
                        "boundary-adjacent, or has NaN in its patch")

    n = len(units)
    patch_shape = (manifest.d_s,) if line_mode else (manifest.d_s, manifest.d_s)
    # single-row grids get 1-d coords: a constant y column would be collinear
    # with the propensity-design intercept
    coords = np.zeros((n, 1) if line_mode else (n, 2))
    treatments = np.zeros((n, m))
    patch_arr = np.zeros((n, m) + patch_shape)
    confounders = np.zeros((n, conf.channels))
    outcomes = np.zeros(n)
    center = (half,) * len(patch_shape)
    for i, (r, c, patches) in enumerate(units):
        coords[i, 0] = out.origin_x + (c + 0.5) * out.resolution
        if not line_mode:
            coords[i, 1] = out.origin_y + (r + 0.5) * out.resolution
        for j in range(m):
            treatments[i, j] = t_grids[j].data[0, r, c]
            patches[j][center] = 0.0
            patch_arr[i, j] = patches[j]
        confounders[i] = conf.data[:, r, c]
        outcomes[i] = out.data[0, r, c]
    return SpatialDataset(coords=coords, treatments=treatments,
                          patches=patch_arr, confounders=confounders,
                          outcomes=outcomes, d_s=manifest.d_s)


def split_dataset(dataset: SpatialDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded partition into train/val/test; rounding remainder goes to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) \
            or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must be 3 positive values summing to 1, "
                            f"got {ratios}")
    n = dataset.n_units
    if n < 3:
        raise DataError(f"need at least 3 units to split, have {n}")
    n_val = int(np.floor(ratios[1] * n + 0.5))
    n_test = int(np.floor(ratios[2] * n + 0.5))
    n_train = n - n_val - n_test
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise DataError(f"split sizes ({n_train}, {n_val}, {n_test}) leave an "
                        f"empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    train = dataset.subset(np.sort(perm[:n_train]))
    val = dataset.subset(np.sort(perm[n_train:n_train + n_val]))
    test = dataset.subset(np.sort(perm[n_train + n_val:]))
    return train, val, test
