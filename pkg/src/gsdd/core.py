"""Core domain types, coordinate conventions, and the flat parameter layout.

Positions live in the normalized square [-1, 1]^2; Cholesky factors are
expressed in the same normalized units. Everything downstream (rendering,
gradients, storage) addresses Gaussians through the single contiguous
parameter buffer defined here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PARAMS_PER_GAUSSIAN = 9

# Field offsets inside one Gaussian's 9-scalar block.
F_U, F_V, F_L11, F_L21, F_L22, F_R, F_G, F_B, F_ALPHA = range(PARAMS_PER_GAUSSIAN)

FIELD_NAMES = ("u", "v", "l11", "l21", "l22", "r", "g", "b", "alpha")

# Diagonal Cholesky entries are floored to |l| >= CHOLESKY_FLOOR before a
# covariance is formed, keeping it invertible.
CHOLESKY_FLOOR = 1e-6

# Default half-width of the exclusion band that keeps positions off the border.
DEFAULT_CLIP_EPS = 1e-3

VALID_TILE_SIZES = (8, 16, 32)


@dataclass
class Gaussian2D:
    """One splatting primitive: position, Cholesky factor, color, opacity.

    Colors and opacity are unconstrained reals; negative values are
    meaningful (normalized image targets can be negative).
    """

    u: float
    v: float
    l11: float
    l21: float
    l22: float
    r: float
    g: float
    b: float
    alpha: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.u, self.v, self.l11, self.l21, self.l22,
             self.r, self.g, self.b, self.alpha],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, block: np.ndarray) -> "Gaussian2D":
        block = np.asarray(block, dtype=np.float64).reshape(PARAMS_PER_GAUSSIAN)
        return cls(*(float(x) for x in block))


@dataclass
class DistilledSet:
    """All Gaussians of all synthetic images in one contiguous flat buffer.

    Layout is image-major, Gaussian-major, field-major: the scalar for field
    ``f`` of Gaussian ``k`` of image ``i`` lives at ``(i*M + k)*9 + f``.
    """

    width: int
    height: int
    channels: int
    num_images: int
    gaussians_per_image: int
    params: np.ndarray
    labels: np.ndarray
    num_classes: int = 1

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise ValueError("image geometry must be positive")
        if self.num_images < 0 or self.gaussians_per_image < 0:
            raise ValueError("counts must be nonnegative")
        expected = self.num_images * self.gaussians_per_image * PARAMS_PER_GAUSSIAN
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != expected:
            raise ValueError(
                f"params length {self.params.size} != N_S*M*9 = {expected}")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.num_images:
            raise ValueError(
                f"labels length {self.labels.size} != num_images {self.num_images}")
        if self.num_images and self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    @classmethod
    def zeros(cls, width: int, height: int, channels: int, num_images: int,
              gaussians_per_image: int, labels=None, num_classes: int = 1
              ) -> "DistilledSet":
        if labels is None:
            labels = np.zeros(num_images, dtype=np.int64)
        params = np.zeros(num_images * gaussians_per_image * PARAMS_PER_GAUSSIAN)
        return cls(width, height, channels, num_images, gaussians_per_image,
                   params, labels, num_classes)

    def copy(self) -> "DistilledSet":
        return DistilledSet(self.width, self.height, self.channels,
                            self.num_images, self.gaussians_per_image,
                            self.params.copy(), self.labels.copy(),
                            self.num_classes)

    def subset(self, indices) -> "DistilledSet":
        """New set holding copies of the selected images, in the given order."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        m9 = self.gaussians_per_image * PARAMS_PER_GAUSSIAN
        blocks = self.params.reshape(self.num_images, m9)[indices]
        return DistilledSet(self.width, self.height, self.channels,
                            len(indices), self.gaussians_per_image,
                            blocks.reshape(-1).copy(), self.labels[indices].copy(),
                            self.num_classes)

    def gaussian(self, image_index: int, gaussian_index: int) -> Gaussian2D:
        off = param_offset(image_index, gaussian_index, self.gaussians_per_image)
        return Gaussian2D.from_array(self.params[off:off + PARAMS_PER_GAUSSIAN])

    def set_gaussian(self, image_index: int, gaussian_index: int,
                     g: Gaussian2D) -> None:
        off = param_offset(image_index, gaussian_index, self.gaussians_per_image)
        self.params[off:off + PARAMS_PER_GAUSSIAN] = g.as_array()

    def field_view(self, f: int) -> np.ndarray:
        """Strided view of one field across every Gaussian (mutating it
        mutates the set)."""
        return self.params[f::PARAMS_PER_GAUSSIAN]


@dataclass
class RenderConfig:
    """Output geometry plus the anti-aliasing and scheduling knobs."""

    width: int
    height: int
    channels: int = 3
    prefilter: bool = True
    ssaa_factor: int = 2
    cutoff_sigma: float = 3.0
    tile_size: int = 16

    def __post_init__(self) -> None:
        if self.ssaa_factor < 1:
            raise ValueError("ssaa_factor must be >= 1")
        if self.tile_size not in VALID_TILE_SIZES:
            raise ValueError(f"tile_size must be one of {VALID_TILE_SIZES}")
        if not self.cutoff_sigma > 0:
            raise ValueError("cutoff_sigma must be positive (may be inf)")


@dataclass
class BudgetSpec:
    """Storage accounting that fixes the Gaussian count per synthetic image.

    The baseline stores ``ipc`` raw images per class at 4 bytes per pixel
    value; the Gaussian side stores ``gpc`` images per class at
    ``bytes_per_param`` (2 for bf16) per scalar.
    """

    resolution: int
    channels: int
    ipc: int
    gpc: int
    bytes_per_param: int = 2

    def __post_init__(self) -> None:
        for name in ("resolution", "channels", "ipc", "gpc", "bytes_per_param"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TileLayout:
    """Tile grid of one image plus the batch size, defining global tile ids."""

    tiles_x: int
    tiles_y: int
    batch: int

    @property
    def tiles_per_image(self) -> int:
        return self.tiles_x * self.tiles_y

    @classmethod
    def for_geometry(cls, width: int, height: int, tile_size: int,
                     batch: int) -> "TileLayout":
        return cls(tiles_x=-(-width // tile_size),
                   tiles_y=-(-height // tile_size),
                   batch=batch)

    def global_id(self, image_index: int, local_tile: int) -> int:
        if not 0 <= image_index < self.batch:
            raise ValueError(f"image index {image_index} outside batch {self.batch}")
        return global_tile_id(image_index, local_tile, self.tiles_per_image)

    def decompose(self, tile_id: int) -> tuple[int, int]:
        if not 0 <= tile_id < self.batch * self.tiles_per_image:
            raise ValueError(f"tile id {tile_id} out of range")
        return decompose_tile_id(tile_id, self.tiles_per_image)


def budget_points(spec: BudgetSpec) -> int:
    """Gaussians per image under the byte budget of ``ipc`` raw images.

    Raw pixels are budgeted at 4 bytes, Gaussian scalars at
    ``spec.bytes_per_param``; with bf16 (2 bytes) the ratio contributes the
    factor of 2 in res*res*channels*ipc*2 / (gpc*9).
    """
    raw_bytes = spec.resolution * spec.resolution * spec.channels * spec.ipc * 4
    per_gaussian = PARAMS_PER_GAUSSIAN * spec.bytes_per_param
    m = raw_bytes // (spec.gpc * per_gaussian)
    if m < 1:
        raise ValueError(
            f"budget too small: {spec.gpc} images per class under an "
            f"ipc={spec.ipc} budget leaves no room for a single Gaussian")
    return int(m)


def global_tile_id(image_index: int, local_tile: int, tiles_per_image: int) -> int:
    """Flatten (image, local tile) into one batch-wide contiguous id space."""
    if tiles_per_image < 1:
        raise ValueError("tiles_per_image must be positive")
    if image_index < 0:
        raise ValueError("image index must be nonnegative")
    if not 0 <= local_tile < tiles_per_image:
        raise ValueError(
            f"local tile {local_tile} outside [0, {tiles_per_image})")
    return image_index * tiles_per_image + local_tile


def decompose_tile_id(tile_id: int, tiles_per_image: int) -> tuple[int, int]:
    """Inverse of :func:`global_tile_id`."""
    if tiles_per_image < 1:
        raise ValueError("tiles_per_image must be positive")
    if tile_id < 0:
        raise ValueError("tile id must be nonnegative")
    return divmod(tile_id, tiles_per_image)


def param_offset(image_index: int, gaussian_index: int, gaussians_per_image: int
                 ) -> int:
    """Flat index of the first scalar of Gaussian ``k`` of image ``i``."""
    if gaussians_per_image < 1:
        raise ValueError("gaussians_per_image must be positive")
    if image_index < 0:
        raise ValueError("image index must be nonnegative")
    if not 0 <= gaussian_index < gaussians_per_image:
        raise ValueError(
            f"gaussian index {gaussian_index} outside [0, {gaussians_per_image})")
    return (image_index * gaussians_per_image + gaussian_index) * PARAMS_PER_GAUSSIAN


def normalized_to_pixel(u, v, width: int, height: int):
    """Map normalized coordinates to pixel coordinates.

    Pixel ``i`` has its center at ``i`` in pixel coordinates, which
    corresponds to ``2*(i + 0.5)/width - 1`` in normalized coordinates; the
    map is affine and exact in double precision.
    """
    px = (np.asarray(u, dtype=np.float64) + 1.0) * 0.5 * width - 0.5
    py = (np.asarray(v, dtype=np.float64) + 1.0) * 0.5 * height - 0.5
    if np.ndim(px) == 0:
        return float(px), float(py)
    return px, py


def pixel_to_normalized(px, py, width: int, height: int):
    """Inverse of :func:`normalized_to_pixel`."""
    u = (np.asarray(px, dtype=np.float64) + 0.5) * 2.0 / width - 1.0
    v = (np.asarray(py, dtype=np.float64) + 0.5) * 2.0 / height - 1.0
    if np.ndim(u) == 0:
        return float(u), float(v)
    return u, v


def clip_positions(dset: DistilledSet, eps: float = DEFAULT_CLIP_EPS
                   ) -> DistilledSet:
    """Clamp every position into [-1+eps, 1-eps], in place. Idempotent."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    lo, hi = -1.0 + eps, 1.0 - eps
    for f in (F_U, F_V):
        view = dset.field_view(f)
        np.clip(view, lo, hi, out=view)
    return dset
