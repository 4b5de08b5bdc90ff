"""Forward splatting of Gaussian sets onto pixel grids.

Two render paths share one sample-evaluation routine:

* ``render_reference`` — single-threaded brute force, every Gaussian
  evaluated at every (sub)sample of one image, no cutoff. This is the oracle.
* ``render_batched`` — the whole batch rendered as one flat workload: each
  Gaussian emits intersection records against the tiles its conservative
  bounding box touches, records are sorted by global tile id, and every tile
  is an independent work unit that owns its pixel block.

With ``cutoff_sigma = inf`` both paths perform identical arithmetic per
sample (same contribution values reduced along the same axis), so they agree
bitwise. At finite cutoff the batched path windows the kernel smoothly to
compact support: inside the Mahalanobis ball ``q = d^T Sigma'^-1 d <
cutoff^2`` the contribution is ``alpha * g * exp(-tau/(cutoff^2 - q)) *
color`` and exactly zero outside. The window and all its derivatives vanish
at the boundary, so values never depend on which over-inclusive tile lists a
Gaussian landed in, and finite differences through the renderer stay well
behaved for gradient checking.

All accumulation happens in double precision; outputs are stored as float32
unless a wider ``out_dtype`` is requested (the gradient-check harness needs
float64 outputs).
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    F_ALPHA,
    F_B,
    F_G,
    F_L11,
    F_L21,
    F_L22,
    F_R,
    F_U,
    F_V,
    CHOLESKY_FLOOR,
    PARAMS_PER_GAUSSIAN,
    DistilledSet,
    RenderConfig,
    TileLayout,
)

PREFILTER_VARIANCE = 1.0 / 12.0  # variance of a unit pixel box filter, per axis

# Sharpness of the smooth compact cutoff window
# exp(tau/cutoff^2 - tau/(cutoff^2 - q)), normalized to 1 at the mean.
CUTOFF_WINDOW_TAU = 1.0


@dataclass
class ImageBuffer:
    """One rendered image: flat buffer, row-major, channel-minor."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels).reshape(-1)
        if self.pixels.size != self.width * self.height * self.channels:
            raise ValueError("pixel buffer length != width*height*channels")

    def as_array(self) -> np.ndarray:
        """(height, width, channels) view of the flat buffer."""
        return self.pixels.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, pixels=arr.reshape(-1))

    @classmethod
    def zeros(cls, width: int, height: int, channels: int,
              dtype=np.float32) -> "ImageBuffer":
        return cls(width, height, channels,
                   np.zeros(width * height * channels, dtype=dtype))


@dataclass
class IntersectionRecords:
    """(tile, Gaussian) pairs, sorted nondecreasing in global tile id.

    ``gaussian_flat_indices`` index into the batch-wide Gaussian table
    (image-major), so a record pins down both the pixel block and the
    primitive to evaluate there.
    """

    global_tile_ids: np.ndarray
    gaussian_flat_indices: np.ndarray

    def __len__(self) -> int:
        return self.global_tile_ids.size


class BufferTracker:
    """Peak transient buffer accounting for the tile renderer.

    Tracks the scratch arrays a render call allocates (records, per-tile
    sample/record matrices); with a thread pool, concurrently live tile
    scratch is charged as workers * largest tile allocation.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.base_bytes = 0
        self.max_tile_bytes = 0
        self.workers = 1

    def charge_base(self, nbytes: int) -> None:
        with self._lock:
            self.base_bytes += int(nbytes)

    def charge_tile(self, nbytes: int) -> None:
        with self._lock:
            self.max_tile_bytes = max(self.max_tile_bytes, int(nbytes))

    @property
    def peak_bytes(self) -> int:
        return self.base_bytes + self.workers * self.max_tile_bytes


def ssaa_offsets(factor: int) -> list[tuple[float, float]]:
    """Subpixel sample offsets of a regular factor x factor grid.

    Offsets are relative to the pixel center and average to (0, 0);
    ``factor=1`` degenerates to the center sample.
    """
    if factor < 1:
        raise ValueError("ssaa factor must be >= 1")
    steps = [(2 * t + 1) / (2 * factor) - 0.5 for t in range(factor)]
    return [(dx, dy) for dx in steps for dy in steps]


def cov_from_cholesky(l11: float, l21: float, l22: float):
    """Covariance from a lower-triangular factor, with the diagonal floor.

    Returns ``(sigma, det, inv)`` where ``sigma = L L^T`` after flooring the
    diagonal entries to ``max(|l|, CHOLESKY_FLOOR)``; the floor keeps the
    result symmetric positive definite for any input.
    """
    a = max(abs(float(l11)), CHOLESKY_FLOOR)
    b = float(l21)
    c = max(abs(float(l22)), CHOLESKY_FLOOR)
    s00 = a * a
    s01 = a * b
    s11 = b * b + c * c
    det = s00 * s11 - s01 * s01
    inv = np.array([[s11, -s01], [-s01, s00]]) / det
    sigma = np.array([[s00, s01], [s01, s11]])
    return sigma, det, inv


def prefilter_cov(sigma_px: np.ndarray) -> np.ndarray:
    """Convolve a pixel-space covariance with the unit pixel box filter.

    Adds diag(1/12, 1/12), establishing a minimum rendering variance so
    arbitrarily narrow Gaussians stay resolvable on the grid.
    """
    sigma_px = np.asarray(sigma_px, dtype=np.float64)
    out = sigma_px.copy()
    out[0, 0] += PREFILTER_VARIANCE
    out[1, 1] += PREFILTER_VARIANCE
    return out


def check_geometry(dset: DistilledSet, cfg: RenderConfig) -> None:
    if (dset.width, dset.height, dset.channels) != (cfg.width, cfg.height,
                                                    cfg.channels):
        raise ValueError(
            f"geometry mismatch: set is {dset.width}x{dset.height}x"
            f"{dset.channels}, config is {cfg.width}x{cfg.height}x{cfg.channels}")


class _GaussianTable:
    """Per-Gaussian quantities derived once per render/backward call.

    Everything is pixel-space: means, inverse covariances (after the optional
    prefilter), determinants, and conservative bounding-box radii
    ``cutoff * sqrt(lambda_max(Sigma'))``.
    """

    def __init__(self, dset: DistilledSet, cfg: RenderConfig) -> None:
        p = dset.params.reshape(-1, PARAMS_PER_GAUSSIAN)
        self.count = p.shape[0]
        self.per_image = dset.gaussians_per_image

        sx = cfg.width / 2.0
        sy = cfg.height / 2.0
        self.scale_x = sx
        self.scale_y = sy

        self.l11_raw = p[:, F_L11]
        self.l22_raw = p[:, F_L22]
        a = np.maximum(np.abs(self.l11_raw), CHOLESKY_FLOOR)
        b = p[:, F_L21]
        c = np.maximum(np.abs(self.l22_raw), CHOLESKY_FLOOR)
        self.l11 = a
        self.l21 = b
        self.l22 = c

        # normalized covariance L L^T, then pixel space via diag(sx, sy)
        c00 = a * a * (sx * sx)
        c01 = a * b * (sx * sy)
        c11 = (b * b + c * c) * (sy * sy)
        if cfg.prefilter:
            c00 = c00 + PREFILTER_VARIANCE
            c11 = c11 + PREFILTER_VARIANCE
        det = c00 * c11 - c01 * c01
        self.inv00 = c11 / det
        self.inv01 = -c01 / det
        self.inv11 = c00 / det

        self.mu_x = (p[:, F_U] + 1.0) * 0.5 * cfg.width - 0.5
        self.mu_y = (p[:, F_V] + 1.0) * 0.5 * cfg.height - 0.5

        self.alpha = p[:, F_ALPHA]
        self.colors = p[:, F_R:F_B + 1]

        if np.isfinite(cfg.cutoff_sigma):
            half_tr = 0.5 * (c00 + c11)
            lam_max = half_tr + np.sqrt(
                np.maximum(0.25 * (c00 - c11) ** 2 + c01 * c01, 0.0))
            self.radius = cfg.cutoff_sigma * np.sqrt(lam_max)
            self.cutoff_q = cfg.cutoff_sigma ** 2
            self.window_tau = CUTOFF_WINDOW_TAU
            self.window_gain = float(np.exp(CUTOFF_WINDOW_TAU / self.cutoff_q))
        else:
            self.radius = None
            self.cutoff_q = np.inf
            self.window_tau = 0.0
            self.window_gain = 1.0

    def kernel(self, q: np.ndarray) -> np.ndarray:
        """Windowed kernel value at squared Mahalanobis distance q."""
        g = np.exp(-0.5 * q)
        if self.window_tau == 0.0:
            return g
        margin = self.cutoff_q - q
        inside = margin > 0.0
        window = np.exp(-self.window_tau / np.where(inside, margin, 1.0))
        return np.where(inside, g * window * self.window_gain, 0.0)


def _evaluate_samples(xs: np.ndarray, ys: np.ndarray, tbl: _GaussianTable,
                      idx: np.ndarray, channels: int,
                      tracker: BufferTracker | None = None) -> np.ndarray:
    """Sum Gaussian contributions at sample points.

    ``xs, ys`` are pixel-space sample coordinates (n,), ``idx`` selects the
    contributing Gaussians (m,). Returns (n, channels) float64. The per-sample
    reduction runs over the trailing record axis so that any caller that
    presents the same records in the same order gets bitwise-identical sums.
    """
    dx = xs[:, None] - tbl.mu_x[idx][None, :]
    dy = ys[:, None] - tbl.mu_y[idx][None, :]
    q = (tbl.inv00[idx] * dx * dx
         + 2.0 * tbl.inv01[idx] * dx * dy
         + tbl.inv11[idx] * dy * dy)
    w = tbl.alpha[idx] * tbl.kernel(q)
    if tracker is not None:
        tracker.charge_tile(4 * w.nbytes + w.shape[0] * channels * 8)
    out = np.empty((xs.size, channels), dtype=np.float64)
    for ch in range(channels):
        out[:, ch] = np.sum(w * tbl.colors[idx, ch], axis=1)
    return out


def _sample_grid(x0: int, x1: int, y0: int, y1: int, offsets: np.ndarray):
    """Sample coordinates for the pixel block [x0,x1) x [y0,y1).

    Samples are grouped per pixel in raster order, the ssaa offsets forming
    the innermost axis, so a trailing reshape to (npix, n_offsets) recovers
    the per-pixel groups.
    """
    px = np.arange(x0, x1, dtype=np.float64)
    py = np.arange(y0, y1, dtype=np.float64)
    gx = np.add.outer(px, offsets[:, 0])                   # (w, s)
    gy = np.add.outer(py, offsets[:, 1])                   # (h, s)
    n_off = offsets.shape[0]
    w = px.size
    h = py.size
    xs = np.broadcast_to(gx[None, :, :], (h, w, n_off))
    ys = np.broadcast_to(gy[:, None, :], (h, w, n_off))
    return xs.reshape(-1), ys.reshape(-1)


def render_reference(dset: DistilledSet, image_index: int, cfg: RenderConfig,
                     out_dtype=np.float32,
                     tracker: BufferTracker | None = None) -> ImageBuffer:
    """Brute-force render of one image: every Gaussian at every sample.

    Ignores the cutoff by contract (this path is the oracle), honors
    prefilter and ssaa. Single-threaded.
    """
    check_geometry(dset, cfg)
    if not 0 <= image_index < dset.num_images:
        raise ValueError("image index out of range")

    # cutoff disabled: evaluate the plain kernel everywhere
    ref_cfg = cfg if not np.isfinite(cfg.cutoff_sigma) else RenderConfig(
        cfg.width, cfg.height, cfg.channels, cfg.prefilter, cfg.ssaa_factor,
        np.inf, cfg.tile_size)
    tbl = _GaussianTable(dset, ref_cfg)
    m = dset.gaussians_per_image
    idx = np.arange(image_index * m, (image_index + 1) * m)

    offsets = np.asarray(ssaa_offsets(cfg.ssaa_factor), dtype=np.float64)
    n_off = offsets.shape[0]
    out = np.empty((cfg.height * cfg.width, cfg.channels), dtype=np.float64)

    # evaluate in row blocks to bound the (samples x gaussians) scratch
    rows_per_block = max(1, 2_000_000 // max(1, cfg.width * n_off * max(m, 1)))
    for y0 in range(0, cfg.height, rows_per_block):
        y1 = min(y0 + rows_per_block, cfg.height)
        xs, ys = _sample_grid(0, cfg.width, y0, y1, offsets)
        vals = _evaluate_samples(xs, ys, tbl, idx, cfg.channels, tracker)
        vals = vals.reshape(-1, n_off, cfg.channels).mean(axis=1)
        out[y0 * cfg.width:y1 * cfg.width] = vals

    img = out.reshape(cfg.height, cfg.width, cfg.channels).astype(out_dtype)
    return ImageBuffer.from_array(img)


def build_intersection_records(dset: DistilledSet, cfg: RenderConfig,
                               tbl: _GaussianTable | None = None
                               ) -> tuple[IntersectionRecords, TileLayout]:
    """Map every Gaussian to the tiles its bounding box touches.

    With an infinite cutoff every Gaussian maps to every tile of its image.
    Records come out sorted by global tile id; within a tile, Gaussian
    indices ascend, matching the reference path's accumulation order.
    """
    check_geometry(dset, cfg)
    if tbl is None:
        tbl = _GaussianTable(dset, cfg)
    layout = TileLayout.for_geometry(cfg.width, cfg.height, cfg.tile_size,
                                     dset.num_images)
    n = tbl.count
    ts = cfg.tile_size

    if tbl.radius is None:
        tx0 = np.zeros(n, dtype=np.int64)
        ty0 = np.zeros(n, dtype=np.int64)
        tx1 = np.full(n, layout.tiles_x - 1, dtype=np.int64)
        ty1 = np.full(n, layout.tiles_y - 1, dtype=np.int64)
        valid = np.ones(n, dtype=bool)
    else:
        # pixel i's samples live in [i-0.5, i+0.5); pad the radius accordingly
        px0 = np.floor(tbl.mu_x - tbl.radius - 0.5)
        px1 = np.ceil(tbl.mu_x + tbl.radius + 0.5)
        py0 = np.floor(tbl.mu_y - tbl.radius - 0.5)
        py1 = np.ceil(tbl.mu_y + tbl.radius + 0.5)
        valid = (px1 >= 0) & (px0 <= cfg.width - 1) & \
                (py1 >= 0) & (py0 <= cfg.height - 1)
        tx0 = (np.clip(px0, 0, cfg.width - 1) // ts).astype(np.int64)
        tx1 = (np.clip(px1, 0, cfg.width - 1) // ts).astype(np.int64)
        ty0 = (np.clip(py0, 0, cfg.height - 1) // ts).astype(np.int64)
        ty1 = (np.clip(py1, 0, cfg.height - 1) // ts).astype(np.int64)

    nx = np.where(valid, tx1 - tx0 + 1, 0)
    ny = np.where(valid, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return IntersectionRecords(empty, empty.copy()), layout

    gauss_idx = np.repeat(np.arange(n, dtype=np.int64), counts)
    # enumerate each Gaussian's (ty, tx) tile rectangle in row-major order
    local = np.arange(total, dtype=np.int64) - np.repeat(
        np.cumsum(counts) - counts, counts)
    rect_w = np.repeat(nx, counts)
    tile_x = np.repeat(tx0, counts) + local % np.maximum(rect_w, 1)
    tile_y = np.repeat(ty0, counts) + local // np.maximum(rect_w, 1)
    image_idx = gauss_idx // dset.gaussians_per_image
    tile_ids = (image_idx * layout.tiles_per_image
                + tile_y * layout.tiles_x + tile_x)

    order = np.argsort(tile_ids, kind="stable")
    return IntersectionRecords(tile_ids[order], gauss_idx[order]), layout


def _tile_pixel_block(layout: TileLayout, cfg: RenderConfig, tile_id: int):
    image_index, local = layout.decompose(tile_id)
    ty, tx = divmod(local, layout.tiles_x)
    x0 = tx * cfg.tile_size
    y0 = ty * cfg.tile_size
    x1 = min(x0 + cfg.tile_size, cfg.width)
    y1 = min(y0 + cfg.tile_size, cfg.height)
    return image_index, x0, x1, y0, y1


def render_batched(dset: DistilledSet, cfg: RenderConfig, workers: int = 1,
                   out_dtype=np.float32,
                   tracker: BufferTracker | None = None) -> list[ImageBuffer]:
    """Render every image of the batch through the tile pipeline.

    Each global tile is one work unit owning its pixel block, so the output
    is bitwise independent of ``workers``. With ``cutoff_sigma = inf`` the
    result matches :func:`render_reference` bitwise for every image.
    """
    check_geometry(dset, cfg)
    tbl = _GaussianTable(dset, cfg)
    records, layout = build_intersection_records(dset, cfg, tbl)
    offsets = np.asarray(ssaa_offsets(cfg.ssaa_factor), dtype=np.float64)
    n_off = offsets.shape[0]

    if tracker is not None:
        tracker.workers = max(1, workers)
        tracker.charge_base(records.global_tile_ids.nbytes
                            + records.gaussian_flat_indices.nbytes)

    images = [np.zeros((cfg.height, cfg.width, cfg.channels), dtype=out_dtype)
              for _ in range(dset.num_images)]

    tile_ids = records.global_tile_ids
    unique_tiles, starts = np.unique(tile_ids, return_index=True)
    ends = np.append(starts[1:], tile_ids.size)

    def run_tile(t: int) -> None:
        tile_id = int(unique_tiles[t])
        idx = records.gaussian_flat_indices[starts[t]:ends[t]]
        image_index, x0, x1, y0, y1 = _tile_pixel_block(layout, cfg, tile_id)
        xs, ys = _sample_grid(x0, x1, y0, y1, offsets)
        vals = _evaluate_samples(xs, ys, tbl, idx, cfg.channels, tracker)
        vals = vals.reshape(-1, n_off, cfg.channels).mean(axis=1)
        block = vals.reshape(y1 - y0, x1 - x0, cfg.channels)
        images[image_index][y0:y1, x0:x1, :] = block.astype(out_dtype)

    n_tiles = unique_tiles.size
    if workers <= 1 or n_tiles <= 1:
        for t in range(n_tiles):
            run_tile(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, range(n_tiles)))

    return [ImageBuffer.from_array(a) for a in images]
