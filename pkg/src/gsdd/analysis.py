"""Pruning experiments, downstream evaluation, and render benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import (
    CHOLESKY_FLOOR,
    F_ALPHA,
    F_L11,
    F_L21,
    F_L22,
    PARAMS_PER_GAUSSIAN,
    DistilledSet,
    RenderConfig,
)
from .data_io import LabeledImageDataset
from .gradients import render_backward
from .optimize import AdamState, adam_step
from .raster import (
    BufferTracker,
    ImageBuffer,
    cov_from_cholesky,
    render_batched,
    render_reference,
)

PRUNE_MODES = ("large_opaque_first", "small_transparent_first", "random")


@dataclass
class PruneStrategy:
    """Which Gaussians to drop and how many."""

    mode: str
    ratio: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in PRUNE_MODES:
            raise ValueError(f"mode must be one of {PRUNE_MODES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")


def importance_score(g) -> float:
    """|opacity| * sqrt(det covariance): spatial extent times opacity.

    Rotation of the covariance leaves the score unchanged (only the
    determinant enters); the score scales linearly with |opacity|.
    """
    _, det, _ = cov_from_cholesky(g.l11, g.l21, g.l22)
    return abs(g.alpha) * float(np.sqrt(det))


def _scores(dset: DistilledSet) -> np.ndarray:
    p = dset.params.reshape(-1, PARAMS_PER_GAUSSIAN)
    a = np.maximum(np.abs(p[:, F_L11]), CHOLESKY_FLOOR)
    b = p[:, F_L21]
    c = np.maximum(np.abs(p[:, F_L22]), CHOLESKY_FLOOR)
    det = (a * a) * (b * b + c * c) - (a * b) ** 2
    return np.abs(p[:, F_ALPHA]) * np.sqrt(det)


def prune_dataset(dset: DistilledSet, strategy: PruneStrategy) -> DistilledSet:
    """Remove floor(ratio*M) Gaussians per image by importance-score order."""
    m = dset.gaussians_per_image
    remove = int(np.floor(strategy.ratio * m))
    keep = m - remove
    if remove == 0:
        return dset.copy()

    scores = _scores(dset).reshape(dset.num_images, m)
    blocks = dset.params.reshape(dset.num_images, m, PARAMS_PER_GAUSSIAN)
    kept = np.empty((dset.num_images, keep, PARAMS_PER_GAUSSIAN))
    for i in range(dset.num_images):
        if strategy.mode == "large_opaque_first":
            order = np.argsort(scores[i], kind="stable")       # drop the tail
            keep_idx = order[:keep]
        elif strategy.mode == "small_transparent_first":
            order = np.argsort(scores[i], kind="stable")
            keep_idx = order[m - keep:]
        else:
            rng = np.random.default_rng([strategy.seed, i])
            keep_idx = rng.permutation(m)[:keep]
        kept[i] = blocks[i][np.sort(keep_idx)]                 # original order

    return DistilledSet(dset.width, dset.height, dset.channels,
                        dset.num_images, keep, kept.reshape(-1),
                        dset.labels.copy(), dset.num_classes)


@dataclass
class EvalSpec:
    """Two-layer MLP probe: flatten -> dense -> ReLU -> dense -> softmax CE."""

    hidden_width: int = 128
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_eval_classifier(train: LabeledImageDataset,
                          test: LabeledImageDataset,
                          spec: EvalSpec) -> float:
    """Train the probe on (rendered) train images, return test accuracy.

    Gradients are written out by hand; optimization is full-batch Adam for
    ``epochs`` steps, deterministic for a fixed seed.
    """
    if train.images.shape[0] == 0:
        raise ValueError("empty training set")
    classes = train.class_count
    present = np.unique(train.labels)
    missing = set(range(classes)) - set(int(c) for c in present)
    if missing:
        raise ValueError(f"classes missing from train set: {sorted(missing)}")

    x = train.images.reshape(train.images.shape[0], -1).astype(np.float64)
    y = train.labels
    x_test = test.images.reshape(test.images.shape[0], -1).astype(np.float64)

    d = x.shape[1]
    h = spec.hidden_width
    rng = np.random.default_rng(spec.seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / d), (d, h))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, np.sqrt(2.0 / h), (h, classes))
    b2 = np.zeros(classes)

    def pack() -> np.ndarray:
        return np.concatenate([w1.reshape(-1), b1, w2.reshape(-1), b2])

    def unpack(theta: np.ndarray) -> None:
        nonlocal w1, b1, w2, b2
        i = 0
        w1 = theta[i:i + d * h].reshape(d, h); i += d * h
        b1 = theta[i:i + h]; i += h
        w2 = theta[i:i + h * classes].reshape(h, classes); i += h * classes
        b2 = theta[i:i + classes]

    onehot = np.zeros((y.size, classes))
    onehot[np.arange(y.size), y] = 1.0
    n = y.size

    theta = pack()
    adam = AdamState.new(theta.size, lr=spec.lr)
    for _ in range(spec.epochs):
        unpack(theta)
        z1 = x @ w1 + b1
        a1 = np.maximum(z1, 0.0)
        probs = _softmax(a1 @ w2 + b2)
        dz2 = (probs - onehot) / n
        dw2 = a1.T @ dz2
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ w2.T
        dz1 = np.where(z1 > 0.0, da1, 0.0)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        grad = np.concatenate([dw1.reshape(-1), db1, dw2.reshape(-1), db2])
        adam_step(adam, theta, grad)

    unpack(theta)
    logits = np.maximum(x_test @ w1 + b1, 0.0) @ w2 + b2
    pred = logits.argmax(axis=1)
    return float(np.mean(pred == test.labels))


def rendered_dataset(dset: DistilledSet, cfg: RenderConfig,
                     workers: int = 1) -> LabeledImageDataset:
    """Render a distilled set into a labeled dataset (normalized units)."""
    images = render_batched(dset, cfg, workers=workers)
    stack = np.stack([img.as_array() for img in images])
    return LabeledImageDataset(stack, dset.labels, dset.num_classes,
                               np.zeros(cfg.channels), np.ones(cfg.channels))


BENCH_CSV_HEADER = "res,batch,M,path,fwd_ms,fwdbwd_ms,peak_bytes"


def _bench_set(res: int, batch: int, m: int, seed: int) -> DistilledSet:
    rng = np.random.default_rng(seed)
    n = batch * m
    p = np.zeros((n, PARAMS_PER_GAUSSIAN))
    p[:, 0:2] = rng.uniform(-0.9, 0.9, (n, 2))
    p[:, 2] = rng.uniform(0.05, 0.3, n)
    p[:, 3] = rng.uniform(-0.1, 0.1, n)
    p[:, 4] = rng.uniform(0.05, 0.3, n)
    p[:, 5:8] = rng.uniform(-1.0, 1.0, (n, 3))
    p[:, 8] = rng.uniform(0.2, 1.0, n)
    return DistilledSet(res, res, 3, batch, m, p.reshape(-1),
                        np.zeros(batch, dtype=np.int64))


def _median_ms(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def bench_render(grid, seed: int = 0, runs: int = 5, warmup: int = 2,
                 workers: int = 1, cutoff_sigma: float = 3.0,
                 tolerance: float = 1e-5):
    """Time forward and forward+backward for each grid entry.

    ``grid`` rows are dicts with keys ``res``, ``batch``, ``m`` and ``path``
    in {"reference", "batched"}. For every distinct geometry the two paths
    are first checked against each other at infinite cutoff (where they must
    agree to ``tolerance`` max relative error) before anything is timed.
    Returns one result row per grid entry, in order, matching
    ``BENCH_CSV_HEADER``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty benchmark grid")

    checked: dict[tuple, None] = {}
    rows = []
    for entry in grid:
        res, batch, m = int(entry["res"]), int(entry["batch"]), int(entry["m"])
        path = entry["path"]
        if path not in ("reference", "batched"):
            raise ValueError(f"unknown path {path!r}")
        dset = _bench_set(res, batch, m, seed)
        cfg = RenderConfig(res, res, 3, prefilter=True, ssaa_factor=1,
                           cutoff_sigma=cutoff_sigma)
        exact_cfg = RenderConfig(res, res, 3, prefilter=True, ssaa_factor=1,
                                 cutoff_sigma=np.inf)

        key = (res, batch, m)
        if key not in checked:
            ref = [render_reference(dset, i, exact_cfg)
                   for i in range(batch)]
            bat = render_batched(dset, exact_cfg, workers=workers)
            for a, b in zip(ref, bat):
                denom = np.maximum(np.abs(a.pixels), 1e-6)
                err = float(np.max(np.abs(a.pixels - b.pixels) / denom))
                if err > tolerance:
                    raise AssertionError(
                        f"paths disagree at {key}: max rel err {err:.3g}")
            checked[key] = None

        ones = [ImageBuffer.from_array(np.ones((res, res, 3)))
                for _ in range(batch)]
        tracker = BufferTracker()
        if path == "reference":
            def fwd():
                for i in range(batch):
                    render_reference(dset, i, exact_cfg, tracker=tracker)

            def fwdbwd():
                fwd()
                render_backward(dset, exact_cfg, ones, workers=1)
        else:
            def fwd():
                render_batched(dset, cfg, workers=workers, tracker=tracker)

            def fwdbwd():
                fwd()
                render_backward(dset, cfg, ones, workers=workers)

        fwd_ms = _median_ms(fwd, runs, warmup)
        fwdbwd_ms = _median_ms(fwdbwd, runs, warmup)
        rows.append((res, batch, m, path, round(fwd_ms, 3),
                     round(fwdbwd_ms, 3), tracker.peak_bytes))
    return rows
