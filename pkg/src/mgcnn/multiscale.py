"""Moving trained models across resolutions and depths.

Resolution: :func:`adapt_model_resolution` rewrites every stencil bank
through the Galerkin coarsening map (or its inverse for refinement) and
moves the classifier fields with the matching image transfer.  Biases, time
step and class offsets are resolution independent and stay put.  The
midpoint-rule ``h^2`` factor inside the classifier keeps the transferred
weights on a comparable scale, so no further correction is applied.

Depth: :func:`prolong_depth` reads the layer parameters as samples of a
function of time at ``t_k = k * dt`` and resamples them on a grid ``factor``
times finer by piecewise-linear interpolation (constant beyond the last
node), keeping the final time fixed.  A network trained shallow therefore
initializes a deeper one; :func:`shallow_to_deep_train` chains that across a
depth sequence with cold-start controls, and :func:`multilevel_train` runs
the analogous coarse-to-fine sweep across a resolution pyramid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from math import nan
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .errors import DimensionError
from .grid import TransferPair, gaussian_blur_values, prolong_values, restrict_values
from .network import Classifier, NetworkParams, loss
from .stencils import CoarsenMap, StencilBank, build_coarsen_map, coarsen_bank, refine_bank
from .training import BcdConfig, HistoryRow, RegConfig, bcd_train, evaluate

__all__ = [
    "Direction",
    "DepthResult",
    "LevelResult",
    "LevelSchedule",
    "MultilevelResult",
    "ResolutionPyramid",
    "ShallowToDeepResult",
    "adapt_model_resolution",
    "multilevel_train",
    "prolong_depth",
    "shallow_to_deep_train",
]


class Direction(Enum):
    COARSEN = "coarsen"
    REFINE = "refine"


def adapt_model_resolution(
    params: NetworkParams,
    clf: Classifier,
    direction: Direction,
    cmap: CoarsenMap,
    pair: TransferPair,
) -> tuple[NetworkParams, Classifier]:
    """Re-express a trained model on the 2x coarser or finer grid."""
    if cmap.kind is not pair.kind:
        raise ValueError(f"coarsening map was built for {cmap.kind}, pair is {pair.kind}")
    if direction is Direction.COARSEN:
        move_bank: Callable[[StencilBank], StencilBank] = lambda b: coarsen_bank(b, cmap)
        new_grid = clf.grid.coarsened()
        w = restrict_values(clf.weights, pair.kind)
    else:
        move_bank = lambda b: refine_bank(b, cmap)
        new_grid = clf.grid.refined()
        w = prolong_values(clf.weights, pair.kind)
    out = params.copy()
    out.banks = [move_bank(b) for b in params.banks]
    out.embed = move_bank(params.embed)
    return out, Classifier(new_grid, w, clf.mu.copy())


@dataclass
class ResolutionPyramid:
    """Per-level datasets, finest first; level i+1 is blur + restrict of level i."""

    pair: TransferPair
    blur_sigma: float
    datasets: list[LabeledDataset]

    @classmethod
    def build(
        cls,
        dataset: LabeledDataset,
        levels: int,
        pair: TransferPair,
        blur_sigma: float = 1.0,
    ) -> "ResolutionPyramid":
        """``levels`` coarsenings below the given finest-level dataset."""
        if levels < 0:
            raise ValueError(f"level count must be nonnegative, got {levels}")
        datasets = [dataset]
        for _ in range(levels):
            prev = datasets[-1]
            images = prev.images
            if blur_sigma > 0.0:
                images = gaussian_blur_values(images, blur_sigma)
            images = np.clip(restrict_values(images, pair.kind), 0.0, 1.0)
            datasets.append(
                LabeledDataset(prev.grid.coarsened(), images, prev.labels, prev.num_classes)
            )
        return cls(pair=pair, blur_sigma=blur_sigma, datasets=datasets)

    @property
    def levels(self) -> int:
        return len(self.datasets)


@dataclass
class LevelSchedule:
    """One BcdConfig per pyramid level, indexed like the pyramid (0 = finest)."""

    configs: list[BcdConfig]

    @classmethod
    def uniform(cls, cfg: BcdConfig, levels: int) -> "LevelSchedule":
        return cls([cfg] * levels)


@dataclass
class LevelResult:
    level: int
    history: list[HistoryRow]
    init_loss_warm: float
    init_loss_cold: float
    final_acc: float
    wall_seconds: float


@dataclass
class MultilevelResult:
    levels: list[LevelResult]
    params: NetworkParams
    classifier: Classifier


def multilevel_train(
    pyramid: ResolutionPyramid,
    schedule: LevelSchedule,
    init: tuple[NetworkParams, Classifier],
    reg: RegConfig,
    val_pyramid: ResolutionPyramid | None = None,
    cold_init: Callable[[int], tuple[NetworkParams, Classifier]] | None = None,
    workers: int = 1,
) -> MultilevelResult:
    """Train coarsest to finest, refining the model between levels.

    ``init`` must live on the coarsest grid.  ``cold_init(level)`` supplies a
    fresh model for the reference initial loss recorded per level; without
    it that column is NaN.  With zero coarse levels this reduces exactly to
    one :func:`bcd_train` call.
    """
    if len(schedule.configs) != pyramid.levels:
        raise ValueError(
            f"schedule covers {len(schedule.configs)} levels, pyramid has {pyramid.levels}"
        )
    if val_pyramid is not None and val_pyramid.levels != pyramid.levels:
        raise ValueError("validation pyramid depth does not match")
    cmap = build_coarsen_map(init[0].kernel_size, pyramid.pair)
    params, clf = init[0].copy(), init[1].copy()
    results: list[LevelResult] = []

    for level in range(pyramid.levels - 1, -1, -1):
        ds = pyramid.datasets[level]
        cfg = schedule.configs[level]
        val = val_pyramid.datasets[level] if val_pyramid is not None else None

        init_warm = loss(ds.images, ds.labels, params, clf, reg, workers=workers).total
        init_cold = nan
        if cold_init is not None:
            cold_p, cold_c = cold_init(level)
            init_cold = loss(ds.images, ds.labels, cold_p, cold_c, reg, workers=workers).total

        start = time.perf_counter()
        res = bcd_train(ds, params, clf, reg, cfg, val=val, workers=workers)
        wall = time.perf_counter() - start
        params, clf = res.params, res.classifier
        final_acc = evaluate(val if val is not None else ds, params, clf, workers=workers).accuracy
        results.append(
            LevelResult(
                level=level,
                history=res.history,
                init_loss_warm=init_warm,
                init_loss_cold=init_cold,
                final_acc=final_acc,
                wall_seconds=wall,
            )
        )
        if level > 0:
            params, clf = adapt_model_resolution(
                params, clf, Direction.REFINE, cmap, pyramid.pair
            )
    return MultilevelResult(levels=results, params=params, classifier=clf)


def prolong_depth(params: NetworkParams, factor: int) -> NetworkParams:
    """Resample layer parameters on a ``factor`` times finer time grid.

    New nodes at ``j * dt / factor`` interpolate linearly between the old
    nodes ``k * dt`` and hold the last value beyond ``(N-1) * dt``; the
    final time is unchanged.
    """
    if factor < 1:
        raise ValueError(f"depth factor must be at least 1, got {factor}")
    n = params.num_layers
    out = params.copy()
    if factor == 1 or n == 0:
        out.dt = params.dt / factor
        return out

    banks = np.stack([b.weights for b in params.banks])
    new_n = factor * n
    new_banks = np.empty((new_n,) + banks.shape[1:])
    new_biases = np.empty((new_n, params.channels))
    for j in range(new_n):
        tau = j / factor
        i0 = int(tau)
        if i0 >= n - 1:
            new_banks[j] = banks[n - 1]
            new_biases[j] = params.biases[n - 1]
        else:
            frac = tau - i0
            new_banks[j] = (1.0 - frac) * banks[i0] + frac * banks[i0 + 1]
            new_biases[j] = (1.0 - frac) * params.biases[i0] + frac * params.biases[i0 + 1]
    out.banks = [StencilBank(new_banks[j]) for j in range(new_n)]
    out.biases = new_biases
    out.dt = params.dt / factor
    return out


@dataclass
class DepthResult:
    depth: int
    history: list[HistoryRow]
    init_loss_warm: float  # NaN at the first depth: nothing to warm-start from
    init_loss_cold: float
    cold_history: list[HistoryRow] | None
    final_acc: float
    wall_seconds: float


@dataclass
class ShallowToDeepResult:
    depths: list[DepthResult]
    params: NetworkParams
    classifier: Classifier


def shallow_to_deep_train(
    train: LabeledDataset,
    depths: list[int],
    cfg: BcdConfig,
    reg: RegConfig,
    make_model: Callable[[int, int], tuple[NetworkParams, Classifier]],
    val: LabeledDataset | None = None,
    workers: int = 1,
) -> ShallowToDeepResult:
    """Train a chain of networks of increasing depth with warm starts.

    ``depths`` must be increasing with each entry a multiple of the last.
    ``make_model(depth, seed)`` draws a cold model at a given depth; the
    chain's first depth starts cold, every later depth starts from the
    previous solution prolonged in time.  Later depths also train a cold
    control for comparison; its history is recorded but does not feed the
    chain.
    """
    if not depths:
        raise ValueError("need at least one depth")
    for a, b in zip(depths, depths[1:]):
        if b <= a or b % a:
            raise ValueError(f"depths must increase by integer factors, got {a} -> {b}")

    results: list[DepthResult] = []
    params: NetworkParams | None = None
    clf: Classifier | None = None
    for pos, depth in enumerate(depths):
        cold_p, cold_c = make_model(depth, cfg.seed + pos)
        init_cold = loss(train.images, train.labels, cold_p, cold_c, reg, workers=workers).total
        cold_history: list[HistoryRow] | None = None
        if pos == 0:
            init_warm = nan
            params, clf = cold_p, cold_c
        else:
            params = prolong_depth(params, depth // depths[pos - 1])
            init_warm = loss(train.images, train.labels, params, clf, reg, workers=workers).total
            cold_history = bcd_train(train, cold_p, cold_c, reg, cfg, val=val, workers=workers).history

        start = time.perf_counter()
        res = bcd_train(train, params, clf, reg, cfg, val=val, workers=workers)
        wall = time.perf_counter() - start
        params, clf = res.params, res.classifier
        final_acc = evaluate(val if val is not None else train, params, clf, workers=workers).accuracy
        results.append(
            DepthResult(
                depth=depth,
                history=res.history,
                init_loss_warm=init_warm,
                init_loss_cold=init_cold,
                cold_history=cold_history,
                final_acc=final_acc,
                wall_seconds=wall,
            )
        )
    return ShallowToDeepResult(depths=results, params=params, classifier=clf)
