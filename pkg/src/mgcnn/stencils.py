"""Periodic convolution stencils, their Fourier symbols, and the Galerkin
coarsening map that moves them between grid resolutions.

A stencil is a small ``k x k`` window of weights (``k`` odd) applied by
periodic cross-correlation:

    out(i, j) = sum_{p,q} weights(p, q) * img(i + p - c, j + q - c),  c = k // 2

with all indices wrapping around.  On a periodic grid this operator is
circulant, so its eigenvalues are the 2D DFT of the zero-padded,
center-shifted weights; :func:`stencil_symbol` returns exactly that.

Changing resolution composes the operator with a restriction ``R`` and a
prolongation ``P``: the coarse-grid operator is ``R K(s) P``.  Because R, K
and P are all translation equivariant (by one coarse cell), the composition
is again a stencil operator, and the map from fine weights to coarse weights
is linear.  :func:`build_coarsen_map` materializes that ``k^2 x k^2`` matrix
once by probing with unit stencils on a small reference grid; refinement
solves the same linear system in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, IllPosedError
from .grid import Grid2D, Image, TransferPair, TransferKind, prolong_values, restrict_values

__all__ = [
    "COND_LIMIT",
    "CoarsenMap",
    "StabilityReport",
    "Stencil",
    "StencilBank",
    "Symbol",
    "bank_apply",
    "build_coarsen_map",
    "coarsen_bank",
    "coarsen_stencil",
    "conv_apply",
    "refine_bank",
    "refine_stencil",
    "stability_report",
    "stencil_symbol",
]

# Coarsening maps with condition numbers beyond this are refused outright:
# refinement would amplify rounding noise past any useful tolerance.
COND_LIMIT = 1e12


@dataclass
class Stencil:
    """A ``k x k`` convolution window, ``k`` odd, indexed row-major."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"stencil weights must be square, got shape {w.shape}")
        if w.shape[0] % 2 == 0:
            raise DimensionError(f"stencil size must be odd, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("stencil weights must be finite")
        self.weights = w

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, k: int = 3) -> "Stencil":
        w = np.zeros((k, k))
        w[k // 2, k // 2] = 1.0
        return cls(w)

    @classmethod
    def zeros(cls, k: int = 3) -> "Stencil":
        return cls(np.zeros((k, k)))


@dataclass
class StencilBank:
    """All stencils of one layer: ``weights[c_out, c_in]`` is one window.

    Output-major storage, shape ``(c_out, c_in, k, k)``.
    """

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"bank weights must have shape (c_out, c_in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise DimensionError(f"stencil size must be odd, got {w.shape[2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("bank weights must be finite")
        self.weights = w

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def stencil(self, co: int, ci: int) -> Stencil:
        return Stencil(self.weights[co, ci].copy())

    def copy(self) -> "StencilBank":
        return StencilBank(self.weights.copy())

    @classmethod
    def identity(cls, channels: int, k: int = 3) -> "StencilBank":
        """Channel-wise identity: out = in."""
        w = np.zeros((channels, channels, k, k))
        w[np.arange(channels), np.arange(channels), k // 2, k // 2] = 1.0
        return cls(w)

    @classmethod
    def replicate(cls, c_out: int, k: int = 3) -> "StencilBank":
        """Copy a single input channel into ``c_out`` output channels."""
        w = np.zeros((c_out, 1, k, k))
        w[:, 0, k // 2, k // 2] = 1.0
        return cls(w)

    @classmethod
    def zeros(cls, c_out: int, c_in: int, k: int = 3) -> "StencilBank":
        return cls(np.zeros((c_out, c_in, k, k)))


def bank_apply(weights: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Apply a stencil bank to ``y`` with shape ``(..., c_in, ny, nx)``.

    Returns ``(..., c_out, ny, nx)``.  Leading axes (a batch, say) pass
    through untouched.  Direct tap-by-tap accumulation on a periodically
    padded array; no FFT involved.
    """
    weights = np.asarray(weights, dtype=np.float64)
    c_out, c_in, k, _ = weights.shape
    ny, nx = y.shape[-2:]
    if ny < k or nx < k:
        raise DimensionError(f"grid {ny}x{nx} is smaller than the {k}x{k} stencil")
    if y.shape[-3] != c_in:
        raise DimensionError(f"bank expects {c_in} input channels, got {y.shape[-3]}")
    r = k // 2
    pad = np.pad(y, [(0, 0)] * (y.ndim - 2) + [(r, r), (r, r)], mode="wrap")
    out = np.zeros(y.shape[:-3] + (c_out, ny, nx))
    for p in range(k):
        for q in range(k):
            window = pad[..., p : p + ny, q : q + nx]
            out += np.einsum("oi,...iyx->...oyx", weights[:, :, p, q], window, optimize=True)
    return out


def conv_apply(s: Stencil, img: Image) -> Image:
    """Periodic cross-correlation of an image with one stencil."""
    out = bank_apply(s.weights[None, None], img.values[None])
    return Image(img.grid, out[0])


@dataclass
class Symbol:
    """Circulant eigenvalues of a stencil operator on a fixed grid."""

    grid: Grid2D
    values: np.ndarray  # complex, shape (ny, nx)


def stencil_symbol(s: Stencil, grid: Grid2D) -> Symbol:
    """Eigenvalues of ``K(s)`` on ``grid``: the 2D DFT of the embedded stencil.

    The weights are zero-padded to the grid and shifted so the stencil center
    lands at the origin; ``fft2`` of that array enumerates the eigenvalues of
    the circulant operator, one per spatial frequency.
    """
    k, c = s.k, s.k // 2
    if grid.ny < k or grid.nx < k:
        raise DimensionError(f"grid {grid.ny}x{grid.nx} is smaller than the {k}x{k} stencil")
    embedded = np.zeros(grid.shape)
    embedded[:k, :k] = s.weights
    embedded = np.roll(embedded, (-c, -c), axis=(0, 1))
    return Symbol(grid, np.fft.fft2(embedded))


@dataclass(frozen=True)
class StabilityReport:
    """Spectral diagnostics of one forward-Euler step ``y + dt * K y``."""

    max_real: float
    spectral_radius_step: float


def stability_report(s: Stencil, grid: Grid2D, dt: float) -> StabilityReport:
    """Largest eigenvalue real part and step growth factor ``max |1 + dt*lam|``."""
    lam = stencil_symbol(s, grid).values
    return StabilityReport(
        max_real=float(lam.real.max()),
        spectral_radius_step=float(np.abs(1.0 + dt * lam).max()),
    )


@dataclass
class CoarsenMap:
    """Linear map from fine ``k x k`` stencils to coarse ones under ``R K P``.

    ``matrix`` acts on row-major flattened weights.  ``cond`` is its 2-norm
    condition number, fixed at construction.  ``truncation_mass`` is the
    total absolute weight of the exact coarse operator that fell outside the
    retained ``k x k`` window, accumulated over all unit-stencil probes
    (zero for CONSTANT_AVERAGE, whose coarse support is exactly ``k x k``).
    """

    k: int
    kind: TransferKind
    matrix: np.ndarray
    cond: float
    truncation_mass: float
    _inverse: np.ndarray | None = field(default=None, repr=False)

    def apply(self, weights: np.ndarray) -> np.ndarray:
        return (self.matrix @ weights.reshape(-1)).reshape(self.k, self.k)

    def solve(self, coarse_weights: np.ndarray) -> np.ndarray:
        if self.cond > COND_LIMIT or not np.isfinite(self.cond):
            raise IllPosedError(
                f"coarsening map is too ill-conditioned to invert (cond={self.cond:.3e})"
            )
        if self._inverse is None:
            try:
                self._inverse = np.linalg.inv(self.matrix)
            except np.linalg.LinAlgError as exc:
                raise IllPosedError(f"coarsening map is singular: {exc}") from exc
        return (self._inverse @ coarse_weights.reshape(-1)).reshape(self.k, self.k)


def build_coarsen_map(k: int, pair: TransferPair) -> CoarsenMap:
    """Materialize the stencil coarsening map for window size ``k``.

    Column ``j`` is produced operationally: place unit stencil ``e_j`` on a
    periodic reference grid of ``4k x 4k`` fine cells, apply prolongation,
    the stencil, then restriction to a coarse delta image, and read the
    resulting coarse stencil off around the delta.  The reference grid is
    large enough that the coarse operator's support never aliases, so the
    extracted columns are grid-independent.
    """
    if k < 1 or k % 2 == 0:
        raise DimensionError(f"stencil size must be odd and positive, got {k}")
    n_fine = 4 * k
    n_coarse = n_fine // 2
    c = k // 2
    mid = n_coarse // 2

    delta = np.zeros((n_coarse, n_coarse))
    delta[mid, mid] = 1.0
    fine_delta = prolong_values(delta, pair.kind)

    matrix = np.empty((k * k, k * k))
    truncation = 0.0
    probe = np.zeros((1, 1, k, k))
    for j in range(k * k):
        probe[0, 0].flat[j] = 1.0
        coarse_op = restrict_values(bank_apply(probe, fine_delta[None])[0], pair.kind)
        probe[0, 0].flat[j] = 0.0
        # (R K P) delta_m has entry a_d at position m - d: gather the window.
        col = np.empty((k, k))
        kept = np.zeros_like(coarse_op, dtype=bool)
        for p in range(k):
            for q in range(k):
                r, s_ = (mid - (p - c)) % n_coarse, (mid - (q - c)) % n_coarse
                col[p, q] = coarse_op[r, s_]
                kept[r, s_] = True
        truncation += float(np.abs(coarse_op[~kept]).sum())
        matrix[:, j] = col.reshape(-1)

    cond = float(np.linalg.cond(matrix))
    if cond > COND_LIMIT or not np.isfinite(cond):
        raise IllPosedError(f"coarsening map for k={k} is ill-posed (cond={cond:.3e})")
    return CoarsenMap(k=k, kind=pair.kind, matrix=matrix, cond=cond, truncation_mass=truncation)


def _check_k(m: CoarsenMap, k: int) -> None:
    if m.k != k:
        raise DimensionError(f"coarsening map is for k={m.k}, stencil has k={k}")


def coarsen_stencil(s: Stencil, m: CoarsenMap) -> Stencil:
    """Coarse-grid stencil of ``R K(s) P``."""
    _check_k(m, s.k)
    return Stencil(m.apply(s.weights))


def refine_stencil(s_coarse: Stencil, m: CoarsenMap) -> Stencil:
    """Fine-grid stencil whose Galerkin coarsening is ``s_coarse``."""
    _check_k(m, s_coarse.k)
    return Stencil(m.solve(s_coarse.weights))


def coarsen_bank(bank: StencilBank, m: CoarsenMap) -> StencilBank:
    """Coarsen every stencil of a bank, preserving channel structure."""
    _check_k(m, bank.k)
    flat = bank.weights.reshape(bank.c_out * bank.c_in, -1)
    coarse = flat @ m.matrix.T
    return StencilBank(coarse.reshape(bank.weights.shape))


def refine_bank(bank: StencilBank, m: CoarsenMap) -> StencilBank:
    """Refine every stencil of a bank, preserving channel structure."""
    _check_k(m, bank.k)
    out = np.empty_like(bank.weights)
    for co in range(bank.c_out):
        for ci in range(bank.c_in):
            out[co, ci] = m.solve(bank.weights[co, ci])
    return StencilBank(out)
