"""Set encoders: deep-set sums, Gaussian set convolutions, and the uniform
grid both convolutional model families discretise onto.

The `*_batch` functions operate on padded, masked batches of autodiff
tensors and are the single implementation the models use; the unbatched
wrappers expose the same math on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "Discretisation", "FunctionalEncoding", "make_grid",
    "deepset_encode", "setconv_encode", "setconv_decode",
    "setconv_encode_batch", "setconv_decode_batch",
    "canonical_context_order",
    "DENSITY_EPS",
]

DENSITY_EPS = 1e-8


@dataclass(frozen=True)
class Discretisation:
    """Uniform internal grid: density in points per unit plus an outer margin."""

    points_per_unit: float = 64.0
    margin: float = 0.1

    def __post_init__(self):
        if not self.points_per_unit > 0:
            raise ValueError("points_per_unit must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_unit


def make_grid(disc: Discretisation, x_all) -> np.ndarray:
    """Uniform grid covering [min(x) - margin, max(x) + margin].

    Spacing is exactly 1/points_per_unit; the upper endpoint is rounded
    outward so the span is covered.  An empty input spans [-margin, margin]
    about zero.
    """
    x_all = np.asarray(x_all, float)
    if x_all.size == 0:
        lo, hi = -disc.margin, disc.margin
    else:
        lo, hi = float(x_all.min()) - disc.margin, float(x_all.max()) + disc.margin
    h = disc.spacing
    # Tiny slack so spans that are an exact multiple of the spacing do not
    # gain a point through round-off.
    n_cells = int(np.ceil((hi - lo) / h - 1e-9))
    return lo + h * np.arange(n_cells + 1)


@dataclass
class FunctionalEncoding:
    """Channel values on a uniform grid."""

    grid: np.ndarray
    channels: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        self.channels = np.asarray(self.channels, float)
        if self.channels.ndim != 2 or self.channels.shape[1] != self.grid.shape[0]:
            raise ValueError(
                f"channels {self.channels.shape} do not match grid of {self.grid.shape[0]} points"
            )
        if self.grid.shape[0] > 1:
            steps = np.diff(self.grid)
            if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
                raise ValueError("grid must be strictly increasing and uniformly spaced")


def canonical_context_order(x_c, y_c):
    """Sort context points by (x, y) so set summations are order independent."""
    x_c, y_c = np.asarray(x_c, float), np.asarray(y_c, float)
    order = np.lexsort((y_c, x_c))
    return x_c[order], y_c[order]


def deepset_encode(x_c, y_c, phi, width: int = 256) -> np.ndarray:
    """Sum-pooled encoding: z = sum_i phi(x_i, y_i), zero vector for empty sets.

    `phi` maps a pair to a vector; `width` fixes the output length when the
    context is empty.
    """
    x_c, y_c = canonical_context_order(x_c, y_c)
    if x_c.size == 0:
        return np.zeros(width)
    parts = [np.asarray(phi(x, y), float) for x, y in zip(x_c, y_c)]
    return np.sum(parts, axis=0)


def _gauss_weights(diff2: np.ndarray, lengthscale) -> ad.Tensor:
    """exp(-diff2 / (2 l^2)) with `lengthscale` possibly a trainable tensor."""
    ls = ad.as_tensor(lengthscale)
    inv = ad.div(-0.5, ad.mul(ls, ls))
    return ad.exp(ad.mul(ad.Tensor(diff2), inv))


def setconv_encode_batch(x_c: np.ndarray, y_c: np.ndarray, mask: np.ndarray,
                         grid: np.ndarray, lengthscale, divide: bool) -> ad.Tensor:
    """Data and density channels on the grid for a padded batch.

    x_c, y_c, mask: (B, N) with mask zero on padding.  Returns a tensor
    (B, 2, K): data channel first (divided by density + eps when `divide`),
    density channel second.
    """
    b, n = x_c.shape
    k = grid.shape[0]
    diff2 = (x_c[:, :, None] - grid[None, None, :]) ** 2
    w = _gauss_weights(diff2, lengthscale)
    w = ad.mul(w, mask[:, :, None])
    density = ad.tsum(w, axis=1)                                # (B, K)
    data = ad.tsum(ad.mul(w, y_c[:, :, None]), axis=1)          # (B, K)
    if divide:
        data = ad.div(data, ad.add(density, DENSITY_EPS))
    return ad.concat([ad.reshape(data, (b, 1, k)), ad.reshape(density, (b, 1, k))], axis=1)


def setconv_decode_batch(values: ad.Tensor, grid: np.ndarray, x_q: np.ndarray,
                         lengthscale) -> ad.Tensor:
    """Smooth grid channel values (B, C, K) onto query points (B, M) -> (B, C, M)."""
    diff2 = (grid[None, :, None] - x_q[:, None, :]) ** 2        # (B, K, M)
    w = _gauss_weights(diff2, lengthscale)
    return ad.matmul(values, w)


def setconv_encode(x_c, y_c, grid, lengthscale, divide: bool) -> FunctionalEncoding:
    """Single-task set convolution onto a grid (numpy in, numpy out)."""
    x_c, y_c = canonical_context_order(x_c, y_c)
    grid = np.asarray(grid, float)
    with ad.no_grad():
        channels = setconv_encode_batch(
            x_c[None, :], y_c[None, :], np.ones((1, x_c.shape[0])), grid, lengthscale, divide
        )
    return FunctionalEncoding(grid, channels.data[0])


def setconv_decode(values, grid, x_query, lengthscale) -> np.ndarray:
    """Evaluate grid channel values (C, K) at queries: out(x) = sum_k v_k exp(...)."""
    values = np.asarray(values, float)
    x_query = np.asarray(x_query, float)
    with ad.no_grad():
        out = setconv_decode_batch(ad.Tensor(values[None]), np.asarray(grid, float),
                                   x_query[None, :], lengthscale)
    return out.data[0]
