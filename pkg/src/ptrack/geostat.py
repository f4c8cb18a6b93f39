"""Stationary Gaussian log-conductivity fields.

Fields are drawn by circulant embedding of the isotropic exponential
covariance ``C(h) = exp(-h / corr_len)`` on a periodic torus that is at least
twice the domain plus a few correlation lengths in each direction. Random
numbers come from numpy's PCG64 bit generator seeded with the user seed, so a
given ``(nx, ny, dx, dy, corr_len, seed)`` always yields the same bytes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

logger = logging.getLogger(__name__)

# relative size of negative embedding eigenvalues tolerated (then clipped)
NEG_EIG_TOL = 1e-10
MAX_EMBED_TRIES = 6


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianField:
    values: np.ndarray  # shape (ny, nx)
    corr_len: float
    seed: int
    dx: float = 1.0
    dy: float = 1.0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ConductivityField:
    K: np.ndarray
    sigma2: float


def _torus_size(n: int, spacing: float, corr_len: float, pad_factor: float) -> int:
    pad = int(np.ceil(pad_factor * corr_len / spacing))
    return scipy.fft.next_fast_len(2 * (n + pad))


def _embedding_eigenvalues(mx, my, dx, dy, corr_len):
    ix = np.minimum(np.arange(mx), mx - np.arange(mx)) * dx
    iy = np.minimum(np.arange(my), my - np.arange(my)) * dy
    h = np.hypot(iy[:, None], ix[None, :])
    base = np.exp(-h / corr_len)
    return scipy.fft.fft2(base).real


def generate_field(nx, ny, dx=1.0, dy=1.0, corr_len=10.0, seed=0, pad_factor=4.0) -> GaussianField:
    """Zero-mean, unit-variance field with exponential covariance.

    Raises:
        EmbeddingError: if no tried torus size gives a nonnegative spectrum.
    """
    if not corr_len > 0:
        raise ValueError(f"corr_len must be positive, got {corr_len}")
    if nx < 1 or ny < 1:
        raise ValueError(f"field dimensions must be positive, got {nx}x{ny}")
    history = []
    for attempt in range(MAX_EMBED_TRIES):
        pf = pad_factor * 2**attempt
        mx = _torus_size(nx, dx, corr_len, pf)
        my = _torus_size(ny, dy, corr_len, pf)
        lam = _embedding_eigenvalues(mx, my, dx, dy, corr_len)
        worst = lam.min() / lam.max()
        history.append((mx, my, worst))
        if worst >= -NEG_EIG_TOL:
            break
    else:
        raise EmbeddingError(
            "circulant embedding has negative eigenvalues for all tried torus sizes "
            + ", ".join(f"{mx}x{my}: min/max={w:.3e}" for mx, my, w in history)
        )
    lam = np.clip(lam, 0.0, None)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
    z = scipy.fft.fft2(np.sqrt(lam / (mx * my)) * noise)
    values = np.ascontiguousarray(z.real[:ny, :nx])
    return GaussianField(values, float(corr_len), int(seed), float(dx), float(dy))


def scale_to_conductivity(field, sigma2: float) -> ConductivityField:
    """``K = exp(sqrt(sigma2) * Y)``; the same Y keeps its pattern for every sigma2."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    y = field.values if isinstance(field, GaussianField) else np.asarray(field, dtype=np.float64)
    return ConductivityField(np.exp(np.sqrt(sigma2) * y), float(sigma2))


def empirical_variogram(field, lags, dx=None, dy=None):
    """Method-of-moments semivariance along the x and y axes.

    Lags are in length units and are rounded to whole cell offsets; pairs in
    both axis directions are pooled. Returns ``(gamma, npairs)``; lags with no
    pairs get ``nan`` and a zero count.
    """
    if isinstance(field, GaussianField):
        y = field.values
        dx = field.dx if dx is None else dx
        dy = field.dy if dy is None else dy
    else:
        y = np.asarray(field, dtype=np.float64)
        dx = 1.0 if dx is None else dx
        dy = dx if dy is None else dy
    lags = np.atleast_1d(np.asarray(lags, dtype=np.float64))
    gamma = np.full(lags.shape, np.nan)
    npairs = np.zeros(lags.shape, dtype=np.int64)
    for n, h in enumerate(lags):
        sx = int(round(h / dx))
        sy = int(round(h / dy))
        acc = 0.0
        cnt = 0
        if sx == 0 and sy == 0:
            gamma[n] = 0.0
            npairs[n] = y.size
            continue
        if 0 < sx < y.shape[1]:
            d = y[:, sx:] - y[:, :-sx]
            acc += float(np.sum(d * d))
            cnt += d.size
        if 0 < sy < y.shape[0]:
            d = y[sy:, :] - y[:-sy, :]
            acc += float(np.sum(d * d))
            cnt += d.size
        if cnt:
            gamma[n] = 0.5 * acc / cnt
            npairs[n] = cnt
        else:
            logger.warning("no pairs for lag %g", h)
    return gamma, npairs


def save_field(field: GaussianField, path) -> None:
    ny, nx = field.values.shape
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny} {field.dx!r} {field.dy!r}\n")
        fh.write("\n".join(f"{v:.17g}" for v in field.values.ravel()))
        fh.write("\n")


def load_field(path, corr_len=float("nan"), seed=-1) -> GaussianField:
    lines = Path(path).read_text().split("\n")
    try:
        nx, ny, dx, dy = lines[0].split()
        nx, ny = int(nx), int(ny)
    except ValueError:
        raise ValueError(f"{path}: malformed field header {lines[0]!r}") from None
    vals = np.array([float(v) for v in lines[1:] if v.strip()])
    if vals.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {vals.size}")
    return GaussianField(vals.reshape(ny, nx), corr_len, seed, float(dx), float(dy))
