"""Rotation-invariant tokenization of an oriented point set.

Each token point gets a local reference frame (its orientation plus a
distance-weighted PCA direction), the token's region is expressed in that
frame and summarised on a regular grid, and the flattened grid passes through
a single shared affine projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .autodiff import Tensor
from .geometry import OrientedPointSet
from .layers import Linear, Module

CHANNELS = 10
# relative coordinate magnitude treated as lying exactly on the frame plane
_SNAP = 1e-9
_PROJ_EPS = 1e-9

ORIENTATION_STATS = ("second_moment", "covariance")


@dataclass
class TokenizerConfig:
    token_count: int = 256
    grid: int = 6
    width: int = 512
    region_scale: float = 1.0
    orientation_stat: str = "second_moment"

    @property
    def descriptor_size(self):
        return self.grid**3 * CHANNELS

    def validate(self):
        from .errors import ConfigError

        if int(self.token_count) != self.token_count or self.token_count < 1:
            raise ConfigError("tokenizer.token_count", f"must be a positive integer, got {self.token_count}")
        if int(self.grid) != self.grid or self.grid < 1:
            raise ConfigError("tokenizer.grid", f"must be a positive integer, got {self.grid}")
        if int(self.width) != self.width or self.width < 1:
            raise ConfigError("tokenizer.width", f"must be a positive integer, got {self.width}")
        if not 0 < self.region_scale <= 1:
            raise ConfigError("tokenizer.region_scale", f"must lie in (0, 1], got {self.region_scale}")
        if self.orientation_stat not in ORIENTATION_STATS:
            raise ConfigError("tokenizer.orientation_stat", f"must be one of {ORIENTATION_STATS}")
        return self


@dataclass(frozen=True)
class Lrf:
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    degenerate: bool = False

    @property
    def R(self):
        return np.stack([self.u1, self.u2, self.u3])


@dataclass
class PodGrid:
    values: np.ndarray  # (G, G, G, 10)

    @property
    def grid(self):
        return self.values.shape[0]

    @property
    def flat(self):
        return self.values.reshape(-1)

    @property
    def count_fraction(self):
        return self.values[..., 0]

    @property
    def mean_coords(self):
        return self.values[..., 1:4]

    def orientation_moment(self, ix, iy, iz):
        xx, xy, xz, yy, yz, zz = self.values[ix, iy, iz, 4:]
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


@dataclass
class TokenSet:
    """Token points ``(..., T, 3)`` with token features ``(..., T, D)``."""

    token_points: np.ndarray
    token_feats: object  # Tensor or ndarray

    def __post_init__(self):
        tp = np.asarray(self.token_points)
        nf = self.token_feats.shape[-2]
        if tp.shape[-2] != nf:
            raise ValueError(f"{tp.shape[-2]} token points but {nf} token features")
        if nf < 1:
            raise ValueError("a token set needs at least one token")

    def __len__(self):
        return self.token_points.shape[-2]

    @property
    def feats(self):
        f = self.token_feats
        return f.data if isinstance(f, Tensor) else np.asarray(f)


@dataclass
class TokenDescription:
    """Parameter-free part of tokenization: token points and flattened grids."""

    token_indices: np.ndarray
    token_points: np.ndarray
    descriptors: np.ndarray
    degenerate: np.ndarray


# ---------------------------------------------------------------------------
# local reference frames


def _gram_schmidt(u1):
    for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        v = axis - (axis @ u1) * u1
        n = np.linalg.norm(v)
        if n >= _PROJ_EPS:
            return v / n
    raise AssertionError("unreachable: a unit vector cannot be parallel to both x and y")


def _lrf_batch(rel, u1):
    """Frames for T tokens.

    rel: (T, m, 3) region offsets from each token point; u1: (T, 3) unit.
    Returns rows-stacked frames (T, 3, 3), region radii (T,), degenerate (T,).
    """
    T = rel.shape[0]
    d = np.linalg.norm(rel, axis=2)
    r = d.max(axis=1)
    w = r[:, None] - d
    wsum = w.sum(axis=1)
    ok = wsum > 0
    safe = np.where(ok, wsum, 1.0)
    M = np.einsum("tm,tmi,tmj->tij", w, rel, rel) / safe[:, None, None]
    _, vecs = np.linalg.eigh(M)

    def project(v):
        p = v - np.einsum("ti,ti->t", v, u1)[:, None] * u1
        return p, np.linalg.norm(p, axis=1)

    u2, n2 = project(vecs[:, :, 1])
    alt, n3 = project(vecs[:, :, 2])
    use_alt = n2 < _PROJ_EPS
    u2 = np.where(use_alt[:, None], alt, u2)
    n2 = np.where(use_alt, n3, n2)
    degenerate = ~ok | (n2 < _PROJ_EPS)
    n2 = np.where(degenerate, 1.0, n2)
    u2 = u2 / n2[:, None]
    for t in np.flatnonzero(degenerate):
        u2[t] = _gram_schmidt(u1[t])

    proj = np.einsum("tmi,ti->tm", rel, u2)
    proj[np.abs(proj) <= 1e-12 * np.maximum(r, 1e-300)[:, None]] = 0.0
    votes = np.sign(proj).sum(axis=1)
    flip = votes < 0
    for t in np.flatnonzero(votes == 0):
        nz = np.flatnonzero(np.abs(u2[t]) > 1e-12)
        flip[t] = u2[t, nz[0]] < 0
    u2[flip] = -u2[flip]
    u3 = np.cross(u1, u2)
    R = np.stack([u1, u2, u3], axis=1)
    assert R.shape == (T, 3, 3)
    return R, r, degenerate


def compute_lrf(ps: OrientedPointSet, region, c_index) -> Lrf:
    """Frame at token point ``c_index`` from the points listed in ``region``."""
    region = np.asarray(region, dtype=np.int64)
    if region.size == 0:
        raise ValueError("compute_lrf: empty region")
    c = ps.points[c_index]
    u1 = ps.orientations[c_index] / np.linalg.norm(ps.orientations[c_index])
    rel = (ps.points[region] - c)[None]
    R, _, degenerate = _lrf_batch(rel, u1[None])
    return Lrf(R[0, 0], R[0, 1], R[0, 2], bool(degenerate[0]))


# ---------------------------------------------------------------------------
# position-and-orientation grid


_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def _pod_batch(local, local_orient, radius, grid, orientation_stat="second_moment"):
    """Grid descriptors for T regions already expressed in their frames.

    local, local_orient: (T, m, 3); radius: (T,) positive. Returns (T, G^3*10).
    """
    T, m, _ = local.shape
    G = grid
    ncell = G**3
    ratio = local / radius[:, None, None]
    ratio = np.where(np.abs(ratio) < _SNAP, 0.0, ratio)
    cell = np.clip(np.floor((ratio + 1.0) * (G / 2.0)).astype(np.int64), 0, G - 1)
    flat = (cell[..., 0] * G + cell[..., 1]) * G + cell[..., 2]
    key = (flat + np.arange(T)[:, None] * ncell).ravel()
    size = T * ncell

    def binsum(values):
        return np.bincount(key, weights=values.ravel(), minlength=size)

    counts = np.bincount(key, minlength=size).astype(np.float64)
    out = np.zeros((size, CHANNELS))
    out[:, 0] = counts / m
    filled = counts > 0
    inv = np.where(filled, 1.0 / np.where(filled, counts, 1.0), 0.0)
    for k in range(3):
        out[:, 1 + k] = binsum(local[..., k]) * inv
    for j, (a, b) in enumerate(_TRIU):
        out[:, 4 + j] = binsum(local_orient[..., a] * local_orient[..., b]) * inv
    if orientation_stat == "covariance":
        mo = np.stack([binsum(local_orient[..., k]) * inv for k in range(3)], axis=1)
        for j, (a, b) in enumerate(_TRIU):
            out[:, 4 + j] -= mo[:, a] * mo[:, b]
    return out.reshape(T, ncell * CHANNELS)


def pod_descriptor(points, orientations, radius, grid=6, orientation_stat="second_moment") -> PodGrid:
    """Describe points (already in frame coordinates) on a grid over [-r, r]^3.

    Points on or beyond the boundary are clamped into the outermost cells.
    """
    if not radius > 0:
        raise ValueError(f"pod_descriptor: radius must be positive, got {radius}")
    if isinstance(points, OrientedPointSet):
        points, orientations = points.points, points.orientations
    p = np.asarray(points, dtype=np.float64)[None]
    o = np.asarray(orientations, dtype=np.float64)[None]
    flat = _pod_batch(p, o, np.array([float(radius)]), grid, orientation_stat)
    return PodGrid(flat.reshape(grid, grid, grid, CHANNELS))


# ---------------------------------------------------------------------------
# tokenization


def describe(ps: OrientedPointSet, cfg: TokenizerConfig, start=0) -> TokenDescription:
    """FPS token points, frames and flattened grids for one point set."""
    n = len(ps)
    T = cfg.token_count
    if n < T:
        raise ValueError(f"tokenize: {n} points cannot provide {T} tokens")
    idx = geometry.fps(ps.points, T, start)
    c = ps.points[idx]
    m = n if cfg.region_scale >= 1 else max(1, int(np.floor(cfg.region_scale * n)))
    if m == n:
        region = np.broadcast_to(np.arange(n), (T, n))
    else:
        region = geometry.knn(c, ps.points, m)
    rel = ps.points[region] - c[:, None, :]
    u1 = ps.orientations[idx]
    u1 = u1 / np.linalg.norm(u1, axis=1, keepdims=True)
    R, r, degenerate = _lrf_batch(rel, u1)
    Rt = np.swapaxes(R, 1, 2)
    local = rel @ Rt
    local_o = ps.orientations[region] @ Rt
    radius = np.where(r > 0, r, 1.0)
    desc = _pod_batch(local, local_o, radius, cfg.grid, cfg.orientation_stat)
    return TokenDescription(idx, c, desc, degenerate)


class RITokenizer(Module):
    """Trainable half of the tokenizer: the shared grid-to-token projection."""

    def __init__(self, cfg: TokenizerConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.proj = Linear(cfg.descriptor_size, cfg.width, rng, dtype, init="uniform")

    def describe(self, ps, start=0):
        return describe(ps, self.cfg, start)

    def project(self, descriptors):
        """(..., T, G^3*10) array -> (..., T, D) Tensor."""
        d = np.asarray(descriptors, dtype=self.proj.weight.dtype)
        return self.proj(Tensor(d))

    def __call__(self, ps, rng=None, start=None) -> TokenSet:
        return tokenize(ps, self, rng, start)


def tokenize(ps: OrientedPointSet, tokenizer: RITokenizer, rng=None, start=None) -> TokenSet:
    """Token set for one point set.

    The FPS start index is drawn from ``rng`` when given, otherwise it is
    ``start`` (default 0).
    """
    if start is None:
        start = int(rng.integers(len(ps))) if rng is not None else 0
    desc = tokenizer.describe(ps, start)
    return TokenSet(desc.token_points, tokenizer.project(desc.descriptors))
