"""Training views: kNN crops, nearest/farthest cut-mix and anisotropic scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import geometry
from ..geometry import OrientedPointSet

GLOBAL_CROP = (0.6, 1.0)
LOCAL_CROP = (0.4, 0.6)
SCALE_RANGE = (0.67, 1.5)


@dataclass
class ViewBundle:
    G1: OrientedPointSet
    G2: OrientedPointSet
    L1: OrientedPointSet | None
    L2: OrientedPointSet | None
    mixed: OrientedPointSet | None
    m: float
    partner_index: int


def resample(ps: OrientedPointSet, size, rng) -> OrientedPointSet:
    """Random subsample without replacement, or tile plus a random remainder."""
    n = len(ps)
    if n >= size:
        idx = np.sort(rng.choice(n, size=size, replace=False))
    else:
        reps, rest = divmod(size, n)
        idx = np.concatenate([np.tile(np.arange(n), reps), np.sort(rng.choice(n, size=rest, replace=False))])
    return ps.take(idx)


def crop(ps: OrientedPointSet, ratio, seed_index):
    """The ``floor(ratio * n)`` nearest points of point ``seed_index``."""
    n = len(ps)
    keep = max(1, int(np.floor(ratio * n)))
    return geometry.knn(ps.points[seed_index], ps.points, keep)


def crop_view(ps, ratio_range, size, rng) -> OrientedPointSet:
    seed = int(rng.integers(len(ps)))
    ratio = rng.uniform(*ratio_range)
    return resample(ps.take(crop(ps, ratio, seed)), size, rng)


def multi_crop(A: OrientedPointSet, rng, global_points=1024, local_points=512,
               global_crop=GLOBAL_CROP, local_crop=LOCAL_CROP, locals_=True):
    """Two global and (optionally) two local crops of a pose-normalized set."""
    g1 = crop_view(A, global_crop, global_points, rng)
    g2 = crop_view(A, global_crop, global_points, rng)
    if not locals_:
        return g1, g2, None, None
    l1 = crop_view(A, local_crop, local_points, rng)
    l2 = crop_view(A, local_crop, local_points, rng)
    return g1, g2, l1, l2


def cut_mix_with(A: OrientedPointSet, B_rotated: OrientedPointSet, m, ref_index) -> OrientedPointSet:
    """Union of A's floor(m*n) points nearest to A[ref_index] and B's n - floor(m*n) farthest."""
    n = len(A)
    if len(B_rotated) != n:
        raise ValueError(f"cut_mix: |A|={n} but |B|={len(B_rotated)}")
    na = int(np.floor(m * n))
    p = A.points[ref_index]
    near = geometry.knn(p, A.points, na) if na > 0 else np.empty(0, dtype=np.int64)
    d = np.einsum("ij,ij->i", B_rotated.points - p, B_rotated.points - p)
    far = np.argsort(-d, kind="stable")[: n - na]
    pts = np.concatenate([A.points[near], B_rotated.points[far]])
    ori = np.concatenate([A.orientations[near], B_rotated.orientations[far]])
    return OrientedPointSet(pts, ori, A.label)


def cut_mix(A: OrientedPointSet, B: OrientedPointSet, rng):
    """Mixed view of A with a randomly rotated B; returns ``(M_AB, m)``."""
    R = geometry.random_rotation(rng)
    m = float(rng.uniform(0.0, 1.0))
    ref = int(rng.integers(len(A)))
    return cut_mix_with(A, geometry.apply_rotation(B, R), m, ref), m


def anisotropic_scale(view: OrientedPointSet, axes, factors) -> OrientedPointSet:
    """Scale along the rows of ``axes``; normals use the inverse transpose."""
    Q = np.asarray(axes, dtype=np.float64)
    f = np.asarray(factors, dtype=np.float64)
    S = Q.T @ np.diag(f) @ Q
    S_inv_t = Q.T @ np.diag(1.0 / f) @ Q  # symmetric, so equal to its transpose
    pts = view.points @ S
    ori = view.orientations @ S_inv_t
    ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    return OrientedPointSet(pts, ori, view.label)


def aniso_scale(view: OrientedPointSet, rng, scale_range=SCALE_RANGE):
    axes = geometry.random_rotation(rng)
    factors = rng.uniform(scale_range[0], scale_range[1], size=3)
    return anisotropic_scale(view, axes, factors)


def make_bundle(A, B, partner_index, rng, global_points=1024, local_points=512,
                global_crop=GLOBAL_CROP, local_crop=LOCAL_CROP, scale_range=SCALE_RANGE,
                use_local=True, use_mixed=True) -> ViewBundle:
    g1, g2, l1, l2 = multi_crop(A, rng, global_points, local_points, global_crop, local_crop, use_local)
    mixed, m = (None, 0.0)
    if use_mixed:
        mixed, m = cut_mix(A, B, rng)
        if len(mixed) != global_points:
            mixed = resample(mixed, global_points, rng)
    scaled = [None if v is None else aniso_scale(v, rng, scale_range) for v in (g1, g2, l1, l2, mixed)]
    return ViewBundle(*scaled, m=m, partner_index=partner_index)
