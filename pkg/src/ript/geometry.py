"""Oriented point sets and the deterministic geometric substrate.

Rotations act on row vectors: a point ``p`` maps to ``p @ R``. Every routine
here is a pure function of its inputs; randomness always comes from an
explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, FormatError, InsufficientPointsError

UNIT_TOL = 1e-6
# largest n*n for which fps precomputes the full distance table
_FPS_TABLE_LIMIT = 2048 * 2048


@dataclass(frozen=True)
class OrientedPointSet:
    points: np.ndarray
    orientations: np.ndarray
    label: str | None = None
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        o = np.asarray(self.orientations, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {p.shape}")
        if o.shape != p.shape:
            raise ValueError(f"orientations shape {o.shape} != points shape {p.shape}")
        if len(p) < 1:
            raise ValueError("an oriented point set needs at least one point")
        norms = np.linalg.norm(o, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("orientations must be unit vectors")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "orientations", o)

    def __len__(self):
        return len(self.points)

    def take(self, indices) -> "OrientedPointSet":
        idx = np.asarray(indices, dtype=np.int64)
        return OrientedPointSet(self.points[idx], self.orientations[idx], self.label)

    def with_points(self, points, orientations=None) -> "OrientedPointSet":
        o = self.orientations if orientations is None else orientations
        return OrientedPointSet(points, o, self.label)


def _unit_rows(v, what="vector"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateGeometryError(f"zero-length {what}")
    return v / n


# ---------------------------------------------------------------------------
# ingestion


def load_point_set(path, format=None, n_points=1024, seed=0, label=None) -> OrientedPointSet:
    """Read an XYZN text file or sample an OFF mesh.

    ``format`` is ``"xyzn"`` or ``"off"``; when omitted it is inferred from the
    file extension (``.off`` means mesh, anything else XYZN).
    """
    path = Path(path)
    if format is None:
        format = "off" if path.suffix.lower() == ".off" else "xyzn"
    format = format.lower().replace("-mesh", "").replace("-text", "")
    if format == "xyzn":
        return read_xyzn(path, label=label)
    if format == "off":
        vertices, faces = read_off(path)
        return sample_mesh(vertices, faces, n_points, np.random.default_rng(seed), label=label)
    raise ValueError(f"unknown point-set format {format!r}")


def read_xyzn(path, label=None) -> OrientedPointSet:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 6:
                raise FormatError(f"expected 6 values, found {len(parts)}", path, lineno)
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise FormatError(f"non-numeric value ({exc})", path, lineno) from None
    if not rows:
        raise FormatError("no points found", path)
    arr = np.asarray(rows)
    norms = np.linalg.norm(arr[:, 3:], axis=1)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(arr).all(axis=1))
    if len(bad):
        raise FormatError("zero-length or non-finite normal", path, _data_line(path, bad[0]))
    return OrientedPointSet(arr[:, :3], arr[:, 3:] / norms[:, None], label)


def _data_line(path, k):
    with open(path, "r", encoding="utf-8") as fh:
        seen = -1
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                seen += 1
                if seen == k:
                    return lineno
    return None


def write_xyzn(path, ps: OrientedPointSet):
    data = np.hstack([ps.points, ps.orientations])
    np.savetxt(path, data, fmt="%.17g")


def read_off(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(fh, start=1)]
    lines = [(i, s) for i, s in lines if s]
    if not lines or not lines[0][1].startswith("OFF"):
        raise FormatError("missing OFF header", path, lines[0][0] if lines else 1)
    header_rest = lines[0][1][3:].split()
    pos = 1
    if header_rest:
        counts_line, counts = lines[0][0], header_rest
    else:
        if len(lines) < 2:
            raise FormatError("missing vertex/face counts", path, 2)
        counts_line, counts = lines[1][0], lines[1][1].split()
        pos = 2
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise FormatError("bad vertex/face counts", path, counts_line) from None
    if len(lines) < pos + nv + nf:
        raise FormatError("file ends before all vertices/faces were read", path, lines[-1][0])
    vertices = np.empty((nv, 3))
    for j in range(nv):
        lineno, s = lines[pos + j]
        parts = s.split()
        try:
            vertices[j] = [float(x) for x in parts[:3]]
        except ValueError:
            raise FormatError("bad vertex", path, lineno) from None
        if len(parts) < 3:
            raise FormatError("bad vertex", path, lineno)
    faces = []
    for j in range(nf):
        lineno, s = lines[pos + nv + j]
        try:
            parts = [int(x) for x in s.split()]
        except ValueError:
            raise FormatError("bad face", path, lineno) from None
        if not parts or len(parts) < parts[0] + 1 or parts[0] < 3:
            raise FormatError("bad face", path, lineno)
        idx = parts[1 : parts[0] + 1]
        if min(idx) < 0 or max(idx) >= nv:
            raise FormatError("face references missing vertex", path, lineno)
        # fan triangulation
        for a in range(1, len(idx) - 1):
            faces.append((idx[0], idx[a], idx[a + 1]))
    return vertices, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def sample_mesh(vertices, faces, n, rng, label=None) -> OrientedPointSet:
    """Area-weighted uniform surface sampling; orientation is the face normal."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if len(f) == 0:
        raise DegenerateGeometryError("mesh has no faces")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(b - a, c - a)
    area2 = np.linalg.norm(cross, axis=1)
    total = area2.sum()
    if not total > 0:
        raise DegenerateGeometryError("mesh has zero surface area")
    tri = rng.choice(len(f), size=n, p=area2 / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri] + (r1 * r2)[:, None] * c[tri]
    normals = cross[tri] / area2[tri][:, None]
    return OrientedPointSet(pts, normals, label)


def read_manifest(path):
    """Parse ``relative/path<TAB>label`` lines; paths resolve against the manifest dir."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.rstrip("\n")
            if not s.strip() or s.lstrip().startswith("#"):
                continue
            parts = s.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise FormatError("expected 'path<TAB>label'", path, lineno)
            entries.append((base / parts[0], parts[1]))
    return entries


def write_manifest(path, entries):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rel, label in entries:
            fh.write(f"{Path(os.fspath(rel)).as_posix()}\t{label}\n")


# ---------------------------------------------------------------------------
# neighbourhoods


def pairwise_sq_dists(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn(query, points, k):
    """Indices of the ``k`` nearest points, ascending distance, ties by index.

    ``query`` may be a single coordinate or an ``(M, 3)`` array, in which case
    the result has shape ``(M, k)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if k > len(pts):
        raise ValueError(f"knn: k={k} exceeds number of points {len(pts)}")
    if k < 1:
        raise ValueError(f"knn: k must be positive, got {k}")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    d = pairwise_sq_dists(q.reshape(-1, 3), pts)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order[0] if single else order


def fps(points, count, start=0):
    """Greedy farthest point sampling; argmax picks the smallest index on ties."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if count > n:
        raise ValueError(f"fps: cannot select {count} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"fps: start index {start} out of range")
    out = np.empty(count, dtype=np.int64)
    if count == 0:
        return out
    out[0] = start
    table = pairwise_sq_dists(pts, pts) if n * n <= _FPS_TABLE_LIMIT else None

    def row(i):
        if table is not None:
            return table[i]
        diff = pts - pts[i]
        return np.einsum("ij,ij->i", diff, diff)

    mind = row(start).copy()
    for i in range(1, count):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        np.minimum(mind, row(nxt), out=mind)
    return out


# ---------------------------------------------------------------------------
# normals, pose, rotations


def _tie_sign(v):
    """+1/-1 making the z component positive (then y, then x when zero)."""
    for axis in (2, 1, 0):
        if v[axis] != 0:
            return 1.0 if v[axis] > 0 else -1.0
    return 1.0


def estimate_normals(points, k=16):
    """PCA normals over each point and its k nearest neighbours.

    The sign follows the majority rule: the normal is flipped so that more
    neighbour difference vectors have a positive projection on it than a
    negative one. Exact ties fall back to a +z-most orientation.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise InsufficientPointsError(f"estimate_normals needs more than k={k} points, got {n}")
    nbr = knn(pts, pts, k + 1)
    local = pts[nbr]  # (N, k+1, 3)
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    diffs = local - pts[:, None, :]
    proj = np.einsum("nki,ni->nk", diffs, normals)
    scale = np.linalg.norm(diffs, axis=2).max(axis=1, keepdims=True)
    proj[np.abs(proj) <= 1e-12 * np.maximum(scale, 1e-300)] = 0.0
    votes = np.sign(proj).sum(axis=1)
    for i in range(n):
        if votes[i] < 0 or (votes[i] == 0 and _tie_sign(normals[i]) < 0):
            normals[i] = -normals[i]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def normalize_pose(ps: OrientedPointSet) -> OrientedPointSet:
    centered = ps.points - ps.points.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if not scale > 0:
        raise DegenerateGeometryError("all points coincide; cannot normalize scale")
    return ps.with_points(centered / scale)


def random_rotation(rng) -> np.ndarray:
    """Haar-uniform rotation from a uniformly sampled unit quaternion."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    x, y = a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2)
    z, w = b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)
    return quaternion_to_matrix(w, x, y, z)


def quaternion_to_matrix(w, x, y, z):
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def apply_rotation(ps: OrientedPointSet, R) -> OrientedPointSet:
    R = np.asarray(R, dtype=np.float64)
    return OrientedPointSet(ps.points @ R, ps.orientations @ R, ps.label)
