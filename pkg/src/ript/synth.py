"""Analytic surface samplers for small synthetic datasets.

Each sampler draws its own shape parameters (so instances of a class vary) and
returns points on the surface with exact outward normals.
"""

from __future__ import annotations

import numpy as np

from .geometry import OrientedPointSet

SHAPES = ("sphere", "box", "cylinder", "cone", "torus", "plane-cluster")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _pick_parts(areas, n, rng):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def sphere(n, rng):
    r = rng.uniform(0.8, 1.2)
    normals = _unit(rng.normal(size=(n, 3)))
    return r * normals, normals


def box(n, rng):
    half = rng.uniform(0.4, 1.0, size=3)
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = 4 * half[u] * half[v]
        faces += [(axis, 1.0, area), (axis, -1.0, area)]
    which = _pick_parts([f[2] for f in faces], n, rng)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    for i, (axis, sign, _) in enumerate(faces):
        sel = which == i
        pts[sel, axis] = sign * half[axis]
        normals[sel, axis] = sign
    return pts, normals


def cylinder(n, rng):
    r = rng.uniform(0.35, 0.7)
    h = rng.uniform(1.2, 2.0)
    which = _pick_parts([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r], n, rng)
    theta = rng.uniform(0, 2 * np.pi, n)
    rho = r * np.sqrt(rng.random(n))
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    side = which == 0
    pts[side] = np.stack([r * np.cos(theta[side]), r * np.sin(theta[side]), rng.uniform(-h / 2, h / 2, side.sum())], 1)
    normals[side] = np.stack([np.cos(theta[side]), np.sin(theta[side]), np.zeros(side.sum())], 1)
    for part, sign in ((1, 1.0), (2, -1.0)):
        sel = which == part
        pts[sel] = np.stack([rho[sel] * np.cos(theta[sel]), rho[sel] * np.sin(theta[sel]), np.full(sel.sum(), sign * h / 2)], 1)
        normals[sel, 2] = sign
    return pts, normals


def cone(n, rng):
    """Apex at +h/2 above a base disk of radius r at -h/2."""
    r = rng.uniform(0.5, 0.9)
    h = rng.uniform(1.0, 1.8)
    slant = np.hypot(r, h)
    which = _pick_parts([np.pi * r * slant, np.pi * r * r], n, rng)
    theta = rng.uniform(0, 2 * np.pi, n)
    t = np.sqrt(rng.random(n))  # distance fraction from the apex, area-uniform
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    lat = which == 0
    c, s = np.cos(theta[lat]), np.sin(theta[lat])
    pts[lat] = np.stack([r * t[lat] * c, r * t[lat] * s, h / 2 - h * t[lat]], 1)
    normals[lat] = np.stack([h * c, h * s, np.full(lat.sum(), r)], 1) / slant
    base = ~lat
    rho = r * t[base]
    pts[base] = np.stack([rho * np.cos(theta[base]), rho * np.sin(theta[base]), np.full(base.sum(), -h / 2)], 1)
    normals[base, 2] = -1.0
    return pts, normals


def torus(n, rng):
    R = rng.uniform(0.75, 1.0)
    r = rng.uniform(0.2, 0.35)
    u = np.empty(0)
    v = np.empty(0)
    # rejection sampling on the area element (R + r cos v)
    while len(u) < n:
        m = 2 * (n - len(u)) + 16
        cu = rng.uniform(0, 2 * np.pi, m)
        cv = rng.uniform(0, 2 * np.pi, m)
        keep = rng.random(m) * (R + r) < R + r * np.cos(cv)
        u = np.concatenate([u, cu[keep]])
        v = np.concatenate([v, cv[keep]])
    u, v = u[:n], v[:n]
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], 1)
    pts = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], 1)
    return pts, normals


def plane_cluster(n, rng):
    """Three square patches with random tilts stacked along z."""
    k = 3
    sides = rng.uniform(0.8, 1.4, k)
    which = _pick_parts(sides**2, n, rng)
    pts = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    for i in range(k):
        sel = which == i
        m = int(sel.sum())
        normal = _unit(np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.35, size=3))
        a = _unit(np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0]))
        b = np.cross(normal, a)
        uv = rng.uniform(-sides[i] / 2, sides[i] / 2, size=(m, 2))
        offset = np.array([0.0, 0.0, (i - 1) * 0.6]) + rng.normal(scale=0.1, size=3)
        pts[sel] = offset + uv[:, :1] * a + uv[:, 1:] * b
        normals[sel] = normal
    return pts, normals


_SAMPLERS = {
    "sphere": sphere,
    "box": box,
    "cylinder": cylinder,
    "cone": cone,
    "torus": torus,
    "plane-cluster": plane_cluster,
}


def sample_shape(name, n, rng) -> OrientedPointSet:
    if name not in _SAMPLERS:
        raise ValueError(f"unknown shape class {name!r} (choose from {', '.join(SHAPES)})")
    pts, normals = _SAMPLERS[name](n, rng)
    return OrientedPointSet(pts, _unit(normals), name)
