"""Primitive solids (box, cylinder, sphere): signed distance, normals and ray hits.

Boxes are given by full extents, cylinders by (radius, height) with their axis
along local z, spheres by (radius,). All primitives are centered on their local
origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ofa.geom import Pose, inverse

KINDS = ("box", "cylinder", "sphere")
_EPS = 1e-9


@dataclass(frozen=True)
class Shape:
    kind: str
    size: tuple

    def __post_init__(self):
        expected = {"box": 3, "cylinder": 2, "sphere": 1}
        if self.kind not in expected:
            raise ValueError(f"Unknown primitive {self.kind!r}; expected one of {KINDS}")
        size = tuple(float(v) for v in self.size)
        if len(size) != expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} dimensions, got {len(size)}")
        if not all(v > 0 for v in size):
            raise ValueError(f"{self.kind} dimensions must be positive, got {size}")
        object.__setattr__(self, "size", size)

    @property
    def half_extents(self) -> np.ndarray:
        """Half extents of the local axis-aligned bounding box."""
        if self.kind == "box":
            return np.asarray(self.size) / 2.0
        if self.kind == "cylinder":
            r, h = self.size
            return np.array([r, r, h / 2.0])
        r = self.size[0]
        return np.array([r, r, r])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": list(self.size)}

    @classmethod
    def from_dict(cls, values: dict) -> "Shape":
        return cls(values["kind"], tuple(values["size"]))


def box(sx: float, sy: float, sz: float) -> Shape:
    return Shape("box", (sx, sy, sz))


def cylinder(radius: float, height: float) -> Shape:
    return Shape("cylinder", (radius, height))


def sphere(radius: float) -> Shape:
    return Shape("sphere", (radius,))


# Signed distance


def _box2d(qa: np.ndarray, qb: np.ndarray):
    """Distance terms for a 2-axis box: outside norm, inside max, clamped components."""
    ca, cb = np.maximum(qa, 0.0), np.maximum(qb, 0.0)
    outside = np.sqrt(ca * ca + cb * cb)
    inside = np.minimum(np.maximum(qa, qb), 0.0)
    return outside, inside, ca, cb


def signed_distance(shape: Shape, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance and outward unit normal of the closest surface point, in the local frame."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if shape.kind == "sphere":
        norm = np.linalg.norm(p, axis=1)
        normal = np.where(norm[:, None] > _EPS, p / np.maximum(norm, _EPS)[:, None], [0.0, 0.0, 1.0])
        return norm - shape.size[0], normal

    sign = np.where(p >= 0.0, 1.0, -1.0)
    if shape.kind == "box":
        q = np.abs(p) - shape.half_extents
        clamped = np.maximum(q, 0.0)
        outside = np.linalg.norm(clamped, axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        face = np.eye(3)[np.argmax(q, axis=1)] * sign
        with np.errstate(invalid="ignore", divide="ignore"):
            out_normal = clamped * sign / outside[:, None]
        normal = np.where((outside > _EPS)[:, None], out_normal, face)
        return outside + inside, normal

    r, h = shape.size
    rho = np.hypot(p[:, 0], p[:, 1])
    radial = np.zeros_like(p)
    safe = rho > _EPS
    radial[safe, 0] = p[safe, 0] / rho[safe]
    radial[safe, 1] = p[safe, 1] / rho[safe]
    radial[~safe, 0] = 1.0
    axial = np.zeros_like(p)
    axial[:, 2] = sign[:, 2]
    qa, qb = rho - r, np.abs(p[:, 2]) - h / 2.0
    outside, inside, ca, cb = _box2d(qa, qb)
    with np.errstate(invalid="ignore", divide="ignore"):
        out_normal = (radial * ca[:, None] + axial * cb[:, None]) / outside[:, None]
    in_normal = np.where((qa > qb)[:, None], radial, axial)
    normal = np.where((outside > _EPS)[:, None], out_normal, in_normal)
    return outside + inside, normal


# Ray casting


def ray_intersect(shape: Shape, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive ray parameter t (inf on a miss) and the surface normal at the hit, local frame.

    Rays are o + t·d with d not necessarily unit length.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if len(o) == 1 and len(d) > 1:
        o = np.broadcast_to(o, d.shape)
    n = len(d)
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))

    with np.errstate(invalid="ignore", divide="ignore"):
        if shape.kind == "sphere":
            r = shape.size[0]
            a = np.einsum("ij,ij->i", d, d)
            b = 2.0 * np.einsum("ij,ij->i", o, d)
            c = np.einsum("ij,ij->i", o, o) - r * r
            disc = b * b - 4.0 * a * c
            root = np.sqrt(np.maximum(disc, 0.0))
            near = (-b - root) / (2.0 * a)
            far = (-b + root) / (2.0 * a)
            hit_t = np.where(near > _EPS, near, far)
            hit = (disc >= 0.0) & (hit_t > _EPS)
            t[hit] = hit_t[hit]
            normal[hit] = (o[hit] + t[hit, None] * d[hit]) / r
            return t, normal

        if shape.kind == "box":
            h = shape.half_extents
            t1 = (-h - o) / d
            t2 = (h - o) / d
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            lo = np.where(np.isnan(lo), -np.inf, lo)
            hi = np.where(np.isnan(hi), np.inf, hi)
            t_near = lo.max(axis=1)
            t_far = hi.min(axis=1)
            hit = (t_near <= t_far) & (t_far > _EPS)
            entering = t_near > _EPS
            hit_t = np.where(entering, t_near, t_far)
            axis_near = np.argmax(lo, axis=1)
            axis_far = np.argmin(hi, axis=1)
            axis = np.where(entering, axis_near, axis_far)
            rows = np.arange(n)
            step = np.sign(d[rows, axis])
            face = np.zeros((n, 3))
            face[rows, axis] = np.where(entering, -step, step)
            t[hit] = hit_t[hit]
            normal[hit] = face[hit]
            return t, normal

        r, height = shape.size
        hh = height / 2.0
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
        disc = b * b - 4.0 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        candidates = []
        for side_t in ((-b - root) / (2.0 * a), (-b + root) / (2.0 * a)):
            z = o[:, 2] + side_t * d[:, 2]
            ok = (disc >= 0.0) & (a > _EPS) & (side_t > _EPS) & (np.abs(z) <= hh)
            candidates.append((np.where(ok, side_t, np.inf), "side"))
        for cap in (hh, -hh):
            cap_t = (cap - o[:, 2]) / d[:, 2]
            x = o[:, 0] + cap_t * d[:, 0]
            y = o[:, 1] + cap_t * d[:, 1]
            ok = (cap_t > _EPS) & (x * x + y * y <= r * r)
            candidates.append((np.where(ok, cap_t, np.inf), cap))
        stack = np.stack([np.nan_to_num(c, nan=np.inf) for c, _ in candidates])
        best = np.argmin(stack, axis=0)
        best_t = stack[best, np.arange(n)]
        hit = np.isfinite(best_t)
        t[hit] = best_t[hit]
        points = o + np.where(hit, best_t, 0.0)[:, None] * d
        side = hit & (best <= 1)
        normal[side, 0] = points[side, 0] / r
        normal[side, 1] = points[side, 1] / r
        normal[hit & (best == 2), 2] = 1.0
        normal[hit & (best == 3), 2] = -1.0
        return t, normal


@dataclass(frozen=True, eq=False)
class Obstacle:
    """A primitive placed in the world."""

    shape: Shape
    pose: Pose
    name: str = ""

    def signed_distance(self, world_points) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance and world-frame outward normal for each point."""
        local = inverse(self.pose).transform_points(world_points)
        d, n = signed_distance(self.shape, local)
        return d, n @ self.pose.rotation.T

    def ray_intersect(self, origin, directions) -> tuple[np.ndarray, np.ndarray]:
        """World-frame rays; returns t (inf on a miss) and world normals."""
        to_local = inverse(self.pose)
        o = to_local.transform_points(np.asarray(origin, dtype=np.float64).reshape(-1, 3))
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3) @ to_local.rotation.T
        t, n = ray_intersect(self.shape, o, d)
        return t, n @ self.pose.rotation.T

    def corners(self) -> np.ndarray:
        """World positions of the 8 corners of the local bounding box."""
        h = self.shape.half_extents
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.pose.transform_points(signs * h)

    def moved(self, pose: Pose) -> "Obstacle":
        return Obstacle(self.shape, pose, self.name)
