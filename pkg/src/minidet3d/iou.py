"""Exact rotated-box 3D IoU, the IoU training loss, and supporting oracles.

Boxes carry yaw only, so a 3D intersection decomposes into the intersection
of the two bird's-eye-view footprints (convex quadrilaterals) times the
overlap of the two vertical extents. Footprint intersection uses
Sutherland-Hodgman clipping; areas use the shoelace formula.

Gradients of the IoU loss are estimated by central finite differences with a
two-step consistency check, since the loss is piecewise smooth but its
clipping topology changes at configuration boundaries. A seeded Monte-Carlo
estimator provides an independent cross-check of the exact computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateOverlap, EmptyBatch, NonSmoothPoint
from .geom import Box7, box_corners

# A convex polygon is an ordered CCW list of (x, y) vertices; [] is empty.
ConvexPolygon2D = list[tuple[float, float]]

_DEDUP_EPS = 1e-12


def polygon_clip(subject: ConvexPolygon2D, clip: ConvexPolygon2D) -> ConvexPolygon2D:
    """Intersection of two convex CCW polygons (Sutherland-Hodgman).

    Ref: https://rosettacode.org/wiki/Sutherland-Hodgman_polygon_clipping
    Points exactly on a clip edge count as inside, so clipping a polygon
    against itself returns it unchanged. Output vertices are deduplicated
    within 1e-12.
    """
    if not subject or not clip:
        return []

    output = list(subject)
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            return []
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= 0.0

        def edge_intersection(s, e):
            dcx, dcy = cp1[0] - cp2[0], cp1[1] - cp2[1]
            dpx, dpy = s[0] - e[0], s[1] - e[1]
            n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
            n2 = s[0] * e[1] - s[1] * e[0]
            d = dcx * dpy - dcy * dpx
            return ((n1 * dpx - n2 * dcx) / d, (n1 * dpy - n2 * dcy) / d)

        clipped = []
        s = output[-1]
        s_in = inside(s)
        for e in output:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    clipped.append(edge_intersection(s, e))
                clipped.append(e)
            elif s_in:
                clipped.append(edge_intersection(s, e))
            s, s_in = e, e_in
        output = clipped
        cp1 = cp2

    return _dedup(output)


def _dedup(poly: ConvexPolygon2D) -> ConvexPolygon2D:
    if not poly:
        return []
    out = []
    for p in poly:
        if out and abs(p[0] - out[-1][0]) <= _DEDUP_EPS and abs(p[1] - out[-1][1]) <= _DEDUP_EPS:
            continue
        out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= _DEDUP_EPS and abs(out[0][1] - out[-1][1]) <= _DEDUP_EPS:
        out.pop()
    return out if len(out) >= 3 else []


def polygon_area(poly: ConvexPolygon2D) -> float:
    """Shoelace area; empty polygons have area zero."""
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(acc) / 2.0


def bev_footprint(box: Box7) -> ConvexPolygon2D:
    """Bird's-eye-view footprint of a box: 4 CCW (x, y) vertices."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2.0, box.w / 2.0
    return [
        (box.x + c * dx - s * dy, box.y + s * dx + c * dy)
        for dx, dy in ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw))
    ]


@dataclass(frozen=True)
class IoUResult:
    iou: float
    intersection_volume: float
    union_volume: float


def iou_3d(p: Box7, g: Box7) -> IoUResult:
    """Exact IoU of two yaw-only boxes: intersection volume over union volume.

    Intersection volume = footprint-intersection area x vertical overlap.
    The computation is symmetric in its arguments by construction (operands
    are put in a canonical order before clipping).
    """
    if p == g:
        vol = p.volume
        return IoUResult(1.0, vol, vol)
    # Clip order is fixed by a canonical operand ordering so that
    # iou_3d(a, b) and iou_3d(b, a) run the identical computation.
    if (g.x, g.y, g.z, g.l, g.w, g.h, g.yaw) < (p.x, p.y, p.z, p.l, p.w, p.h, p.yaw):
        p, g = g, p

    z_overlap = min(p.z + p.h / 2.0, g.z + g.h / 2.0) - max(p.z - p.h / 2.0, g.z - g.h / 2.0)
    vol_p, vol_g = p.volume, g.volume
    if z_overlap <= 0.0:
        return IoUResult(0.0, 0.0, vol_p + vol_g)

    inter_area = polygon_area(polygon_clip(bev_footprint(p), bev_footprint(g)))
    # Guard the bound intersection <= min(vol) against last-ulp clipping noise.
    inter = min(inter_area * z_overlap, vol_p, vol_g)
    union = vol_p + vol_g - inter
    return IoUResult(inter / union, inter, union)


def iou_loss(p: Box7, g: Box7) -> float:
    """1 - IoU, in [0, 1]."""
    return 1.0 - iou_3d(p, g).iou


def batch_iou_loss(pairs) -> float:
    """Mean of per-pair IoU losses over a non-empty batch."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyBatch("batch_iou_loss requires at least one pair")
    return sum(iou_loss(p, g) for p, g in pairs) / len(pairs)


_DEFAULT_FD_STEP = 1e-4  # meters for x,y,z,l,w,h; radians for yaw


def _loss_at(params: np.ndarray, g: Box7) -> float:
    return iou_loss(Box7.from_params(params), g)


def iou_loss_grad(p: Box7, g: Box7, step: float = _DEFAULT_FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of iou_loss w.r.t. p's 7 parameters.

    Each component is estimated at steps h and h/2; the two must agree within
    1% relative or 1e-6 absolute, otherwise the configuration sits on a
    clipping-topology boundary and NonSmoothPoint is raised. Requires IoU
    strictly inside (0, 1); DegenerateOverlap otherwise.
    """
    base = iou_3d(p, g).iou
    if base <= 0.0 or base >= 1.0:
        raise DegenerateOverlap(f"IoU {base} has no usable gradient")

    params = p.params()
    # Size perturbations must keep sizes positive.
    steps = np.full(7, float(step))
    for i in (3, 4, 5):
        steps[i] = min(steps[i], params[i] / 4.0)

    grad = np.empty(7)
    for i in range(7):
        estimates = []
        for h in (steps[i], steps[i] / 2.0):
            plus, minus = params.copy(), params.copy()
            plus[i] += h
            minus[i] -= h
            estimates.append((_loss_at(plus, g) - _loss_at(minus, g)) / (2.0 * h))
        g1, g2 = estimates
        if abs(g1 - g2) > max(1e-6, 0.01 * max(abs(g1), abs(g2))):
            raise NonSmoothPoint(
                f"component {i}: step-halving estimates {g1:.6e} and {g2:.6e} disagree"
            )
        grad[i] = g2
    return grad


@dataclass(frozen=True)
class MonteCarloIoU:
    iou: float
    standard_error: float
    union_hits: int
    samples: int


def _in_box_mask(pts: np.ndarray, box: Box7) -> np.ndarray:
    local = pts - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * local[:, 0] + s * local[:, 1]
    y = -s * local[:, 0] + c * local[:, 1]
    return (
        (np.abs(x) <= box.l / 2.0)
        & (np.abs(y) <= box.w / 2.0)
        & (np.abs(local[:, 2]) <= box.h / 2.0)
    )


def monte_carlo_iou(p: Box7, g: Box7, samples: int, seed: int) -> MonteCarloIoU:
    """Seeded rejection-sampling IoU estimate over the union's bounding volume.

    Points are drawn uniformly in the axis-aligned box covering both inputs;
    points in neither box are rejected. The standard error is the binomial
    estimate over points that landed in the union.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    all_corners = np.vstack([box_corners(p), box_corners(g)])
    lo, hi = all_corners.min(axis=0), all_corners.max(axis=0)

    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(int(samples), 3))
    in_p = _in_box_mask(pts, p)
    in_g = _in_box_mask(pts, g)
    union_hits = int(np.count_nonzero(in_p | in_g))
    both_hits = int(np.count_nonzero(in_p & in_g))
    if union_hits == 0:
        return MonteCarloIoU(0.0, 0.0, 0, int(samples))
    est = both_hits / union_hits
    se = math.sqrt(est * (1.0 - est) / union_hits)
    return MonteCarloIoU(est, se, union_hits, int(samples))
