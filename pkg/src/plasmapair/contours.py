"""Zero level-set extraction on the node lattice (marching squares).

Works on a rectangular lattice of sample points with possible NaN holes
(nodes outside the domain).  Cells touching a NaN corner are skipped, so
contours that would leave the sampled region come back as open polylines;
level sets wholly inside arrive as closed polygons.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

__all__ = ["Contour", "marching_squares", "polygon_area"]


@dataclass
class Contour:
    points: np.ndarray  # (m, 2)
    closed: bool

    @property
    def area(self) -> float:
        """Enclosed area (shoelace); meaningful for closed contours."""
        return abs(polygon_area(self.points))


def polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _interp(p0, p1, v0, v1):
    t = v0 / (v0 - v1)
    return (p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]))


def marching_squares(x: np.ndarray, y: np.ndarray, z: np.ndarray, level: float = 0.0) -> List[Contour]:
    """Level-set polylines of samples ``z[i, j]`` at ``(x[i], y[j])``.

    Linear interpolation on cell edges; the two ambiguous saddle cases are
    split according to the sign of the cell-center average.
    """
    z = np.asarray(z, dtype=float)
    nx, ny = z.shape
    if x.shape != (nx,) or y.shape != (ny,):
        raise ValueError("coordinate arrays do not match the sample grid")
    segs = []
    f = z - level
    # samples exactly at the level produce zero-length segments; nudge them
    # onto the positive side by an amount far below any meaningful feature
    on_level = f == 0.0
    if on_level.any():
        scale = np.nanmax(np.abs(f)) or 1.0
        f = np.where(on_level, 1e-13 * scale, f)
    for i in range(nx - 1):
        for j in range(ny - 1):
            vals = (f[i, j], f[i + 1, j], f[i + 1, j + 1], f[i, j + 1])
            if any(not np.isfinite(v) for v in vals):
                continue
            corners = (
                (x[i], y[j]),
                (x[i + 1], y[j]),
                (x[i + 1], y[j + 1]),
                (x[i], y[j + 1]),
            )
            case = sum(1 << k for k, v in enumerate(vals) if v > 0)
            if case in (0, 15):
                continue
            # edge k joins corner k and corner (k+1) % 4
            pts = {}
            for k in range(4):
                v0, v1 = vals[k], vals[(k + 1) % 4]
                if (v0 > 0) != (v1 > 0):
                    pts[k] = _interp(corners[k], corners[(k + 1) % 4], v0, v1)
            if case in (5, 10):
                center = 0.25 * sum(vals)
                # connect so the positive region stays on one side of each segment
                if (case == 5) == (center > 0):
                    segs.append((pts[0], pts[1]))
                    segs.append((pts[2], pts[3]))
                else:
                    segs.append((pts[0], pts[3]))
                    segs.append((pts[1], pts[2]))
            else:
                ks = sorted(pts)
                segs.append((pts[ks[0]], pts[ks[1]]))
    return _link_segments(segs)


def _link_segments(segs) -> List[Contour]:
    if not segs:
        return []

    def key(p):
        return (round(p[0], 12), round(p[1], 12))

    # walk chains of segments joined at quantized endpoints
    contours = []
    seg_used = [False] * len(segs)
    endpoint_map = {}
    for i, (a, b) in enumerate(segs):
        endpoint_map.setdefault(key(a), []).append((i, False))
        endpoint_map.setdefault(key(b), []).append((i, True))

    def next_seg(pkey, exclude):
        for i, rev in endpoint_map.get(pkey, []):
            if not seg_used[i] and i != exclude:
                return i, rev
        return None, None

    for start in range(len(segs)):
        if seg_used[start]:
            continue
        seg_used[start] = True
        a, b = segs[start]
        chain = [np.asarray(a), np.asarray(b)]
        # extend forward
        while True:
            i, rev = next_seg(key(tuple(chain[-1])), -1)
            if i is None:
                break
            seg_used[i] = True
            pa, pb = segs[i]
            nxt = pa if rev else pb
            chain.append(np.asarray(nxt))
        # extend backward
        while True:
            i, rev = next_seg(key(tuple(chain[0])), -1)
            if i is None:
                break
            seg_used[i] = True
            pa, pb = segs[i]
            nxt = pa if rev else pb
            chain.insert(0, np.asarray(nxt))
        pts = np.asarray(chain)
        closed = bool(np.allclose(pts[0], pts[-1], atol=1e-10))
        if closed:
            pts = pts[:-1]
        if closed and len(pts) < 3:
            continue  # degenerate loop from touching samples
        if len(pts) >= 2:
            contours.append(Contour(points=pts, closed=closed))
    return contours
