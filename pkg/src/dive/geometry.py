"""Ground-plane camera projection and tiny rasterization primitives.

The toy world lives on the z=0 plane in [0,1]^2 world units. A pinhole
camera (K, R, t) induces the plane-to-image homography H = K [r1 r2 t];
image points are kept in normalized [0,1] coordinates, with pixel (i, j) of
an HxW grid centered at ((j+0.5)/W, (i+0.5)/H). Geometry is therefore
resolution-independent: rendering the same scene at two sizes samples the
same continuous image.
"""

import numpy as np


def ground_homography(K, R, t):
    """Homography mapping world (x, y, 1) on the ground plane to the image."""
    cols = np.column_stack([R[:, 0], R[:, 1], np.asarray(t).reshape(3)])
    return K @ cols


def project_ground(h_mat, pts):
    """Project world ground points [n,2] to normalized image coords [n,2]."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h_mat.T
    return hom[:, :2] / hom[:, 2:3]


def pixel_centers(height, width, supersample=1):
    """Normalized coordinates of (sub)pixel centers, shape [height*width*s*s, 2]."""
    s = supersample
    ys = (np.arange(height * s) + 0.5) / (height * s)
    xs = (np.arange(width * s) + 0.5) / (width * s)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _fold_subsamples(mask, height, width, supersample):
    s = supersample
    if s == 1:
        return mask.reshape(height, width).astype(np.float64)
    return mask.reshape(height, s, width, s).mean(axis=(1, 3))


def polyline_coverage(img_pts, radius, height, width, supersample=4):
    """Fraction of each pixel within ``radius`` of the polyline, in [0,1]."""
    centers = pixel_centers(height, width, supersample)
    inside = np.zeros(len(centers), dtype=bool)
    r2 = radius * radius
    for a, b in zip(img_pts[:-1], img_pts[1:]):
        ab = b - a
        denom = float(ab @ ab)
        rel = centers - a
        if denom < 1e-30:
            d2 = (rel * rel).sum(axis=1)
        else:
            tt = np.clip((rel @ ab) / denom, 0.0, 1.0)
            proj = a + tt[:, None] * ab
            diff = centers - proj
            d2 = (diff * diff).sum(axis=1)
        inside |= d2 <= r2
    return _fold_subsamples(inside, height, width, supersample)


def quad_coverage(corners, height, width, supersample=4):
    """Fraction of each pixel inside a convex quad (corners [4,2], in order)."""
    centers = pixel_centers(height, width, supersample)
    pos = np.ones(len(centers), dtype=bool)
    neg = np.ones(len(centers), dtype=bool)
    for i in range(4):
        a = corners[i]
        b = corners[(i + 1) % 4]
        cross = (b[0] - a[0]) * (centers[:, 1] - a[1]) - (b[1] - a[1]) * (centers[:, 0] - a[0])
        pos &= cross >= 0.0
        neg &= cross <= 0.0
    return _fold_subsamples(pos | neg, height, width, supersample)
