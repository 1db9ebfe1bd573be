"""Point-cloud pre-processing: outlier removal, principal-axis alignment,
RBF surface fitting and resampling to the fixed 27 x 50 deformation
descriptor consumed by the learned reconstructor.

The descriptor is a height field: out-of-plane displacement sampled on a
27 x 50 lattice spanning the aligned cloud's footprint (inclusive
endpoints), with the mean height subtracted.  Surfaces in scope are
graphs over the flat domain (bends up to a half cylinder), so heights
capture the full shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.spatial import Delaunay, cKDTree

from .geometry import DESCRIPTOR_COLS, DESCRIPTOR_ROWS, SensorGeometry
from .validation import as_float_array, require

__all__ = [
    "RawCloud",
    "HeightField",
    "DeformationDescriptor",
    "remove_outliers",
    "align",
    "rbf_fit",
    "resample",
    "process_cloud",
    "load_xyz",
    "save_descriptor",
    "load_descriptor",
    "MIN_CLOUD_POINTS",
]

MIN_CLOUD_POINTS = 100


@dataclass(frozen=True)
class RawCloud:
    """Unordered 3-D points (mm) from the synthetic scanner or an external scan."""

    points: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        p = as_float_array(self.points, "cloud points", shape=(None, 3))
        require(
            len(p) >= MIN_CLOUD_POINTS,
            f"cloud has {len(p)} points, need >= {MIN_CLOUD_POINTS}",
        )
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


def remove_outliers(cloud: RawCloud, k=8, z_thresh=3.0) -> RawCloud:
    """Drop points whose mean k-nearest-neighbor distance is more than
    ``z_thresh`` standard deviations above the cloud average."""
    require(k >= 3, "k must be >= 3")
    pts = cloud.points
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=k + 1)  # first column is the point itself
    score = dists[:, 1:].mean(axis=1)
    keep = score <= score.mean() + z_thresh * score.std()
    kept = pts[keep]
    require(
        len(kept) >= MIN_CLOUD_POINTS,
        f"outlier removal left only {len(kept)} points",
    )
    return RawCloud(points=kept, source=cloud.source)


def align(cloud: RawCloud):
    """Center the cloud and rotate its principal axes onto x, y, z.

    The longest extent maps to x and the second to y; among the four
    right-handed sign choices the rotation closest to the identity (max
    trace) is used, so an already-aligned cloud gets the identity
    transform.  Returns ``(aligned_cloud, rotation, centroid)`` with
    ``aligned = (points - centroid) @ rotation``.

    Raises on degenerate (collinear) clouds.
    """
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    require(
        evals[1] > 1e-9 * max(evals[0], 1.0),
        "degenerate cloud: points are (nearly) collinear",
    )
    e1, e2 = evecs[:, 0], evecs[:, 1]
    best, best_trace = None, -np.inf
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            a1, a2 = s1 * e1, s2 * e2
            rot = np.column_stack([a1, a2, np.cross(a1, a2)])
            tr = np.trace(rot)
            if tr > best_trace:
                best, best_trace = rot, tr
    aligned = centered @ best
    return RawCloud(points=aligned, source=cloud.source), best, centroid


@dataclass(frozen=True)
class HeightField:
    """Interpolated surface height z(x, y) over an aligned cloud."""

    interpolator: object
    sites: np.ndarray  # (n, 2) data sites used for the fit
    kernel: str
    smoothing: float

    def __call__(self, xy):
        xy = np.atleast_2d(as_float_array(xy, "evaluation points"))
        return self.interpolator(xy)

    @property
    def bbox(self):
        lo = self.sites.min(axis=0)
        hi = self.sites.max(axis=0)
        return lo[0], hi[0], lo[1], hi[1]


_KERNELS = {"thin-plate": "thin_plate_spline", "gaussian": "gaussian"}


def rbf_fit(cloud: RawCloud, kernel="thin-plate", smoothing=0.0) -> HeightField:
    """Radial-basis-function height surface z(x, y) through an aligned cloud.

    ``smoothing = 0`` interpolates the data exactly; larger values trade
    fit for smoothness.  Duplicate (x, y) sites make the system singular
    and are reported by index.  Large clouds switch to local RBF stencils
    (64 nearest sites), which still interpolate exactly at the sites.
    """
    require(kernel in _KERNELS, f"kernel must be one of {sorted(_KERNELS)}")
    require(smoothing >= 0.0, "smoothing must be >= 0")
    pts = cloud.points
    xy = pts[:, :2]
    rounded = np.round(xy, 9)
    _, first, counts = np.unique(
        rounded, axis=0, return_index=True, return_counts=True
    )
    if np.any(counts > 1):
        dup_site = rounded[first[np.argmax(counts > 1)]]
        dups = np.flatnonzero((rounded == dup_site).all(axis=1))
        raise ValueError(
            f"duplicate (x, y) sites make the RBF system singular: indices {dups.tolist()}"
        )
    kwargs = {"kernel": _KERNELS[kernel], "smoothing": smoothing}
    if kernel == "gaussian":
        tree = cKDTree(xy)
        nn = tree.query(xy, k=2)[0][:, 1]
        kwargs["epsilon"] = 1.0 / (3.0 * float(np.median(nn)))
    if len(xy) > 2000:
        kwargs["neighbors"] = 64
    interp = RBFInterpolator(xy, pts[:, 2], **kwargs)
    return HeightField(
        interpolator=interp, sites=xy.copy(), kernel=kernel, smoothing=smoothing
    )


@dataclass(frozen=True)
class DeformationDescriptor:
    """27 x 50 height field over the aligned footprint, mean-centered.

    ``x_sites``/``y_sites`` are the lattice coordinates in the aligned
    frame; ``extrapolated`` flags lattice sites outside the convex hull
    of the fitted cloud; ``rotation``/``centroid`` record the alignment.
    """

    grid: np.ndarray
    x_sites: np.ndarray
    y_sites: np.ndarray
    extrapolated: np.ndarray
    rotation: np.ndarray
    centroid: np.ndarray

    def __post_init__(self):
        g = as_float_array(self.grid, "descriptor grid", shape=(DESCRIPTOR_ROWS, DESCRIPTOR_COLS))
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)


def resample(
    field: HeightField,
    geometry: SensorGeometry | None = None,
    rotation=None,
    centroid=None,
) -> DeformationDescriptor:
    """Sample the height surface on the canonical 27 x 50 lattice.

    The lattice spans the fitted cloud's bounding box with inclusive
    endpoints; heights are mean-centered.  Sites outside the data's
    convex hull are filled by the RBF's natural extrapolation and
    flagged.
    """
    x0, x1, y0, y1 = field.bbox
    xs = np.linspace(x0, x1, DESCRIPTOR_COLS)
    ys = np.linspace(y0, y1, DESCRIPTOR_ROWS)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    sites = np.column_stack([gx.ravel(), gy.ravel()])
    heights = field(sites)
    heights = heights - heights.mean()
    grid = heights.reshape(DESCRIPTOR_ROWS, DESCRIPTOR_COLS)

    hull = Delaunay(field.sites)
    outside = hull.find_simplex(sites) < 0
    extrapolated = outside.reshape(DESCRIPTOR_ROWS, DESCRIPTOR_COLS)

    return DeformationDescriptor(
        grid=grid,
        x_sites=xs,
        y_sites=ys,
        extrapolated=extrapolated,
        rotation=np.eye(3) if rotation is None else np.asarray(rotation, float),
        centroid=np.zeros(3) if centroid is None else np.asarray(centroid, float),
    )


def process_cloud(
    points,
    k=8,
    z_thresh=3.0,
    kernel="thin-plate",
    smoothing=0.0,
    source="external",
) -> DeformationDescriptor:
    """Full pipeline: outlier removal, alignment, RBF fit, resampling."""
    cloud = points if isinstance(points, RawCloud) else RawCloud(points, source=source)
    cloud = remove_outliers(cloud, k=k, z_thresh=z_thresh)
    aligned, rot, cen = align(cloud)
    field = rbf_fit(aligned, kernel=kernel, smoothing=smoothing)
    return resample(field, rotation=rot, centroid=cen)


def load_xyz(path) -> RawCloud:
    """Whitespace-delimited `x y z` scan file (comment lines start with #)."""
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            pts.append([float(p) for p in parts[:3]])
    return RawCloud(np.asarray(pts), source="external")


def save_descriptor(path, desc: DeformationDescriptor):
    """CSV (27 rows x 50 columns) plus a `.json` sidecar with the
    alignment transform and extrapolation flags."""
    np.savetxt(path, desc.grid, delimiter=",", fmt="%.10g")
    sidecar = {
        "x_sites": desc.x_sites.tolist(),
        "y_sites": desc.y_sites.tolist(),
        "rotation": desc.rotation.tolist(),
        "centroid": desc.centroid.tolist(),
        "extrapolated": desc.extrapolated.astype(int).tolist(),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_descriptor(path) -> DeformationDescriptor:
    grid = np.loadtxt(path, delimiter=",")
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    return DeformationDescriptor(
        grid=grid,
        x_sites=np.asarray(side["x_sites"]),
        y_sites=np.asarray(side["y_sites"]),
        extrapolated=np.asarray(side["extrapolated"], dtype=bool),
        rotation=np.asarray(side["rotation"]),
        centroid=np.asarray(side["centroid"]),
    )
