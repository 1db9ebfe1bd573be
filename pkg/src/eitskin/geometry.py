"""Sensor domain, bending deformation, meshing and the reconstruction grid.

The e-skin is a flat rectangular sheet (default 150 x 100 mm) with
evenly spaced boundary electrodes.  Bending wraps the sheet isometrically
onto a cylinder; meshes are structured triangulations of the flat
parameter domain mapped through the bend, so the flat coordinates stay
available as the intrinsic (material) parameterization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .validation import as_float_array, require

__all__ = [
    "SensorGeometry",
    "DeformationState",
    "Mesh",
    "ReconGrid",
    "make_geometry",
    "deform_point",
    "make_mesh",
    "make_recon_grid",
    "emit_point_cloud",
    "save_mesh_txt",
    "load_mesh_txt",
    "save_mesh_obj",
    "DESCRIPTOR_ROWS",
    "DESCRIPTOR_COLS",
    "UNIT_ROWS",
    "UNIT_COLS",
]

# Reconstruction lattice: 27 rows along the 100 mm side, 50 columns along
# the 150 mm side (27 * 50 = 1350), grouped into 9 x 14 = 126 units.
DESCRIPTOR_ROWS = 27
DESCRIPTOR_COLS = 50
UNIT_ROWS = 9
UNIT_COLS = 14


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SensorGeometry:
    """Flat sensor sheet with electrodes along the boundary.

    ``electrode_positions`` are arc-length coordinates of electrode
    centers measured counterclockwise from the (0, 0) corner along the
    bottom edge.
    """

    width: float = 150.0
    height: float = 100.0
    electrode_count: int = 16
    electrode_contact: float = 4.0
    electrode_positions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        require(self.width > 0 and self.height > 0, "sensor dimensions must be positive")
        require(
            self.electrode_count >= 8 and self.electrode_count % 2 == 0,
            f"electrode count must be even and >= 8, got {self.electrode_count}",
        )
        if self.electrode_positions is None:
            object.__setattr__(self, "electrode_positions", _default_electrodes(self))
        object.__setattr__(
            self, "electrode_positions", _readonly(self.electrode_positions)
        )

    @property
    def perimeter(self):
        return 2.0 * (self.width + self.height)

    def boundary_point(self, s):
        """Map boundary arc length(s) to flat xy coordinates."""
        s = np.mod(np.asarray(s, dtype=float), self.perimeter)
        w, h = self.width, self.height
        x = np.empty_like(s)
        y = np.empty_like(s)
        bottom = s < w
        right = (s >= w) & (s < w + h)
        top = (s >= w + h) & (s < 2 * w + h)
        left = s >= 2 * w + h
        x[bottom], y[bottom] = s[bottom], 0.0
        x[right], y[right] = w, s[right] - w
        x[top], y[top] = w - (s[top] - w - h), h
        x[left], y[left] = 0.0, h - (s[left] - 2 * w - h)
        return np.stack([x, y], axis=-1)


def _default_electrodes(g: SensorGeometry) -> np.ndarray:
    """Evenly spaced electrode centers, offset so the layout is closed under
    both mirror reflections of the rectangle and footprints avoid corners."""
    spacing = g.perimeter / g.electrode_count
    offset = (np.mod(g.width, spacing) + spacing) / 2.0
    centers = offset + spacing * np.arange(g.electrode_count)
    corners = np.array([0.0, g.width, g.width + g.height, 2 * g.width + g.height])
    half = g.electrode_contact / 2.0
    for c in centers:
        d = np.min(np.abs((c - corners + g.perimeter / 2) % g.perimeter - g.perimeter / 2))
        require(d >= half, "electrode footprint straddles a corner; adjust geometry")
    return centers


def make_geometry(width=150.0, height=100.0, n_electrodes=16) -> SensorGeometry:
    """Build the sensor sheet with ``n_electrodes`` evenly spaced electrodes.

    Raises on non-positive dimensions or an odd / too-small electrode count.
    """
    return SensorGeometry(float(width), float(height), int(n_electrodes))


@dataclass(frozen=True)
class DeformationState:
    """Cylindrical bend of the sheet.

    ``bend_angle`` is the total subtended arc in radians (0 = flat); the
    sheet extent along ``axis`` wraps onto a cylinder of radius
    R = extent / bend_angle, arc length preserved.
    """

    bend_angle: float = 0.0
    axis: str = "x"
    metadata: str = ""

    def __post_init__(self):
        require(
            0.0 <= self.bend_angle < 2.0 * np.pi,
            f"bend angle must lie in [0, 2*pi), got {self.bend_angle}",
        )
        require(self.axis in ("x", "y"), f"bend axis must be 'x' or 'y', got {self.axis!r}")

    def radius(self, geometry: SensorGeometry) -> float:
        """Cylinder radius for this bend on ``geometry`` (inf when flat)."""
        extent = geometry.width if self.axis == "x" else geometry.height
        if self.bend_angle == 0.0:
            return np.inf
        return extent / self.bend_angle


FLAT = DeformationState(0.0)


def deform_point(p, d: DeformationState, geometry: SensorGeometry | None = None):
    """Map flat sheet coordinates to 3-D points on the bent surface.

    Accepts a single (x, y) pair or an (n, 2) array; points must lie inside
    the flat domain.  The wrap is symmetric about the sheet center line and
    exactly arc-length preserving; a zero bend returns (x, y, 0).
    """
    g = geometry if geometry is not None else make_geometry()
    pts = as_float_array(p, "points")
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    require(pts.shape[1] == 2, "points must be 2-D flat coordinates")
    eps = 1e-9
    inside = (
        (pts[:, 0] >= -eps)
        & (pts[:, 0] <= g.width + eps)
        & (pts[:, 1] >= -eps)
        & (pts[:, 1] <= g.height + eps)
    )
    require(bool(np.all(inside)), "point outside the flat sensor domain")

    if d.bend_angle == 0.0:
        out = np.column_stack([pts, np.zeros(len(pts))])
        return out[0] if single else out

    R = d.radius(g)
    if d.axis == "x":
        u, v, mid = pts[:, 0], pts[:, 1], g.width / 2.0
    else:
        u, v, mid = pts[:, 1], pts[:, 0], g.height / 2.0
    phi = (u - mid) / R
    bent = mid + R * np.sin(phi)
    lift = R * (1.0 - np.cos(phi))
    if d.axis == "x":
        out = np.column_stack([bent, v, lift])
    else:
        out = np.column_stack([v, bent, lift])
    return out[0] if single else out


@dataclass(frozen=True)
class Mesh:
    """Triangulated (possibly bent) sensor surface.

    ``flat_vertices`` are the intrinsic parameter coordinates of
    ``vertices``; the bend is an isometry, so flat coordinates double as
    material coordinates for the FEM.  ``electrode_nodes[k]`` is the
    contiguous boundary vertex set under electrode ``k``.
    """

    vertices: np.ndarray
    flat_vertices: np.ndarray
    triangles: np.ndarray
    electrode_nodes: tuple
    boundary_flags: np.ndarray
    geometry: SensorGeometry
    deformation: DeformationState
    mesh_id: str = ""

    def __post_init__(self):
        for name in ("vertices", "flat_vertices", "triangles", "boundary_flags"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        object.__setattr__(
            self, "electrode_nodes", tuple(_readonly(e) for e in self.electrode_nodes)
        )
        if not self.mesh_id:
            h = hashlib.sha256()
            h.update(self.flat_vertices.tobytes())
            h.update(self.triangles.tobytes())
            h.update(
                f"{self.geometry.width},{self.geometry.height},"
                f"{self.geometry.electrode_count},"
                f"{self.deformation.bend_angle},{self.deformation.axis}".encode()
            )
            object.__setattr__(self, "mesh_id", h.hexdigest()[:16])

    @property
    def n_vertices(self):
        return len(self.vertices)

    def triangle_areas(self):
        """Areas of the (deformed) triangles in mm^2."""
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1
        )


def _grid_dims(target, width, height):
    """Odd x odd vertex grid close to ``target`` vertices.

    Odd counts keep the alternating-diagonal triangulation exactly
    mirror-symmetric, which the Jacobian symmetry checks rely on.
    """

    def nearest_odd(x):
        k = int(round((x - 1) / 2.0))
        return max(2 * k + 1, 3)

    ny = nearest_odd(np.sqrt(target * height / width))
    nx = nearest_odd(target / ny)
    return nx, ny


def make_mesh(
    geometry: SensorGeometry,
    deformation: DeformationState = FLAT,
    target_vertex_count: int = 8671,
) -> Mesh:
    """Structured triangulation of the sheet mapped through the bend.

    A regular (nx x ny) vertex grid over the flat domain is triangulated
    with alternating diagonals and deformed vertex-wise.  The vertex count
    lands within +-10% of ``target_vertex_count`` (minimum 500).
    """
    require(target_vertex_count >= 500, "target vertex count must be >= 500")
    nx, ny = _grid_dims(target_vertex_count, geometry.width, geometry.height)
    xs = np.linspace(0.0, geometry.width, nx)
    ys = np.linspace(0.0, geometry.height, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    flat = np.column_stack([gx.ravel(), gy.ravel()])  # index = j*nx + i

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx + 1
            d = a + nx
            if (i + j) % 2 == 0:
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    triangles = np.asarray(tris, dtype=np.int64)

    verts = deform_point(flat, deformation, geometry)

    areas = 0.5 * np.abs(
        np.cross(
            flat[triangles[:, 1]] - flat[triangles[:, 0]],
            flat[triangles[:, 2]] - flat[triangles[:, 0]],
        )
    )
    require(np.all(areas > 1e-12), "mesh generation produced degenerate triangles")

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    on_boundary = (
        (ii.ravel() == 0) | (ii.ravel() == nx - 1) | (jj.ravel() == 0) | (jj.ravel() == ny - 1)
    )

    boundary_idx = np.flatnonzero(on_boundary)
    arc = _boundary_arc_coordinates(flat, on_boundary, geometry)[boundary_idx]
    electrode_nodes = []
    half = geometry.electrode_contact / 2.0
    for center in geometry.electrode_positions:
        d = np.abs((arc - center + geometry.perimeter / 2) % geometry.perimeter - geometry.perimeter / 2)
        sel = boundary_idx[d <= half]
        if len(sel) == 0:
            sel = boundary_idx[[int(np.argmin(d))]]
        electrode_nodes.append(np.sort(sel))

    return Mesh(
        vertices=verts,
        flat_vertices=flat,
        triangles=triangles,
        electrode_nodes=tuple(electrode_nodes),
        boundary_flags=on_boundary,
        geometry=geometry,
        deformation=deformation,
    )


def _boundary_arc_coordinates(flat, on_boundary, g):
    """Arc-length coordinate along the rectangle boundary for boundary vertices
    (NaN elsewhere)."""
    arc = np.full(len(flat), np.nan)
    x, y = flat[:, 0], flat[:, 1]
    w, h = g.width, g.height
    b = on_boundary
    bottom = b & (np.abs(y) < 1e-9)
    right = b & (np.abs(x - w) < 1e-9)
    top = b & (np.abs(y - h) < 1e-9)
    left = b & (np.abs(x) < 1e-9)
    arc[bottom] = x[bottom]
    arc[right] = w + y[right]
    arc[top] = w + h + (w - x[top])
    arc[left] = 2 * w + h + (h - y[left])
    return arc


@dataclass(frozen=True)
class ReconGrid:
    """27 x 50 lattice of reconstruction points grouped into 9 x 14 units.

    Points are stored row-major (row r = y index, column c = x index,
    flat index r * 50 + c), matching the descriptor and heat-map layout.
    """

    points: np.ndarray
    flat_points: np.ndarray
    unit_of_point: np.ndarray
    geometry: SensorGeometry
    deformation: DeformationState
    unit_rows: int = UNIT_ROWS
    unit_cols: int = UNIT_COLS
    grid_id: str = ""

    def __post_init__(self):
        for name in ("points", "flat_points", "unit_of_point"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if not self.grid_id:
            h = hashlib.sha256()
            h.update(self.flat_points.tobytes())
            h.update(self.unit_of_point.tobytes())
            object.__setattr__(self, "grid_id", h.hexdigest()[:16])

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_units(self):
        return self.unit_rows * self.unit_cols

    def points_of_unit(self, unit):
        return np.flatnonzero(self.unit_of_point == unit)


def make_recon_grid(
    geometry: SensorGeometry, deformation: DeformationState = FLAT
) -> ReconGrid:
    """Reconstruction lattice on the (possibly bent) surface.

    1350 cell-center points (27 rows x 50 cols); each point belongs to the
    unit whose cell center is nearest, i.e. the unit cell containing it.
    """
    xs = (np.arange(DESCRIPTOR_COLS) + 0.5) * geometry.width / DESCRIPTOR_COLS
    ys = (np.arange(DESCRIPTOR_ROWS) + 0.5) * geometry.height / DESCRIPTOR_ROWS
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    flat = np.column_stack([gx.ravel(), gy.ravel()])  # index = row*50 + col

    ur = np.minimum(
        (flat[:, 1] / (geometry.height / UNIT_ROWS)).astype(np.int64), UNIT_ROWS - 1
    )
    uc = np.minimum(
        (flat[:, 0] / (geometry.width / UNIT_COLS)).astype(np.int64), UNIT_COLS - 1
    )
    units = ur * UNIT_COLS + uc

    pts = deform_point(flat, deformation, geometry)
    return ReconGrid(
        points=pts,
        flat_points=flat,
        unit_of_point=units,
        geometry=geometry,
        deformation=deformation,
    )


def emit_point_cloud(mesh: Mesh, noise_sigma=0.0, dropout_fraction=0.0, seed=0):
    """Synthetic scanner stand-in: noisy, subsampled, shuffled mesh vertices.

    Vertices get isotropic Gaussian noise of ``noise_sigma`` (mm), a
    ``dropout_fraction`` of them is removed, and the order is shuffled,
    all deterministically from ``seed``.
    """
    require(noise_sigma >= 0.0, "noise sigma must be >= 0")
    require(0.0 <= dropout_fraction < 1.0, "dropout fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    pts = np.array(mesh.vertices, dtype=np.float64)
    if noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    n_keep = int(round((1.0 - dropout_fraction) * len(pts)))
    order = rng.permutation(len(pts))[:n_keep]
    return pts[order]


def save_mesh_txt(path, mesh: Mesh):
    """Line-oriented text export: `x y z` per vertex, then a `#faces`
    sentinel and `i j k` per triangle."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        fh.write("#faces\n")
        for t in mesh.triangles:
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")


def load_mesh_txt(path):
    """Read the text format written by :func:`save_mesh_txt`.

    Returns ``(vertices, triangles)``; triangles is empty for bare
    point files.
    """
    verts, tris = [], []
    in_faces = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#faces"):
                in_faces = True
                continue
            if line.startswith("#"):
                continue
            parts = line.split()
            if in_faces:
                tris.append([int(p) for p in parts[:3]])
            else:
                verts.append([float(p) for p in parts[:3]])
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


def save_mesh_obj(path, mesh: Mesh):
    """Wavefront OBJ export for visualization (1-based indices)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
