"""Finite-element forward solver and sensitivity (Jacobian) computation.

Linear triangular elements on the bent surface, electrodes as perfectly
conducting patches (shunt model: footprint nodes share one potential),
adjacent-drive / adjacent-measure sweep retaining the 104 independent
measurements for 16 electrodes.

Bending couples into the electrical problem through membrane strain: the
conductive layer sits ``layer_offset`` mm away from the bending neutral
surface, so a bend of radius R stretches it by lambda = 1 + offset/R
along the bend direction.  The pulled-back sheet conductivity tensor is
diag(sigma/lambda^2, sigma) in (bend, transverse) axes; at lambda = 1 the
model reduces to the plain isotropic sheet and bending has no electrical
effect (an isometry preserves the intrinsic metric).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .blobio import read_blob, write_blob
from .geometry import Mesh, ReconGrid
from .validation import as_float_array, require

__all__ = [
    "ConductivityField",
    "SensingProtocol",
    "MeasurementFrame",
    "Jacobian",
    "SolverError",
    "make_protocol",
    "uniform_field",
    "ForwardModel",
    "assemble_system",
    "solve_frame",
    "compute_jacobian",
    "normalized_difference",
    "save_frames_csv",
    "load_frames_csv",
    "save_jacobian",
    "load_jacobian",
    "DEFAULT_LAYER_OFFSET",
    "DEFAULT_CURRENT",
]

DEFAULT_LAYER_OFFSET = 1.0  # mm between conductive layer and neutral surface
DEFAULT_CURRENT = 1e-3  # A


class SolverError(RuntimeError):
    """Raised when the linear forward solve fails."""


@dataclass(frozen=True)
class ConductivityField:
    """Per-reconstruction-point conductivity in S/m."""

    values: np.ndarray
    grid: ReconGrid

    def __post_init__(self):
        v = as_float_array(self.values, "conductivity values", shape=(self.grid.n_points,))
        require(np.all(v > 0), "conductivity values must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def uniform_field(grid: ReconGrid, value=1.0) -> ConductivityField:
    return ConductivityField(np.full(grid.n_points, float(value)), grid)


@dataclass(frozen=True)
class SensingProtocol:
    """Adjacent-drive/adjacent-measure sweep.

    ``drive_pairs[i] = (i, i+1 mod n)``.  ``measure_pairs[i]`` lists, in
    increasing electrode order, the adjacent pairs not touching the drive
    electrodes.  ``measurements`` is the canonical independent half:
    (drive i, measure j) kept iff i < j, drives in order, measures
    increasing within each drive.
    """

    n_electrodes: int
    drive_pairs: np.ndarray
    measure_pairs: tuple
    measurements: np.ndarray
    independent_count: int

    def measurement_names(self):
        return [f"d{i:02d}_m{j:02d}" for i, j in self.measurements]


def make_protocol(n_electrodes=16) -> SensingProtocol:
    n = int(n_electrodes)
    require(n >= 8 and n % 2 == 0, "protocol needs an even electrode count >= 8")
    drive_pairs = np.array([(i, (i + 1) % n) for i in range(n)], dtype=np.int64)
    measure_pairs = []
    measurements = []
    for i in range(n):
        banned = {i, (i + 1) % n}
        js = [j for j in range(n) if j not in banned and (j + 1) % n not in banned]
        measure_pairs.append(np.array(js, dtype=np.int64))
        measurements.extend((i, j) for j in js if i < j)
    measurements = np.array(measurements, dtype=np.int64)
    return SensingProtocol(
        n_electrodes=n,
        drive_pairs=drive_pairs,
        measure_pairs=tuple(measure_pairs),
        measurements=measurements,
        independent_count=len(measurements),
    )


@dataclass(frozen=True)
class MeasurementFrame:
    """One protocol sweep of boundary voltages (volts)."""

    voltages: np.ndarray
    protocol: SensingProtocol
    frame_kind: str
    mesh_id: str = ""
    bend_angle: float = 0.0

    def __post_init__(self):
        v = as_float_array(
            self.voltages, "voltages", shape=(self.protocol.independent_count,)
        )
        v.setflags(write=False)
        object.__setattr__(self, "voltages", v)
        require(
            self.frame_kind in ("reference_flat", "reference_deformed", "touched"),
            f"unknown frame kind {self.frame_kind!r}",
        )


@dataclass(frozen=True)
class Jacobian:
    """Sensitivity matrix dV_k / dsigma_q at the linearization point.

    ``ref_voltages`` are the forward voltages at the linearization point,
    carried along so normalized-difference reconstruction always uses a
    consistent reference scale.
    """

    matrix: np.ndarray
    mesh_id: str
    grid_id: str
    ref_voltages: np.ndarray
    bend_angle: float = 0.0
    layer_offset: float = DEFAULT_LAYER_OFFSET

    def __post_init__(self):
        m = as_float_array(self.matrix, "jacobian")
        r = as_float_array(self.ref_voltages, "reference voltages", shape=(m.shape[0],))
        m.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ref_voltages", r)


def _triangle_frames(mesh: Mesh):
    """Per-triangle local geometry: P1 gradient operators (2x3), areas,
    and the unit bend direction expressed in local coordinates."""
    v = mesh.vertices[mesh.triangles]  # (t, 3, 3)
    f = mesh.flat_vertices[mesh.triangles]  # (t, 3, 2)
    u1 = v[:, 1] - v[:, 0]
    u2 = v[:, 2] - v[:, 0]
    nrm = np.cross(u1, u2)
    e1 = u1 / np.linalg.norm(u1, axis=1, keepdims=True)
    e2 = np.cross(nrm, u1)
    e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
    # local 2-D coordinates of the three vertices
    q = np.zeros((len(v), 3, 2))
    q[:, 1, 0] = np.einsum("ti,ti->t", u1, e1)
    q[:, 2, 0] = np.einsum("ti,ti->t", u2, e1)
    q[:, 2, 1] = np.einsum("ti,ti->t", u2, e2)
    x, y = q[..., 0], q[..., 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (
        y[:, 1] - y[:, 0]
    )
    require(np.all(area2 > 1e-12), "degenerate triangle in mesh")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grad = np.stack([b, c], axis=1) / area2[:, None, None]  # (t, 2, 3)
    area = 0.5 * area2

    # direction of the flat bend axis inside each local frame
    df = np.stack([f[:, 1] - f[:, 0], f[:, 2] - f[:, 0]], axis=2)  # (t, 2, 2)
    dq = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)
    bend_flat = np.array([1.0, 0.0]) if mesh.deformation.axis == "x" else np.array([0.0, 1.0])
    rhs = np.broadcast_to(bend_flat[:, None], (len(v), 2, 1)).copy()
    coeff = np.linalg.solve(df, rhs)[..., 0]
    a = np.einsum("tij,tj->ti", dq, coeff)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return grad, area, a


class ForwardModel:
    """Caches mesh-dependent FEM structure for repeated solves.

    All methods are deterministic pure functions of their arguments; one
    instance may be shared across threads for concurrent solves.
    """

    def __init__(self, mesh: Mesh, layer_offset=DEFAULT_LAYER_OFFSET):
        self.mesh = mesh
        self.layer_offset = float(layer_offset)
        grad, area, bend_dir = _triangle_frames(mesh)
        R = mesh.deformation.radius(mesh.geometry)
        self.arc_stretch = 1.0 + (0.0 if np.isinf(R) else self.layer_offset / R)
        s = 1.0 / self.arc_stretch**2
        eye = np.broadcast_to(np.eye(2), (len(area), 2, 2))
        tensor = eye + (s - 1.0) * np.einsum("ti,tj->tij", bend_dir, bend_dir)
        # unit-conductivity element stiffness, (t, 3, 3)
        self.k_unit = area[:, None, None] * np.einsum(
            "tai,tab,tbj->tij", grad, tensor, grad
        )
        self.grad = grad
        self.area = area
        self.tensor = tensor

        # electrode shunt reduction: slave every footprint node to a master dof
        n_v = mesh.n_vertices
        owner = np.arange(n_v)
        self.masters = []
        for nodes in mesh.electrode_nodes:
            owner[nodes] = nodes[0]
            self.masters.append(nodes[0])
        keep = np.flatnonzero(owner == np.arange(n_v))
        self.red_of_full = np.full(n_v, -1, dtype=np.int64)
        self.red_of_full[keep] = np.arange(len(keep))
        self.red_of_full = self.red_of_full[owner]  # slaves point at master dof
        self.n_reduced = len(keep)
        self.electrode_dofs = np.array([self.red_of_full[m] for m in self.masters])

        tri_red = self.red_of_full[mesh.triangles]  # (t, 3)
        self.rows = np.repeat(tri_red, 3, axis=1).ravel()
        self.cols = np.tile(tri_red, (1, 3)).ravel()
        self.ground = self.electrode_dofs[0]

        self._sigma_cache = {}
        self._tree_cache = {}

    def element_ownership(self, grid: ReconGrid):
        """Nearest reconstruction point of each triangle (flat centroids)."""
        key = grid.grid_id
        if key not in self._tree_cache:
            require(
                abs(grid.geometry.width - self.mesh.geometry.width) < 1e-9
                and abs(grid.geometry.height - self.mesh.geometry.height) < 1e-9,
                "mesh/grid mismatch: different sensor geometry",
            )
            require(
                grid.deformation == self.mesh.deformation,
                "mesh/grid mismatch: different deformation state",
            )
            cent = self.mesh.flat_vertices[self.mesh.triangles].mean(axis=1)
            _, owner = cKDTree(grid.flat_points).query(cent)
            self._tree_cache[key] = owner.astype(np.int64)
        return self._tree_cache[key]

    def element_sigma(self, sigma: ConductivityField):
        owner = self.element_ownership(sigma.grid)
        return sigma.values[owner]

    def assemble(self, sigma: ConductivityField):
        """Reduced (electrode-shunted), ungrounded stiffness matrix."""
        sigma_e = self.element_sigma(sigma)
        data = (sigma_e[:, None, None] * self.k_unit).ravel()
        a = sp.coo_matrix(
            (data, (self.rows, self.cols)), shape=(self.n_reduced, self.n_reduced)
        ).tocsr()
        a.sum_duplicates()
        return a

    def _factorize(self, sigma: ConductivityField):
        a = self.assemble(sigma)
        keep = np.arange(self.n_reduced) != self.ground
        ag = a[keep][:, keep].tocsc()
        try:
            lu = spla.splu(ag)
        except RuntimeError as err:  # pragma: no cover - pathological input
            raise SolverError(
                f"forward factorization failed ({err}); "
                f"diag range [{a.diagonal().min():.3e}, {a.diagonal().max():.3e}]"
            ) from None
        return lu, keep

    def solve_potentials(self, sigma: ConductivityField, protocol, current=DEFAULT_CURRENT):
        """Electrode-master potentials for every drive pair.

        Returns ``(U, full)`` where ``U[d, e]`` is electrode ``e``'s
        potential under drive ``d`` and ``full`` the per-vertex potentials
        (drive-major columns), ground fixed at zero.
        """
        lu, keep = self._factorize(sigma)
        idx_g = np.cumsum(keep) - 1  # reduced -> grounded index
        rhs = np.zeros((self.n_reduced, len(protocol.drive_pairs)))
        for d, (a_el, b_el) in enumerate(protocol.drive_pairs):
            rhs[self.electrode_dofs[a_el], d] += current
            rhs[self.electrode_dofs[b_el], d] -= current
        sol_g = lu.solve(rhs[keep])
        if not np.all(np.isfinite(sol_g)):
            raise SolverError("forward solve produced non-finite potentials")
        sol_red = np.zeros((self.n_reduced, rhs.shape[1]))
        sol_red[keep] = sol_g
        full = sol_red[self.red_of_full]  # expand electrode slaves
        u_el = sol_red[self.electrode_dofs]  # (n_electrodes, n_drives)
        return u_el.T, full

    def frame(self, sigma, protocol, current=DEFAULT_CURRENT, frame_kind=None):
        u_el, _ = self.solve_potentials(sigma, protocol, current)
        v = np.empty(protocol.independent_count)
        for k, (i, j) in enumerate(protocol.measurements):
            a_el, b_el = protocol.drive_pairs[j]
            v[k] = u_el[i, a_el] - u_el[i, b_el]
        if frame_kind is None:
            uniform = np.ptp(sigma.values) == 0.0
            if uniform:
                frame_kind = (
                    "reference_flat"
                    if self.mesh.deformation.bend_angle == 0.0
                    else "reference_deformed"
                )
            else:
                frame_kind = "touched"
        return MeasurementFrame(
            voltages=v,
            protocol=protocol,
            frame_kind=frame_kind,
            mesh_id=self.mesh.mesh_id,
            bend_angle=self.mesh.deformation.bend_angle,
        )

    def jacobian(self, sigma0, protocol, grid, current=DEFAULT_CURRENT):
        """Adjoint-field sensitivities accumulated per reconstruction point.

        For measurement (drive i, measure j): dV/dsigma_e =
        -(1/I) u_j^T K_e u_i, with u_j the drive-j solution (the measure
        patterns coincide with the drive patterns, so no extra solves).
        """
        owner = self.element_ownership(grid)
        u_el, full = self.solve_potentials(sigma0, protocol, current)
        tri_u = full[self.mesh.triangles]  # (t, 3, d)
        grads = np.einsum("tai,tid->tad", self.grad, tri_u)
        tgrads = np.einsum("tab,tbd->tad", self.tensor, grads)
        pair = np.einsum("tad,tae->tde", grads, tgrads) * (
            -self.area[:, None, None] / current
        )
        n_d = pair.shape[1]
        cols = np.zeros((grid.n_points, n_d, n_d))
        np.add.at(cols, owner, pair)

        meas = protocol.measurements
        jac = cols[:, meas[:, 0], meas[:, 1]].T.copy()  # (104, n_points)
        v_ref = np.array(
            [
                u_el[i, protocol.drive_pairs[j][0]] - u_el[i, protocol.drive_pairs[j][1]]
                for i, j in meas
            ]
        )
        return Jacobian(
            matrix=jac,
            mesh_id=self.mesh.mesh_id,
            grid_id=grid.grid_id,
            ref_voltages=v_ref,
            bend_angle=self.mesh.deformation.bend_angle,
            layer_offset=self.layer_offset,
        )


def assemble_system(mesh: Mesh, sigma: ConductivityField, layer_offset=DEFAULT_LAYER_OFFSET):
    """Reduced symmetric stiffness matrix (before grounding) as CSR."""
    return ForwardModel(mesh, layer_offset).assemble(sigma)


def solve_frame(
    mesh: Mesh,
    sigma: ConductivityField,
    protocol: SensingProtocol,
    current=DEFAULT_CURRENT,
    layer_offset=DEFAULT_LAYER_OFFSET,
    frame_kind=None,
) -> MeasurementFrame:
    """Run one full protocol sweep and return the 104-entry frame."""
    require(current > 0, "drive current must be positive")
    return ForwardModel(mesh, layer_offset).frame(sigma, protocol, current, frame_kind)


def compute_jacobian(
    mesh: Mesh,
    sigma0: ConductivityField,
    protocol: SensingProtocol,
    grid: ReconGrid,
    current=DEFAULT_CURRENT,
    layer_offset=DEFAULT_LAYER_OFFSET,
) -> Jacobian:
    """Sensitivity matrix (m x n) of the protocol voltages w.r.t. the
    per-point conductivities at linearization point ``sigma0``."""
    return ForwardModel(mesh, layer_offset).jacobian(sigma0, protocol, grid, current)


def normalized_difference(v_t: MeasurementFrame, v_ref: MeasurementFrame):
    """Normalized voltage change (v_ref - v_t) / v_ref, elementwise.

    The sign convention makes a conductivity increase (touch) produce
    predominantly positive entries.  Raises if the frames disagree on the
    protocol or a reference entry is exactly zero.
    """
    require(
        v_t.protocol.independent_count == v_ref.protocol.independent_count
        and v_t.protocol.n_electrodes == v_ref.protocol.n_electrodes,
        "frames use different protocols",
    )
    ref = v_ref.voltages
    zeros = np.flatnonzero(ref == 0.0)
    if len(zeros):
        raise ZeroDivisionError(
            f"reference frame has zero entry at index {int(zeros[0])}"
        )
    return (ref - v_t.voltages) / ref


def save_frames_csv(path, frames):
    """One row per frame: kind, bend angle, then the 104 voltages."""
    frames = list(frames)
    require(len(frames) > 0, "no frames to save")
    names = frames[0].protocol.measurement_names()
    with open(path, "w") as fh:
        fh.write("frame_kind,bend_angle," + ",".join(names) + "\n")
        for f in frames:
            vals = ",".join(f"{v:.17g}" for v in f.voltages)
            fh.write(f"{f.frame_kind},{f.bend_angle:.17g},{vals}\n")


def load_frames_csv(path, protocol: SensingProtocol):
    frames = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        expected = ["frame_kind", "bend_angle"] + protocol.measurement_names()
        require(header == expected, f"{path}: frame CSV header does not match protocol")
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            frames.append(
                MeasurementFrame(
                    voltages=np.array([float(p) for p in parts[2:]]),
                    protocol=protocol,
                    frame_kind=parts[0],
                    bend_angle=float(parts[1]),
                )
            )
    return frames


def save_jacobian(path, jac: Jacobian):
    write_blob(
        path,
        {
            "kind": "jacobian",
            "shape": list(jac.matrix.shape),
            "mesh_id": jac.mesh_id,
            "grid_id": jac.grid_id,
            "bend_angle": jac.bend_angle,
            "layer_offset": jac.layer_offset,
        },
        {"matrix": jac.matrix, "ref_voltages": jac.ref_voltages},
    )


def load_jacobian(path) -> Jacobian:
    meta, arrays = read_blob(path)
    require(meta.get("kind") == "jacobian", f"{path}: not a jacobian blob")
    return Jacobian(
        matrix=arrays["matrix"],
        mesh_id=meta["mesh_id"],
        grid_id=meta["grid_id"],
        ref_voltages=arrays["ref_voltages"],
        bend_angle=meta["bend_angle"],
        layer_offset=meta["layer_offset"],
    )
