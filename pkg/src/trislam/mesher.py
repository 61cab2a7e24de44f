"""Triangle mesh extraction from the TSDF and visibility culling.

Marching cubes runs on a node-centered value grid at isovalue 0 with linear
edge interpolation. Vertices are keyed by the global grid edge they sit on,
so triangles sharing an edge share vertices exactly and closed surfaces come
out watertight.
"""

from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

WELD_EPS = 1e-7
DEGENERATE_AREA = 1e-12

# per edge: axis along which it runs and the lower-corner offset
_EDGE_AXIS = np.array(
    [int(np.flatnonzero(CORNER_OFFSETS[a] != CORNER_OFFSETS[b])[0]) for a, b in EDGE_CORNERS],
    dtype=np.int64,
)
_EDGE_BASE = np.array(
    [np.minimum(CORNER_OFFSETS[a], CORNER_OFFSETS[b]) for a, b in EDGE_CORNERS],
    dtype=np.int64,
)


@dataclass
class TsdfVolume:
    """Node-centered TSDF samples over an axis-aligned box."""

    values: np.ndarray  # (nx, ny, nz)
    origin: np.ndarray  # (3,) position of node (0, 0, 0)
    voxel: float


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int
    colors: np.ndarray = None  # (n, 3) float in [0, 1], optional

    @property
    def empty(self):
        return self.faces.shape[0] == 0

    def areas(self):
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    def area(self):
        return float(self.areas().sum())


def volume_grid_shape(bounds_min, bounds_max, voxel):
    ext = np.asarray(bounds_max, dtype=np.float64) - np.asarray(bounds_min, dtype=np.float64)
    return tuple(int(np.ceil(e / voxel)) + 1 for e in ext)


def fill_volume(decode_fn, bounds_min, bounds_max, voxel, chunk=262144, dtype=np.float32):
    """Sample ``decode_fn(points (N,3)) -> (N,)`` on the node grid.

    Chunked along x-slabs to bound memory.
    """
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    nx, ny, nz = volume_grid_shape(bounds_min, bounds_max, voxel)
    values = np.empty((nx, ny, nz), dtype=dtype)
    ys = bounds_min[1] + voxel * np.arange(ny)
    zs = bounds_min[2] + voxel * np.arange(nz)
    rows_per_slab = max(1, chunk // (ny * nz))
    for x0 in range(0, nx, rows_per_slab):
        x1 = min(x0 + rows_per_slab, nx)
        xs = bounds_min[0] + voxel * np.arange(x0, x1)
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        values[x0:x1] = decode_fn(grid).reshape(x1 - x0, ny, nz)
    return TsdfVolume(values, bounds_min.copy(), float(voxel))


def marching_cubes(volume: TsdfVolume, iso=0.0):
    """Standard 256-case marching cubes with linear edge interpolation."""
    vals = volume.values
    nx, ny, nz = vals.shape
    inside = vals < iso

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for corner, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        sub = inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz]
        case |= sub.astype(np.uint16) << corner

    active = np.argwhere((case != 0) & (case != 255))
    if active.shape[0] == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cases = case[active[:, 0], active[:, 1], active[:, 2]].astype(np.int64)

    tri = TRI_TABLE[cases]  # (ncell, 16) edge ids, -1 padded
    valid = tri >= 0
    cell_of_entry = np.repeat(np.arange(active.shape[0]), valid.sum(axis=1))
    edges = tri[valid]

    base = active[cell_of_entry] + _EDGE_BASE[edges]
    axis = _EDGE_AXIS[edges]
    edge_id = (axis * nx * ny + (base[:, 0] * ny + base[:, 1])) * nz + base[:, 2]

    unique_ids, inverse = np.unique(edge_id, return_inverse=True)
    faces = inverse.reshape(-1, 3)

    # interpolate one vertex per unique grid edge
    uaxis = unique_ids // (nx * ny * nz)
    flat = unique_ids % (nx * ny * nz)
    i = flat // (ny * nz)
    j = (flat // nz) % ny
    k = flat % nz
    p0 = volume.origin + volume.voxel * np.stack([i, j, k], axis=1).astype(np.float64)
    v0 = vals[i, j, k].astype(np.float64)
    step = np.eye(3, dtype=np.int64)[uaxis]
    i1, j1, k1 = i + step[:, 0], j + step[:, 1], k + step[:, 2]
    v1 = vals[i1, j1, k1].astype(np.float64)
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)
    verts = p0 + (t * volume.voxel)[:, None] * step.astype(np.float64)

    mesh = TriMesh(verts, faces)
    return clean_mesh(mesh)


def clean_mesh(mesh: TriMesh):
    """Weld near-coincident vertices and drop degenerate triangles."""
    if mesh.vertices.shape[0] == 0:
        return mesh
    key = np.round(mesh.vertices / WELD_EPS).astype(np.int64)
    _, first, remap = np.unique(
        key, axis=0, return_index=True, return_inverse=True
    )
    verts = mesh.vertices[first]
    colors = None if mesh.colors is None else mesh.colors[first]
    faces = remap[mesh.faces]
    ok = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    m = TriMesh(verts, faces[ok], colors)
    areas = m.areas()
    return TriMesh(verts, m.faces[areas > DEGENERATE_AREA], colors)


def boundary_edge_count(mesh: TriMesh):
    """Number of undirected face edges not shared by exactly two triangles."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int((counts != 2).sum())


def cull_mesh(mesh: TriMesh, frames, intrinsics, trunc):
    """Keep faces seen by at least one RGB-D frame.

    frames: iterable of (pose, depth_map) with depth in meters, 0 invalid.
    A face survives if its centroid projects inside some frame's image with
    positive camera depth no more than (measured depth + trunc); pixels
    without a measurement observe nothing.
    """
    if mesh.empty:
        return mesh
    cent = mesh.centroids()
    keep = np.zeros(mesh.faces.shape[0], dtype=bool)
    for pose, depth in frames:
        rest = ~keep
        if not rest.any():
            break
        pc = pose.apply_inverse(cent[rest])
        z = pc[:, 2]
        ok = z > 1e-9
        uv = np.zeros((pc.shape[0], 2))
        uv[ok] = intrinsics.project(pc[ok])
        u = np.round(uv[:, 0]).astype(np.int64)
        v = np.round(uv[:, 1]).astype(np.int64)
        ok &= (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        meas = np.zeros(pc.shape[0])
        meas[ok] = depth[v[ok], u[ok]]
        visible = ok & (meas > 0) & (z <= meas + trunc)
        keep[np.flatnonzero(rest)[visible]] = True
    faces = mesh.faces[keep]
    # drop now-unreferenced vertices
    used = np.unique(faces.ravel())
    remap = np.full(mesh.vertices.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    colors = None if mesh.colors is None else mesh.colors[used]
    return TriMesh(mesh.vertices[used], remap[faces], colors)


def mesh_field(field, voxel=None, with_colors=True, chunk=262144):
    """Extract the zero isosurface of a scene field."""
    voxel = 0.01 if voxel is None else voxel

    def decode(points):
        return field.decode_geometry(np.ascontiguousarray(points, dtype=field.dtype))

    vol = fill_volume(
        decode, field.planes.bounds_min, field.planes.bounds_max, voxel, chunk=chunk
    )
    mesh = marching_cubes(vol)
    if with_colors and mesh.vertices.shape[0]:
        colors = np.zeros((mesh.vertices.shape[0], 3))
        for s in range(0, mesh.vertices.shape[0], chunk):
            pts = np.ascontiguousarray(mesh.vertices[s : s + chunk], dtype=field.dtype)
            colors[s : s + chunk] = field.decode_color(pts)
        mesh.colors = colors
    return mesh


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian)


def write_ply(path, mesh: TriMesh):
    n, m = mesh.vertices.shape[0], mesh.faces.shape[0]
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
            vdata = np.empty(n, dtype=vdt)
            vdata["xyz"] = mesh.vertices.astype("<f4")
            vdata["rgb"] = np.clip(np.round(mesh.colors * 255), 0, 255).astype("u1")
        else:
            vdata = mesh.vertices.astype("<f4").view([("xyz", "<f4", 3)]).reshape(n)
        f.write(vdata.tobytes())
        fdt = np.dtype([("cnt", "u1"), ("idx", "<i4", 3)])
        fdata = np.empty(m, dtype=fdt)
        fdata["cnt"] = 3
        fdata["idx"] = mesh.faces.astype("<i4")
        f.write(fdata.tobytes())


def read_ply(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = f.readline().split()
        if fmt[1] != b"binary_little_endian":
            raise ValueError("only binary little-endian PLY is supported")
        n = m = 0
        vprops = []
        element = None
        while True:
            line = f.readline().split()
            if line[0] == b"end_header":
                break
            if line[0] == b"comment":
                continue
            if line[0] == b"element":
                element = line[1]
                if element == b"vertex":
                    n = int(line[2])
                else:
                    m = int(line[2])
            elif line[0] == b"property" and element == b"vertex":
                vprops.append((line[2].decode(), line[1].decode()))
        fields = []
        for name, typ in vprops:
            np_t = {"float": "<f4", "double": "<f8", "uchar": "u1"}[typ]
            fields.append((name, np_t))
        vdt = np.dtype(fields)
        vdata = np.frombuffer(f.read(n * vdt.itemsize), dtype=vdt)
        verts = np.stack([vdata["x"], vdata["y"], vdata["z"]], axis=1).astype(np.float64)
        colors = None
        if "red" in vdt.names:
            colors = (
                np.stack([vdata["red"], vdata["green"], vdata["blue"]], axis=1).astype(np.float64)
                / 255.0
            )
        fdt = np.dtype([("cnt", "u1"), ("idx", "<i4", 3)])
        fdata = np.frombuffer(f.read(m * fdt.itemsize), dtype=fdt)
        if m and not (fdata["cnt"] == 3).all():
            raise ValueError("non-triangular PLY faces are not supported")
        return TriMesh(verts, fdata["idx"].astype(np.int64), colors)
