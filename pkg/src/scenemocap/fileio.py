"""File formats: PFM float maps, 16-bit PNG depth, binary PLY point clouds and meshes."""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, data, scale=1.0):
    """Write a single-channel float32 map as little-endian PFM (rows bottom-to-top)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2D map, got shape %s" % (data.shape,))
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(b"%d %d\n" % (data.shape[1], data.shape[0]))
        f.write(b"%f\n" % -abs(scale))  # negative scale = little-endian
        f.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise ValueError("not a PFM file: %s" % path)
        color = header == b"PF"
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().rstrip())
        endian = "<" if scale < 0 else ">"
        count = width * height * (3 if color else 1)
        data = np.frombuffer(f.read(count * 4), dtype=endian + "f4", count=count)
    shape = (height, width, 3) if color else (height, width)
    return np.ascontiguousarray(data.reshape(shape)[::-1]).astype(np.float32)


def write_depth_png16(path, depth_m):
    """Write a depth map in meters as 16-bit PNG with millimeter quantization."""
    mm = np.clip(np.asarray(depth_m, dtype=np.float64) * 1000.0, 0, 65535)
    Image.fromarray(np.round(mm).astype(np.uint16)).save(path)


def read_depth_png16(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_label_png(path, labels):
    """Instance label image: 0 = background, k = instance k (1-based)."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label image must fit uint8")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def read_label_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.int32)


def write_ply_points(path, points):
    """Binary little-endian PLY of xyz float32 points."""
    points = np.asarray(points, dtype="<f4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        "element vertex %d\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n" % len(points)
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(points.tobytes())


def write_ply_mesh(path, vertices, faces):
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        "element vertex %d\n"
        "property float x\nproperty float y\nproperty float z\n"
        "element face %d\n"
        "property list uchar int vertex_indices\n"
        "end_header\n" % (len(vertices), len(faces))
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertices.tobytes())
        counts = np.full((len(faces), 1), 3, dtype=np.uint8)
        for c, row in zip(counts, faces):
            f.write(c.tobytes())
            f.write(row.astype("<i4").tobytes())


def read_ply(path):
    """Minimal reader for the binary PLY layouts written by this package.

    Returns (vertices, faces); faces is None for pure point clouds.
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file: %s" % path)
        n_vert = n_face = 0
        fmt = None
        while True:
            line = f.readline().strip()
            if line.startswith(b"format"):
                fmt = line.split()[1]
            elif line.startswith(b"element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith(b"element face"):
                n_face = int(line.split()[-1])
            elif line == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise ValueError("unsupported PLY format: %s" % fmt)
        verts = np.frombuffer(f.read(n_vert * 12), dtype="<f4").reshape(n_vert, 3)
        faces = None
        if n_face:
            faces = np.empty((n_face, 3), dtype=np.int64)
            for i in range(n_face):
                (cnt,) = struct.unpack("<B", f.read(1))
                if cnt != 3:
                    raise ValueError("only triangle faces supported")
                faces[i] = struct.unpack("<3i", f.read(12))
    return np.array(verts, dtype=np.float64), faces


def write_obj_mesh(path, vertices, faces):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write("v %.8f %.8f %.8f\n" % (v[0], v[1], v[2]))
        for face in np.asarray(faces, dtype=np.int64):
            f.write("f %d %d %d\n" % (face[0] + 1, face[1] + 1, face[2] + 1))


def load_json(path):
    with open(path) as f:
        return json.load(f)


def dump_json(obj, path, indent=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=indent, sort_keys=True)
        f.write("\n")
