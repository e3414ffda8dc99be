"""ASCII OFF / PLY mesh files and CSV per-vertex fields.

Readers ignore extra vertex/face attributes; writers emit positions and
triangles only. Coordinates are written with 17 significant digits so a
write/read cycle reproduces the geometry exactly.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import MeshError
from .mesh import SurfaceMesh


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _tokens(text):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line


def format_off(mesh: SurfaceMesh) -> str:
    out = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
    out += [" ".join(_fmt(c) for c in p) for p in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.triangles]
    return "\n".join(out) + "\n"


def parse_off(text: str, name: str = "") -> SurfaceMesh:
    lines = list(_tokens(text))
    if not lines or not lines[0].upper().endswith("OFF"):
        raise MeshError("not an OFF file")
    head = lines[0][:-3].strip() if lines[0].upper() != "OFF" else ""
    rest = lines[1:]
    counts = (head or rest.pop(0)).split()
    nv, nf = int(counts[0]), int(counts[1])
    verts = np.array([[float(x) for x in rest[i].split()[:3]] for i in range(nv)])
    faces = []
    for line in rest[nv:nv + nf]:
        parts = line.split()
        k = int(parts[0])
        idx = [int(x) for x in parts[1:1 + k]]
        if k != 3:
            raise MeshError(f"only triangles are supported, found a {k}-gon")
        faces.append(idx)
    return SurfaceMesh(verts.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                       name=name)


def format_ply(mesh: SurfaceMesh) -> str:
    head = [
        "ply", "format ascii 1.0",
        f"comment {mesh.name}" if mesh.name else "comment mesh",
        f"element vertex {mesh.n_vertices}",
        "property double x", "property double y", "property double z",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [" ".join(_fmt(c) for c in p) for p in mesh.vertices]
    body += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.triangles]
    return "\n".join(head + body) + "\n"


def parse_ply(text: str, name: str = "") -> SurfaceMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError("not a PLY file")
    elements = []  # (name, count, [props])
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError(f"unsupported PLY format {parts[1]!r} (ascii only)")
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
        elif parts[0] == "end_header":
            break
    data = [ln.split() for ln in lines[i:] if ln.strip()]
    pos = 0
    verts, faces = None, None
    for ename, count, props in elements:
        rows = data[pos:pos + count]
        pos += count
        if ename == "vertex":
            names = [p[-1] for p in props]
            cols = [names.index(c) for c in ("x", "y", "z")]
            if any(p[0] == "list" for p in props):
                raise MeshError("list properties on vertices are not supported")
            verts = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(-1, 3)
        elif ename == "face":
            lst = [k for k, p in enumerate(props) if p[0] == "list"]
            if not lst:
                raise MeshError("face element without an index list")
            faces = []
            for r in rows:
                # scalar properties before the list shift the column
                off = lst[0]
                k = int(r[off])
                if k != 3:
                    raise MeshError(f"only triangles are supported, found a {k}-gon")
                faces.append([int(x) for x in r[off + 1:off + 4]])
    if verts is None or faces is None:
        raise MeshError("PLY file needs vertex and face elements")
    return SurfaceMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), name=name)


def read_mesh(path) -> SurfaceMesh:
    path = Path(path)
    text = path.read_text()
    name = path.stem
    suffix = path.suffix.lower()
    if suffix == ".off":
        return parse_off(text, name)
    if suffix == ".ply":
        return parse_ply(text, name)
    raise MeshError(f"unsupported mesh format {suffix!r}")


def write_mesh(path, mesh: SurfaceMesh) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        atomic_write_text(path, format_off(mesh))
    elif suffix == ".ply":
        atomic_write_text(path, format_ply(mesh))
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")


def format_vector_csv(vectors, header=("vertex_id", "ux", "uy", "uz")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, row in enumerate(np.asarray(vectors, dtype=float)):
        w.writerow([i] + [_fmt(x) for x in row])
    return buf.getvalue()


def write_vector_csv(path, vectors, header=("vertex_id", "ux", "uy", "uz")) -> None:
    atomic_write_text(path, format_vector_csv(vectors, header))


def read_vector_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    out = np.zeros((len(body), 3))
    for r in body:
        out[int(r[0])] = [float(x) for x in r[1:4]]
    return out


def write_table(path, header, rows) -> None:
    """Write a CSV table; floats use 17 significant digits for bit-stable reruns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])
    atomic_write_text(path, buf.getvalue())


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV table written by :func:`write_table` as ``(header, rows)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty table")
    return rows[0], rows[1:]
