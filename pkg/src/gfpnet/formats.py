"""ASCII PLY point clouds and tab-separated dataset manifests."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cloud import PointCloud


class PlyError(ValueError):
    pass


class ManifestError(ValueError):
    pass


_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint",
              "int8", "uint8", "int16", "uint16", "int32", "uint32"}


def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY vertex element (x, y, z and optional nx, ny, nz)."""
    with open(path, "r", encoding="ascii", errors="replace") as f:
        lines = f.read().split("\n")
    if not lines or lines[0].strip() != "ply":
        raise PlyError("line 1: missing 'ply' magic")
    props: list[str] = []
    n_vertex = None
    in_vertex = False
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise PlyError(f"line {lineno}: malformed format line")
            if tok[1] != "ascii":
                raise PlyError(f"line {lineno}: unsupported encoding {tok[1]}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"line {lineno}: malformed element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise PlyError(f"line {lineno}: bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3 or tok[1] == "list":
                    raise PlyError(f"line {lineno}: unsupported vertex property")
                if tok[1] not in _FLOAT_TYPES | _INT_TYPES:
                    raise PlyError(f"line {lineno}: unknown property type {tok[1]}")
                props.append(tok[2])
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if header_end is None:
        raise PlyError("missing end_header")
    if n_vertex is None:
        raise PlyError("no vertex element")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise PlyError("vertex element lacks x, y, z") from None
    ncols = [props.index(c) for c in ("nx", "ny", "nz")] if {"nx", "ny", "nz"} <= set(props) else None

    body = [ln for ln in lines[header_end:] if ln.strip()]
    # only the vertex element is read; other elements follow it
    if len(body) < n_vertex:
        raise PlyError(f"vertex count mismatch: header {n_vertex}, body {len(body)}")
    rows = body[:n_vertex]
    try:
        data = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise PlyError(f"bad vertex value: {e}") from None
    if n_vertex and (data.ndim != 2 or data.shape[1] != len(props)):
        raise PlyError("vertex row does not match declared properties")
    if n_vertex == 0:
        raise PlyError("empty cloud")
    normals = None
    if ncols is not None:
        normals = data[:, ncols]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(data[:, cols], normals)


def write_ply(cloud: PointCloud, path) -> None:
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    names = ["x", "y", "z"]
    arr = cloud.points
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        arr = np.hstack([arr, cloud.normals])
    out = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    out += [f"property double {n}" for n in names]
    out.append("end_header")
    out += [" ".join(_fmt(v) for v in row) for row in arr.tolist()]
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(out) + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    class_label: str
    source_path: str
    template_path: str
    label_path: Optional[str]
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ManifestError(f"unknown split {e.split}")
            if e.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {e.sample_id}")
            seen.add(e.sample_id)

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


_COLUMNS = ("sample_id", "class_label", "source_path", "template_path", "label_path", "split")


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Load a manifest; relative paths resolve against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != len(_COLUMNS):
                raise ManifestError(f"line {lineno}: expected {len(_COLUMNS)} fields, got {len(parts)}")
            sid, cls, src, tmpl, lab, split = parts
            entries.append(ManifestEntry(sid, cls, src, tmpl, lab or None, split))
    m = DatasetManifest(entries)
    if check_paths:
        for e in m.entries:
            for p in (e.source_path, e.template_path, e.label_path):
                if p is not None and not os.path.exists(resolve(base, p)):
                    raise ManifestError(f"missing file {p} for {e.sample_id}")
    return m


def resolve(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


def save_manifest(m: DatasetManifest, path) -> None:
    lines = []
    for e in m.entries:
        for v in (e.sample_id, e.class_label, e.source_path, e.template_path, e.label_path or "", e.split):
            if "\t" in v or "\n" in v:
                raise ManifestError(f"field contains tab or newline: {v!r}")
        lines.append("\t".join((e.sample_id, e.class_label, e.source_path, e.template_path,
                                e.label_path or "", e.split)))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(l + "\n" for l in lines))
