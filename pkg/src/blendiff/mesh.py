"""Triangle meshes, OBJ import/export and the linear blendshape model."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, InputError, ParseError


@dataclass(frozen=True)
class TriMesh:
    positions: np.ndarray  # (M, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(pos):
                raise IndexOutOfRange(
                    f"face index outside [0, {len(pos)}): {faces.min()}..{faces.max()}"
                )
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise InputError("degenerate face with a repeated vertex index")
        pos.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_positions(self, positions):
        return TriMesh(np.asarray(positions, dtype=np.float64).reshape(-1, 3), self.faces)

    def position_vector(self):
        """Flattened ``(3M,)`` xyz vector."""
        return self.positions.reshape(-1).copy()

    def face_centroids(self):
        return self.positions[self.faces].mean(axis=1)

    def face_normals(self, unit=True):
        tri = self.positions[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if unit:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def mean_edge_length(self):
        if not self.n_faces:
            return 0.0
        tri = self.positions[self.faces]
        edges = tri[:, [1, 2, 0]] - tri
        return float(np.linalg.norm(edges, axis=2).mean())

    def subset(self, vertex_ids):
        """Restrict to ``vertex_ids``; faces touching dropped vertices are removed."""
        keep = np.asarray(sorted(set(int(v) for v in vertex_ids)), dtype=np.int64)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        faces = remap[self.faces]
        faces = faces[(faces >= 0).all(axis=1)]
        return TriMesh(self.positions[keep], faces)


def parse_obj(text):
    """Parse ASCII OBJ ``v`` and ``f`` records.

    Polygons are fan-triangulated, texture/normal indices (``f 1/2/3``) and all
    other record types are ignored.  Negative (relative) indices are accepted.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8", errors="replace")
    positions, faces = [], []
    face_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError(lineno, "vertex needs 3 coordinates")
            try:
                positions.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ParseError(lineno, f"bad vertex coordinate in {raw!r}") from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError(lineno, "face needs at least 3 vertices")
            idx = []
            for tok in parts[1:]:
                head = tok.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError:
                    raise ParseError(lineno, f"bad face index {tok!r}") from None
                if i == 0:
                    raise ParseError(lineno, "OBJ indices are 1-based")
                idx.append(i)
            face_lines.append((lineno, idx, len(positions)))
    m = len(positions)
    for lineno, idx, seen in face_lines:
        resolved = [i - 1 if i > 0 else seen + i for i in idx]
        for i in resolved:
            if i < 0 or i >= m:
                raise IndexOutOfRange(f"line {lineno}: face index {i + 1} outside 1..{m}")
        for j in range(1, len(resolved) - 1):
            faces.append((resolved[0], resolved[j], resolved[j + 1]))
    return TriMesh(np.array(positions, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def export_obj(mesh, header="blendiff mesh"):
    lines = [f"# {header}"]
    lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.positions)
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    return ("\n".join(lines) + "\n").encode("ascii")


def read_obj(path):
    return parse_obj(Path(path).read_bytes())


def write_obj(path, mesh, header="blendiff mesh"):
    Path(path).write_bytes(export_obj(mesh, header))


@dataclass(frozen=True)
class BlendshapeModel:
    """Template position vector ``b0`` plus K residual vectors ``b_k - b0``."""

    template: np.ndarray  # (3M,)
    deltas: np.ndarray  # (K, 3M)
    names: tuple = ()
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        b0 = np.asarray(self.template, dtype=np.float64).reshape(-1)
        if b0.size % 3:
            raise DimensionMismatch("template length must be a multiple of 3")
        deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1, b0.size)
        names = tuple(self.names) if self.names else tuple(f"bs{k}" for k in range(len(deltas)))
        if len(names) != len(deltas):
            raise DimensionMismatch(f"{len(names)} names for {len(deltas)} blendshapes")
        object.__setattr__(self, "template", b0)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))

    @classmethod
    def from_meshes(cls, template, blendshapes, names=None):
        b0 = template.position_vector()
        deltas = [m.position_vector() - b0 for m in blendshapes]
        for d in deltas:
            if d.size != b0.size:
                raise DimensionMismatch("blendshape vertex count differs from template")
        return cls(b0, np.array(deltas).reshape(len(deltas), b0.size),
                   names or (), template.faces)

    @property
    def n_blendshapes(self):
        return len(self.deltas)

    @property
    def n_vertices(self):
        return self.template.size // 3

    @property
    def basis(self):
        """The ``(3M, K)`` residual matrix ``B``."""
        return self.deltas.T

    def apply(self, u):
        return apply_coefficients(self, u)

    def mesh(self, u=None):
        pos = self.template if u is None else apply_coefficients(self, u)
        return TriMesh(pos.reshape(-1, 3), self.faces)


def apply_coefficients(model, u):
    """``b0 + sum_k u_k (b_k - b0)``; a batch ``(N, K)`` gives ``(N, 3M)``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != model.n_blendshapes:
        raise DimensionMismatch(f"expected {model.n_blendshapes} coefficients, got {u.shape[-1]}")
    return model.template + u @ model.deltas


def save_model(directory, model, overwrite=True):
    """Write ``template.obj`` plus one OBJ per blendshape and ``names.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=overwrite)
    write_obj(directory / "template.obj", model.mesh(), "template")
    for k, name in enumerate(model.names):
        u = np.zeros(model.n_blendshapes)
        u[k] = 1.0
        write_obj(directory / f"{name}.obj", model.mesh(u), name)
    (directory / "names.txt").write_text("\n".join(model.names) + ("\n" if model.names else ""))


def load_model(directory):
    directory = Path(directory)
    template = read_obj(directory / "template.obj")
    names_file = directory / "names.txt"
    if names_file.exists():
        names = [n for n in names_file.read_text().split() if n]
    else:
        names = sorted(p.stem for p in directory.glob("*.obj") if p.stem != "template")
    shapes = [read_obj(directory / f"{n}.obj") for n in names]
    return BlendshapeModel.from_meshes(template, shapes, names)


def read_index_list(path):
    """Vertex-subset mask: one vertex index per line."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise ParseError(lineno, f"not an integer: {line!r}") from None
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class VertexCorrespondence:
    pairs: np.ndarray  # (P, 2): source index, target index

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(pairs[:, 0])) != len(pairs):
            raise InputError("duplicate source index in vertex correspondence")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def validate(self, src, tgt):
        if len(self.pairs) and (self.pairs[:, 0].max() >= src.n_vertices
                                or self.pairs[:, 1].max() >= tgt.n_vertices
                                or self.pairs.min() < 0):
            raise IndexOutOfRange("vertex correspondence index outside mesh")

    @classmethod
    def identity(cls, n):
        i = np.arange(n)
        return cls(np.stack([i, i], axis=1))


def read_correspondence(path):
    """Lines of ``src_idx tgt_idx``."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(lineno, "expected 'src_idx tgt_idx'")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ParseError(lineno, f"bad index in {line!r}") from None
    return VertexCorrespondence(np.array(pairs, dtype=np.int64).reshape(-1, 2))


def write_correspondence(path, vc):
    Path(path).write_text("".join(f"{s} {t}\n" for s, t in vc.pairs))
