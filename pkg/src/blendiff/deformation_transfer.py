"""Deformation transfer between triangle meshes.

A source template and its deformed copies (blendshapes) define per-face
affine deformation gradients.  Those gradients are copied onto a target
template through a face correspondence, and the target vertex positions that
best reproduce them are found by linear least squares.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import (
    DegenerateTriangle,
    DimensionMismatch,
    InputError,
    NoCompatibleFace,
    NotPositiveDefinite,
    SingularSystem,
)
from .mesh import BlendshapeModel, TriMesh, VertexCorrespondence
from .numerics.linalg import cho_solve, cholesky

AREA_MIN = 1e-12
DENSE_LIMIT = 6000


@dataclass(frozen=True)
class Alignment:
    """Similarity transform ``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def similarity_alignment(src_points, tgt_points):
    """Least-squares similarity transform taking ``src_points`` onto ``tgt_points``.

    Closed form of Umeyama (1991); reflections are excluded.
    """
    x = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    if len(x) != len(y) or len(x) == 0:
        raise InputError("alignment needs matching, non-empty point sets")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = (xc**2).sum() / len(x)
    if len(x) < 3 or var_x <= 0:
        return Alignment(1.0, np.eye(3), my - mx)
    cov = yc.T @ xc / len(x)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = (u * d) @ vt
    scale = float((s * d).sum() / var_x)
    return Alignment(scale, rot, my - scale * rot @ mx)


@dataclass(frozen=True)
class FaceCorrespondence:
    pairs: np.ndarray  # (P, 2): source face, target face
    n_target_faces: int
    alignment: Alignment = field(default_factory=Alignment)

    def __post_init__(self):
        object.__setattr__(self, "pairs", np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2))

    @property
    def unmatched(self):
        """Target faces that no pair covers."""
        covered = np.zeros(self.n_target_faces, dtype=bool)
        covered[self.pairs[:, 1]] = True
        return np.flatnonzero(~covered)

    @classmethod
    def identity(cls, n_faces):
        i = np.arange(n_faces)
        return cls(np.stack([i, i], axis=1), n_faces)


def build_face_correspondence(src, tgt, vc, *, max_distance_factor=3.0, allow_unmatched=False):
    """Match every target face to a source face.

    The source is first aligned to the target by a similarity transform fitted
    to the landmark pairs in ``vc``.  Each target face then takes the source
    face with the nearest centroid among those whose (aligned) normal is
    within 90 degrees of its own, provided the centroid distance is at most
    ``max_distance_factor`` times the mean target edge length.
    """
    if not isinstance(vc, VertexCorrespondence):
        vc = VertexCorrespondence(vc)
    if len(vc) == 0:
        raise InputError("vertex correspondence is empty")
    vc.validate(src, tgt)
    align = similarity_alignment(src.positions[vc.pairs[:, 0]], tgt.positions[vc.pairs[:, 1]])
    aligned = TriMesh(align.apply(src.positions), src.faces)
    src_c = aligned.face_centroids()
    src_n = aligned.face_normals()
    tgt_c = tgt.face_centroids()
    tgt_n = tgt.face_normals()
    radius = max_distance_factor * tgt.mean_edge_length()
    tree = cKDTree(src_c)
    pairs, missing = [], []
    for f in range(tgt.n_faces):
        cand = tree.query_ball_point(tgt_c[f], radius)
        best, best_d = -1, np.inf
        for s in cand:
            if src_n[s] @ tgt_n[f] <= 0.0:
                continue
            d = float(np.sum((src_c[s] - tgt_c[f]) ** 2))
            if d < best_d or (d == best_d and s < best):
                best, best_d = s, d
        if best < 0:
            missing.append(f)
        else:
            pairs.append((best, f))
    if missing and not allow_unmatched:
        raise NoCompatibleFace(
            f"{len(missing)} target face(s) have no compatible source face, first: {missing[0]}"
        )
    return FaceCorrespondence(np.array(pairs, dtype=np.int64).reshape(-1, 2), tgt.n_faces, align)


def _frames(positions, faces):
    """Per-face 3x3 frames ``[v2 - v1, v3 - v1, n / sqrt(|n|)]`` as columns."""
    tri = positions[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    return np.stack([e1, e2, n / np.sqrt(np.where(norm > 0, norm, 1.0))[:, None]], axis=2), norm


def _inverse_frames(mesh):
    frames, norm = _frames(mesh.positions, mesh.faces)
    bad = np.flatnonzero(0.5 * norm < AREA_MIN)
    if bad.size:
        raise DegenerateTriangle(f"face {bad[0]} has area {0.5 * norm[bad[0]]:.3e}")
    return np.linalg.inv(frames)


def deformation_gradients(template, deformed_positions):
    """Per-face transforms taking the template frames onto the deformed frames."""
    deformed = np.asarray(deformed_positions, dtype=np.float64).reshape(-1, 3)
    if deformed.shape != template.positions.shape:
        raise DimensionMismatch("deformed positions do not match the template")
    inv = _inverse_frames(template)
    frames, _ = _frames(deformed, template.faces)
    return frames @ inv


class DeformationTransfer:
    """Least-squares transfer of source deformations onto a target template.

    Parameters
    ----------
    anchor : {"mapped", "template"}
        Fixes the translation the gradients cannot see.  ``"template"`` pins the
        output centroid to the target template centroid.  ``"mapped"`` moves it
        by the source's centroid displacement, carried through the landmark
        alignment, so a source-identical target reproduces the source exactly.
    """

    def __init__(self, anchor="mapped", max_distance_factor=3.0, allow_unmatched=False):
        self.anchor = anchor
        self.max_distance_factor = max_distance_factor
        self.allow_unmatched = allow_unmatched

    def fit(self, src_template, tgt_template, correspondence):
        if self.anchor not in ("mapped", "template"):
            raise InputError(f"unknown anchor {self.anchor!r}")
        if isinstance(correspondence, FaceCorrespondence):
            fc = correspondence
        else:
            fc = build_face_correspondence(
                src_template, tgt_template, correspondence,
                max_distance_factor=self.max_distance_factor,
                allow_unmatched=self.allow_unmatched,
            )
        self.src_template_ = src_template
        self.tgt_template_ = tgt_template
        self.face_correspondence_ = fc
        self._src_inv = _inverse_frames(src_template)
        self._assemble(tgt_template, fc)
        return self

    def _assemble(self, tgt, fc):
        m, f = tgt.n_vertices, tgt.n_faces
        inv = _inverse_frames(tgt)
        terms = list(fc.pairs[:, 1]) + list(fc.unmatched)
        rows, cols, vals = [], [], []
        for r, face in enumerate(terms):
            a, b, c = tgt.faces[face]
            w = inv[face]
            idx = (b, c, m + face)
            for col in range(3):
                row = 3 * r + col
                for j in range(3):
                    rows.append(row)
                    cols.append(idx[j])
                    vals.append(w[j, col])
                rows.append(row)
                cols.append(a)
                vals.append(-w[:, col].sum())
        n_unknown = m + f
        self._A = sp.csr_matrix((vals, (rows, cols)), shape=(3 * len(terms), n_unknown))
        self._n_matched = len(fc.pairs)
        self._unmatched = fc.unmatched
        normal = (self._A.T @ self._A).tolil()
        # Translation gauge: a unit penalty on vertex 0.  The similarity terms
        # are translation invariant, so the anchored centroid is imposed
        # exactly afterwards by a rigid shift.
        normal[0, 0] += 1.0
        normal = normal.tocsc()
        if n_unknown <= DENSE_LIMIT:
            try:
                self._chol = cholesky(normal.toarray())
            except NotPositiveDefinite as exc:
                raise SingularSystem(f"anchored normal matrix is not positive definite: {exc}") from None
            self._lu = None
        else:
            from scipy.sparse.linalg import splu

            try:
                self._lu = splu(normal.tocsc())
            except RuntimeError as exc:
                raise SingularSystem(str(exc)) from None
            self._chol = None

    def _solve(self, rhs):
        if self._chol is not None:
            return cho_solve(self._chol, rhs)
        return self._lu.solve(rhs)

    def target_gradients(self, src_deformed_positions):
        """Source gradients expressed in the target frame, one per least-squares term."""
        deformed = np.asarray(src_deformed_positions, dtype=np.float64).reshape(-1, 3)
        if deformed.shape != self.src_template_.positions.shape:
            raise DimensionMismatch("deformed source does not match the source template")
        frames, _ = _frames(deformed, self.src_template_.faces)
        q_src = frames @ self._src_inv
        rot = self.face_correspondence_.alignment.rotation
        q = rot @ q_src[self.face_correspondence_.pairs[:, 0]] @ rot.T
        eye = np.broadcast_to(np.eye(3), (len(self._unmatched), 3, 3))
        return np.concatenate([q, eye], axis=0)

    def transform(self, src_deformed_positions, return_residual=False):
        """Target positions ``(M, 3)`` reproducing the deformation of the source."""
        q = self.target_gradients(src_deformed_positions)
        # row (term, col) of A pairs with Q[term][coord, col]
        rhs = q.transpose(0, 2, 1).reshape(-1, 3)
        tgt = self.tgt_template_
        m = tgt.n_vertices
        centroid = tgt.positions.mean(axis=0)
        if self.anchor == "mapped":
            src = self.src_template_
            deformed = np.asarray(src_deformed_positions, dtype=np.float64).reshape(-1, 3)
            disp = deformed.mean(axis=0) - src.positions.mean(axis=0)
            align = self.face_correspondence_.alignment
            centroid = centroid + align.scale * align.rotation @ disp
        b = self._A.T @ rhs
        x = self._solve(b)
        # the similarity terms are translation invariant, so this is exact
        x = x - (x[:m].mean(axis=0) - centroid)
        out = x[:m]
        if return_residual:
            return out, float(np.linalg.norm(self._A @ x - rhs))
        return out


def transfer(src_template, src_deformed, tgt_template, fc, anchor="mapped"):
    """Transfer one deformed source onto ``tgt_template``; returns ``(3M,)``."""
    dt = DeformationTransfer(anchor=anchor).fit(src_template, tgt_template, fc)
    pos = src_deformed.positions if isinstance(src_deformed, TriMesh) else src_deformed
    return dt.transform(pos).reshape(-1)


def build_blendshapes(src_template, src_blendshapes, tgt_template, fc, names=None,
                      anchor="mapped", return_report=False):
    """Target blendshape model: one transferred shape per source blendshape."""
    names = list(names) if names is not None else [f"bs{k}" for k in range(len(src_blendshapes))]
    if len(names) != len(src_blendshapes):
        raise DimensionMismatch("one name per source blendshape is required")
    dt = DeformationTransfer(anchor=anchor).fit(src_template, tgt_template, fc)
    b0 = tgt_template.position_vector()
    deltas, report = [], []
    for name, shape in zip(names, src_blendshapes):
        pos = shape.positions if isinstance(shape, TriMesh) else shape
        try:
            out, resid = dt.transform(pos, return_residual=True)
        except Exception as exc:  # annotate and re-raise with the same type
            exc.args = (f"{name}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        deltas.append(out.reshape(-1) - b0)
        report.append({"name": name, "vertices": tgt_template.n_vertices, "residual_norm": resid})
    model = BlendshapeModel(b0, np.array(deltas).reshape(len(deltas), b0.size), names,
                            tgt_template.faces)
    if return_report:
        return model, report
    return model
