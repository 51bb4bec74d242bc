import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from blendiff.deformation_transfer import (
    DeformationTransfer,
    FaceCorrespondence,
    build_blendshapes,
    build_face_correspondence,
    deformation_gradients,
    similarity_alignment,
    transfer,
)
from blendiff.errors import DegenerateTriangle, NoCompatibleFace
from blendiff.mesh import TriMesh, VertexCorrespondence


def grid_mesh(nx, ny, height=None, jitter=0.0, seed=0):
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny), indexing="ij")
    pos = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    if jitter:
        pos[:, :2] += np.random.default_rng(seed).uniform(-jitter, jitter, (nx * ny, 2))
    if height is not None:
        pos[:, 2] = height(pos[:, 0], pos[:, 1])
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, (i + 1) * ny + j, (i + 1) * ny + j + 1, i * ny + j + 1
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(pos, np.array(faces))


def bump(x, y):
    return 0.2 * np.sin(2.5 * x) * np.cos(1.7 * y)


def smooth_deform(pos, amount=0.05):
    x, y, z = pos.T
    return pos + amount * np.stack([np.sin(3 * y), np.cos(2 * x) * z, x * y], axis=1)


@pytest.fixture(scope="module")
def face_1k():
    return grid_mesh(32, 32, bump)


# ------------------------------------------------------------ gradients

def test_gradients_identity():
    mesh = grid_mesh(4, 4, bump)
    q = deformation_gradients(mesh, mesh.positions)
    np.testing.assert_allclose(q, np.broadcast_to(np.eye(3), q.shape), atol=1e-12)


def test_gradients_uniform_scale():
    mesh = grid_mesh(4, 4, bump)
    q = deformation_gradients(mesh, 2.0 * mesh.positions)
    np.testing.assert_allclose(q, np.broadcast_to(2 * np.eye(3), q.shape), atol=1e-12)


def test_gradients_recover_shear():
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [0.2, 0.9, 0]], [[0, 1, 2]])
    shear = np.array([[1.0, 0.7, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    q = deformation_gradients(tri, tri.positions @ shear.T)
    np.testing.assert_allclose(q[0], shear, atol=1e-8)


def test_gradients_degenerate():
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(DegenerateTriangle):
        deformation_gradients(tri, tri.positions)


# ------------------------------------------------------------ alignment / correspondence

def test_similarity_alignment_recovers_transform():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    rot = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
    tgt = 1.7 * pts @ rot.T + [1.0, 2.0, -3.0]
    al = similarity_alignment(pts, tgt)
    assert al.scale == pytest.approx(1.7)
    np.testing.assert_allclose(al.rotation, rot, atol=1e-12)
    np.testing.assert_allclose(al.apply(pts), tgt, atol=1e-12)


def test_identical_meshes_give_identity_map():
    mesh = grid_mesh(6, 5, bump)
    fc = build_face_correspondence(mesh, mesh, VertexCorrespondence.identity(mesh.n_vertices))
    assert sorted(map(tuple, fc.pairs)) == [(i, i) for i in range(mesh.n_faces)]


def test_translated_target_gives_identity_map():
    mesh = grid_mesh(6, 5, bump)
    moved = mesh.with_positions(mesh.positions + [5.0, -2.0, 1.0])
    landmarks = VertexCorrespondence.identity(mesh.n_vertices)
    fc = build_face_correspondence(mesh, moved, landmarks)
    assert sorted(map(tuple, fc.pairs)) == [(i, i) for i in range(mesh.n_faces)]


def _brute_force_matches(src, tgt, vc, factor=3.0):
    # independent alignment: scipy's Kabsch plus closed-form scale
    a = src.positions[vc.pairs[:, 0]]
    b = tgt.positions[vc.pairs[:, 1]]
    ac, bc = a - a.mean(0), b - b.mean(0)
    rot, _ = Rotation.align_vectors(bc, ac)
    r = rot.as_matrix()
    scale = np.sum(bc * (ac @ r.T)) / np.sum(ac * ac)
    pos = scale * (src.positions - a.mean(0)) @ r.T + b.mean(0)
    aligned = TriMesh(pos, src.faces)
    sc, sn = aligned.face_centroids(), aligned.face_normals()
    tc, tn = tgt.face_centroids(), tgt.face_normals()
    radius = factor * tgt.mean_edge_length()
    out = []
    for f in range(tgt.n_faces):
        best = None
        for s in range(src.n_faces):
            d = np.linalg.norm(sc[s] - tc[f])
            if sn[s] @ tn[f] > 0 and d <= radius and (best is None or d < best[0] - 1e-12):
                best = (d, s)
        out.append((best[1], f))
    return sorted(out)


def test_mirrored_strip_matches_brute_force():
    strip = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1.3, 0]], [[0, 1, 2], [0, 2, 3]])
    mirrored = strip.with_positions(strip.positions * [-1, 1, 1] + [0.1, 0.0, 0.0])
    vc = VertexCorrespondence.identity(4)
    fc = build_face_correspondence(strip, mirrored, vc)
    assert sorted(map(tuple, fc.pairs)) == _brute_force_matches(strip, mirrored, vc)


def test_random_bumpy_meshes_match_brute_force():
    src = grid_mesh(7, 6, bump, jitter=0.02, seed=1)
    tgt = grid_mesh(6, 7, lambda x, y: 0.9 * bump(x, y), jitter=0.02, seed=2)
    rot = Rotation.from_rotvec([0.0, 0.0, 0.4]).as_matrix()
    tgt = tgt.with_positions(1.3 * tgt.positions @ rot.T)
    corners = [0, 5, 36, 41]
    tgt_corners = [0, 6, 35, 41]
    vc = VertexCorrespondence(np.stack([corners, tgt_corners], axis=1))
    fc = build_face_correspondence(src, tgt, vc)
    assert sorted(map(tuple, fc.pairs)) == _brute_force_matches(src, tgt, vc)


def test_no_compatible_face():
    up = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    far = up.with_positions(up.positions + [0, 0, 0])
    src = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 10, 0], [11, 10, 0], [10, 11, 0]],
                  [[3, 4, 5], [0, 2, 1]])
    # landmarks pin the flipped triangle onto the target; the other face is far away
    vc = VertexCorrespondence([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(NoCompatibleFace):
        build_face_correspondence(src, far, vc)
    fc = build_face_correspondence(src, far, vc, allow_unmatched=True)
    assert fc.unmatched.tolist() == [0]


# ------------------------------------------------------------ transfer

def test_identity_deformation_returns_template():
    mesh = grid_mesh(8, 8, bump)
    fc = FaceCorrespondence.identity(mesh.n_faces)
    out = transfer(mesh, mesh, mesh, fc)
    np.testing.assert_allclose(out, mesh.position_vector(), atol=1e-9)


def test_self_transfer_reproduces_source(face_1k):
    mesh = face_1k
    fc = FaceCorrespondence.identity(mesh.n_faces)
    deformed = smooth_deform(mesh.positions)
    out = transfer(mesh, deformed, mesh, fc)
    assert np.max(np.abs(out - deformed.ravel())) <= 1e-6


def test_translation_invariance(face_1k):
    mesh = face_1k
    fc = FaceCorrespondence.identity(mesh.n_faces)
    deformed = smooth_deform(mesh.positions)
    shift = np.array([0.3, -1.2, 2.0])
    dt = DeformationTransfer(anchor="template").fit(mesh, mesh, fc)
    a = dt.transform(deformed)
    b = dt.transform(deformed + shift)
    assert np.max(np.abs(a - b)) <= 1e-8
    # the mapped anchor follows the translation but keeps the shape
    dt = DeformationTransfer(anchor="mapped").fit(mesh, mesh, fc)
    a = dt.transform(deformed)
    b = dt.transform(deformed + shift)
    assert np.max(np.abs((b - shift) - a)) <= 1e-8


def test_pure_translation_gives_template():
    mesh = grid_mesh(8, 8, bump)
    fc = FaceCorrespondence.identity(mesh.n_faces)
    out = transfer(mesh, mesh.positions + [1.0, 2.0, 3.0], mesh, fc, anchor="template")
    np.testing.assert_allclose(out, mesh.position_vector(), atol=1e-9)


def test_linearity_probe_on_planar_strips():
    src = grid_mesh(5, 4)
    tgt = grid_mesh(4, 6)
    tgt = tgt.with_positions(tgt.positions * [1.2, 0.8, 1.0])
    a = np.array([[2.0, 0.3, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]])
    vc = VertexCorrespondence([[0, 0], [19, 23], [3, 5], [16, 18]])
    fc = build_face_correspondence(src, tgt, vc)
    q_src = deformation_gradients(src, src.positions @ a.T)
    np.testing.assert_allclose(q_src, np.broadcast_to(a, q_src.shape), atol=1e-12)
    out = transfer(src, src.positions @ a.T, tgt, fc)
    q_tgt = deformation_gradients(tgt, out)
    np.testing.assert_allclose(q_tgt, np.broadcast_to(a, q_tgt.shape), atol=1e-6)


def test_rotated_target_receives_rotated_deformation():
    src = grid_mesh(6, 6, bump)
    rot = Rotation.from_rotvec([0.2, 0.5, -0.3]).as_matrix()
    tgt = src.with_positions(src.positions @ rot.T)
    vc = VertexCorrespondence.identity(src.n_vertices)
    fc = build_face_correspondence(src, tgt, vc)
    deformed = smooth_deform(src.positions)
    out = transfer(src, deformed, tgt, fc).reshape(-1, 3)
    np.testing.assert_allclose(out, deformed @ rot.T, atol=1e-8)


# ------------------------------------------------------------ blendshapes

ARKIT_32 = [
    "jawForward", "jawLeft", "jawRight", "jawOpen", "mouthClose", "mouthFunnel", "mouthPucker",
    "mouthLeft", "mouthRight", "mouthSmileLeft", "mouthSmileRight", "mouthFrownLeft",
    "mouthFrownRight", "mouthDimpleLeft", "mouthDimpleRight", "mouthStretchLeft",
    "mouthStretchRight", "mouthRollLower", "mouthRollUpper", "mouthShrugLower",
    "mouthShrugUpper", "mouthPressLeft", "mouthPressRight", "mouthLowerDownLeft",
    "mouthLowerDownRight", "mouthUpperUpLeft", "mouthUpperUpRight", "cheekPuff",
    "cheekSquintLeft", "cheekSquintRight", "noseSneerLeft", "noseSneerRight",
]


def test_build_32_named_blendshapes():
    assert len(ARKIT_32) == 32
    mesh = grid_mesh(5, 5, bump)
    rng = np.random.default_rng(4)
    shapes = [mesh.positions + 0.01 * rng.normal(size=mesh.positions.shape) for _ in ARKIT_32]
    model = build_blendshapes(mesh, shapes, mesh, FaceCorrespondence.identity(mesh.n_faces), ARKIT_32)
    assert model.n_blendshapes == 32
    assert model.names == tuple(ARKIT_32)


def test_build_empty_list():
    mesh = grid_mesh(4, 4, bump)
    model = build_blendshapes(mesh, [], mesh, FaceCorrespondence.identity(mesh.n_faces), [])
    assert model.n_blendshapes == 0
    assert model.deltas.shape == (0, 3 * mesh.n_vertices)


def test_self_transfer_blendshape_deltas():
    mesh = grid_mesh(10, 10, bump)
    shapes = [smooth_deform(mesh.positions, a) for a in (0.02, -0.04, 0.06)]
    model = build_blendshapes(mesh, shapes, mesh, FaceCorrespondence.identity(mesh.n_faces),
                              ["a", "b", "c"])
    for k, s in enumerate(shapes):
        assert np.max(np.abs(model.deltas[k] - (s - mesh.positions).ravel())) <= 1e-6


def test_error_annotated_with_name():
    mesh = grid_mesh(4, 4, bump)
    bad = mesh.positions.copy()
    with pytest.raises(ValueError, match="jawOpen"):
        build_blendshapes(mesh, [bad[:-1]], mesh, FaceCorrespondence.identity(mesh.n_faces), ["jawOpen"])
