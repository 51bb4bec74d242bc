import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendiff.errors import DimensionMismatch, IndexOutOfRange, ParseError
from blendiff.mesh import (
    BlendshapeModel,
    TriMesh,
    VertexCorrespondence,
    apply_coefficients,
    export_obj,
    load_model,
    parse_obj,
    read_correspondence,
    read_index_list,
    save_model,
)


def test_parse_single_triangle():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3")
    assert mesh.n_vertices == 3
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_quad_is_fan_triangulated():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_face_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9")


def test_normals_uvs_and_slashes_are_ignored():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 3//1\n"
    mesh = parse_obj(text.encode())
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_negative_indices():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1")
    assert mesh.faces.tolist() == [[0, 1, 2]]


@pytest.mark.parametrize("text", ["v 0 0\n", "v a b c\n", "v 0 0 0\nf 1 x 2\n", "f 1 2\n"])
def test_malformed_records(text):
    with pytest.raises(ParseError):
        parse_obj(text)


def test_parse_error_carries_line():
    with pytest.raises(ParseError) as info:
        parse_obj("v 0 0 0\n\nv 1 0\n")
    assert info.value.line == 3


def test_export_empty_mesh_is_header_only():
    text = export_obj(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))).decode()
    assert all(line.startswith("#") for line in text.strip().splitlines())
    assert parse_obj(text).n_vertices == 0


def test_round_trip_triangle():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3")
    back = parse_obj(export_obj(mesh))
    np.testing.assert_array_equal(back.positions, mesh.positions)
    np.testing.assert_array_equal(back.faces, mesh.faces)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_random_thousand(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-10, 10, (1000, 3))
    faces = np.stack([rng.permutation(1000)[:3] for _ in range(200)])
    mesh = TriMesh(pos, faces)
    back = parse_obj(export_obj(mesh))
    assert np.max(np.abs(back.positions - pos)) <= 1e-6
    np.testing.assert_array_equal(back.faces, faces)


def _one_vertex_model():
    return BlendshapeModel(np.zeros(3), np.array([[1.0, 0.0, 0.0]]), ("x",))


def test_apply_coefficients_cases():
    model = _one_vertex_model()
    np.testing.assert_array_equal(apply_coefficients(model, [0.0]), np.zeros(3))
    np.testing.assert_array_equal(apply_coefficients(model, [1.0]), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(apply_coefficients(model, [0.5]), [0.5, 0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        apply_coefficients(model, [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_apply_is_affine(seed):
    rng = np.random.default_rng(seed)
    # dyadic values keep every sum exactly representable
    model = BlendshapeModel(rng.integers(-8, 8, 12) / 4, rng.integers(-8, 8, (3, 12)) / 4)
    u1 = rng.integers(0, 4, 3) / 4
    u2 = rng.integers(0, 4, 3) / 4
    lhs = apply_coefficients(model, u1) + apply_coefficients(model, u2) - apply_coefficients(model, np.zeros(3))
    np.testing.assert_array_equal(lhs, apply_coefficients(model, u1 + u2))


def test_unit_coefficient_gives_blendshape():
    rng = np.random.default_rng(0)
    template = TriMesh(rng.normal(size=(4, 3)), [[0, 1, 2], [0, 2, 3]])
    shapes = [template.with_positions(template.positions + rng.normal(size=(4, 3))) for _ in range(3)]
    model = BlendshapeModel.from_meshes(template, shapes, ["a", "b", "c"])
    for k in range(3):
        np.testing.assert_allclose(model.apply(np.eye(3)[k]), shapes[k].position_vector(), atol=1e-15)


def test_model_directory_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    template = TriMesh(rng.normal(size=(4, 3)), [[0, 1, 2], [0, 2, 3]])
    shapes = [template.with_positions(template.positions + rng.normal(size=(4, 3))) for _ in range(2)]
    model = BlendshapeModel.from_meshes(template, shapes, ["jawOpen", "mouthClose"])
    save_model(tmp_path / "m", model)
    back = load_model(tmp_path / "m")
    assert back.names == model.names
    np.testing.assert_allclose(back.deltas, model.deltas, atol=1e-7)


def test_correspondence_and_mask_files(tmp_path):
    (tmp_path / "c.txt").write_text("0 3\n1 2\n# comment\n\n2 0\n")
    vc = read_correspondence(tmp_path / "c.txt")
    assert vc.pairs.tolist() == [[0, 3], [1, 2], [2, 0]]
    (tmp_path / "m.txt").write_text("4\n2\n")
    assert read_index_list(tmp_path / "m.txt").tolist() == [4, 2]
    with pytest.raises(ValueError):
        VertexCorrespondence([[0, 1], [0, 2]])


def test_subset_drops_faces():
    mesh = TriMesh(np.eye(4, 3), [[0, 1, 2], [1, 2, 3]])
    sub = mesh.subset([0, 1, 2])
    assert sub.n_vertices == 3 and sub.faces.tolist() == [[0, 1, 2]]
