import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendiff.coeff_fit import (
    CoeffSequence,
    CoefficientFitter,
    MotionSequence,
    QPConfig,
    assemble_qp,
    fit_sequence,
    solve_qp,
)
from blendiff.errors import DimensionMismatch, InputError, MaxIterations, RankDeficientBlendshapes
from blendiff.mesh import BlendshapeModel
from oracles import pgd_qp, qp_objective


def one_vertex_model():
    return BlendshapeModel(np.zeros(3), np.array([[1.0, 0.0, 0.0]]), ("x",))


def random_instance(seed, n_frames=None, n_shapes=None):
    rng = np.random.default_rng(seed)
    k = n_shapes or int(rng.integers(1, 7))
    n = n_frames or int(rng.integers(1, 60 // k + 1))
    m = int(rng.integers(k + 2, 3 * k + 6))
    model = BlendshapeModel(rng.normal(size=3 * m), rng.normal(size=(k, 3 * m)))
    # jumpy, partly out-of-box coefficients make both constraint families active
    u = rng.uniform(-0.3, 1.3, (n, k))
    frames = u @ model.deltas + model.template + rng.normal(0, 0.05, (n, 3 * m))
    return model, MotionSequence(frames)


def test_single_frame_interior():
    u = fit_sequence(one_vertex_model(), [[0.5, 0.0, 0.0]]).values
    np.testing.assert_allclose(u, [[0.5]], atol=1e-9)


def test_hand_fixture_velocity_active():
    u = fit_sequence(one_vertex_model(), [[0.5, 0, 0], [0.9, 0, 0]]).values
    np.testing.assert_allclose(u[:, 0], [0.65, 0.75], atol=1e-9)


def test_template_targets_give_zero():
    model, _ = random_instance(3)
    frames = np.tile(model.template, (5, 1))
    assert np.all(fit_sequence(model, frames).values == 0.0)


def test_assemble_structure():
    model = one_vertex_model()
    qp = assemble_qp(model, MotionSequence([[0.5, 0, 0]]))
    assert qp.G.shape[0] == 0
    qp = assemble_qp(model, MotionSequence([[0.5, 0, 0], [0.9, 0, 0]]))
    assert qp.G.shape == (2, 2)
    np.testing.assert_array_equal(qp.G.toarray(), [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(qp.h, [0.1, 0.1])
    np.testing.assert_allclose(qp.q, [-0.5, -0.9])


def test_assemble_blocks_match_direct_product():
    model, motion = random_instance(11, n_frames=4, n_shapes=3)
    qp = assemble_qp(model, motion)
    basis = np.stack(model.deltas, axis=1)
    dense = qp.P.toarray()
    for n in range(4):
        np.testing.assert_allclose(dense[3 * n:3 * n + 3, 3 * n:3 * n + 3], basis.T @ basis, atol=1e-12)
    assert np.count_nonzero(dense) == 4 * 9
    q_direct = np.concatenate([basis.T @ (model.template - p) for p in motion.frames])
    np.testing.assert_allclose(qp.q, q_direct, atol=1e-10)


def test_rank_deficient():
    deltas = np.array([[1.0, 0, 0, 0, 0, 0], [2.0, 0, 0, 0, 0, 0]])
    model = BlendshapeModel(np.zeros(6), deltas)
    with pytest.raises(RankDeficientBlendshapes):
        assemble_qp(model, MotionSequence(np.zeros((2, 6))))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        assemble_qp(one_vertex_model(), MotionSequence(np.zeros((2, 6))))


def test_config_validation():
    with pytest.raises(InputError):
        QPConfig(delta=0.0)
    with pytest.raises(InputError):
        QPConfig(tol_primal=-1.0)


@pytest.mark.parametrize("seed", range(12))
def test_matches_projected_gradient_oracle(seed):
    model, motion = random_instance(seed)
    cfg = QPConfig()
    qp = assemble_qp(model, motion, cfg)
    res = solve_qp(qp, cfg)
    q = qp.q.reshape(qp.n_frames, qp.n_blendshapes)
    ref = pgd_qp(qp.gram, q, qp.n_frames, cfg.delta)
    assert abs(res.objective - qp_objective(qp.gram, q, ref)) <= 1e-4
    np.testing.assert_allclose(res.u, ref, atol=1e-3)
    assert res.primal_residual <= 1e-6 and res.dual_residual <= 1e-5


def test_matches_cvxopt():
    cvxopt = pytest.importorskip("cvxopt")
    cvxopt.solvers.options.update(show_progress=False, abstol=1e-12, reltol=1e-12, feastol=1e-12)
    model, motion = random_instance(5, n_frames=8, n_shapes=4)
    qp = assemble_qp(model, motion)
    n = qp.n
    g = np.vstack([qp.G.toarray(), np.eye(n), -np.eye(n)])
    h = np.concatenate([qp.h, np.ones(n), np.zeros(n)])
    sol = cvxopt.solvers.qp(cvxopt.matrix(qp.P.toarray()), cvxopt.matrix(qp.q),
                            cvxopt.matrix(g), cvxopt.matrix(h))
    ref = np.array(sol["x"]).reshape(-1)
    res = solve_qp(qp)
    np.testing.assert_allclose(res.u.reshape(-1), ref, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_feasible_and_better_than_zero(seed):
    model, motion = random_instance(seed)
    qp = assemble_qp(model, motion)
    res = solve_qp(qp)
    u = res.u
    assert u.min() >= -1e-6 and u.max() <= 1 + 1e-6
    if u.shape[0] > 1:
        assert np.max(np.abs(np.diff(u, axis=0))) <= qp.delta + 1e-6
    assert res.objective <= qp.objective(np.zeros(qp.n)) + 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unique_under_warm_starts(seed):
    model, motion = random_instance(seed)
    qp = assemble_qp(model, motion)
    a = solve_qp(qp).u
    b = solve_qp(qp, warm_start=np.random.default_rng(seed).uniform(0, 1, qp.n)).u
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_multipliers_certify_kkt():
    model, motion = random_instance(21, n_frames=10, n_shapes=4)
    qp = assemble_qp(model, motion)
    res = solve_qp(qp)
    x = res.u.reshape(-1)
    lam = res.velocity_multipliers
    assert np.all(lam >= 0)
    grad = qp.P @ x + qp.q + qp.G.T @ lam + res.bound_multipliers
    assert np.max(np.abs(grad)) <= 1e-5 * max(1.0, np.max(np.abs(qp.q)))
    slack = qp.h - qp.G @ x
    assert np.max(np.abs(lam * slack)) <= 1e-6


def test_max_iterations_carries_best_iterate():
    model, motion = random_instance(2, n_frames=10, n_shapes=5)
    cfg = QPConfig(max_iter=3, polish=False, adapt_every=1)
    with pytest.raises(MaxIterations) as info:
        solve_qp(assemble_qp(model, motion, cfg), cfg)
    res = info.value.result
    assert res is not None and not res.converged and res.u.shape == (10, 5)


def test_csv_round_trip():
    seq = CoeffSequence(np.array([[0.123456789123, 1.0], [0.0, 0.5]]), names=("jawOpen", "mouthClose"))
    text = seq.to_csv()
    assert text.splitlines()[0] == "frame,jawOpen,mouthClose"
    assert text.splitlines()[1] == "0,0.123456789,1"
    back = CoeffSequence.from_csv(text)
    assert back.names == seq.names
    np.testing.assert_allclose(back.values, seq.values, rtol=1e-8)


def test_estimator_api():
    model, motion = random_instance(8, n_frames=6, n_shapes=3)
    est = CoefficientFitter(delta=0.2)
    assert est.get_params()["delta"] == 0.2
    u = est.fit(model).transform(motion.frames)
    assert u.shape == (6, 3)
    assert est.diagnostics_["converged"]
    np.testing.assert_allclose(u, fit_sequence(model, motion, QPConfig(delta=0.2)).values, atol=1e-9)
