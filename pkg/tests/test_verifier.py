import numpy as np
import pytest

from contracert.interval import IntervalMatrix, IntervalVector, bisect, metzler_majorant, symmetric_box
from contracert.metric import NeuralContractionMetric, eval_M
from contracert.plant import InvertedPendulum, LinearPlant
from contracert.verifier import (
    ContractionProblem,
    adaptive_verify,
    assemble_A_interval,
    assemble_G,
    cell_G,
    contraction_matrix,
    verify_cell,
    verify_domain,
)

from conftest import pendulum_problem, random_box, random_net, rel_close, sample_box

IDENTITY = NeuralContractionMetric.constant_metric(np.eye(2))


def lmax(A):
    return np.linalg.eigvalsh(A)[..., -1]


class TestExamples:
    def test_zero_plant(self):
        prob = ContractionProblem(LinearPlant(np.zeros((2, 2)), np.zeros((2, 1))), None, IDENTITY)
        A = assemble_A_interval(prob, symmetric_box([1.0, 1.0]))
        assert not A.lo.any() and not A.hi.any()
        cert = verify_cell(prob, symmetric_box([1.0, 1.0]))
        assert cert.lambda_max == 0.0 and cert.verified

    def test_stable_linear(self):
        prob = ContractionProblem(LinearPlant(-np.eye(2), np.zeros((2, 1))), None, IDENTITY)
        G = cell_G(prob, symmetric_box([1.0, 2.0]))
        np.testing.assert_array_equal(G.numpy(), -2 * np.eye(2))
        cert = verify_domain(prob, symmetric_box([1.0, 2.0]), 3)
        assert cert.all_verified and cert.max_lambda == pytest.approx(-2.0, abs=1e-14)
        assert cert.metric_upper == pytest.approx(1.0)

    def test_lyapunov_expression(self, rng):
        A = rng.normal(size=(2, 2))
        P = np.array([[2.0, 0.3], [0.3, 1.0]])
        prob = ContractionProblem(LinearPlant(A, np.zeros((2, 1))), None, NeuralContractionMetric.constant_metric(P))
        x = rng.normal(size=2)
        Ai = assemble_A_interval(prob, IntervalVector(x, x))
        np.testing.assert_allclose(Ai.lo.numpy(), P @ A + A.T @ P, rtol=1e-14)
        np.testing.assert_allclose(Ai.hi.numpy(), P @ A + A.T @ P, rtol=1e-14)

    def test_uncontrolled_pendulum_not_verified(self):
        prob = ContractionProblem(InvertedPendulum(), None, IDENTITY)
        cert = verify_cell(prob, IntervalVector([0.0, 0.0], [0.0, 0.0]))
        # A = J + J^T = [[0, 1+g], [1+g, 0]]
        assert cert.lambda_max == pytest.approx(10.81, rel=1e-14)
        assert not cert.verified

    def test_assemble_G(self):
        A = IntervalMatrix([[-3.0, -1.0], [-1.0, -3.0]], [[-2.0, 0.5], [0.5, -2.0]])
        G = assemble_G(A)
        assert G.tolist() == [[-2.0, 1.0], [1.0, -2.0]]
        assert verify_cells_lambda(G) == pytest.approx(-1.0, abs=1e-15)

    def test_assemble_G_metzler_fixed_point(self):
        A = np.array([[-3.0, 0.5], [0.5, -1.0]])
        assert assemble_G(IntervalMatrix(A, A.copy())).tolist() == A.tolist()

    def test_margin(self):
        prob = ContractionProblem(LinearPlant(-np.eye(2), np.zeros((2, 1))), None, IDENTITY, margin=2.5)
        assert not verify_cell(prob, symmetric_box([1.0, 1.0])).verified

    def test_rate_shift(self, rng):
        plant = LinearPlant(rng.normal(size=(2, 2)), np.array([[0.0], [1.0]]))
        ctrl = random_net(rng, [2, 8, 1])
        base = ContractionProblem(plant, ctrl, IDENTITY)
        shifted = ContractionProblem(plant, ctrl, IDENTITY, rate=0.7)
        box = random_box(rng, 2)
        np.testing.assert_allclose(
            cell_G(shifted, box).numpy(), cell_G(base, box).numpy() + 1.4 * np.eye(2), rtol=1e-14, atol=1e-14
        )


def verify_cells_lambda(G):
    return float(np.linalg.eigvalsh(G.numpy())[-1])


def exact_A_oracle(prob, x, h=1e-6):
    """A(x) with the metric's time derivative taken by central differences along the flow."""
    J = prob.plant.jf(x)
    if prob.controller is not None:
        from contracert.nn import controller_eval, controller_jacobian

        u = controller_eval(prob.controller, x)
        du = controller_jacobian(prob.controller, x)
        J = J + prob.plant.B @ du
    else:
        u = np.zeros(prob.plant.m)
    fcl = prob.plant.f(x) + prob.plant.B @ u
    M = eval_M(prob.metric, x)
    Mdot = (eval_M(prob.metric, x + h * fcl) - eval_M(prob.metric, x - h * fcl)) / (2 * h)
    return M @ J + J.T @ M + Mdot + 2 * prob.rate * M


class TestPendulumProblem:
    def test_exact_matrix_against_oracle(self, rng):
        prob = pendulum_problem(rng, rate=0.3)
        for x in rng.normal(size=(10, 2)):
            ref = exact_A_oracle(prob, x)
            assert np.max(np.abs(contraction_matrix(prob, x) - ref)) <= 1e-6 * max(1, np.abs(ref).max())

    def test_point_cell_exact(self, rng):
        prob = pendulum_problem(rng, rate=0.2)
        x = rng.normal(size=2)
        A = assemble_A_interval(prob, IntervalVector(x, x))
        exact = contraction_matrix(prob, x)
        assert rel_close(A.lo.numpy(), exact, 1e-12) and rel_close(A.hi.numpy(), exact, 1e-12)

    def test_containment_and_dominance(self, rng):
        for _ in range(10):
            prob = pendulum_problem(rng, rate=0.1)
            box = random_box(rng, 2, width_scale=0.2)
            A = assemble_A_interval(prob, box)
            G = assemble_G(A).numpy()
            X = sample_box(rng, box, 500)
            Ax = contraction_matrix(prob, X)
            assert A.contains(Ax, rtol=1e-9, atol=1e-9)
            slack = 1e-9 * np.maximum(1, np.abs(G))
            assert np.all(metzler_majorant(Ax) <= G + slack)
            assert np.all(lmax(Ax) <= lmax(G) + 1e-9 * max(1, abs(lmax(G))))

    def test_refinement_monotone(self, rng):
        for _ in range(10):
            prob = pendulum_problem(rng)
            box = random_box(rng, 2, width_scale=0.3)
            parent = verify_cell(prob, box).lambda_max
            for child in bisect(box):
                assert verify_cell(prob, child).lambda_max <= parent + 1e-9 * max(1, abs(parent))

    def test_r1_matches_cell(self, rng):
        prob = pendulum_problem(rng)
        box = random_box(rng, 2)
        a = verify_domain(prob, box, 1).cells[0]
        b = verify_cell(prob, box)
        assert a.lambda_max == b.lambda_max and np.array_equal(a.G, b.G)

    def test_adaptive_covers_domain(self, rng):
        prob = pendulum_problem(rng)
        domain = symmetric_box([0.2, 0.2])
        cert = adaptive_verify(prob, domain, 2)
        depth_area = sum(4.0**-c.depth for c in cert.cells)
        assert depth_area == pytest.approx(1.0)
        assert all(c.depth <= 2 for c in cert.cells)
        assert all(c.verified for c in cert.cells if c.depth < 2)

    def test_adaptive_depth_zero(self, rng):
        prob = pendulum_problem(rng)
        box = random_box(rng, 2)
        cert = adaptive_verify(prob, box, 0)
        assert len(cert.cells) == 1 and cert.cells[0].lambda_max == verify_cell(prob, box).lambda_max

    def test_adaptive_single_cell_when_verified(self):
        prob = ContractionProblem(LinearPlant(-np.eye(2), np.zeros((2, 1))), None, IDENTITY)
        assert len(adaptive_verify(prob, symmetric_box([1.0, 1.0]), 3).cells) == 1

    def test_dimension_checks(self, rng):
        with pytest.raises(ValueError):
            ContractionProblem(InvertedPendulum(), random_net(rng, [2, 4, 2]), IDENTITY)
        with pytest.raises(ValueError):
            ContractionProblem(InvertedPendulum(), None, NeuralContractionMetric.constant_metric(np.eye(3)))
        prob = ContractionProblem(InvertedPendulum(), None, IDENTITY)
        with pytest.raises(ValueError):
            assemble_A_interval(prob, symmetric_box([1.0]))


def test_stabilized_pendulum_certifies():
    """A linear state feedback with a matching quadratic metric certifies a small box."""
    plant = InvertedPendulum()
    K = np.array([[-30.0, -10.0]])
    Acl = plant.jf(np.zeros(2)) + plant.B @ K
    # P solves Acl^T P + P Acl = -I
    from scipy.linalg import solve_continuous_lyapunov

    P = solve_continuous_lyapunov(Acl.T, -np.eye(2))
    from contracert.nn import FeedforwardNetwork, Activation

    ctrl = FeedforwardNetwork([(K, np.zeros(1))], output=Activation.identity())
    prob = ContractionProblem(plant, ctrl, NeuralContractionMetric.constant_metric(P))
    cert = verify_domain(prob, symmetric_box([0.05, 0.05]), 2)
    assert cert.all_verified
    assert not verify_domain(prob, symmetric_box([3.0, 1.0]), 1).all_verified
