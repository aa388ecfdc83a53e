import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srmpc.benchmarks import LinearQuadraticModel, MotivatingExample, PredatorPrey, instantiate_benchmark
from srmpc.errors import InputError, NumericDomainError
from srmpc.model import FunctionModel, Trajectory, check_derivatives, contract, eval_bundle, lower, upper


def scalar_bilinear():
    # f = x + u x, l = x^2 + u^2
    return FunctionModel(1, 1, 1, f=lambda x, u: x + u * x, h=lambda x: x,
                         l=lambda x, u: x[0] ** 2 + u[0] ** 2, m=lambda x: 0.0)


def test_linear_bundle_is_constant_with_zero_curvature():
    A, B = np.array([[1.0, 0.1], [0.0, 0.9]]), np.array([[0.0], [1.0]])
    model = LinearQuadraticModel(A, B, [[1.0, 0.0]], np.eye(2), np.eye(1))
    b = eval_bundle(model, [0.3, -2.0], [1.5])
    np.testing.assert_array_equal(b.A, A)
    np.testing.assert_array_equal(b.B, B)
    assert not b.K.any() and not b.L.any() and not b.M.any()


def test_motivating_example_bundle_at_zero_control():
    d = 0.01
    b = eval_bundle(MotivatingExample(d), [0.7, -0.2], [0.0, 0.0])
    np.testing.assert_allclose(b.A, np.eye(2) + d * np.diag([1.0, -1.0]))
    np.testing.assert_allclose(b.B, d * np.array([[1.0, 0.0], [0.0, 1.7]]))
    # the bilinear term u2 * x1 couples control and state
    assert b.L[1, 1, 0] == pytest.approx(d)
    assert np.count_nonzero(b.L) == 1


def test_scalar_bilinear_hand_derivatives():
    b = eval_bundle(scalar_bilinear(), [1.0], [0.0])
    assert b.A[0, 0] == pytest.approx(1.0, abs=1e-8)
    assert b.B[0, 0] == pytest.approx(1.0, abs=1e-8)
    assert b.K[0, 0, 0] == pytest.approx(0.0, abs=1e-5)
    assert b.L[0, 0, 0] == pytest.approx(1.0, abs=1e-5)
    assert b.M[0, 0, 0] == pytest.approx(0.0, abs=1e-5)


def test_check_derivatives_linear_is_exact():
    model = LinearQuadraticModel([[1.0, 2.0], [0.0, 1.0]], [[0.0], [1.0]], [[1.0, 0.0]], np.eye(2), np.eye(1))
    report = check_derivatives(model, [1.0, 2.0], [0.5])
    assert max(report.values()) <= 1e-8


def test_check_derivatives_predator_prey_at_steady_state():
    model = PredatorPrey(0.01)
    report = check_derivatives(model, model.z_s, [0.0], step=1e-5)
    assert max(report.values()) <= 1e-6


def test_check_derivatives_flags_wrong_jacobian():
    class Broken(MotivatingExample):
        def derivatives(self, x, u):
            b = super().derivatives(x, u)
            b.A = b.A + 1.0
            return b

    report = check_derivatives(Broken(0.1), [0.2, 0.3], [0.1, -0.4])
    assert report["A"] > 0.4
    assert report["B"] <= 1e-6


@pytest.mark.parametrize("name", ["motivating_example", "predator_prey"])
def test_builtin_derivatives_at_random_points(name, rng):
    model = instantiate_benchmark(name, {"delta": 0.05})
    for _ in range(100):
        x = rng.uniform(-2, 2, size=model.n_x)
        u = rng.uniform(-1, 1, size=model.n_u)
        assert max(check_derivatives(model, x, u, step=1e-5).values()) <= 1e-5


def test_motivating_example_weights():
    d = 0.01
    b = eval_bundle(instantiate_benchmark("motivating_example", {"delta": d}), [0.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(b.C, [[0.0, 1.0]])
    np.testing.assert_allclose(b.Q, 2 * d * np.diag([1.0, 0.0]))
    np.testing.assert_allclose(b.R, 2 * d * np.eye(2))


def test_predator_prey_steady_state_is_fixed_point():
    model = instantiate_benchmark("predator_prey", {"delta": 0.01})
    np.testing.assert_allclose(model.f(model.z_s, [0.0]), model.z_s, atol=1e-15)


def test_lq_custom_identity_wiring():
    I = np.eye(2)
    model = instantiate_benchmark("lq_custom", dict(A=I, B=I, C=I, Q=I, R=I))
    b = eval_bundle(model, [1.0, 2.0], [3.0, 4.0])
    for block in (b.A, b.B, b.C, b.Q, b.R):
        np.testing.assert_array_equal(block, I)


def test_unknown_benchmark_and_parameters():
    with pytest.raises(InputError):
        instantiate_benchmark("pendulum")
    with pytest.raises(InputError):
        instantiate_benchmark("predator_prey", {"delta": 0.1, "horizon": 3})
    with pytest.raises(InputError):
        instantiate_benchmark("motivating_example", {"delta": -1.0})


def test_bundle_dimension_and_domain_errors():
    model = MotivatingExample(0.1)
    with pytest.raises(InputError):
        eval_bundle(model, [1.0, 2.0, 3.0], [0.0, 0.0])
    bad = FunctionModel(1, 1, 1, f=lambda x, u: np.sqrt(x) + u, h=lambda x: x,
                        l=lambda x, u: x[0] ** 2, m=lambda x: 0.0)
    with pytest.raises(NumericDomainError), np.errstate(invalid="ignore"):
        eval_bundle(bad, [-1.0], [0.0])


def test_batched_bundle_matches_pointwise(rng):
    model = PredatorPrey(0.05)
    x = rng.uniform(0.5, 1.5, size=(7, 3))
    u = rng.normal(size=(7, 1))
    batch = eval_bundle(model, x, u)
    for k in range(7):
        point = eval_bundle(model, x[k], u[k])
        np.testing.assert_allclose(batch[k].K, point.K)
        np.testing.assert_allclose(batch[k].A, point.A)


def test_contract_definition(rng):
    K = rng.normal(size=(3, 2, 2))
    p = rng.normal(size=3)
    np.testing.assert_allclose(contract(K, p), sum(p[i] * K[i] for i in range(3)))


def test_trajectory_slices():
    t = Trajectory(np.zeros((4, 2)), np.ones((3, 1)), np.zeros((3, 2)))
    assert t.N == 3
    assert len(t.upper(-1).x) == 0 and len(t.lower(3).u) == 0
    assert len(t.upper(1).x) == 2
    with pytest.raises(InputError):
        Trajectory(np.zeros((4, 2)), np.ones((2, 1)), np.zeros((3, 2)))
    with pytest.raises(InputError):
        upper(np.zeros(3), 3)
    with pytest.raises(InputError):
        lower(np.zeros(3), 4)


@given(st.floats(0.01, 0.3), st.lists(st.floats(-1.5, 1.5), min_size=4, max_size=4))
def test_second_derivative_slices_are_symmetric(delta, vals):
    model = PredatorPrey(delta)
    x = np.array(vals[:3]) + 1.0
    b = eval_bundle(model, x, vals[3:])
    np.testing.assert_allclose(b.K, np.swapaxes(b.K, 1, 2))
    np.testing.assert_allclose(b.M, np.swapaxes(b.M, 1, 2))
    np.testing.assert_allclose(b.Q, b.Q.T)
