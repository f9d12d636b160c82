import numpy as np
import pytest

from vcead.base import NotFittedError
from vcead.svm import SvmClassifier, _kernel


def brute_force_dual(X, y, C, kernel="linear", gamma=1.0, step=1e-3):
    """Grid search over the dual for <=3 points at the given resolution.

    Returns alpha maximizing W(a) = sum(a) - 0.5 a^T Q a subject to the box
    and the equality constraint, plus the bias recovered from a free
    support vector.
    """
    s = np.where(np.asarray(y) == 1, 1.0, -1.0)
    K = _kernel(kernel, gamma, X, X)
    Q = K * np.outer(s, s)
    n = len(y)
    grid = np.arange(0.0, C + step / 2, step)
    if n == 2:
        assert s[0] * s[1] < 0, "needs one point per class"
        a = grid
        W = 2 * a - 0.5 * (a * a * (Q[0, 0] + Q[1, 1] + 2 * Q[0, 1]))
        best = a[np.argmax(W)]
        alpha = np.array([best, best])
    elif n == 3:
        pos = np.flatnonzero(s > 0)
        neg = np.flatnonzero(s < 0)
        assert len(pos) == 2 and len(neg) == 1
        i, j = pos
        k = neg[0]
        A1, A2 = np.meshgrid(grid, grid, indexing="ij")
        A3 = A1 + A2  # equality constraint
        feasible = A3 <= C + 1e-12
        W = A1 + A2 + A3 - 0.5 * (
            A1 * A1 * Q[i, i] + A2 * A2 * Q[j, j] + A3 * A3 * Q[k, k]
            + 2 * A1 * A2 * Q[i, j] + 2 * A1 * A3 * Q[i, k]
            + 2 * A2 * A3 * Q[j, k])
        W = np.where(feasible, W, -np.inf)
        flat = int(np.argmax(W))
        a1, a2 = grid[flat // len(grid)], grid[flat % len(grid)]
        alpha = np.zeros(3)
        alpha[i], alpha[j], alpha[k] = a1, a2, a1 + a2
    else:
        raise ValueError("only 2 or 3 points supported")

    free = np.flatnonzero((alpha > step) & (alpha < C - step))
    sv = np.flatnonzero(alpha > step)
    pick = free if len(free) else sv
    b = float(np.mean([s[i] - (alpha * s * K[i]).sum() for i in pick]))

    def decision(P):
        Kp = _kernel(kernel, gamma, P, X)
        return Kp @ (alpha * s) + b

    return alpha, decision


def test_two_point_max_margin_boundary():
    X = np.array([[-1.0], [1.0]])
    y = np.array([0, 1])
    m = SvmClassifier(kernel="linear", C=1e6).fit(X, y)
    # analytic solution: decision(x) = x, boundary at 0
    probe = np.array([[-1.0], [-0.2], [0.0], [0.7], [1.0]])
    d = m.decision_function(probe)
    assert np.allclose(d, probe.ravel(), atol=1e-3)
    assert (m.predict(X) == y).all()
    # bracket the zero crossing: boundary within 1e-3 of the origin
    assert m.decision_function([[-1e-3]])[0] < 0 < m.decision_function([[1e-3]])[0]


def test_separable_blobs_perfect_training_accuracy():
    rng = np.random.default_rng(5)
    A = rng.normal([-2, -2], 0.3, size=(40, 2))
    B = rng.normal([2, 2], 0.3, size=(40, 2))
    X = np.vstack([A, B])
    y = np.array([0] * 40 + [1] * 40)
    m = SvmClassifier(kernel="linear", C=10.0).fit(X, y)
    assert (m.predict(X) == y).all()


def test_rbf_gamma_to_zero_degenerates_to_bias():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(30, 2))
    y = (X[:, 0] > 0).astype(int)
    m = SvmClassifier(kernel="rbf", C=1.0, gamma=1e-10).fit(X, y)
    d = m.decision_function(rng.normal(size=(10, 2)) * 5)
    # constant-kernel limit: decision collapses toward the bias value
    assert np.max(np.abs(d - m.bias_)) < 1e-4


def test_solution_matches_brute_force_dual_two_points():
    X = np.array([[-1.0, 0.5], [0.8, -0.3]])
    y = np.array([0, 1])
    C = 1.0
    m = SvmClassifier(kernel="linear", C=C, tol=1e-5).fit(X, y)
    Z = (X - m.mean_) / m.std_
    _, oracle_decision = brute_force_dual(Z, y, C)
    probe = np.array([[-0.5, 0.1], [0.3, 0.3], [1.2, -0.8]])
    probe_z = (probe - m.mean_) / m.std_
    assert np.allclose(m.decision_function(probe), oracle_decision(probe_z),
                       atol=5e-3)


def test_solution_matches_brute_force_dual_three_points():
    X = np.array([[0.0, 1.0], [1.0, 0.4], [-0.8, -0.9]])
    y = np.array([1, 1, 0])
    C = 1.0
    m = SvmClassifier(kernel="linear", C=C, tol=1e-5).fit(X, y)
    Z = (X - m.mean_) / m.std_
    _, oracle_decision = brute_force_dual(Z, y, C)
    probe = np.array([[0.2, 0.2], [-1.0, 0.0], [0.5, -0.5], [0.0, 0.0]])
    probe_z = (probe - m.mean_) / m.std_
    assert np.allclose(m.decision_function(probe), oracle_decision(probe_z),
                       atol=5e-3)


def test_duplicating_non_support_point_leaves_decision_unchanged():
    rng = np.random.default_rng(7)
    A = rng.normal([-2, 0], 0.2, size=(10, 2))
    B = rng.normal([2, 0], 0.2, size=(10, 2))
    X = np.vstack([A, B, [[-6.0, 0.0]]])  # far interior point: never a SV
    y = np.array([0] * 10 + [1] * 10 + [0])
    m1 = SvmClassifier(kernel="linear", C=5.0).fit(X, y)
    assert m1.decision_function([[-6.0, 0.0]])[0] < -1  # well inside its class
    X2 = np.vstack([X, [[-6.0, 0.0]], [[-6.0, 0.0]]])
    y2 = np.concatenate([y, [0, 0]])
    m2 = SvmClassifier(kernel="linear", C=5.0).fit(X2, y2)
    probe = rng.normal(0, 2, size=(30, 2))
    # standardization statistics shift slightly with the duplicates, so
    # compare decisions in the original coordinates at a loose tolerance
    assert np.allclose(m1.decision_function(probe), m2.decision_function(probe),
                       atol=2e-2)


def test_tie_at_zero_classifies_as_anomaly():
    m = SvmClassifier(kernel="linear", C=1e6).fit(
        np.array([[-1.0], [1.0]]), np.array([0, 1]))
    assert m.predict(np.array([[0.0]]))[0] == 1


def test_standardization_stored_on_model():
    X = np.array([[10.0, 1.0], [20.0, 2.0], [30.0, 1.5], [40.0, 2.5]])
    y = np.array([0, 0, 1, 1])
    m = SvmClassifier(kernel="linear", C=1.0).fit(X, y)
    assert np.allclose(m.mean_, X.mean(axis=0))
    assert np.allclose(m.std_, X.std(axis=0))


def test_invalid_hyperparameters_rejected():
    X = np.array([[0.0], [1.0]])
    y = np.array([0, 1])
    with pytest.raises(ValueError, match="C must be positive"):
        SvmClassifier(C=0.0).fit(X, y)
    with pytest.raises(ValueError, match="gamma"):
        SvmClassifier(kernel="rbf", gamma=-1.0).fit(X, y)
    with pytest.raises(ValueError, match="kernel"):
        SvmClassifier(kernel="poly").fit(X, y)


def test_single_class_rejected():
    with pytest.raises(ValueError, match="both classes"):
        SvmClassifier().fit(np.zeros((3, 2)), np.zeros(3, dtype=int))


def test_unfitted_decision_raises():
    with pytest.raises(NotFittedError):
        SvmClassifier().decision_function(np.zeros((1, 2)))


def test_decision_finite_on_finite_input():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 3))
    y = (X[:, 0] > 0).astype(int)
    m = SvmClassifier(kernel="rbf", C=10.0, gamma=0.5).fit(X, y)
    d = m.decision_function(rng.normal(size=(100, 3)) * 100)
    assert np.isfinite(d).all()


def test_serialization_roundtrip():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 3))
    y = (X[:, 1] > 0).astype(int)
    m = SvmClassifier(kernel="rbf", C=2.0, gamma=0.7).fit(X, y)
    back = SvmClassifier.from_dict(m.to_dict())
    assert np.allclose(m.decision_function(X), back.decision_function(X))
