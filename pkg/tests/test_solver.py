"""Dual solver contracts: objectives, gaps, device updates, aggregation."""
import numpy as np
import pytest

from fedsel.data import DeviceDataset
from fedsel.losses import SmoothedHinge, SquaredLoss
from fedsel.rng import substream
from fedsel.solver import (
    GlobalState,
    Hyperparams,
    LocalUpdate,
    apply_dual_update,
    device_update,
    device_update_ovr,
    dual_objective,
    duality_gap,
    fenchel_gap,
    local_subproblem_value,
    primal_from_dual,
    primal_objective,
    read_vector,
    write_vector,
)

HINGE = SmoothedHinge(gamma=1.0)
SQUARED = SquaredLoss()


def make_device(n=20, dim=4, seed=0, device_id=0):
    rng = np.random.default_rng(seed)
    labels = rng.choice([-1.0, 1.0], size=n)
    feats = labels[:, None] * rng.uniform(0.2, 1.0, size=(n, dim)) + 0.3 * rng.normal(
        size=(n, dim)
    )
    return DeviceDataset(
        device_id=device_id,
        features=feats,
        labels=labels,
        sample_indices=np.arange(n),
    )


# -- objectives ---------------------------------------------------------------


def test_dual_objective_at_zero_hinge():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(30, 5))
    labels = rng.choice([-1.0, 1.0], size=30)
    assert dual_objective(np.zeros(30), feats, labels, HINGE, lam=0.1) == 0.0


def test_dual_objective_single_sample_squared_hand_value():
    # x=(1), y=+1, squared loss, lambda=1, alpha=(1):
    # f*(u) = u^2/2 + u*y so -f*(-1) = -(1/2 - 1) = 1/2; phi = 1; total 0
    value = dual_objective(np.array([1.0]), np.array([[1.0]]), np.array([1.0]), SQUARED, lam=1.0)
    assert value == pytest.approx(0.0, abs=1e-15)


def test_weak_duality_for_feasible_alpha():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, d = 25, 4
        feats = rng.normal(size=(n, d))
        labels = rng.choice([-1.0, 1.0], size=n)
        alpha = labels * rng.uniform(0.0, 1.0, size=n)  # hinge-feasible
        lam = float(rng.uniform(0.01, 1.0))
        dual = dual_objective(alpha, feats, labels, HINGE, lam)
        w = primal_from_dual(alpha, feats, lam)
        primal = primal_objective(w, feats, labels, HINGE, lam)
        assert dual <= primal + 1e-12


def test_primal_at_zero_model_is_half():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(40, 6))
    labels = rng.choice([-1.0, 1.0], size=40)
    assert primal_objective(np.zeros(6), feats, labels, HINGE, lam=0.5) == 0.5


def test_primal_lambda_monotonicity():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(10, 3))
    labels = rng.choice([-1.0, 1.0], size=10)
    w = rng.normal(size=3)
    values = [primal_objective(w, feats, labels, HINGE, lam) for lam in (0.1, 1.0, 10.0)]
    assert values[0] < values[1] < values[2]


def test_primal_duplication_invariance():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(12, 3))
    labels = rng.choice([-1.0, 1.0], size=12)
    w = rng.normal(size=3)
    once = primal_objective(w, feats, labels, HINGE, lam=0.3)
    twice = primal_objective(w, np.vstack([feats, feats]), np.concatenate([labels, labels]), HINGE, lam=0.3)
    assert once == pytest.approx(twice, abs=1e-15)


def test_primal_from_dual_examples():
    assert np.array_equal(primal_from_dual(np.zeros(7), np.ones((7, 3)), 0.4), np.zeros(3))
    # one sample x = e_1, alpha = lambda*D with D = 1 -> w = e_1
    lam = 0.7
    w = primal_from_dual(np.array([lam * 1.0]), np.array([[1.0, 0.0]]), lam)
    np.testing.assert_allclose(w, [1.0, 0.0])


def test_quadratic_regularizer_gradient_finite_difference():
    # w(alpha) = grad g*(phi) with g* = 0.5||.||^2, so the gradient is identity
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(10):
        v = rng.normal(size=5)
        g = lambda x: 0.5 * x @ x
        fd = np.array([(g(v + h * e) - g(v - h * e)) / (2 * h) for e in np.eye(5)])
        rel = np.abs(fd - v) / np.maximum(np.abs(v), 1e-9)
        assert rel.max() < 1e-6


# -- gaps ----------------------------------------------------------------------


def test_gap_at_zero_alpha_equals_primal_at_zero():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(15, 4))
    labels = rng.choice([-1.0, 1.0], size=15)
    gap = duality_gap(np.zeros(15), feats, labels, HINGE, lam=0.2)
    assert gap == primal_objective(np.zeros(4), feats, labels, HINGE, lam=0.2)
    assert gap >= 0.0


def test_fenchel_gap_equals_two_sided_gap():
    rng = np.random.default_rng(8)
    for seed in range(5):
        n, d = 18, 3
        feats = rng.normal(size=(n, d))
        labels = rng.choice([-1.0, 1.0], size=n)
        alpha = labels * rng.uniform(0.0, 1.0, size=n)
        lam = 0.15
        margins = feats @ primal_from_dual(alpha, feats, lam)
        assert fenchel_gap(alpha, margins, labels, HINGE) == pytest.approx(
            duality_gap(alpha, feats, labels, HINGE, lam), abs=1e-12
        )


def test_solver_closes_gap_on_separable_instance():
    feats = np.array([[1.0, 0.2], [-1.0, -0.1]])
    labels = np.array([1.0, -1.0])
    device = DeviceDataset(0, feats, labels, np.arange(2))
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=0.5, epochs=200, block_size=1)
    update = device_update(
        device, np.zeros(2), np.zeros(2), hp, substream(0), total_samples=2
    )
    gap = duality_gap(update.rho, feats, labels, HINGE, 0.5)
    assert gap < 1e-6


def test_gap_median_nonincreasing_over_passes():
    lam = 0.05
    gap_rows = []
    for seed in range(5):
        device = make_device(n=30, dim=4, seed=seed)
        hp = Hyperparams(loss="smoothed_hinge", reg_lambda=lam)
        gaps = []
        for epochs in (1, 2, 4, 8):
            update = device_update(
                device, np.zeros(4), np.zeros(30), hp,
                substream(seed), total_samples=30, epochs=epochs,
            )
            gaps.append(duality_gap(update.rho, device.features, device.labels, HINGE, lam))
        gap_rows.append(gaps)
    medians = np.median(np.array(gap_rows), axis=0)
    assert all(b <= a + 1e-12 for a, b in zip(medians, medians[1:]))


# -- local subproblem -----------------------------------------------------------


def test_local_subproblem_value_at_zero_rho():
    device = make_device(n=10, dim=3, seed=9)
    value = local_subproblem_value(
        np.zeros(10), np.zeros(3), device, lam=0.1, total_samples=40,
        num_devices=4, loss=HINGE,
    )
    assert value == -0.25


def test_local_subproblem_value_shape_check():
    device = make_device(n=10, dim=3, seed=10)
    with pytest.raises(ValueError, match="coordinates"):
        local_subproblem_value(
            np.zeros(9), np.zeros(3), device, lam=0.1, total_samples=40,
            num_devices=4, loss=HINGE,
        )


def test_local_subproblem_value_matches_independent_rederivation():
    # recompute the definition from scratch, including the quadratic term
    device = make_device(n=8, dim=3, seed=11)
    rng = np.random.default_rng(12)
    phi = rng.normal(size=3)
    rho = device.labels * rng.uniform(0.0, 0.4, size=8)
    lam, total, m_count = 0.2, 32, 4

    def oracle(r):
        conj0 = HINGE.conjugate(-np.zeros(8), device.labels)
        conj1 = HINGE.conjugate(-r, device.labels)
        dphi = device.features.T @ r / (lam * total)
        return (
            -1.0 / m_count
            + (conj0 - conj1).sum() / total
            - (r * (device.features @ phi)).sum() / total
            - 0.5 * lam * dphi @ dphi
        )

    for r in (rho, 2.0 * rho * 0.5, 0.5 * rho):
        got = local_subproblem_value(r, phi, device, lam, total, m_count, HINGE)
        assert got == pytest.approx(oracle(r), abs=1e-12)


# -- device updates -------------------------------------------------------------


def test_device_update_zero_epochs():
    device = make_device(n=12, dim=4, seed=13)
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=0.1)
    update = device_update(
        device, np.zeros(4), np.zeros(12), hp, substream(1), total_samples=12, epochs=0
    )
    assert np.array_equal(update.rho, np.zeros(12))
    assert np.array_equal(update.delta_phi, np.zeros(4))
    assert update.achieved_theta == 1.0
    assert update.local_epochs_used == 0


def test_device_update_improves_dual_objective():
    device = make_device(n=25, dim=5, seed=14)
    lam = 0.1
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=lam, epochs=3)
    before = dual_objective(np.zeros(25), device.features, device.labels, HINGE, lam)
    update = device_update(
        device, np.zeros(5), np.zeros(25), hp, substream(2), total_samples=25
    )
    after = dual_objective(update.rho, device.features, device.labels, HINGE, lam)
    assert after > before
    assert 0.0 <= update.achieved_theta <= 1.0


def test_device_update_deterministic_across_identical_devices():
    a = make_device(n=15, dim=4, seed=15, device_id=0)
    b = make_device(n=15, dim=4, seed=15, device_id=1)
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=0.2, epochs=2)
    phi = np.full(4, 0.05)
    ua = device_update(a, phi, np.zeros(15), hp, substream(9), total_samples=15)
    ub = device_update(b, phi, np.zeros(15), hp, substream(9), total_samples=15)
    assert np.array_equal(ua.rho, ub.rho)
    assert np.array_equal(ua.delta_phi, ub.delta_phi)
    assert ua.achieved_theta == ub.achieved_theta


def test_device_update_label_validation():
    device = make_device(n=6, dim=2, seed=16)
    hp = Hyperparams()
    with pytest.raises(ValueError, match=r"\{-1, \+1\}"):
        device_update(
            device, np.zeros(2), np.zeros(6), hp, substream(0),
            total_samples=6, labels=np.arange(6),
        )


def test_ovr_column_matches_lone_run():
    n, dim, k = 14, 3, 4
    rng = np.random.default_rng(17)
    feats = rng.normal(size=(n, dim))
    labels = rng.integers(k, size=n)
    device = DeviceDataset(0, feats, labels, np.arange(n))
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=0.1, epochs=2, block_size=5)
    phi_cols = rng.normal(size=(dim, k)) * 0.01
    alpha_cols = np.zeros((n, k))

    updates = device_update_ovr(
        device, phi_cols, alpha_cols, k, hp, substream(21), total_samples=n
    )
    for cls in range(k):
        lone = device_update(
            device,
            phi_cols[:, cls],
            alpha_cols[:, cls],
            hp,
            substream(21),
            total_samples=n,
            labels=np.where(labels == cls, 1.0, -1.0),
        )
        # coordinate decisions are bitwise-identical; the batched matrix
        # products behind delta_phi/theta only agree to rounding
        assert np.array_equal(updates[cls].rho, lone.rho)
        np.testing.assert_allclose(
            updates[cls].delta_phi, lone.delta_phi, rtol=1e-12, atol=1e-15
        )
        assert updates[cls].achieved_theta == pytest.approx(
            lone.achieved_theta, abs=1e-12
        )


# -- aggregation -----------------------------------------------------------------


def _update(device_id, indices, rho, delta_phi):
    return LocalUpdate(
        device_id=device_id,
        sample_indices=np.asarray(indices),
        rho=np.asarray(rho, dtype=float),
        delta_phi=np.asarray(delta_phi, dtype=float),
        achieved_theta=0.0,
        local_epochs_used=1,
    )


def test_apply_single_update_is_identity_aggregation():
    state = GlobalState(phi=np.array([1.0, -1.0]), alpha=np.zeros(3))
    upd = _update(0, [0, 1], [0.5, -0.5], [0.25, 0.75])
    out = apply_dual_update(state, [upd], aggregation_count=1)
    np.testing.assert_array_equal(out.phi, [1.25, -0.25])
    np.testing.assert_array_equal(out.alpha, [0.5, -0.5, 0.0])
    # input state untouched
    np.testing.assert_array_equal(state.phi, [1.0, -1.0])


def test_apply_cancellation():
    state = GlobalState(phi=np.zeros(2), alpha=np.zeros(4))
    a = _update(0, [0, 1], [1.0, 1.0], [0.3, -0.2])
    b = _update(1, [2, 3], [1.0, 1.0], [-0.3, 0.2])
    out = apply_dual_update(state, [a, b], aggregation_count=2)
    np.testing.assert_array_equal(out.phi, np.zeros(2))


def test_apply_order_invariance():
    state = GlobalState(phi=np.zeros(2), alpha=np.zeros(4))
    a = _update(0, [0, 1], [0.1, 0.2], [0.3, -0.2])
    b = _update(1, [2, 3], [0.4, 0.5], [-0.7, 0.2])
    one = apply_dual_update(state, [a, b], 2)
    two = apply_dual_update(state, [b, a], 2)
    assert np.array_equal(one.phi, two.phi)
    assert np.array_equal(one.alpha, two.alpha)


def test_apply_count_validation():
    state = GlobalState(phi=np.zeros(1), alpha=np.zeros(1))
    with pytest.raises(ValueError, match="positive"):
        apply_dual_update(state, [], aggregation_count=0)


def test_consistency_invariant_after_aggregations():
    rng = np.random.default_rng(18)
    n, dim = 40, 5
    feats = rng.normal(size=(n, dim))
    labels = rng.choice([-1.0, 1.0], size=n)
    lam = 1.0 / n
    hp = Hyperparams(loss="smoothed_hinge", reg_lambda=lam, epochs=2)
    devices = [
        DeviceDataset(m, feats[m * 10 : (m + 1) * 10], labels[m * 10 : (m + 1) * 10],
                      np.arange(m * 10, (m + 1) * 10))
        for m in range(4)
    ]
    state = GlobalState.zeros(dim, n)
    for round_index in range(3):
        updates = [
            device_update(
                dev, state.phi, state.alpha[dev.sample_indices], hp,
                substream(round_index, dev.device_id), total_samples=n,
                labels=labels[dev.sample_indices],
            )
            for dev in devices[: 2 + round_index % 3]
        ]
        state = apply_dual_update(state, updates, aggregation_count=len(updates))
        assert state.consistency_error(feats, lam) < 1e-9


# -- misc ------------------------------------------------------------------------


def test_vector_round_trip(tmp_path):
    path = tmp_path / "phi.bin"
    values = np.array([1.5, -2.25, 0.0, 1e-300])
    write_vector(path, values)
    assert np.array_equal(read_vector(path), values)
    # truncated payload is detected
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="declares"):
        read_vector(path)


def test_hyperparams_validation():
    with pytest.raises(ValueError, match="c_fraction"):
        Hyperparams(c_fraction=0.0)
    with pytest.raises(ValueError, match="epochs"):
        Hyperparams(epochs=0)
    with pytest.raises(ValueError, match="delta_t"):
        Hyperparams(delta_t=0)
    with pytest.raises(ValueError, match="trunc_tol"):
        Hyperparams(trunc_tol=-1.0)
    with pytest.raises(ValueError, match="reg_lambda"):
        Hyperparams(reg_lambda=0.0)
    with pytest.raises(ValueError, match="local_solver"):
        Hyperparams(local_solver="newton")
    with pytest.raises(ValueError, match="aggregation_denominator"):
        Hyperparams(aggregation_denominator="most")
    assert Hyperparams().resolved_lambda(500) == pytest.approx(1 / 500)
    assert Hyperparams(reg_lambda=0.25).resolved_lambda(500) == 0.25
    assert Hyperparams().with_overrides(epochs=5).epochs == 5
