"""Primal-dual solver: dual objective, local sub-problems, aggregation.

The model is linear with regularizer g(w) = ||w||^2/2, whose conjugate is
itself, so the server's shared vector phi(alpha) = X.alpha/(lambda*D) is also
the primal iterate w(alpha) = grad g*(phi). Devices own disjoint blocks of the
dual vector alpha (one coordinate per training sample) and improve them by
randomized coordinate ascent with exact closed-form steps; the server absorbs
accepted increments into (alpha, phi) keeping the two consistent to machine
precision.

Conventions: feature matrices are row-per-sample (n, d); the dual dimension D
is always the global training size, so every data term carries 1/D and the
shared-vector map is phi = F.T @ alpha / (lambda * D).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .losses import Loss, make_loss
from .rng import substream

AGGREGATION_RULES = ("accepted", "explored", "all")
LOCAL_SOLVERS = ("dual", "primal_sgd")


@dataclass
class Hyperparams:
    """The experiment-wide knob bag; validated on construction.

    reg_lambda=None means "resolve to 1/D once the dataset size is known".
    """

    loss: str = "smoothed_hinge"
    gamma: float = 1.0
    reg_lambda: float | None = None
    epochs: int = 10
    block_size: int = 10
    eta: float = 0.01
    c_fraction: float = 0.1
    delta_t: int = 1
    trunc_tol: float = 0.0
    theta_threshold: float = 0.5
    global_accuracy_target: float | None = None
    seed: int = 1
    local_solver: str = "dual"
    aggregation_denominator: str = "accepted"

    def __post_init__(self) -> None:
        if not 0.0 < self.c_fraction <= 1.0:
            raise ValueError(f"c_fraction must be in (0, 1], got {self.c_fraction}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.delta_t < 1:
            raise ValueError(f"delta_t must be >= 1, got {self.delta_t}")
        if self.trunc_tol < 0.0:
            raise ValueError(f"trunc_tol must be >= 0, got {self.trunc_tol}")
        if self.reg_lambda is not None and not self.reg_lambda > 0.0:
            raise ValueError(f"reg_lambda must be positive, got {self.reg_lambda}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.local_solver not in LOCAL_SOLVERS:
            raise ValueError(f"local_solver must be one of {LOCAL_SOLVERS}, got {self.local_solver!r}")
        if self.aggregation_denominator not in AGGREGATION_RULES:
            raise ValueError(
                f"aggregation_denominator must be one of {AGGREGATION_RULES}, "
                f"got {self.aggregation_denominator!r}"
            )

    def resolved_lambda(self, total_samples: int) -> float:
        if self.reg_lambda is not None:
            return self.reg_lambda
        return 1.0 / total_samples

    def make_loss(self) -> Loss:
        return make_loss(self.loss, self.gamma)

    def with_overrides(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


@dataclass
class GlobalState:
    """Server-held shared vector and the full dual vector for one binary problem."""

    phi: np.ndarray
    alpha: np.ndarray
    round_index: int = 0

    @classmethod
    def zeros(cls, dim: int, total_samples: int) -> "GlobalState":
        return cls(phi=np.zeros(dim), alpha=np.zeros(total_samples))

    def consistency_error(self, features: np.ndarray, lam: float) -> float:
        """max-norm distance between phi and its recomputation from alpha."""
        total = self.alpha.shape[0]
        recomputed = np.asarray(features, dtype=np.float64).T @ self.alpha / (lam * total)
        return float(np.max(np.abs(self.phi - recomputed), initial=0.0))


@dataclass
class LocalUpdate:
    """One device's reply for one binary problem."""

    device_id: int
    sample_indices: np.ndarray
    rho: np.ndarray
    delta_phi: np.ndarray
    achieved_theta: float
    local_epochs_used: int


def dual_objective(alpha, features, labels, loss: Loss, lam: float) -> float:
    """(1/D) sum_i -f_i*(-alpha_i) - (lambda/2)||phi(alpha)||^2."""
    alpha = np.asarray(alpha, dtype=np.float64)
    total = alpha.shape[0]
    phi = np.asarray(features, dtype=np.float64).T @ alpha / (lam * total)
    conj = loss.conjugate(-alpha, labels)
    return float(-np.mean(conj) - 0.5 * lam * phi @ phi)


def primal_objective(w, features, labels, loss: Loss, lam: float) -> float:
    """Mean per-sample loss plus (lambda/2)||w||^2."""
    w = np.asarray(w, dtype=np.float64)
    margins = features @ w
    return float(np.mean(loss.value(margins, labels)) + 0.5 * lam * w @ w)


def primal_from_dual(alpha, features, lam: float) -> np.ndarray:
    """w(alpha) = grad g*(phi(alpha)) = phi(alpha) for the L2 regularizer."""
    alpha = np.asarray(alpha, dtype=np.float64)
    total = alpha.shape[0]
    return np.asarray(features, dtype=np.float64).T @ alpha / (lam * total)


def duality_gap(alpha, features, labels, loss: Loss, lam: float) -> float:
    w = primal_from_dual(alpha, features, lam)
    return primal_objective(w, features, labels, loss, lam) - dual_objective(
        alpha, features, labels, loss, lam
    )


def fenchel_gap(alpha, margins, labels, loss: Loss) -> float:
    """Per-coordinate Fenchel-Young decomposition of the duality gap.

    Equal to primal - dual whenever margins = F @ phi(alpha); every summand is
    nonnegative in exact arithmetic, which keeps the reported gap from dipping
    below zero through summation noise on large datasets. alpha is projected
    onto the conjugate's domain first, absorbing ulp-level drift from
    aggregation without changing feasible inputs.
    """
    alpha = loss.project_dual(np.asarray(alpha, dtype=np.float64), labels)
    terms = loss.value(margins, labels) + loss.conjugate(-alpha, labels) + alpha * margins
    return float(np.mean(terms))


def local_subproblem_value(
    rho,
    phi,
    device,
    lam: float,
    total_samples: int,
    num_devices: int,
    loss: Loss,
    alpha=None,
    labels=None,
) -> float:
    """Local model of the global dual improvement for one device.

    value(rho) = -1/M + [R(alpha + rho) - R(alpha)] restricted to the device's
    own coordinates; the constant never moves the maximizer, and rho = 0 gives
    exactly -1/M. `alpha` is the device's current dual slice (zeros if None);
    `labels` defaults to the device's own labels, which must be in {-1, +1}.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (device.size,):
        raise ValueError(
            f"rho must cover exactly the device's {device.size} coordinates, "
            f"got shape {rho.shape}"
        )
    labels = device.labels if labels is None else labels
    alpha = np.zeros(device.size) if alpha is None else np.asarray(alpha, dtype=np.float64)
    feats = np.asarray(device.features, dtype=np.float64)
    base_margins = feats @ np.asarray(phi, dtype=np.float64)
    conj_change = loss.conjugate(-alpha, labels) - loss.conjugate(-(alpha + rho), labels)
    delta_phi = feats.T @ rho / (lam * total_samples)
    return float(
        -1.0 / num_devices
        + conj_change.sum() / total_samples
        - (rho * base_margins).sum() / total_samples
        - 0.5 * lam * delta_phi @ delta_phi
    )


def _coordinate_passes(labels_pm, alpha0, margins, gram_scaled, qii, loss, epochs, block_size, rng):
    """Sequential closed-form coordinate ascent, margins maintained via Gram rows.

    Mutates nothing passed in except through the returned rho; `margins` is
    copied. Shapes are (n, K): the same shuffled visit order drives all K
    one-vs-rest columns at once.
    """
    n = labels_pm.shape[0]
    rho = np.zeros_like(alpha0)
    margins = margins.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, block_size):
            for i in order[start : start + block_size]:
                delta = loss.coordinate_delta(alpha0[i] + rho[i], labels_pm[i], margins[i], qii[i])
                if np.any(delta):
                    rho[i] += delta
                    margins += np.outer(gram_scaled[i], delta)
    return rho, margins


def _theta_from_certificate(improvement: np.ndarray, gap: np.ndarray) -> np.ndarray:
    """gap/(improvement+gap), clipped; 0 when nothing was achievable."""
    improvement = np.maximum(improvement, 0.0)
    gap = np.maximum(gap, 0.0)
    denom = improvement + gap
    theta = np.divide(gap, denom, out=np.zeros_like(denom), where=denom > 0)
    return np.clip(theta, 0.0, 1.0)


def _solve_columns(device, phi_cols, alpha_cols, labels_pm, loss, lam, total_samples, epochs, block_size, rng, gram=None):
    """Run the local dual solve for K binary columns sharing one device."""
    feats = np.asarray(device.features, dtype=np.float64)
    if gram is None:
        gram = feats @ feats.T
    lam_total = lam * total_samples
    gram_scaled = gram / lam_total
    qii = np.diagonal(gram) / lam_total
    base_margins = feats @ phi_cols

    rho, margins = _coordinate_passes(
        labels_pm, alpha_cols, base_margins, gram_scaled, qii, loss, epochs, block_size, rng
    )
    delta_phi = feats.T @ rho / lam_total

    # projection guards the conjugates against ulp drift in aggregated alpha
    alpha0 = loss.project_dual(alpha_cols, labels_pm)
    beta = loss.project_dual(alpha_cols + rho, labels_pm)
    conj0 = loss.conjugate(-alpha0, labels_pm)
    conj1 = loss.conjugate(-beta, labels_pm)
    improvement = (
        (conj0 - conj1).sum(axis=0) / total_samples
        - (rho * base_margins).sum(axis=0) / total_samples
        - 0.5 * lam * (delta_phi * delta_phi).sum(axis=0)
    )
    gap = (loss.value(margins, labels_pm) + conj1 + beta * margins).sum(axis=0) / total_samples
    theta = _theta_from_certificate(improvement, gap)
    return rho, delta_phi, theta


def device_update(
    device,
    phi,
    alpha_slice,
    hp: Hyperparams,
    rng,
    *,
    total_samples: int,
    labels=None,
    epochs: int | None = None,
    gram=None,
) -> LocalUpdate:
    """E passes of seeded randomized dual coordinate ascent on one device.

    Labels must be in {-1, +1} (pass binarized labels for one-vs-rest use).
    `epochs` overrides hp.epochs and may be 0, in which case rho = 0 and
    achieved_theta = 1 whenever any improvement was available.
    """
    if device.size == 0:
        raise ValueError(f"device {device.device_id} has no training samples")
    labels = device.labels if labels is None else np.asarray(labels)
    if not np.all(np.abs(labels) == 1):
        raise ValueError("device_update needs labels in {-1, +1}")
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng))
    epochs = hp.epochs if epochs is None else epochs
    lam = hp.resolved_lambda(total_samples)
    loss = hp.make_loss()

    rho, delta_phi, theta = _solve_columns(
        device,
        np.asarray(phi, dtype=np.float64)[:, None],
        np.asarray(alpha_slice, dtype=np.float64)[:, None],
        np.asarray(labels, dtype=np.float64)[:, None],
        loss,
        lam,
        total_samples,
        epochs,
        hp.block_size,
        rng,
        gram=gram,
    )
    return LocalUpdate(
        device_id=device.device_id,
        sample_indices=device.sample_indices,
        rho=rho[:, 0],
        delta_phi=delta_phi[:, 0],
        achieved_theta=float(theta[0]),
        local_epochs_used=epochs,
    )


def device_update_ovr(
    device,
    phi_cols,
    alpha_cols,
    num_classes: int,
    hp: Hyperparams,
    rng,
    *,
    total_samples: int,
    epochs: int | None = None,
    gram=None,
) -> list[LocalUpdate]:
    """One-vs-rest device update: all K class columns in one sweep.

    Every class column sees the same coordinate visit order, so the dual
    coordinates of column k are bitwise-identical to a lone device_update run
    with the same rng stream; delta_phi and achieved_theta agree to rounding
    (batched matrix products may differ from a lone run in the last ulp).
    """
    if device.size == 0:
        raise ValueError(f"device {device.device_id} has no training samples")
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng))
    epochs = hp.epochs if epochs is None else epochs
    lam = hp.resolved_lambda(total_samples)
    loss = hp.make_loss()
    labels_pm = np.where(
        device.labels[:, None] == np.arange(num_classes)[None, :], 1.0, -1.0
    )
    rho, delta_phi, theta = _solve_columns(
        device, phi_cols, alpha_cols, labels_pm, loss, lam, total_samples,
        epochs, hp.block_size, rng, gram=gram,
    )
    return [
        LocalUpdate(
            device_id=device.device_id,
            sample_indices=device.sample_indices,
            rho=rho[:, k],
            delta_phi=delta_phi[:, k],
            achieved_theta=float(theta[k]),
            local_epochs_used=epochs,
        )
        for k in range(num_classes)
    ]


def device_update_sgd(
    device,
    phi,
    hp: Hyperparams,
    rng,
    *,
    labels=None,
    epochs: int | None = None,
) -> LocalUpdate:
    """Optional primal parity mode: E epochs of mini-batch SGD from w = phi.

    Returns rho = 0 and a raw delta_phi = w_final - phi; the alpha/phi
    consistency invariant does not apply in this mode and achieved_theta is
    reported as the conservative 1.0.
    """
    if device.size == 0:
        raise ValueError(f"device {device.device_id} has no training samples")
    labels = device.labels if labels is None else np.asarray(labels)
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng))
    epochs = hp.epochs if epochs is None else epochs
    lam = hp.resolved_lambda(device.size)
    loss = hp.make_loss()
    feats = np.asarray(device.features, dtype=np.float64)
    w = np.asarray(phi, dtype=np.float64).copy()
    n = device.size
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.block_size):
            batch = order[start : start + hp.block_size]
            slopes = loss.derivative(feats[batch] @ w, labels[batch])
            grad = feats[batch].T @ slopes / len(batch) + lam * w
            w -= hp.eta * grad
    return LocalUpdate(
        device_id=device.device_id,
        sample_indices=device.sample_indices,
        rho=np.zeros(n),
        delta_phi=w - np.asarray(phi, dtype=np.float64),
        achieved_theta=1.0,
        local_epochs_used=epochs,
    )


def apply_dual_update(state: GlobalState, updates, aggregation_count: int) -> GlobalState:
    """Absorb accepted updates, each scaled by 1/aggregation_count.

    alpha and phi absorb the same scaled quantities, so the consistency
    invariant ||phi - X.alpha/(lambda D)||_inf survives exactly. Updates are
    combined in device-id order regardless of arrival order.
    """
    if aggregation_count <= 0:
        raise ValueError(f"aggregation_count must be positive, got {aggregation_count}")
    phi = state.phi.copy()
    alpha = state.alpha.copy()
    for update in sorted(updates, key=lambda u: u.device_id):
        alpha[update.sample_indices] += update.rho / aggregation_count
        phi += update.delta_phi / aggregation_count
    return GlobalState(phi=phi, alpha=alpha, round_index=state.round_index)


def write_vector(path: str | Path, values) -> None:
    """Debug dump: 8-byte little-endian count, then float64 little-endian values."""
    values = np.asarray(values, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", values.shape[0]))
        fh.write(values.tobytes())


def read_vector(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.shape[0] != count:
        raise ValueError(f"vector file {path} declares {count} values, holds {data.shape[0]}")
    return data.astype(np.float64)
