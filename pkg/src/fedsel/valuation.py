"""Device contribution estimation: coalition values, sampled and exact Shapley.

The round's explored devices form a cooperative game: the value of a subset is
the server-validation accuracy of the model obtained by aggregating just that
subset's updates. Contributions are running means of permutation marginals,
estimated by truncated Monte-Carlo walks; a brute-force subset-enumeration
Shapley implementation serves as the validation oracle for small games.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EXACT_PLAYER_GUARD = 10


@dataclass
class CoalitionGame:
    """Players plus a deterministic subset -> value map."""

    players: tuple[int, ...]
    value_fn: Callable[[tuple[int, ...]], float]


@dataclass
class ContributionLedger:
    """Running-mean marginal contribution per device.

    beta[m] is maintained incrementally as the mean of all marginals recorded
    for m; counts[m] is how many were recorded. A per-device count replaces
    the exploitation-timer denominator, which would divide by zero on the
    first pass.
    """

    beta: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def get(self, device_id: int) -> float:
        return self.beta.get(device_id, 0.0)

    def items(self) -> list[tuple[int, float]]:
        return sorted(self.beta.items())


def record_marginal(ledger: ContributionLedger, device_id: int, marginal: float) -> ContributionLedger:
    """Fold one observed marginal into the device's running mean."""
    n = ledger.counts.get(device_id, 0) + 1
    old = ledger.beta.get(device_id, 0.0)
    ledger.counts[device_id] = n
    ledger.beta[device_id] = old + (marginal - old) / n
    return ledger


def _predict(features: np.ndarray, weight_cols: np.ndarray) -> np.ndarray:
    scores = features @ weight_cols
    return np.argmax(scores, axis=1)


def coalition_value(
    phi_cols: np.ndarray,
    updates: dict[int, np.ndarray],
    subset,
    validation_features: np.ndarray,
    validation_labels: np.ndarray,
    aggregation_rule: str = "accepted",
    total_devices: int | None = None,
) -> float:
    """Validation accuracy of phi plus the mean of the subset's updates.

    phi_cols and each update are (d, K) one-vs-rest weight columns. The
    aggregation_rule picks the averaging denominator: `accepted` divides by
    the subset size (never less than 1), `explored` by the number of updates
    available this round, `all` by the total device count.
    """
    if len(validation_labels) == 0:
        raise ValueError("coalition_value needs a nonempty validation split")
    subset = tuple(subset)
    missing = [m for m in subset if m not in updates]
    if missing:
        raise ValueError(f"subset contains devices without updates: {missing}")
    if aggregation_rule == "accepted":
        denom = max(1, len(subset))
    elif aggregation_rule == "explored":
        denom = max(1, len(updates))
    elif aggregation_rule == "all":
        if total_devices is None:
            raise ValueError("aggregation_rule 'all' needs total_devices")
        denom = total_devices
    else:
        raise ValueError(f"unknown aggregation_rule {aggregation_rule!r}")

    candidate = phi_cols
    if subset:
        candidate = phi_cols + sum(updates[m] for m in subset) / denom
    predicted = _predict(validation_features, candidate)
    return float(np.mean(predicted == validation_labels))


def tmc_estimate(
    game: CoalitionGame,
    delta_t: int,
    trunc_tol: float,
    seed: int,
    ledger: ContributionLedger | None = None,
    audit_sink: Callable[[dict], None] | None = None,
) -> ContributionLedger:
    """Truncated Monte-Carlo contribution estimation over delta_t rounds.

    Each round draws its permutation from a child stream of (seed, round), so
    rounds are independent and reproducible regardless of execution order. The
    walk evaluates value_fn on growing permutation prefixes; once the full-set
    value is within trunc_tol of the running value, remaining marginals are
    recorded as zero without further evaluations. Per round the value function
    runs at most len(players) + 2 times (empty set, full set, one per
    non-truncated step; the final step reuses the full-set value).
    """
    players = tuple(game.players)
    if not players:
        raise ValueError("tmc_estimate needs at least one player")
    if delta_t < 1:
        raise ValueError(f"delta_t must be >= 1, got {delta_t}")
    if trunc_tol < 0:
        raise ValueError(f"trunc_tol must be >= 0, got {trunc_tol}")
    if ledger is None:
        ledger = ContributionLedger()

    n = len(players)
    for t_prime in range(delta_t):
        rng = np.random.default_rng((seed, t_prime))
        perm = tuple(rng.permutation(players))
        empty_value = float(game.value_fn(()))
        full_value = float(game.value_fn(tuple(sorted(players))))
        previous = empty_value
        truncated_from = None
        marginals = {}
        for step, player in enumerate(perm):
            if abs(full_value - previous) < trunc_tol:
                current = previous
                if truncated_from is None:
                    truncated_from = step
            elif step == n - 1:
                current = full_value
            else:
                prefix = tuple(sorted(perm[: step + 1]))
                current = float(game.value_fn(prefix))
            marginal = current - previous
            record_marginal(ledger, player, marginal)
            marginals[player] = marginal
            previous = current
        if audit_sink is not None:
            audit_sink(
                {
                    "round": t_prime,
                    "permutation": [int(p) for p in perm],
                    "marginals": {str(p): marginals[p] for p in perm},
                    "truncated_from": truncated_from,
                    "empty_value": empty_value,
                    "full_value": full_value,
                }
            )
    return ledger


def exact_shapley(game: CoalitionGame) -> dict[int, float]:
    """Exact Shapley values by subset enumeration with combinatorial weights.

    Evaluates value_fn once per subset (2^n calls) and refuses games with more
    than EXACT_PLAYER_GUARD players.
    """
    players = tuple(game.players)
    n = len(players)
    if n == 0:
        raise ValueError("exact_shapley needs at least one player")
    if n > EXACT_PLAYER_GUARD:
        raise ValueError(
            f"exact_shapley enumerates 2^n subsets; {n} players exceeds the "
            f"guard of {EXACT_PLAYER_GUARD}"
        )
    values = np.empty(1 << n)
    for mask in range(1 << n):
        subset = tuple(sorted(players[j] for j in range(n) if mask >> j & 1))
        values[mask] = game.value_fn(subset)

    # weight of a coalition of size s joined by one more player
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = [fact[s] * fact[n - 1 - s] / fact[n] for s in range(n)]

    shapley = {p: 0.0 for p in players}
    for mask in range(1 << n):
        size = mask.bit_count()
        for j in range(n):
            if mask >> j & 1:
                continue
            gain = values[mask | (1 << j)] - values[mask]
            shapley[players[j]] += weight[size] * gain
    return shapley
