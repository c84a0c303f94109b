"""Device selection policies: explore/exploit, random, and greedy baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .valuation import ContributionLedger, coalition_value

POLICY_KINDS = ("cds", "random", "greedy", "full")
KEEP_RULE_KINDS = ("positive", "top_k", "threshold")


@dataclass(frozen=True)
class KeepRule:
    """How the sorted contribution list is cut into the accepted set."""

    kind: str = "positive"
    k: int = 1
    cutoff: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KEEP_RULE_KINDS:
            raise ValueError(f"keep rule must be one of {KEEP_RULE_KINDS}, got {self.kind!r}")
        if self.kind == "top_k" and self.k < 1:
            raise ValueError(f"top_k keep rule needs k >= 1, got {self.k}")


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "cds"
    keep_rule: KeepRule = KeepRule()
    greedy_k: int | None = None  # None means the usual exploration budget
    greedy_early_stop: bool = True
    beta_persistence: bool = False  # keep contribution means across rounds

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy must be one of {POLICY_KINDS}, got {self.kind!r}")


@dataclass
class RoundPlan:
    """The round's decisions: explored set, accepted subset, contribution snapshot."""

    explored: tuple[int, ...]
    accepted: tuple[int, ...]
    betas: dict[int, float] = field(default_factory=dict)
    aggregation_count: int = 0

    def __post_init__(self) -> None:
        if self.explored and not self.accepted:
            raise ValueError("a plan with explored devices must accept at least one")
        if not set(self.accepted) <= set(self.explored):
            raise ValueError("accepted devices must be a subset of explored devices")


def exploration_size(num_devices: int, c_fraction: float) -> int:
    return max(1, int(np.floor(c_fraction * num_devices)))


def explore_select(num_devices: int, c_fraction: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample without replacement of max(1, floor(C*M)) device ids."""
    if not 0.0 < c_fraction <= 1.0:
        raise ValueError(f"c_fraction must be in (0, 1], got {c_fraction}")
    size = exploration_size(num_devices, c_fraction)
    picked = rng.choice(num_devices, size=size, replace=False)
    return tuple(int(m) for m in np.sort(picked))


def _ranked(ledger: ContributionLedger) -> list[tuple[int, float]]:
    """Devices by contribution descending, ties by ascending device id."""
    return sorted(ledger.beta.items(), key=lambda item: (-item[1], item[0]))


def exploit_select(ledger: ContributionLedger, keep_rule: KeepRule) -> tuple[int, ...]:
    """Cut the contribution ranking into the accepted set M-tilde.

    `positive` keeps strictly positive contributions, `threshold` keeps
    beta >= cutoff, `top_k` keeps the k best. Whenever a filter comes back
    empty the single best device is kept, so aggregation always has input.
    """
    ranking = _ranked(ledger)
    if not ranking:
        raise ValueError("exploit_select needs a ledger covering the explored devices")
    if keep_rule.kind == "positive":
        kept = [m for m, beta in ranking if beta > 0.0]
    elif keep_rule.kind == "threshold":
        kept = [m for m, beta in ranking if beta >= keep_rule.cutoff]
    else:
        kept = [m for m, _ in ranking[: keep_rule.k]]
    if not kept:
        kept = [ranking[0][0]]
    return tuple(sorted(kept))


def greedy_from_value_fn(players, k: int, value_fn, early_stop: bool = False) -> tuple[int, ...]:
    """Iteratively add the player with the greatest coalition-value gain.

    Candidate coalitions are passed to value_fn as sorted tuples. Ties go to
    the lowest player id. With early_stop, growth stops once the best marginal
    gain is <= 0, but the first pick is always kept.
    """
    players = sorted(players)
    if k <= 0:
        raise ValueError(f"greedy selection needs k >= 1, got {k}")
    if k > len(players):
        raise ValueError(f"k={k} exceeds the {len(players)} available updates")

    chosen: list[int] = []
    current_value = value_fn(())
    remaining = players
    while len(chosen) < k and remaining:
        best_id, best_value = None, -np.inf
        for m in remaining:
            candidate_value = value_fn(tuple(sorted(chosen + [m])))
            if candidate_value > best_value:
                best_id, best_value = m, candidate_value
        if early_stop and chosen and best_value - current_value <= 0.0:
            break
        chosen.append(best_id)
        remaining.remove(best_id)
        current_value = best_value
    return tuple(sorted(chosen))


def greedy_select(
    phi_cols,
    updates,
    validation_features,
    validation_labels,
    k: int,
    aggregation_rule: str = "accepted",
    early_stop: bool = False,
    total_devices: int | None = None,
) -> tuple[int, ...]:
    """Greedy coalition growth scored by validation coalition value."""
    if k > len(updates):
        raise ValueError(f"k={k} exceeds the {len(updates)} available updates")

    def value(subset) -> float:
        return coalition_value(
            phi_cols, updates, subset, validation_features, validation_labels,
            aggregation_rule, total_devices,
        )

    return greedy_from_value_fn(sorted(updates), k, value, early_stop)


def random_aggregate_plan(explored, aggregation_count: int | None = None) -> RoundPlan:
    """FedAvg behavior: accept every explored device, no contribution filter."""
    explored = tuple(explored)
    if not explored:
        raise ValueError("random_aggregate_plan needs a nonempty explored set")
    return RoundPlan(
        explored=explored,
        accepted=explored,
        betas={},
        aggregation_count=len(explored) if aggregation_count is None else aggregation_count,
    )
