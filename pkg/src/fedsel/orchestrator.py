"""Round loop: explore, update, value, select, aggregate, evaluate, report.

One Experiment owns a per-policy run. Each global round draws the explored
set from a per-round exploration stream shared by every policy under the same
master seed (so baseline comparisons are paired by construction), computes all
explored devices' one-vs-rest updates, lets the policy pick the accepted
subset, and aggregates atomically. Metrics rows stream to CSV as rounds
complete; reruns with equal config and seed produce byte-identical CSV bodies.
"""
from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cost import DeviceProfile, sample_profiles, schedule_cost
from .data import DeviceDataset, SplitDataset
from .losses import Loss
from .rng import DEVICE, EXPLORE, VALUATION, stream_seed, substream
from .selection import (
    RoundPlan,
    SelectionPolicy,
    exploit_select,
    explore_select,
    greedy_from_value_fn,
    random_aggregate_plan,
)
from .solver import (
    GlobalState,
    Hyperparams,
    LocalUpdate,
    apply_dual_update,
    device_update_ovr,
    fenchel_gap,
)
from .valuation import CoalitionGame, ContributionLedger, tmc_estimate

CSV_COLUMNS = (
    "round",
    "policy",
    "test_acc",
    "train_loss",
    "personalization_mean",
    "personalization_var",
    "fairness_violations",
    "duality_gap",
    "round_cost_s",
    "cum_cost_s",
    "explored",
    "accepted",
)


@dataclass
class RoundMetrics:
    """Snapshot of global and per-device quality after a completed round."""

    round_index: int
    policy: str
    test_acc: float
    train_loss: float
    personalization_mean: float
    personalization_var: float
    personalization_min: float
    personalization_max: float
    fairness_violations: int
    duality_gap: float
    round_cost_s: float
    cum_cost_s: float
    explored: int
    accepted: int
    beta_min: float = float("nan")
    beta_median: float = float("nan")
    beta_max: float = float("nan")

    def csv_row(self) -> list[str]:
        cells: list[str] = []
        for name in CSV_COLUMNS:
            value = getattr(self, "round_index" if name == "round" else name)
            if isinstance(value, float):
                # repr round-trips exactly, keeping rerun CSVs byte-identical.
                cells.append(repr(value))
            else:
                cells.append(str(value))
        return cells


def metrics_csv_lines(metrics: list[RoundMetrics]) -> list[str]:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(m.csv_row()) for m in metrics)
    return lines


def rounds_to_target(metrics: list[RoundMetrics], target: float) -> int | None:
    """First round index whose test accuracy reaches target, else None."""
    for m in metrics:
        if m.test_acc >= target:
            return m.round_index
    return None


@dataclass
class ExperimentResult:
    policy: str
    seed: int
    metrics: list[RoundMetrics]
    states: list[GlobalState]
    profiles: dict[int, DeviceProfile]
    stop_reason: str
    out_dir: Path | None = None


def _scores(features: np.ndarray, phi_cols: np.ndarray) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) @ phi_cols


def _accuracy(features: np.ndarray, labels: np.ndarray, phi_cols: np.ndarray) -> float:
    if features.shape[0] == 0:
        raise ValueError("accuracy over an empty sample set is undefined")
    predicted = np.argmax(_scores(features, phi_cols), axis=1)
    return float(np.mean(predicted == labels))


def _binary_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    # (n, K) matrix of {-1, +1} one-vs-rest targets.
    return np.where(labels[:, None] == np.arange(num_classes)[None, :], 1.0, -1.0)


def evaluate_global(
    phi_cols: np.ndarray,
    split: SplitDataset,
    loss: Loss,
    reg_lambda: float,
) -> tuple[float, float]:
    """Test accuracy of the argmax predictor plus mean per-class train objective.

    The objective averages, over the one-vs-rest columns, the regularized
    primal value on the full training pool; with phi_cols == 0 it equals
    loss.value(0, -1) averaged with loss.value(0, +1) weighted by class
    frequency, and the accuracy equals the frequency of class 0 because
    argmax breaks ties toward the lowest class id.
    """
    features, labels = split.stacked_train()
    accuracy = _accuracy(split.test_features, split.test_labels, phi_cols)
    margins = _scores(features, phi_cols)
    targets = _binary_labels(labels, split.num_classes)
    data_term = float(np.mean(loss.value(margins, targets)))
    reg_term = 0.5 * reg_lambda * float(np.mean(np.sum(phi_cols**2, axis=0)))
    return accuracy, data_term + reg_term


def fairness_audit(
    phi_cols: np.ndarray,
    devices: list[DeviceDataset],
    loss: Loss,
    threshold: float,
    num_classes: int,
) -> tuple[dict[int, float], set[int]]:
    """Per-device held-out risk and the ids whose risk exceeds the threshold.

    Risk for a device is the mean one-vs-rest loss over its local test split
    (samples x classes). Devices without held-out samples carry no risk
    estimate and cannot violate.
    """
    risks: dict[int, float] = {}
    violators: set[int] = set()
    for device in devices:
        if device.test_features is None or device.test_features.shape[0] == 0:
            continue
        margins = _scores(device.test_features, phi_cols)
        targets = _binary_labels(device.test_labels, num_classes)
        risk = float(np.mean(loss.value(margins, targets)))
        risks[device.device_id] = risk
        if risk > threshold:
            violators.add(device.device_id)
    return risks, violators


class Experiment:
    """Stateful driver for one (policy, seed) run over a fixed split."""

    def __init__(
        self,
        split: SplitDataset,
        hyper: Hyperparams,
        policy: SelectionPolicy,
        *,
        eval_every: int = 1,
        stop_at_accuracy: float | None = None,
        audit_sink: list[dict] | None = None,
        gram_cache_size: int = 128,
        cost_ranges: dict | None = None,
    ):
        if eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.split = split
        self.hyper = hyper
        self.policy = policy
        self.eval_every = eval_every
        self.stop_at_accuracy = stop_at_accuracy
        self.audit_sink = audit_sink

        self.devices = {d.device_id: d for d in split.devices}
        self.num_devices = len(split.devices)
        self.num_classes = split.num_classes
        self.total_samples = split.total_train
        self.loss = hyper.make_loss()
        self.reg_lambda = hyper.resolved_lambda(self.total_samples)

        self.train_features, train_labels = split.stacked_train()
        self.train_targets = _binary_labels(train_labels, self.num_classes)

        sizes = {d.device_id: d.size for d in split.devices}
        self.profiles = sample_profiles(
            self.num_devices,
            sizes,
            split.feature_dim,
            hyper.seed,
            **(cost_ranges or {}),
        )

        self._gram_cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._gram_cache_size = gram_cache_size
        self._persistent_ledger: ContributionLedger | None = (
            ContributionLedger() if policy.beta_persistence else None
        )

    # -- per-device caches ------------------------------------------------

    def _gram(self, device_id: int) -> np.ndarray:
        cached = self._gram_cache.get(device_id)
        if cached is not None:
            self._gram_cache.move_to_end(device_id)
            return cached
        feats = np.asarray(self.devices[device_id].features, dtype=np.float64)
        gram = feats @ feats.T
        self._gram_cache[device_id] = gram
        if len(self._gram_cache) > self._gram_cache_size:
            self._gram_cache.popitem(last=False)
        return gram

    # -- round mechanics ---------------------------------------------------

    def _explored(self, round_index: int) -> tuple[int, ...]:
        # greedy is defined as collecting every device's update and then
        # picking a subset, so it pays the full fleet's round cost; cds and
        # random draw the same S_t from the shared exploration stream.
        if self.policy.kind in ("full", "greedy"):
            return tuple(sorted(self.devices))
        rng = substream(self.hyper.seed, EXPLORE, round_index)
        return explore_select(self.num_devices, self.hyper.c_fraction, rng)

    def _device_updates(
        self,
        round_index: int,
        explored: tuple[int, ...],
        states: list[GlobalState],
        phi_cols: np.ndarray,
    ) -> dict[int, list[LocalUpdate]]:
        alpha_cols = {
            m: np.stack(
                [s.alpha[self.devices[m].sample_indices] for s in states], axis=1
            )
            for m in explored
        }
        updates: dict[int, list[LocalUpdate]] = {}
        for m in explored:
            updates[m] = device_update_ovr(
                self.devices[m],
                phi_cols,
                alpha_cols[m],
                self.num_classes,
                self.hyper,
                substream(self.hyper.seed, DEVICE, round_index, m),
                total_samples=self.total_samples,
                gram=self._gram(m),
            )
        return updates

    def _stack_updates(
        self, updates: dict[int, list[LocalUpdate]]
    ) -> dict[int, np.ndarray]:
        return {
            m: np.stack([u.delta_phi for u in ups], axis=1)
            for m, ups in updates.items()
        }

    def _aggregation_count(self, plan: RoundPlan) -> int:
        rule = self.hyper.aggregation_denominator
        if rule == "accepted":
            return len(plan.accepted)
        if rule == "explored":
            return len(plan.explored)
        return self.num_devices

    def _value_fn(self, phi_cols: np.ndarray, stacked: dict[int, np.ndarray]):
        """Coalition value on the validation split via cached score matrices.

        Algebraically identical to scoring phi + sum(deltas)/count from
        scratch, but each candidate coalition costs O(n_val * K) instead of a
        fresh feature matmul.
        """
        val_features = np.asarray(self.split.validation_features, dtype=np.float64)
        val_labels = self.split.validation_labels
        base = val_features @ phi_cols
        member = {m: val_features @ delta for m, delta in stacked.items()}
        rule = self.hyper.aggregation_denominator

        def value(subset: tuple[int, ...]) -> float:
            scores = base
            if subset:
                if rule == "accepted":
                    count = len(subset)
                elif rule == "explored":
                    count = len(stacked)
                else:
                    count = self.num_devices
                total = member[subset[0]].copy()
                for m in subset[1:]:
                    total += member[m]
                scores = base + total / count
            predicted = np.argmax(scores, axis=1)
            return float(np.mean(predicted == val_labels))

        return value

    def _plan(
        self,
        round_index: int,
        explored: tuple[int, ...],
        phi_cols: np.ndarray,
        stacked: dict[int, np.ndarray],
    ) -> RoundPlan:
        if self.policy.kind in ("random", "full"):
            return random_aggregate_plan(explored)

        value = self._value_fn(phi_cols, stacked)
        if self.policy.kind == "greedy":
            # budget defaults to the whole candidate pool; early stop trims it
            k = self.policy.greedy_k or len(explored)
            k = min(k, len(explored))
            accepted = greedy_from_value_fn(
                explored, k, value, early_stop=self.policy.greedy_early_stop
            )
            return RoundPlan(explored=explored, accepted=accepted, betas={})

        sink = None
        if self.audit_sink is not None:
            def sink(entry: dict) -> None:
                entry["global_round"] = round_index
                self.audit_sink.append(entry)

        game = CoalitionGame(players=explored, value_fn=value)
        ledger = tmc_estimate(
            game,
            self.hyper.delta_t,
            self.hyper.trunc_tol,
            stream_seed(self.hyper.seed, VALUATION, round_index),
            ledger=self._persistent_ledger,
            audit_sink=sink,
        )
        if self._persistent_ledger is not None:
            visible = ContributionLedger(
                beta={m: ledger.beta[m] for m in explored},
                counts={m: ledger.counts[m] for m in explored},
            )
        else:
            visible = ledger
        accepted = exploit_select(visible, self.policy.keep_rule)
        betas = {m: visible.beta[m] for m in explored}
        return RoundPlan(explored=explored, accepted=accepted, betas=betas)

    def run_round(
        self, states: list[GlobalState], round_index: int
    ) -> tuple[list[GlobalState], RoundPlan]:
        """One atomic global round; returns fresh states and the round plan."""
        explored = self._explored(round_index)
        phi_cols = np.stack([s.phi for s in states], axis=1)
        updates = self._device_updates(round_index, explored, states, phi_cols)
        stacked = self._stack_updates(updates)
        plan = self._plan(round_index, explored, phi_cols, stacked)
        plan.aggregation_count = self._aggregation_count(plan)
        new_states = [
            apply_dual_update(
                states[k], [updates[m][k] for m in plan.accepted], plan.aggregation_count
            )
            for k in range(self.num_classes)
        ]
        for state in new_states:
            state.round_index = round_index
        return new_states, plan

    # -- evaluation ---------------------------------------------------------

    def evaluate(
        self,
        states: list[GlobalState],
        round_index: int,
        plan: RoundPlan | None,
        round_cost_s: float,
        cum_cost_s: float,
    ) -> RoundMetrics:
        phi_cols = np.stack([s.phi for s in states], axis=1)
        test_acc, train_loss = evaluate_global(
            phi_cols, self.split, self.loss, self.reg_lambda
        )

        margins = self.train_features @ phi_cols
        duality_gap = float(
            np.mean(
                [
                    fenchel_gap(s.alpha, margins[:, k], self.train_targets[:, k], self.loss)
                    for k, s in enumerate(states)
                ]
            )
        )

        local_accs = [
            _accuracy(d.test_features, d.test_labels, phi_cols)
            for d in self.split.devices
            if d.test_features is not None and d.test_features.shape[0] > 0
        ]
        if local_accs:
            pers_mean = float(np.mean(local_accs))
            pers_var = float(np.var(local_accs))
            pers_min = float(np.min(local_accs))
            pers_max = float(np.max(local_accs))
        else:
            pers_mean = pers_var = pers_min = pers_max = float("nan")

        _, violators = fairness_audit(
            phi_cols,
            self.split.devices,
            self.loss,
            self.hyper.theta_threshold,
            self.num_classes,
        )

        if plan is not None and plan.betas:
            beta_values = np.array(sorted(plan.betas.values()))
            beta_summary = (
                float(beta_values[0]),
                float(np.median(beta_values)),
                float(beta_values[-1]),
            )
        else:
            beta_summary = (float("nan"),) * 3

        return RoundMetrics(
            round_index=round_index,
            policy=self.policy.kind,
            test_acc=test_acc,
            train_loss=train_loss,
            personalization_mean=pers_mean,
            personalization_var=pers_var,
            personalization_min=pers_min,
            personalization_max=pers_max,
            fairness_violations=len(violators),
            duality_gap=duality_gap,
            round_cost_s=round_cost_s,
            cum_cost_s=cum_cost_s,
            explored=0 if plan is None else len(plan.explored),
            accepted=0 if plan is None else len(plan.accepted),
            beta_min=beta_summary[0],
            beta_median=beta_summary[1],
            beta_max=beta_summary[2],
        )

    # -- full run -----------------------------------------------------------

    def initial_states(self) -> list[GlobalState]:
        return [
            GlobalState.zeros(self.split.feature_dim, self.total_samples)
            for _ in range(self.num_classes)
        ]

    def run(
        self,
        rounds: int,
        *,
        out_dir: Path | str | None = None,
        config_payload: dict | None = None,
        log=None,
    ) -> ExperimentResult:
        if rounds < 0:
            raise ValueError("rounds must be >= 0")
        out = Path(out_dir) if out_dir is not None else None
        manifest = None
        csv_handle = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            manifest = RunManifest.start(
                out, self.policy.kind, self.hyper.seed, config_payload or {}
            )
            csv_handle = open(out / "metrics.csv", "w", encoding="utf-8")
            csv_handle.write(",".join(CSV_COLUMNS) + "\n")

        states = self.initial_states()
        metrics: list[RoundMetrics] = []
        stop_reason = "completed"
        cum_cost = 0.0

        def emit(row: RoundMetrics) -> None:
            metrics.append(row)
            if csv_handle is not None:
                csv_handle.write(",".join(row.csv_row()) + "\n")
                csv_handle.flush()
            if log is not None:
                log(
                    f"round {row.round_index:4d} policy={row.policy} "
                    f"acc={row.test_acc:.4f} gap={row.duality_gap:.3e} "
                    f"accepted={row.accepted}/{row.explored}"
                )

        try:
            emit(self.evaluate(states, 0, None, 0.0, 0.0))
            for t in range(1, rounds + 1):
                states, plan = self.run_round(states, t)
                report = schedule_cost(
                    self.profiles,
                    plan.explored,
                    epochs=self.hyper.epochs,
                    cumulative_before=cum_cost,
                )
                cum_cost = report.cumulative_s
                if t % self.eval_every == 0 or t == rounds:
                    row = self.evaluate(states, t, plan, report.round_cost_s, cum_cost)
                    emit(row)
                    if (
                        self.stop_at_accuracy is not None
                        and row.test_acc >= self.stop_at_accuracy
                    ):
                        stop_reason = "accuracy_target"
                        break
                    if (
                        self.hyper.global_accuracy_target is not None
                        and row.duality_gap <= self.hyper.global_accuracy_target
                    ):
                        stop_reason = "duality_gap_target"
                        break
        finally:
            if csv_handle is not None:
                csv_handle.close()
        if manifest is not None and out is not None:
            manifest.finalize(out, stop_reason, len(metrics))
        return ExperimentResult(
            policy=self.policy.kind,
            seed=self.hyper.seed,
            metrics=metrics,
            states=states,
            profiles=self.profiles,
            stop_reason=stop_reason,
            out_dir=out,
        )


@dataclass
class RunManifest:
    """Provenance record written before round 1 and finalized at exit."""

    policy: str
    seed: int
    config_digest: str
    config: dict
    started_at: str
    status: str = "running"
    finished_at: str | None = None
    rows_written: int = 0
    stop_reason: str | None = None
    outputs: tuple[str, ...] = ()

    PATH = "manifest.json"

    @staticmethod
    def digest(config: dict) -> str:
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def start(cls, out: Path, policy: str, seed: int, config: dict) -> "RunManifest":
        manifest = cls(
            policy=policy,
            seed=seed,
            config_digest=cls.digest(config),
            config=config,
            started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        )
        manifest.write(out)
        return manifest

    def write(self, out: Path) -> None:
        payload = {
            "policy": self.policy,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "config": self.config,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "rows_written": self.rows_written,
            "stop_reason": self.stop_reason,
            "outputs": list(self.outputs),
        }
        (out / self.PATH).write_text(json.dumps(payload, indent=2) + "\n")

    def finalize(self, out: Path, stop_reason: str, rows: int) -> None:
        self.status = "complete"
        self.finished_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.stop_reason = stop_reason
        self.rows_written = rows
        self.outputs = ("metrics.csv", self.PATH)
        self.write(out)


def run_experiment(
    split: SplitDataset,
    hyper: Hyperparams,
    policy: SelectionPolicy,
    rounds: int,
    *,
    eval_every: int = 1,
    stop_at_accuracy: float | None = None,
    out_dir: Path | str | None = None,
    config_payload: dict | None = None,
    audit_sink: list[dict] | None = None,
    cost_ranges: dict | None = None,
    log=None,
) -> ExperimentResult:
    """Convenience wrapper: build an Experiment and run it for `rounds`."""
    exp = Experiment(
        split,
        hyper,
        policy,
        eval_every=eval_every,
        stop_at_accuracy=stop_at_accuracy,
        audit_sink=audit_sink,
        cost_ranges=cost_ranges,
    )
    return exp.run(
        rounds, out_dir=out_dir, config_payload=config_payload, log=log
    )
