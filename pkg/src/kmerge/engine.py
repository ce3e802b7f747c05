"""Online continual-merging state machine.

Maintains at most ``budget_k`` storage slots. Each slot holds the
servable rank-controlled adapter plus an exact float64 running delta
cache. Similarity is always measured against the stored adapter (what
the device actually holds); the running-average update is applied to
the exact cache, which keeps the fold order-invariant regardless of
rank truncation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .adapters import LayerKey, LoraAdapter, read_adapter, write_adapter
from .errors import (
    DuplicateTask,
    IncompatibleAdapters,
    RestoreError,
    ShapeError,
    SlotVacant,
    UnknownTask,
)
from .lowrank import LowRankDelta
from .merging import (
    MergedDelta,
    MergeOperator,
    RankPolicy,
    dare_merge,
    dare_ties_merge,
    delta_map,
    factor_average,
    linear_merge,
    refactor,
    ties_merge,
)
from .similarity import most_similar

VARIANTS = ("k_merge", "k_merge_pp")

ALLOCATED = "allocated_new_slot"
MERGED = "merged_into"

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    budget_k: int
    variant: str = "k_merge"
    threshold_s: float | None = None
    operator: MergeOperator = field(default_factory=MergeOperator)
    rank_policy: RankPolicy = field(default_factory=RankPolicy)

    def __post_init__(self):
        if self.budget_k < 1:
            raise ShapeError("budget_k must be >= 1")
        if self.variant not in VARIANTS:
            raise ShapeError(f"unknown variant {self.variant!r}")
        if self.variant == "k_merge_pp" and self.threshold_s is None:
            raise ShapeError("k_merge_pp requires threshold_s")


@dataclass(frozen=True)
class IngestDecision:
    task_index: int
    task_id: str
    action: str
    slot_key: int
    similarity: float | None
    elapsed: float


@dataclass
class SlotState:
    adapter: LoraAdapter
    cache: dict[LayerKey, LowRankDelta]


@dataclass
class AdapterStore:
    budget_k: int
    slots: dict[int, SlotState] = field(default_factory=dict)

    @property
    def occupied(self) -> int:
        return len(self.slots)

    def adapters_by_slot(self) -> dict[int, LoraAdapter]:
        return {key: slot.adapter for key, slot in self.slots.items()}


@dataclass
class MergeHistory:
    entries: dict[int, list[int]] = field(default_factory=dict)
    next_slot_key: int = 1


def route(history: MergeHistory, task_index: int) -> int:
    """Slot whose history set contains ``task_index``."""
    for slot_key, tasks in history.entries.items():
        if task_index in tasks:
            return slot_key
    raise UnknownTask(f"task index {task_index} was never ingested")


class MergeEngine:
    """Serialized ingest pipeline over an :class:`AdapterStore`."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.store = AdapterStore(budget_k=config.budget_k)
        self.history = MergeHistory()
        self.timestep = 0
        self.task_ids: dict[int, str] = {}

    # -- queries ----------------------------------------------------------

    def route(self, task_index: int) -> int:
        return route(self.history, task_index)

    def route_task_id(self, task_id: str) -> int:
        for index, known in self.task_ids.items():
            if known == task_id:
                return self.route(index)
        raise UnknownTask(f"task id {task_id!r} was never ingested")

    def load_for_inference(self, slot_key: int) -> LoraAdapter:
        slot = self.store.slots.get(slot_key)
        if slot is None:
            raise SlotVacant(f"slot {slot_key} is vacant")
        return slot.adapter

    def merge_count(self, slot_key: int) -> int:
        return len(self.history.entries[slot_key])

    # -- ingest -----------------------------------------------------------

    def ingest(self, incoming: LoraAdapter) -> IngestDecision:
        start = time.perf_counter()
        if incoming.task_id in self.task_ids.values():
            raise DuplicateTask(f"task {incoming.task_id!r} already ingested")
        if self.store.slots:
            reference = next(iter(self.store.slots.values())).adapter
            if reference.key_set() != incoming.key_set():
                raise IncompatibleAdapters(
                    f"incoming adapter {incoming.task_id!r} does not match the store's layer key-set"
                )
        t = self.timestep + 1

        best_key, best_score = None, None
        if self.store.slots:
            best_key, best_score = most_similar(incoming, self.store.adapters_by_slot())

        occupied = self.store.occupied
        if self.config.variant == "k_merge":
            do_merge = occupied >= self.config.budget_k
        else:
            do_merge = occupied == self.config.budget_k or (
                occupied > 0 and best_score >= self.config.threshold_s
            )

        if do_merge:
            self._merge_into(best_key, incoming, t)
            action, slot_key, similarity = MERGED, best_key, best_score
        else:
            slot_key = self._allocate(incoming, t)
            action, similarity = ALLOCATED, None

        self.timestep = t
        self.task_ids[t] = incoming.task_id
        return IngestDecision(
            task_index=t,
            task_id=incoming.task_id,
            action=action,
            slot_key=slot_key,
            similarity=similarity,
            elapsed=time.perf_counter() - start,
        )

    def _allocate(self, incoming: LoraAdapter, t: int) -> int:
        slot_key = self.history.next_slot_key
        self.history.next_slot_key += 1
        cache = {
            key: LowRankDelta.from_factors(fp, incoming.scaling)
            for key, fp in incoming.layers.items()
        }
        self.store.slots[slot_key] = SlotState(adapter=incoming, cache=cache)
        self.history.entries[slot_key] = [t]
        return slot_key

    def _merge_into(self, slot_key: int, incoming: LoraAdapter, t: int) -> None:
        slot = self.store.slots[slot_key]
        operator = self.config.operator
        if operator.kind == "running_average":
            n = len(self.history.entries[slot_key])
            cache = {}
            for key, fp in incoming.layers.items():
                inc = LowRankDelta.from_factors(fp, incoming.scaling)
                combined = LowRankDelta.combine(
                    [inc, slot.cache[key]], [1.0 / (n + 1), n / (n + 1)]
                )
                if combined.rank_bound > min(combined.shape):
                    combined = combined.compressed()
                cache[key] = combined
        else:
            merged = self._pairwise_baseline(slot.adapter, incoming, operator)
            cache = {key: LowRankDelta.from_dense(d) for key, d in merged.dense().items()}
        slot.cache = cache
        slot.adapter = self._stored_form(slot_key, slot, incoming)
        self.history.entries[slot_key].append(t)

    @staticmethod
    def _pairwise_baseline(
        stored: LoraAdapter, incoming: LoraAdapter, operator: MergeOperator
    ) -> MergedDelta:
        if operator.kind == "linear":
            return linear_merge(stored, incoming, weight=0.5)
        if operator.kind == "ties":
            return ties_merge([delta_map(stored), delta_map(incoming)], operator.density)
        if operator.kind == "dare":
            return dare_merge(stored, incoming, operator)
        if operator.kind == "dare_ties":
            return dare_ties_merge(stored, incoming, operator)
        raise ShapeError(f"unexpected operator kind {operator.kind!r}")

    def _stored_form(
        self, slot_key: int, slot: SlotState, incoming: LoraAdapter
    ) -> LoraAdapter:
        policy = self.config.rank_policy
        if policy.mode == "factor_average":
            return factor_average(slot.adapter, incoming, task_id=f"slot-{slot_key}")
        result = refactor(
            MergedDelta(layers=dict(slot.cache)),
            policy,
            task_id=f"slot-{slot_key}",
            scale_numerator=incoming.scaling * policy.target_rank,
        )
        return result.adapter

    # -- persistence ------------------------------------------------------

    def persist(self, directory: str | Path) -> None:
        """Write slot adapters, the exact running caches, and a manifest.

        Caches are stored as raw float64 little-endian tensors so a
        restored engine continues from the same exact state.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        cache_blob = bytearray()
        cache_index = []
        slot_entries = []
        for slot_key in sorted(self.store.slots):
            slot = self.store.slots[slot_key]
            file_name = f"slot_{slot_key}.kmrg"
            write_adapter(slot.adapter, directory / file_name)
            slot_entries.append(
                {
                    "slot_key": slot_key,
                    "file": file_name,
                    "tasks": list(self.history.entries[slot_key]),
                    "merge_count": len(self.history.entries[slot_key]),
                }
            )
            for key in sorted(slot.cache, key=LayerKey.sort_key):
                low = slot.cache[key]
                entry = {
                    "slot_key": slot_key,
                    "layer": key.layer,
                    "proj": key.proj,
                    "b_shape": list(low.b.shape),
                    "a_shape": list(low.a.shape),
                    "offset": len(cache_blob),
                }
                cache_blob += np.ascontiguousarray(low.b, dtype="<f8").tobytes()
                cache_blob += np.ascontiguousarray(low.a, dtype="<f8").tobytes()
                cache_index.append(entry)

        manifest = {
            "version": MANIFEST_VERSION,
            "budget_k": self.config.budget_k,
            "variant": self.config.variant,
            "threshold_s": self.config.threshold_s,
            "operator": {
                "kind": self.config.operator.kind,
                "density": self.config.operator.density,
                "drop_rate": self.config.operator.drop_rate,
                "rng_seed": self.config.operator.rng_seed,
            },
            "rank_policy": {
                "mode": self.config.rank_policy.mode,
                "target_rank": self.config.rank_policy.target_rank,
            },
            "slots": slot_entries,
            "running_cache_file": "running_cache.bin",
            "cache_index": cache_index,
            "next_slot_key": self.history.next_slot_key,
            "timestep": self.timestep,
            "ingested": [[t, self.task_ids[t]] for t in sorted(self.task_ids)],
        }
        tmp = directory / "running_cache.bin.tmp"
        tmp.write_bytes(bytes(cache_blob))
        tmp.replace(directory / "running_cache.bin")
        tmp = directory / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        tmp.replace(directory / "manifest.json")

    @classmethod
    def restore(cls, directory: str | Path) -> "MergeEngine":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise RestoreError(f"no manifest.json in {directory}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise RestoreError(f"manifest.json is not valid JSON: {exc}") from None

        def get(mapping, path):
            node = mapping
            for part in path.split("."):
                try:
                    node = node[part]
                except (KeyError, TypeError):
                    raise RestoreError(f"manifest missing field {path!r}") from None
            return node

        if get(manifest, "version") != MANIFEST_VERSION:
            raise RestoreError(f"unsupported manifest version {manifest['version']}")
        config = PolicyConfig(
            budget_k=get(manifest, "budget_k"),
            variant=get(manifest, "variant"),
            threshold_s=get(manifest, "threshold_s"),
            operator=MergeOperator(
                kind=get(manifest, "operator.kind"),
                density=get(manifest, "operator.density"),
                drop_rate=get(manifest, "operator.drop_rate"),
                rng_seed=get(manifest, "operator.rng_seed"),
            ),
            rank_policy=RankPolicy(
                mode=get(manifest, "rank_policy.mode"),
                target_rank=get(manifest, "rank_policy.target_rank"),
            ),
        )
        engine = cls(config)
        engine.history.next_slot_key = int(get(manifest, "next_slot_key"))
        engine.timestep = int(get(manifest, "timestep"))
        engine.task_ids = {int(t): str(name) for t, name in get(manifest, "ingested")}

        cache_path = directory / str(get(manifest, "running_cache_file"))
        if not cache_path.exists():
            raise RestoreError(f"running cache file {cache_path.name} is missing")
        blob = cache_path.read_bytes()
        caches: dict[int, dict[LayerKey, LowRankDelta]] = {}
        for entry in get(manifest, "cache_index"):
            slot_key = int(entry["slot_key"])
            key = LayerKey(int(entry["layer"]), str(entry["proj"]))
            b_shape = tuple(entry["b_shape"])
            a_shape = tuple(entry["a_shape"])
            offset = int(entry["offset"])
            nb = 8 * b_shape[0] * b_shape[1]
            na = 8 * a_shape[0] * a_shape[1]
            if offset + nb + na > len(blob):
                raise RestoreError(
                    f"running cache truncated for slot {slot_key} layer {key}"
                )
            b = np.frombuffer(blob, dtype="<f8", count=b_shape[0] * b_shape[1], offset=offset)
            a = np.frombuffer(blob, dtype="<f8", count=a_shape[0] * a_shape[1], offset=offset + nb)
            caches.setdefault(slot_key, {})[key] = LowRankDelta(
                b=b.reshape(b_shape).copy(), a=a.reshape(a_shape).copy()
            )

        for entry in get(manifest, "slots"):
            slot_key = int(entry["slot_key"])
            adapter_path = directory / str(entry["file"])
            if not adapter_path.exists():
                raise RestoreError(f"adapter file for slot {slot_key} is missing")
            adapter = read_adapter(adapter_path)
            if slot_key not in caches:
                raise RestoreError(f"no running cache entries for slot {slot_key}")
            engine.store.slots[slot_key] = SlotState(
                adapter=adapter, cache=caches[slot_key]
            )
            engine.history.entries[slot_key] = [int(t) for t in entry["tasks"]]
        return engine
