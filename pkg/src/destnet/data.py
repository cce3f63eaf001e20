"""Behavior-event schema, sequence fusion, and the on-disk dataset format.

A behavior event is one timestamped (city, action-unit) instance from one of
five product streams. Histories are fused into fixed-length, masked id
sequences either as one global time-ordered sequence (strategy "1") or one
sequence per stream (strategy "2", empty streams replaced by a length-one
sentinel). Vocabulary convention: id 0 is reserved for padding/sentinel in
both the city and the action-unit id spaces, real ids start at 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

PRODUCTS = ("train", "flight", "hotel", "item", "search")
ACTIONS = ("click", "purchase", "collect")

PAD_ID = 0
N_ACTION_UNITS = len(PRODUCTS) * len(ACTIONS)  # 15 cells; grid id 15 unused
SECONDS_PER_DAY = 86400.0

# Fixed categorical schema. Values are 1-based; row 0 of every embedding
# table is the frozen padding row.
USER_FEATURE_FIELDS = (
    ("age_bucket", 8),
    ("gender", 2),
    ("purchase_level", 5),
)
STATUS_FEATURE_FIELDS = (
    ("trip_status", 3),
    ("days_to_departure_bucket", 8),
    ("month", 12),
    ("season", 4),
    ("hour", 24),
)

_PRODUCT_INDEX = {name: i for i, name in enumerate(PRODUCTS)}
_ACTION_INDEX = {name: i for i, name in enumerate(ACTIONS)}


def encode_action_unit(product: str, action: str) -> int:
    """Grid id of one (product, action) cell, bijective over the 5x3 grid."""
    return _PRODUCT_INDEX[product] * len(ACTIONS) + _ACTION_INDEX[action]


def decode_action_unit(unit: int) -> tuple[str, str]:
    if not 0 <= unit < N_ACTION_UNITS:
        raise ValueError(f"action unit {unit} outside [0, {N_ACTION_UNITS})")
    return PRODUCTS[unit // len(ACTIONS)], ACTIONS[unit % len(ACTIONS)]


def action_unit_token(product: str, action: str) -> int:
    """Sequence id of an action unit: grid id shifted past the padding id 0."""
    return encode_action_unit(product, action) + 1


@dataclass(frozen=True)
class BehaviorEvent:
    """One timestamped (city, action-unit) instance from one product stream."""

    ts: int
    city: int
    product: str
    action: str

    def validate(self, n_cities: int) -> None:
        if self.ts <= 0:
            raise DataError(f"event timestamp must be positive, got {self.ts}")
        if not 1 <= self.city <= n_cities:
            raise DataError(f"event city {self.city} outside vocabulary [1, {n_cities}]")
        if self.product not in _PRODUCT_INDEX:
            raise DataError(f"unknown product type {self.product!r}")
        if self.action not in _ACTION_INDEX:
            raise DataError(f"unknown action type {self.action!r}")


@dataclass
class FusedSequence:
    """Fixed-length id sequence: real events form the unmasked prefix."""

    city_ids: np.ndarray      # int64 [max_len], 0 on padding
    action_units: np.ndarray  # int64 [max_len], shifted ids, 0 on padding
    time_deltas: np.ndarray   # float64 days [max_len], <= 0 on real events
    mask: np.ndarray          # bool [max_len]
    timestamps: np.ndarray    # int64 [max_len], source event times (0 on padding)

    def __len__(self) -> int:
        return int(self.mask.sum())


def compute_time_deltas(timestamps: np.ndarray, mask: np.ndarray, query_ts: int) -> np.ndarray:
    """Offsets in fractional days, (ts - query_ts) / 86400; 0 where masked."""
    tau = (timestamps.astype(np.float64) - float(query_ts)) / SECONDS_PER_DAY
    return np.where(mask, tau, 0.0)


def _sort_key(indexed_event):
    order, ev = indexed_event
    return (ev.ts, _PRODUCT_INDEX[ev.product], order)


def _pack(events: Sequence[BehaviorEvent], query_ts: int, max_len: int) -> FusedSequence:
    kept = events[-max_len:]
    n = len(kept)
    city = np.zeros(max_len, dtype=np.int64)
    unit = np.zeros(max_len, dtype=np.int64)
    ts = np.zeros(max_len, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    for i, ev in enumerate(kept):
        city[i] = ev.city
        unit[i] = action_unit_token(ev.product, ev.action)
        ts[i] = ev.ts
        mask[i] = True
    tau = compute_time_deltas(ts, mask, query_ts)
    return FusedSequence(city, unit, tau, mask, ts)


def _sentinel(query_ts: int, max_len: int) -> FusedSequence:
    # Length-one default sequence: reserved city 0, reserved unit 0, tau 0.
    city = np.zeros(max_len, dtype=np.int64)
    unit = np.zeros(max_len, dtype=np.int64)
    ts = np.zeros(max_len, dtype=np.int64)
    tau = np.zeros(max_len, dtype=np.float64)
    mask = np.zeros(max_len, dtype=bool)
    mask[0] = True
    ts[0] = query_ts
    return FusedSequence(city, unit, tau, mask, ts)


def fuse_sequences(streams: Mapping[str, Sequence[BehaviorEvent]], query_ts: int,
                   strategy: str, max_len: int) -> dict[str, FusedSequence]:
    """Fuse per-product event streams into model-ready sequences.

    Strategy "1" merges everything into one time-ordered global sequence
    keeping the most recent ``max_len`` events (empty streams contribute
    nothing; all-empty is rejected). Strategy "2" packs each stream
    independently, replacing an empty stream with a length-one sentinel.
    Equal timestamps break ties by stream order then input order.
    """
    for name, evs in streams.items():
        if name not in _PRODUCT_INDEX:
            raise ValueError(f"unknown stream {name!r}")
        for ev in evs:
            if ev.ts > query_ts:
                raise DataError(f"event at {ev.ts} after query time {query_ts}")
    if strategy == "1":
        merged = [ev for name in PRODUCTS for ev in streams.get(name, ())]
        merged = [ev for _, ev in sorted(enumerate(merged), key=_sort_key)]
        if not merged:
            raise DataError("strategy 1 needs at least one event in some stream")
        return {"global": _pack(merged, query_ts, max_len)}
    if strategy == "2":
        out = {}
        for name in PRODUCTS:
            evs = sorted(enumerate(streams.get(name, ())), key=_sort_key)
            evs = [ev for _, ev in evs]
            out[name] = _pack(evs, query_ts, max_len) if evs else _sentinel(query_ts, max_len)
        return out
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def fuse_single_stream(streams: Mapping[str, Sequence[BehaviorEvent]], stream: str,
                       query_ts: int, max_len: int) -> dict[str, FusedSequence]:
    """One stream on its own, sentinel when empty (strategy-2 convention)."""
    part = fuse_sequences({stream: streams.get(stream, ())}, query_ts, "2", max_len)
    return {stream: part[stream]}


@dataclass
class SampleRecord:
    """One labelled (user history, candidate) pair at a query timestamp."""

    user_id: int
    user_features: dict[str, int]
    status_features: dict[str, int]
    events: list[BehaviorEvent]
    candidate_city: int
    label: int
    query_ts: int
    _fused: dict = field(default_factory=dict, repr=False, compare=False)

    def streams(self) -> dict[str, list[BehaviorEvent]]:
        out: dict[str, list[BehaviorEvent]] = {name: [] for name in PRODUCTS}
        for ev in self.events:
            out[ev.product].append(ev)
        return out

    def fused(self, streams_key: tuple[str, ...], max_len: int) -> dict[str, FusedSequence]:
        """Fused view for the given branch layout, cached per layout."""
        key = (streams_key, max_len)
        if key not in self._fused:
            if streams_key == ("global",):
                self._fused[key] = fuse_sequences(self.streams(), self.query_ts, "1", max_len)
            elif streams_key == PRODUCTS:
                self._fused[key] = fuse_sequences(self.streams(), self.query_ts, "2", max_len)
            elif len(streams_key) == 1:
                self._fused[key] = fuse_single_stream(
                    self.streams(), streams_key[0], self.query_ts, max_len)
            else:
                raise ValueError(f"unsupported stream layout {streams_key!r}")
        return self._fused[key]

    def validate(self, n_candidates: int, n_cities: int) -> None:
        for fields, values in ((USER_FEATURE_FIELDS, self.user_features),
                               (STATUS_FEATURE_FIELDS, self.status_features)):
            for name, size in fields:
                v = values.get(name)
                if v is None or not 1 <= v <= size:
                    raise DataError(f"feature {name}={v} outside [1, {size}]")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")
        if not 1 <= self.candidate_city <= n_candidates:
            raise DataError(
                f"candidate {self.candidate_city} outside vocabulary [1, {n_candidates}]")
        if self.query_ts <= 0:
            raise DataError(f"query_ts must be positive, got {self.query_ts}")
        for ev in self.events:
            ev.validate(n_cities)
            if ev.ts > self.query_ts:
                raise DataError(f"event at {ev.ts} after query_ts {self.query_ts}")


_RECORD_KEYS = ("user_id", "user_features", "status_features", "events",
                "candidate_city", "label", "query_ts")


def record_to_json(rec: SampleRecord) -> str:
    """Canonical one-line form: fixed key order, compact separators."""
    obj = {
        "user_id": rec.user_id,
        "user_features": {name: rec.user_features[name] for name, _ in USER_FEATURE_FIELDS},
        "status_features": {name: rec.status_features[name] for name, _ in STATUS_FEATURE_FIELDS},
        "events": [{"ts": ev.ts, "city": ev.city, "product": ev.product, "action": ev.action}
                   for ev in rec.events],
        "candidate_city": rec.candidate_city,
        "label": rec.label,
        "query_ts": rec.query_ts,
    }
    return json.dumps(obj, separators=(",", ":"))


def _record_from_obj(obj: dict) -> SampleRecord:
    if set(obj.keys()) != set(_RECORD_KEYS):
        raise DataError(f"record keys {sorted(obj.keys())} do not match schema")
    events = [BehaviorEvent(ts=e["ts"], city=e["city"], product=e["product"], action=e["action"])
              for e in obj["events"]]
    return SampleRecord(
        user_id=int(obj["user_id"]),
        user_features=dict(obj["user_features"]),
        status_features=dict(obj["status_features"]),
        events=events,
        candidate_city=int(obj["candidate_city"]),
        label=int(obj["label"]),
        query_ts=int(obj["query_ts"]),
    )


def load_dataset(path, n_candidates: int = 200, n_cities: int | None = None) -> list[SampleRecord]:
    """Read and validate a line-record dataset.

    ``n_candidates`` bounds the candidate id vocabulary (cities, or items for
    the item-target task); ``n_cities`` bounds event cities and defaults to
    ``n_candidates``.
    """
    n_cities = n_candidates if n_cities is None else n_cities
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = _record_from_obj(json.loads(line))
                rec.validate(n_candidates, n_cities)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            records.append(rec)
    return records


def write_dataset(records: Iterable[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def load_intent_table(path) -> dict[int, int]:
    """Ground-truth table: one "user_id<TAB>intent_city" line per user."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected user_id<TAB>intent_city")
            table[int(parts[0])] = int(parts[1])
    return table


def write_intent_table(table: Mapping[int, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user_id in sorted(table):
            fh.write(f"{user_id}\t{table[user_id]}\n")
