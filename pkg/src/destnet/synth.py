"""Synthetic travel-log generator with planted ground-truth intent.

Each user gets a latent intent city and a decoy "home" city. Old events
mostly sit at the decoy; recent events arrive in short cross-product bursts
at the intent city with probability equal to the configured signal strength.
A recent single-product spree at an unrelated city is planted as a lure for
models that cannot see cross-stream adjacency. Positives pair a query with
the intent city, negatives with other cities at a configured ratio, and a
parallel item-target task links every vacation item to a home city.

Everything is deterministic given (config, seed): users are generated from
per-user child seeds, so sharding by user cannot change the output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    ACTIONS,
    PRODUCTS,
    BehaviorEvent,
    SampleRecord,
    record_to_json,
    write_intent_table,
)

BASE_TS = 1_546_300_800  # 2019-01-01T00:00:00Z
SECONDS_PER_DAY = 86400

PRODUCT_WEIGHTS = (0.17, 0.18, 0.28, 0.22, 0.15)  # train, flight, hotel, item, search
ACTION_WEIGHTS = (0.70, 0.15, 0.15)
DEPARTURE_BUCKET_EDGES = (1.0, 2.0, 3.0, 5.0, 7.0, 14.0, 21.0)  # days; 8 buckets


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the generator; rates in [0,1], counts positive."""

    n_users: int = 5000
    n_cities: int = 200
    n_items: int = 400
    queries_per_user: int = 2
    events_mean: float = 24.0
    events_min: int = 6
    events_max: int = 60
    signal_strength: float = 0.8
    label_noise: float = 0.05
    neg_per_pos: int = 4
    seed: int = 42
    recent_days: float = 7.0
    history_days: float = 90.0
    recent_frac: float = 0.35
    decoy_prob: float = 0.85
    spree_prob: float = 0.6
    train_frac: float = 0.7
    valid_frac: float = 0.15

    def __post_init__(self):
        for name in ("signal_strength", "label_noise", "decoy_prob", "spree_prob",
                     "train_frac", "valid_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("n_users", "n_cities", "queries_per_user", "events_min",
                     "events_max", "neg_per_pos"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_cities < 3:
            raise ValueError("need at least 3 cities for intent/decoy/lure structure")
        if self.train_frac + self.valid_frac >= 1.0:
            raise ValueError("train_frac + valid_frac must leave room for a test split")


def _season(month: int) -> int:
    return (month % 12) // 3 + 1


def _status_features(rng: np.random.Generator, query_ts: int) -> dict[str, int]:
    tm = time.gmtime(query_ts)
    dep_days = float(rng.uniform(0.5, 30.0))
    bucket = 1 + int(np.searchsorted(DEPARTURE_BUCKET_EDGES, dep_days))
    return {
        "trip_status": int(rng.integers(1, 4)),
        "days_to_departure_bucket": bucket,
        "month": tm.tm_mon,
        "season": _season(tm.tm_mon),
        "hour": tm.tm_hour + 1,
    }


def _other_city(rng: np.random.Generator, n_cities: int, *avoid: int) -> int:
    while True:
        c = int(rng.integers(1, n_cities + 1))
        if c not in avoid:
            return c


def _pick_products(rng: np.random.Generator, count: int) -> list[str]:
    idx = rng.choice(len(PRODUCTS), size=count, replace=False, p=PRODUCT_WEIGHTS)
    return [PRODUCTS[i] for i in idx]


def _pick_action(rng: np.random.Generator) -> str:
    return ACTIONS[int(rng.choice(len(ACTIONS), p=ACTION_WEIGHTS))]


def _history(rng: np.random.Generator, cfg: SyntheticConfig, query_ts: int,
             intent: int, decoy: int) -> list[BehaviorEvent]:
    """One query's event history: old decoy mass, recent intent bursts, a lure."""
    n = int(np.clip(rng.poisson(cfg.events_mean), cfg.events_min, cfg.events_max))
    n_recent = max(1, int(round(n * cfg.recent_frac)))
    n_old = n - n_recent
    events: list[BehaviorEvent] = []

    for _ in range(n_old):
        age = float(rng.uniform(cfg.recent_days, cfg.history_days))
        city = decoy if rng.random() < cfg.decoy_prob else _other_city(rng, cfg.n_cities)
        product = PRODUCTS[int(rng.choice(len(PRODUCTS), p=PRODUCT_WEIGHTS))]
        ts = query_ts - int(age * SECONDS_PER_DAY)
        events.append(BehaviorEvent(ts=ts, city=city, product=product,
                                    action=_pick_action(rng)))

    remaining = n_recent
    while remaining > 0:
        size = int(min(remaining, rng.integers(2, 5)))
        on_intent = rng.random() < cfg.signal_strength
        city = intent if on_intent else _other_city(rng, cfg.n_cities, intent)
        anchor = float(rng.uniform(0.02, cfg.recent_days))
        for j, product in enumerate(_pick_products(rng, size)):
            age = min(max(anchor + float(rng.uniform(-0.05, 0.05)) + 0.02 * j, 0.003),
                      cfg.recent_days)
            ts = query_ts - int(age * SECONDS_PER_DAY)
            events.append(BehaviorEvent(ts=ts, city=city, product=product,
                                        action=_pick_action(rng)))
        remaining -= size

    if rng.random() < cfg.spree_prob:
        # Single-product lure at an unrelated city; strictly fewer events than
        # the recent quota so the modal recent city stays the intent city
        # whenever every burst lands on it.
        size = int(min(rng.integers(3, 6), max(n_recent - 1, 0)))
        if size > 0:
            lure = _other_city(rng, cfg.n_cities, intent, decoy)
            product = PRODUCTS[int(rng.choice(len(PRODUCTS), p=PRODUCT_WEIGHTS))]
            for _ in range(size):
                age = float(rng.uniform(0.02, cfg.recent_days))
                ts = query_ts - int(age * SECONDS_PER_DAY)
                events.append(BehaviorEvent(ts=ts, city=lure, product=product,
                                            action=_pick_action(rng)))

    events.sort(key=lambda ev: (ev.ts, PRODUCTS.index(ev.product)))
    return events


@dataclass
class ItemCatalog:
    """Vacation items, each anchored to one city, with a popularity prior."""

    cities: np.ndarray   # int64 [n_items+1], index 0 unused
    popularity: np.ndarray  # float64 [n_items+1], normalized over items

    @classmethod
    def build(cls, rng: np.random.Generator, n_items: int, n_cities: int) -> "ItemCatalog":
        cities = np.zeros(n_items + 1, dtype=np.int64)
        # Round-robin base assignment guarantees every city owns an item.
        for i in range(1, n_items + 1):
            cities[i] = (i - 1) % n_cities + 1 if i <= n_cities \
                else int(rng.integers(1, n_cities + 1))
        pop = rng.lognormal(0.0, 1.0, size=n_items + 1)
        pop[0] = 0.0
        return cls(cities=cities, popularity=pop / pop[1:].sum())

    def sample_in_city(self, rng: np.random.Generator, city: int) -> int:
        ids = np.flatnonzero(self.cities == city)
        p = self.popularity[ids]
        return int(rng.choice(ids, p=p / p.sum()))

    def sample_elsewhere(self, rng: np.random.Generator, city: int) -> int:
        while True:
            item = int(rng.integers(1, len(self.cities)))
            if self.cities[item] != city:
                return item


def _user_records(cfg: SyntheticConfig, user_id: int, catalog: ItemCatalog | None):
    """All records of one user: (city_task, item_task, item_city_twin, intent)."""
    rng = np.random.default_rng([cfg.seed, user_id])
    intent = int(rng.integers(1, cfg.n_cities + 1))
    decoy = _other_city(rng, cfg.n_cities, intent)
    user_features = {
        "age_bucket": int(rng.integers(1, 9)),
        "gender": int(rng.integers(1, 3)),
        "purchase_level": int(rng.integers(1, 6)),
    }
    city_rows, item_rows, twin_rows = [], [], []
    for _ in range(cfg.queries_per_user):
        query_ts = BASE_TS + int(rng.integers(0, 360 * SECONDS_PER_DAY)) \
            + int(cfg.history_days * SECONDS_PER_DAY)
        status = _status_features(rng, query_ts)
        events = _history(rng, cfg, query_ts, intent, decoy)

        def rec(candidate: int, label: int) -> SampleRecord:
            return SampleRecord(user_id=user_id, user_features=user_features,
                                status_features=status, events=events,
                                candidate_city=candidate, label=label,
                                query_ts=query_ts)

        def noisy(label: int) -> int:
            return 1 - label if rng.random() < cfg.label_noise else label

        city_rows.append(rec(intent, noisy(1)))
        for _ in range(cfg.neg_per_pos):
            city_rows.append(rec(_other_city(rng, cfg.n_cities, intent), noisy(0)))

        if catalog is not None:
            # Candidate ids for the item task live past the city vocabulary.
            pos_item = catalog.sample_in_city(rng, intent)
            pairs = [(pos_item, 1)]
            for _ in range(cfg.neg_per_pos):
                pairs.append((catalog.sample_elsewhere(rng, intent), 0))
            for item, label in pairs:
                lab = noisy(label)
                item_rows.append(rec(cfg.n_cities + item, lab))
                twin_rows.append(rec(int(catalog.cities[item]), lab))
    return city_rows, item_rows, twin_rows, intent


def split_of_user(cfg: SyntheticConfig, user_id: int) -> str:
    n_train = int(round(cfg.n_users * cfg.train_frac))
    n_valid = int(round(cfg.n_users * cfg.valid_frac))
    if user_id <= n_train:
        return "train"
    if user_id <= n_train + n_valid:
        return "valid"
    return "test"


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> dict:
    """Write dataset splits plus ground truth; returns paths and counts.

    Emits ``{train,valid,test}.jsonl`` for the city task, the intent table,
    and (when ``n_items`` > 0) the item-task splits, the item->city map, and
    a city-candidate twin of the item test split for two-stage scoring.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0])
    catalog = ItemCatalog.build(rng, cfg.n_items, cfg.n_cities) if cfg.n_items > 0 else None

    paths = {s: out / f"{s}.jsonl" for s in ("train", "valid", "test")}
    item_paths = {s: out / f"item_{s}.jsonl" for s in ("train", "valid", "test")}
    twin_path = out / "item_test_city.jsonl"
    counts = {k: 0 for k in ("train", "valid", "test")}
    intents: dict[int, int] = {}

    handles = {s: open(p, "w", encoding="utf-8") for s, p in paths.items()}
    item_handles = {s: open(p, "w", encoding="utf-8") for s, p in item_paths.items()} \
        if catalog else {}
    twin_handle = open(twin_path, "w", encoding="utf-8") if catalog else None
    try:
        for user_id in range(1, cfg.n_users + 1):
            city_rows, item_rows, twin_rows, intent = _user_records(cfg, user_id, catalog)
            intents[user_id] = intent
            split = split_of_user(cfg, user_id)
            for row in city_rows:
                handles[split].write(record_to_json(row) + "\n")
            counts[split] += len(city_rows)
            if catalog:
                for row in item_rows:
                    item_handles[split].write(record_to_json(row) + "\n")
                if split == "test":
                    for row in twin_rows:
                        twin_handle.write(record_to_json(row) + "\n")
    finally:
        for fh in (*handles.values(), *item_handles.values()):
            fh.close()
        if twin_handle:
            twin_handle.close()

    write_intent_table(intents, out / "intents.tsv")
    manifest = {
        "paths": {k: str(v) for k, v in paths.items()},
        "intents": str(out / "intents.tsv"),
        "counts": counts,
        "n_cities": cfg.n_cities,
    }
    if catalog:
        with open(out / "items.tsv", "w", encoding="utf-8") as fh:
            for item in range(1, cfg.n_items + 1):
                fh.write(f"{item}\t{int(catalog.cities[item])}\n")
        manifest["item_paths"] = {k: str(v) for k, v in item_paths.items()}
        manifest["item_test_city"] = str(twin_path)
        manifest["items"] = str(out / "items.tsv")
        manifest["n_item_candidates"] = cfg.n_cities + cfg.n_items
    return manifest
