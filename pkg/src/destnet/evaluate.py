"""AUC scoring, fusing/ablation comparison, two-stage item scoring, and
attention-trace export.

``auc`` is the O(n log n) rank-sum statistic with the tie-pair convention
(ties count half); ``auc_pairwise`` is the O(n^2) reference it must agree
with exactly. The comparison harness trains one model per fusing row with a
shared seed policy so tables are reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import SampleRecord, load_intent_table
from .errors import DataError
from .model import Batch, ModelParams, assemble_batch, trace_batch

TRACE_HEADER = "record_id,grain,position,city,action_unit,tau_days,weight"


def _check_labels(scores: np.ndarray, labels: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores/labels must be equal-length vectors, "
                         f"got {scores.shape} and {labels.shape}")
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos + neg != labels.shape[0]:
        raise ValueError("labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise DataError(f"AUC needs both classes, got {pos} positives and {neg} negatives")
    return scores, labels, pos, neg


def auc(scores, labels) -> float:
    """Rank-sum AUC with average ranks over ties (ties credit 0.5 per pair)."""
    scores, labels, pos, neg = _check_labels(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.shape[0])
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def auc_pairwise(scores, labels) -> float:
    """Quadratic pairwise count; the independent oracle for :func:`auc`."""
    scores, labels, pos, neg = _check_labels(scores, labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    wins = 0.0
    for p in pos_scores:
        wins += float((p > neg_scores).sum()) + 0.5 * float((p == neg_scores).sum())
    return wins / (pos * neg)


def two_stage_score(p_dest, p_item):
    """Final vacation-item score: destination score times item score."""
    p_dest = np.asarray(p_dest, dtype=np.float64)
    p_item = np.asarray(p_item, dtype=np.float64)
    for name, p in (("p_dest", p_dest), ("p_item", p_item)):
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValueError(f"{name} must lie strictly inside (0, 1)")
    out = p_dest * p_item
    return float(out) if out.ndim == 0 else out


@dataclass
class EvalReport:
    """Scoring summary for one model on one dataset."""

    model_label: str
    dataset_label: str
    auc: float
    n_total: int
    n_pos: int
    n_neg: int
    seconds: float

    def to_lines(self, with_seconds: bool = False) -> str:
        # Timing is excluded from file output so reports stay byte-reproducible.
        lines = [
            f"model={self.model_label}",
            f"dataset={self.dataset_label}",
            f"auc={self.auc:.6f}",
            f"samples={self.n_total} positives={self.n_pos} negatives={self.n_neg}",
        ]
        if with_seconds:
            lines.append(f"seconds={self.seconds:.2f}")
        return "\n".join(lines) + "\n"


def evaluate_model(params: ModelParams, batch: Batch, model_label: str = "model",
                   dataset_label: str = "test") -> EvalReport:
    from .train import predict_scores  # local import: train depends on auc above

    t0 = time.perf_counter()
    scores = predict_scores(params, batch)
    value = auc(scores, batch.label)
    pos = int((batch.label == 1).sum())
    return EvalReport(model_label=model_label, dataset_label=dataset_label, auc=value,
                      n_total=len(batch), n_pos=pos, n_neg=len(batch) - pos,
                      seconds=time.perf_counter() - t0)


FUSING_ROWS = (
    ("train_single", ("train",)),
    ("flight_single", ("flight",)),
    ("hotel_single", ("hotel",)),
    ("item_single", ("item",)),
    ("search_single", ("search",)),
    ("strategy_I", ("global",)),
    ("strategy_II", ("train", "flight", "hotel", "item", "search")),
)


def compare_fusing(train_records, valid_records, test_records, cfg):
    """Train the five single-stream rows plus both fusing strategies and
    report the test AUC of each row. Returns (rows, models)."""
    from .train import train

    rows = []
    models = {}
    for label, streams in FUSING_ROWS:
        batches = [assemble_batch(recs, streams, cfg.max_len)
                   for recs in (train_records, valid_records, test_records)]
        params, _ = train(batches[0], batches[1], cfg, streams=streams)
        report = evaluate_model(params, batches[2], model_label=label)
        rows.append((label, report.auc))
        models[label] = params
    return rows, models


def fusing_table(rows) -> str:
    width = max(len(label) for label, _ in rows)
    lines = [f"{'row'.ljust(width)}  test_auc"]
    for label, value in rows:
        lines.append(f"{label.ljust(width)}  {value:.6f}")
    return "\n".join(lines) + "\n"


def dump_attention(params: ModelParams, records: list[SampleRecord], path,
                   chunk: int = 512) -> int:
    """Write one trace row per (record, grain, unmasked position).

    The ``action_unit`` column carries the public grid id (0..14); sentinel
    positions from empty streams are written as -1. Returns the row count.
    """
    if not params.spec.has_attention:
        raise DataError(f"variant {params.spec.kind!r} has no attention layer to trace")
    streams = params.spec.streams
    n_rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for start in range(0, len(records), chunk):
            part = records[start:start + chunk]
            batch = assemble_batch(part, streams, params.max_len)
            for tr in trace_batch(params, batch, record_offset=start):
                for pos, city, unit, tau, w in zip(tr.positions, tr.cities,
                                                   tr.action_units, tr.tau_days, tr.weights):
                    fh.write(f"{tr.record_index},{tr.grain},{pos},{city},"
                             f"{int(unit) - 1},{tau:.6f},{w:.6f}\n")
                    n_rows += 1
    return n_rows


def load_trace(path):
    """Parse a trace file back into a list of row tuples."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise DataError(f"{path}: unexpected trace header {header!r}")
        for line in fh:
            rec, grain, pos, city, unit, tau, w = line.strip().split(",")
            rows.append((int(rec), int(grain), int(pos), int(city), int(unit),
                         float(tau), float(w)))
    return rows


def two_stage_eval(dest_params: ModelParams, item_params: ModelParams,
                   twin_records, item_records):
    """AUC of two-stage destination-times-item scoring vs direct item scoring.

    ``twin_records`` mirror ``item_records`` row by row with the candidate
    replaced by the item's home city; labels must agree.
    """
    from .train import predict_scores

    twin_batch = assemble_batch(twin_records, dest_params.spec.streams, dest_params.max_len)
    item_batch = assemble_batch(item_records, item_params.spec.streams, item_params.max_len)
    if not np.array_equal(twin_batch.label, item_batch.label):
        raise DataError("item records and their city twins disagree on labels")
    p_dest = predict_scores(dest_params, twin_batch)
    p_item = predict_scores(item_params, item_batch)
    labels = item_batch.label
    return auc(two_stage_score(p_dest, p_item), labels), auc(p_item, labels)


def attention_mass_by_city(params: ModelParams, records: list[SampleRecord],
                           intents: dict[int, int], chunk: int = 512):
    """Mean attention mass on intent-city events vs the per-record decoy city.

    The decoy is inferred per record as the most frequent event city other
    than the user's intent city (ties to the smaller id); records without
    such a city are skipped.
    """
    streams = params.spec.streams
    intent_masses, decoy_masses = [], []
    for start in range(0, len(records), chunk):
        part = records[start:start + chunk]
        batch = assemble_batch(part, streams, params.max_len)
        traces = trace_batch(params, batch, record_offset=start)
        decoys = {}
        for i, rec in enumerate(part):
            intent = intents[rec.user_id]
            cities = [ev.city for ev in rec.events if ev.city != intent]
            if cities:
                counts = {}
                for c in cities:
                    counts[c] = counts.get(c, 0) + 1
                top = max(counts.values())
                decoys[start + i] = min(c for c, n in counts.items() if n == top)
        for tr in traces:
            if tr.record_index not in decoys:
                continue
            intent = intents[part[tr.record_index - start].user_id]
            decoy = decoys[tr.record_index]
            intent_masses.append(float(tr.weights[tr.cities == intent].sum()))
            decoy_masses.append(float(tr.weights[tr.cities == decoy].sum()))
    return float(np.mean(intent_masses)), float(np.mean(decoy_masses))


def localization_records(records, intents: dict[int, int]) -> list[SampleRecord]:
    """Positive records whose candidate is the user's true intent city."""
    return [r for r in records
            if r.label == 1 and intents.get(r.user_id) == r.candidate_city]
