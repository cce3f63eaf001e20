"""The model family: embedding + encoder + status attention + MLP + sigmoid.

Four variants share one parameter registry and one forward/backward pass:

* ``mlp``   - no encoder; masked mean of the sequence embeddings
* ``atrnn`` - GRU states scored by status-aware, time-aided attention
* ``atmc``  - multi-grained convolution, one attention head per grain
* ``mc``    - multi-grained convolution with masked mean pooling per grain

A model runs over one fused global sequence (stream layout ``("global",)``),
over the five per-product sequences, or over any single stream; each stream
gets its own encoder/attention parameters and the branch outputs are
concatenated before the MLP.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .data import (
    N_ACTION_UNITS,
    PRODUCTS,
    STATUS_FEATURE_FIELDS,
    USER_FEATURE_FIELDS,
    FusedSequence,
    SampleRecord,
)
from .errors import DataError, NumericError
from .numerics import sigmoid

VARIANTS = ("mlp", "atrnn", "atmc", "mc")
GLOBAL_STREAMS = ("global",)
Y_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"DSTNET\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VariantSpec:
    """Architecture of one model variant."""

    kind: str
    d_e: int = 8
    d_h: int = 8
    d_t: int = 4
    kernel_widths: tuple[int, ...] = (1, 3, 5, 7)
    m: int = 8
    mlp_sizes: tuple[int, ...] = (64, 32, 1)
    activation: str = "relu"
    streams: tuple[str, ...] = GLOBAL_STREAMS

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.mlp_sizes[-1] != 1:
            raise ValueError("final MLP size must be 1")
        widths = self.kernel_widths
        if len(set(widths)) != len(widths) or any(k % 2 == 0 or k < 1 for k in widths):
            raise ValueError(f"kernel widths must be odd and distinct, got {widths}")
        for s in self.streams:
            if s != "global" and s not in PRODUCTS:
                raise ValueError(f"unknown stream {s!r}")
        if "global" in self.streams and len(self.streams) != 1:
            raise ValueError("the global stream cannot be combined with others")

    @property
    def strategy(self) -> str:
        return "1" if self.streams == GLOBAL_STREAMS else "2"

    @property
    def n_grains(self) -> int:
        return len(self.kernel_widths)

    @property
    def d_in(self) -> int:
        return 2 * self.d_e

    @property
    def branch_dim(self) -> int:
        if self.kind == "mlp":
            return self.d_in
        if self.kind == "atrnn":
            return self.d_h
        return self.n_grains * self.m

    @property
    def has_attention(self) -> bool:
        return self.kind in ("atrnn", "atmc")

    def mlp_input_dim(self) -> int:
        d_u = len(USER_FEATURE_FIELDS) * self.d_e
        d_o = len(STATUS_FEATURE_FIELDS) * self.d_e
        return d_u + d_o + len(self.streams) * self.branch_dim + self.d_e

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "d_e": self.d_e, "d_h": self.d_h, "d_t": self.d_t,
            "kernel_widths": list(self.kernel_widths), "m": self.m,
            "mlp_sizes": list(self.mlp_sizes), "activation": self.activation,
            "streams": list(self.streams),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "VariantSpec":
        return cls(
            kind=obj["kind"], d_e=int(obj["d_e"]), d_h=int(obj["d_h"]),
            d_t=int(obj["d_t"]), kernel_widths=tuple(obj["kernel_widths"]),
            m=int(obj["m"]), mlp_sizes=tuple(obj["mlp_sizes"]),
            activation=obj["activation"], streams=tuple(obj["streams"]),
        )


def spec_for_strategy(spec: VariantSpec, strategy: str) -> VariantSpec:
    streams = GLOBAL_STREAMS if str(strategy) == "1" else PRODUCTS
    return replace(spec, streams=streams)


@dataclass
class ModelParams:
    """All learnable tensors of one variant, keyed by name."""

    spec: VariantSpec
    n_cities: int
    tensors: dict[str, np.ndarray]
    max_len: int = 30

    def clone(self) -> "ModelParams":
        return ModelParams(self.spec, self.n_cities,
                           {k: v.copy() for k, v in self.tensors.items()}, self.max_len)

    def embedding_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("emb.")]

    def zero_padding_rows(self) -> None:
        for name in self.embedding_names():
            self.tensors[name][0] = 0.0

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise NumericError(f"non-finite values in parameter {name}")


def _expected_shapes(spec: VariantSpec, n_cities: int) -> dict[str, tuple[int, ...]]:
    d_e, d_h, d_t, m = spec.d_e, spec.d_h, spec.d_t, spec.m
    shapes: dict[str, tuple[int, ...]] = {
        "emb.city": (n_cities + 1, d_e),
        "emb.unit": (N_ACTION_UNITS + 1, d_e),
    }
    for name, size in USER_FEATURE_FIELDS:
        shapes[f"emb.u.{name}"] = (size + 1, d_e)
    for name, size in STATUS_FEATURE_FIELDS:
        shapes[f"emb.o.{name}"] = (size + 1, d_e)
    d_o = len(STATUS_FEATURE_FIELDS) * d_e
    if spec.has_attention:
        shapes["time.wb"] = (d_t,)
    for s in spec.streams:
        if spec.kind == "atrnn":
            for gate in ("z", "r", "h"):
                shapes[f"enc.{s}.gru.w{gate}"] = (spec.d_in, d_h)
                shapes[f"enc.{s}.gru.u{gate}"] = (d_h, d_h)
                shapes[f"enc.{s}.gru.b{gate}"] = (d_h,)
            shapes[f"attn.{s}.g0.wa"] = (d_o, d_h + d_t)
        elif spec.kind in ("atmc", "mc"):
            for k in spec.kernel_widths:
                shapes[f"enc.{s}.conv{k}.k"] = (m, spec.d_in, k)
                shapes[f"enc.{s}.conv{k}.b"] = (m,)
            if spec.kind == "atmc":
                for gi in range(spec.n_grains):
                    shapes[f"attn.{s}.g{gi}.wa"] = (d_o, m + d_t)
    sizes = [spec.mlp_input_dim(), *spec.mlp_sizes]
    for i in range(len(spec.mlp_sizes) - 1):
        shapes[f"mlp.{i}.w"] = (sizes[i], sizes[i + 1])
        shapes[f"mlp.{i}.b"] = (sizes[i + 1],)
    shapes["rank.w"] = (sizes[-2],)
    return shapes


def init_params(spec: VariantSpec, n_cities: int, seed: int, max_len: int = 30) -> ModelParams:
    """Deterministic initialization; padding rows start (and stay) at zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _expected_shapes(spec, n_cities).items():
        if name.startswith("emb."):
            t = rng.normal(0.0, 0.05, size=shape)
            t[0] = 0.0
        elif name == "time.wb":
            t = rng.normal(0.0, 0.5, size=shape)
        elif name.endswith(".b") or ".gru.b" in name:
            t = np.zeros(shape)
        elif name == "rank.w":
            bound = np.sqrt(3.0 / shape[0])
            t = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 3:  # conv kernels
            fan_in = shape[1] * shape[2]
            bound = np.sqrt(6.0 / (fan_in + shape[0]))
            t = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            t = rng.uniform(-bound, bound, size=shape)
        else:
            t = np.zeros(shape)
        tensors[name] = np.ascontiguousarray(t, dtype=np.float64)
    return ModelParams(spec=spec, n_cities=n_cities, tensors=tensors, max_len=max_len)


# --- batches -------------------------------------------------------------------

@dataclass
class SeqBatch:
    city: np.ndarray  # int64 [B, L]
    unit: np.ndarray  # int64 [B, L]
    tau: np.ndarray   # float64 [B, L]
    mask: np.ndarray  # bool [B, L]


@dataclass
class Batch:
    user: np.ndarray    # int64 [B, n_user_features]
    status: np.ndarray  # int64 [B, n_status_features]
    cand: np.ndarray    # int64 [B]
    seqs: dict[str, SeqBatch]
    label: np.ndarray   # float64 [B]

    def __len__(self) -> int:
        return self.cand.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(
            user=self.user[idx], status=self.status[idx], cand=self.cand[idx],
            seqs={s: SeqBatch(q.city[idx], q.unit[idx], q.tau[idx], q.mask[idx])
                  for s, q in self.seqs.items()},
            label=self.label[idx],
        )


def assemble_batch(records: list[SampleRecord], streams: tuple[str, ...], max_len: int) -> Batch:
    """Stack fused records into model-ready arrays (order preserved)."""
    n = len(records)
    user = np.zeros((n, len(USER_FEATURE_FIELDS)), dtype=np.int64)
    status = np.zeros((n, len(STATUS_FEATURE_FIELDS)), dtype=np.int64)
    cand = np.zeros(n, dtype=np.int64)
    label = np.zeros(n, dtype=np.float64)
    seqs = {s: SeqBatch(np.zeros((n, max_len), dtype=np.int64),
                        np.zeros((n, max_len), dtype=np.int64),
                        np.zeros((n, max_len)),
                        np.zeros((n, max_len), dtype=bool))
            for s in streams}
    for i, rec in enumerate(records):
        for j, (name, _) in enumerate(USER_FEATURE_FIELDS):
            user[i, j] = rec.user_features[name]
        for j, (name, _) in enumerate(STATUS_FEATURE_FIELDS):
            status[i, j] = rec.status_features[name]
        cand[i] = rec.candidate_city
        label[i] = rec.label
        fused = rec.fused(streams, max_len)
        for s in streams:
            q = fused[s]
            seqs[s].city[i] = q.city_ids
            seqs[s].unit[i] = q.action_units
            seqs[s].tau[i] = q.time_deltas
            seqs[s].mask[i] = q.mask
    return Batch(user=user, status=status, cand=cand, seqs=seqs, label=label)


# --- forward / backward ----------------------------------------------------------

def forward_batch(params: ModelParams, batch: Batch, want_traces: bool = False):
    """Scores for a batch: returns (yhat, cache, traces).

    ``traces`` maps (stream, grain index) to the [B, L] attention weights for
    attention variants, and is None otherwise.
    """
    spec = params.spec
    t = params.tensors
    if np.any(batch.cand > params.n_cities) or np.any(batch.cand < 1):
        raise DataError("candidate id outside the embedding vocabulary")
    cache: dict = {"branches": {}}
    traces: dict | None = {} if (want_traces and spec.has_attention) else None

    u_parts, u_caches = [], []
    for j, (name, _) in enumerate(USER_FEATURE_FIELDS):
        out, ids = layers.embed_lookup_forward(t[f"emb.u.{name}"], batch.user[:, j])
        u_parts.append(out)
        u_caches.append(ids)
    x_u = np.concatenate(u_parts, axis=1)
    o_parts, o_caches = [], []
    for j, (name, _) in enumerate(STATUS_FEATURE_FIELDS):
        out, ids = layers.embed_lookup_forward(t[f"emb.o.{name}"], batch.status[:, j])
        o_parts.append(out)
        o_caches.append(ids)
    x_o = np.concatenate(o_parts, axis=1)
    x_i, cand_ids = layers.embed_lookup_forward(t["emb.city"], batch.cand)
    cache.update(u_caches=u_caches, o_caches=o_caches, cand_ids=cand_ids, x_o=x_o)

    branch_outs = []
    for s in spec.streams:
        seq = batch.seqs[s]
        bc: dict = {}
        x, bc["embed"] = layers.sequence_embed_forward(
            t["emb.city"], t["emb.unit"], seq.city, seq.unit, seq.mask)
        if spec.kind == "mlp":
            a, bc["pool"] = layers.masked_mean_forward(x, seq.mask)
        elif spec.kind == "atrnn":
            h, bc["gru"] = layers.gru_forward(x, seq.mask, _gru_params(t, s))
            t_emb, bc["time"] = layers.time_embed_forward(seq.tau, t["time.wb"])
            a, w, bc["attn"] = layers.attention_forward(
                x_o, h, t_emb, seq.mask, t[f"attn.{s}.g0.wa"])
            if traces is not None:
                traces[(s, 0)] = w
        elif spec.kind in ("atmc", "mc"):
            if spec.kind == "atmc":
                t_emb, bc["time"] = layers.time_embed_forward(seq.tau, t["time.wb"])
            grain_outs = []
            bc["grains"] = []
            for gi, k in enumerate(spec.kernel_widths):
                fmap, conv_cache = layers.conv_grain_forward(
                    x, t[f"enc.{s}.conv{k}.k"], t[f"enc.{s}.conv{k}.b"],
                    seq.mask, spec.activation)
                if spec.kind == "atmc":
                    a_g, w, attn_cache = layers.attention_forward(
                        x_o, fmap, t_emb, seq.mask, t[f"attn.{s}.g{gi}.wa"])
                    if traces is not None:
                        traces[(s, gi)] = w
                else:
                    a_g, attn_cache = layers.masked_mean_forward(fmap, seq.mask)
                grain_outs.append(a_g)
                bc["grains"].append((conv_cache, attn_cache))
            a = np.concatenate(grain_outs, axis=1)
        else:  # pragma: no cover
            raise ValueError(spec.kind)
        branch_outs.append(a)
        cache["branches"][s] = bc

    v = np.concatenate([x_u, x_o, *branch_outs, x_i], axis=1)
    h = v
    mlp_caches = []
    for i in range(len(spec.mlp_sizes) - 1):
        h, dc = layers.dense_forward(h, t[f"mlp.{i}.w"], t[f"mlp.{i}.b"], spec.activation)
        mlp_caches.append(dc)
    logit = h @ t["rank.w"]
    yhat = sigmoid(logit)
    cache.update(mlp_caches=mlp_caches, h_last=h, v_dim=v.shape[1], yhat=yhat)
    return yhat, cache, traces


def backward_batch(params: ModelParams, batch: Batch, cache: dict,
                   d_logit: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every tensor in ``params`` given d loss / d logit."""
    spec = params.spec
    t = params.tensors
    grads = {name: np.zeros_like(arr) for name, arr in t.items()}

    dh = d_logit[:, None] * t["rank.w"][None, :]
    grads["rank.w"] += cache["h_last"].T @ d_logit
    for i in range(len(spec.mlp_sizes) - 2, -1, -1):
        dh, dw, db = layers.dense_backward(dh, cache["mlp_caches"][i], t[f"mlp.{i}.w"],
                                           spec.activation)
        grads[f"mlp.{i}.w"] += dw
        grads[f"mlp.{i}.b"] += db
    dv = dh

    d_e = spec.d_e
    d_u = len(USER_FEATURE_FIELDS) * d_e
    d_o = len(STATUS_FEATURE_FIELDS) * d_e
    dx_u = dv[:, :d_u]
    dx_o = dv[:, d_u:d_u + d_o].copy()
    pos = d_u + d_o
    d_branch = {}
    for s in spec.streams:
        d_branch[s] = dv[:, pos:pos + spec.branch_dim]
        pos += spec.branch_dim
    dx_i = dv[:, pos:]

    for s in spec.streams:
        seq = batch.seqs[s]
        bc = cache["branches"][s]
        da = d_branch[s]
        if spec.kind == "mlp":
            dx = layers.masked_mean_backward(da, bc["pool"], seq.mask.shape[1])
        elif spec.kind == "atrnn":
            dstates, dt_emb, dxo_part, dwa = layers.attention_backward(da, bc["attn"])
            grads[f"attn.{s}.g0.wa"] += dwa
            dx_o += dxo_part
            grads["time.wb"] += layers.time_embed_backward(dt_emb, bc["time"])
            dx, g_gru = layers.gru_backward(dstates, bc["gru"], _gru_params(t, s))
            for gate_name, g in g_gru.items():
                grads[f"enc.{s}.gru.{gate_name}"] += g
        else:
            dx = None
            dt_total = None
            for gi, k in enumerate(spec.kernel_widths):
                conv_cache, attn_cache = bc["grains"][gi]
                da_g = da[:, gi * spec.m:(gi + 1) * spec.m]
                if spec.kind == "atmc":
                    dmap, dt_emb, dxo_part, dwa = layers.attention_backward(da_g, attn_cache)
                    grads[f"attn.{s}.g{gi}.wa"] += dwa
                    dx_o += dxo_part
                    dt_total = dt_emb if dt_total is None else dt_total + dt_emb
                else:
                    dmap = layers.masked_mean_backward(da_g, attn_cache, seq.mask.shape[1])
                dx_g, dk, db = layers.conv_grain_backward(
                    dmap, conv_cache, t[f"enc.{s}.conv{k}.k"], spec.activation)
                grads[f"enc.{s}.conv{k}.k"] += dk
                grads[f"enc.{s}.conv{k}.b"] += db
                dx = dx_g if dx is None else dx + dx_g
            if spec.kind == "atmc":
                grads["time.wb"] += layers.time_embed_backward(dt_total, bc["time"])
        d_city, d_unit = layers.sequence_embed_backward(dx, bc["embed"])
        grads["emb.city"] += d_city
        grads["emb.unit"] += d_unit

    np.add.at(grads["emb.city"], cache["cand_ids"], dx_i)
    for j, (name, _) in enumerate(USER_FEATURE_FIELDS):
        grads[f"emb.u.{name}"] += layers.embed_lookup_backward(
            dx_u[:, j * d_e:(j + 1) * d_e], cache["u_caches"][j], t[f"emb.u.{name}"].shape)
    for j, (name, _) in enumerate(STATUS_FEATURE_FIELDS):
        grads[f"emb.o.{name}"] += layers.embed_lookup_backward(
            dx_o[:, j * d_e:(j + 1) * d_e], cache["o_caches"][j], t[f"emb.o.{name}"].shape)
    return grads


def predict(params: ModelParams, batch: Batch) -> np.ndarray:
    yhat, _, _ = forward_batch(params, batch)
    return yhat


def log_loss(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    """Per-sample logistic loss with the output clamped away from {0, 1}."""
    yc = np.clip(yhat, Y_CLAMP, 1.0 - Y_CLAMP)
    return -(y * np.log(yc) + (1.0 - y) * np.log(1.0 - yc))


def loss_and_grads(params: ModelParams, batch: Batch):
    """Mean batch loss and gradients for every parameter tensor."""
    yhat, cache, _ = forward_batch(params, batch)
    y = batch.label
    n = y.shape[0]
    loss = float(log_loss(y, yhat).mean())
    inside = (yhat > Y_CLAMP) & (yhat < 1.0 - Y_CLAMP)
    d_logit = np.where(inside, (yhat - y) / n, 0.0)
    grads = backward_batch(params, batch, cache, d_logit)
    return loss, grads


def _gru_params(tensors: dict[str, np.ndarray], stream: str) -> dict[str, np.ndarray]:
    prefix = f"enc.{stream}.gru."
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


# --- attention traces ---------------------------------------------------------

@dataclass
class AttentionTrace:
    """Attention weights of one record, one grain, with event metadata."""

    record_index: int
    grain: int
    stream: str
    positions: np.ndarray   # unmasked positions
    cities: np.ndarray
    action_units: np.ndarray  # shifted sequence ids
    tau_days: np.ndarray
    weights: np.ndarray


def trace_batch(params: ModelParams, batch: Batch, record_offset: int = 0) -> list[AttentionTrace]:
    """Per-record attention traces for every grain of an attention variant."""
    spec = params.spec
    if not spec.has_attention:
        raise DataError(f"variant {spec.kind!r} has no attention layer to trace")
    _, _, traces = forward_batch(params, batch, want_traces=True)
    out = []
    for si, s in enumerate(spec.streams):
        seq = batch.seqs[s]
        n_grains = 1 if spec.kind == "atrnn" else spec.n_grains
        for gi in range(n_grains):
            w = traces[(s, gi)]
            for b in range(len(batch)):
                live = seq.mask[b]
                out.append(AttentionTrace(
                    record_index=record_offset + b,
                    grain=si * n_grains + gi,
                    stream=s,
                    positions=np.flatnonzero(live),
                    cities=seq.city[b, live].copy(),
                    action_units=seq.unit[b, live].copy(),
                    tau_days=seq.tau[b, live].copy(),
                    weights=w[b, live].copy(),
                ))
    return out


# --- checkpoint io --------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary checkpoint: header JSON then named float64 tensors."""
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "variant": params.spec.to_dict(),
        "n_cities": params.n_cities,
        "max_len": params.max_len,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            arr = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    """Load and validate a checkpoint against its declared variant spec."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    version, = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    hlen, = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    spec = VariantSpec.from_dict(header["variant"])
    n_cities = int(header["n_cities"])
    count, = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode("utf-8")
        ndim, = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf.read(8 * size), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    expected = _expected_shapes(spec, n_cities)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise DataError(f"{path}: tensor names do not match the variant spec: {missing}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DataError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams(spec=spec, n_cities=n_cities, tensors=tensors,
                       max_len=int(header.get("max_len", 30)))
