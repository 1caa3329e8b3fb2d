"""Feature dynamics across decoding orders.

A ``DecodingTrace`` keeps, for snapshots k = 0..K of one generation, the set
of still-masked positions and, per tracked layer and generated position, the
Top-K_feat latent indices (descending magnitude) and the Top-1 index. From
it we compute pre-mask stability, post-decode drift, the Top-1 lock rate and
the Top-1 flip count.
"""

from __future__ import annotations

import contextlib
import csv
import io
import struct
import warnings
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from dlmlab.sae import SaeParams, encode

NO_FEATURE = -1
TAU_BINS = 20


def jaccard_exact(a, b) -> Fraction:
    """|A & B| / |A | B| as an exact rational, with jaccard(empty, empty) = 1."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return Fraction(1)
    return Fraction(len(a & b), len(union))


def jaccard(a, b) -> float:
    return float(jaccard_exact(a, b))


def feature_set(h: np.ndarray, k_feat: int) -> tuple[int, ...]:
    """Indices of the k_feat largest-magnitude nonzero latents, descending; ties -> lowest index."""
    mag = np.abs(np.asarray(h))
    nz = np.flatnonzero(mag)
    ordered = nz[np.lexsort((nz, -mag[nz]))]
    return tuple(int(i) for i in ordered[:k_feat])


def top1(h: np.ndarray) -> int:
    mag = np.abs(np.asarray(h))
    if not mag.any():
        return NO_FEATURE
    return int(np.argmax(mag))


@dataclass
class TraceConfig:
    saes: Mapping[int, SaeParams]
    k_feat: int = 10


@dataclass
class DecodingTrace:
    strategy: str
    K: int
    N: int
    layers: list[int]
    k_feat: int
    masked: list[frozenset[int]] = field(default_factory=list)
    # sets[k][layer_index][i] -> tuple of latent indices (descending magnitude)
    sets: list[list[list[tuple[int, ...]]]] = field(default_factory=list)
    top1: list[list[list[int]]] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.masked) != self.K + 1 or len(self.sets) != self.K + 1 or len(self.top1) != self.K + 1:
            raise ValueError(f"trace must hold K+1={self.K + 1} snapshots")
        for k in range(1, self.K + 1):
            if not self.masked[k] <= self.masked[k - 1]:
                raise ValueError(f"masked set grows between steps {k - 1} and {k}")
        for k in range(self.K + 1):
            for li in range(len(self.layers)):
                for i in range(self.N):
                    s = self.sets[k][li][i]
                    if len(s) > self.k_feat:
                        raise ValueError(f"feature set larger than k_feat at step {k}, position {i}")
                    t1 = self.top1[k][li][i]
                    if s and t1 not in s:
                        raise ValueError(f"Top-1 index not in feature set at step {k}, position {i}")

    def feature_set(self, k: int, li: int, i: int, k_feat: int | None = None) -> tuple[int, ...]:
        s = self.sets[k][li][i]
        if k_feat is None:
            return s
        if k_feat > self.k_feat:
            raise ValueError(f"trace only stores the top {self.k_feat} features")
        return s[:k_feat]

    def decode_step(self, i: int) -> int | None:
        for k in range(self.K + 1):
            if i not in self.masked[k]:
                return k
        return None


class TraceRecorder:
    """Observer for ``generate``: encodes each snapshot's residuals with per-layer SAEs."""

    def __init__(self, config: TraceConfig, strategy: str, K: int, gen_start: int, n_gen: int):
        self.config = config
        self.gen_start = gen_start
        self.layers = sorted(config.saes)
        self.trace = DecodingTrace(strategy, K, n_gen, self.layers, config.k_feat)

    def __call__(self, step, state, result) -> None:
        g = self.gen_start
        self.trace.masked.append(frozenset(int(p) - g for p in state.masked_positions))
        sets, tops = [], []
        for layer in self.layers:
            h = encode(self.config.saes[layer], result.residuals[layer][g:])
            sets.append([feature_set(row, self.config.k_feat) for row in h])
            tops.append([top1(row) for row in h])
        self.trace.sets.append(sets)
        self.trace.top1.append(tops)


# ---------------------------------------------------------------- metrics


def _need_steps(trace: DecodingTrace) -> None:
    if trace.K < 1:
        raise ValueError("trace needs at least two snapshots")


def premask_stability(trace: DecodingTrace, k_feat: int | None = None) -> np.ndarray:
    """S_pre[layer, k, i] for positions still masked at step k >= 1; NaN elsewhere."""
    _need_steps(trace)
    L = len(trace.layers)
    out = np.full((L, trace.K + 1, trace.N), np.nan)
    for k in range(1, trace.K + 1):
        for i in trace.masked[k]:
            if i not in trace.masked[k - 1]:
                raise ValueError(f"position {i} masked at step {k} but not at step {k - 1}")
            for li in range(L):
                out[li, k, i] = jaccard(trace.feature_set(k, li, i, k_feat), trace.feature_set(k - 1, li, i, k_feat))
    return out


@dataclass
class DriftResult:
    drift: np.ndarray  # (L, N); NaN for positions with an empty post-decode window
    similarity: np.ndarray  # (L, K+1, N); defined for k > decode step


def postdecode_drift(trace: DecodingTrace, k_feat: int | None = None) -> DriftResult:
    """D_post[layer, i] = mean over k in (k_i, K] of 1 - J(set_k, set_{k-1})."""
    _need_steps(trace)
    L = len(trace.layers)
    sim = np.full((L, trace.K + 1, trace.N), np.nan)
    drift = np.full((L, trace.N), np.nan)
    decoded_any = False
    for i in range(trace.N):
        ki = trace.decode_step(i)
        if ki is None:
            continue
        decoded_any = True
        if ki >= trace.K:
            continue
        for li in range(L):
            exact = [jaccard_exact(trace.feature_set(k, li, i, k_feat), trace.feature_set(k - 1, li, i, k_feat))
                     for k in range(ki + 1, trace.K + 1)]
            sim[li, ki + 1 :, i] = [float(j) for j in exact]
            # exact rational mean, rounded once: independent of summation order
            drift[li, i] = float(sum(1 - j for j in exact) / len(exact))
    if not decoded_any:
        raise ValueError("no decoded positions in trace")
    return DriftResult(drift, sim)


def top1_lock_rate(trace: DecodingTrace) -> np.ndarray:
    """R_pre[layer, k]: share of masked positions keeping their Top-1 index; NaN when undefined."""
    _need_steps(trace)
    L = len(trace.layers)
    out = np.full((L, trace.K + 1), np.nan)
    for k in range(1, trace.K + 1):
        masked = sorted(trace.masked[k])
        if not masked:
            continue
        for li in range(L):
            same = sum(trace.top1[k][li][i] == trace.top1[k - 1][li][i] for i in masked)
            out[li, k] = same / len(masked)
    return out


def top1_flip_count(trace: DecodingTrace) -> np.ndarray:
    """F_post[layer, k]: decoded positions at step k whose Top-1 index changed from step k-1."""
    _need_steps(trace)
    L = len(trace.layers)
    out = np.zeros((L, trace.K + 1), dtype=np.int64)
    for k in range(1, trace.K + 1):
        decoded = [i for i in range(trace.N) if i not in trace.masked[k]]
        for li in range(L):
            out[li, k] = sum(trace.top1[k][li][i] != trace.top1[k - 1][li][i] for i in decoded)
    return out


# ---------------------------------------------------------------- summaries


@dataclass
class OrderMetricsSummary:
    strategy: str
    layers: list[int]
    K: int | None
    # layer x step grids over k = 1..K (None when traces disagree on K)
    premask: np.ndarray | None
    postdecode_similarity: np.ndarray | None
    lock_rate: np.ndarray | None
    flip_count: np.ndarray | None
    drift_by_layer: np.ndarray
    # layer x TAU_BINS curves over normalized progress tau = k / K
    tau_premask: np.ndarray
    tau_postdecode_drift: np.ndarray
    tau_lock_rate: np.ndarray
    tau_flip_count: np.ndarray


def _tau_bin(k: int, K: int) -> int:
    return min(int(k / K * TAU_BINS), TAU_BINS - 1)


def _per_step(trace: DecodingTrace, k_feat: int | None):
    pre = premask_stability(trace, k_feat)
    dr = postdecode_drift(trace, k_feat)
    with _quiet():
        pre_step = np.nanmean(pre, axis=2)[:, 1:]
        post_step = np.nanmean(dr.similarity, axis=2)[:, 1:]
    return pre_step, post_step, top1_lock_rate(trace)[:, 1:], top1_flip_count(trace)[:, 1:].astype(float), dr.drift


@contextlib.contextmanager
def _quiet():
    # nanmean over all-NaN slices warns; those cells are meant to stay NaN
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def _nanmean_stack(arrs: Sequence[np.ndarray]) -> np.ndarray:
    with _quiet():
        return np.nanmean(np.stack(arrs), axis=0)


def summarize(traces: Sequence[DecodingTrace], k_feat: int | None = None) -> OrderMetricsSummary:
    """Average the four metrics over traces as layer x step grids and tau-binned curves.

    Grids average each metric over positions first, then over traces (cells
    without a defined value are skipped). Curves bin every trace's steps by
    tau = k / K, so traces with different K can be combined.
    """
    if not traces:
        raise ValueError("no traces to summarise")
    layers = traces[0].layers
    if any(t.layers != layers for t in traces):
        raise ValueError("all traces must track the same layers")
    L = len(layers)
    per = [_per_step(t, k_feat) for t in traces]
    same_k = len({t.K for t in traces}) == 1
    grids = [_nanmean_stack([p[j] for p in per]) if same_k else None for j in range(4)]

    tau_sum = np.zeros((4, L, TAU_BINS))
    tau_cnt = np.zeros((4, L, TAU_BINS))
    for t, p in zip(traces, per):
        pre_step, post_step, lock, flips, _ = p
        drift_step = 1.0 - post_step
        for j, arr in enumerate((pre_step, drift_step, lock, flips)):
            for k in range(1, t.K + 1):
                b = _tau_bin(k, t.K)
                v = arr[:, k - 1]
                ok = ~np.isnan(v)
                tau_sum[j, ok, b] += v[ok]
                tau_cnt[j, ok, b] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(tau_cnt > 0, tau_sum / np.maximum(tau_cnt, 1), np.nan)
    drift_by_layer = _nanmean_stack([np.asarray([_safe_nanmean(p[4][li]) for li in range(L)]) for p in per])
    return OrderMetricsSummary(
        strategy=traces[0].strategy,
        layers=list(layers),
        K=traces[0].K if same_k else None,
        premask=grids[0],
        postdecode_similarity=grids[1],
        lock_rate=grids[2],
        flip_count=grids[3],
        drift_by_layer=drift_by_layer,
        tau_premask=tau[0],
        tau_postdecode_drift=tau[1],
        tau_lock_rate=tau[2],
        tau_flip_count=tau[3],
    )


def _safe_nanmean(v: np.ndarray) -> float:
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


GRID_METRICS = {
    "premask_stability": "premask",
    "postdecode_similarity": "postdecode_similarity",
    "top1_lock_rate": "lock_rate",
    "top1_flip_count": "flip_count",
}
TAU_METRICS = {
    "premask_stability": "tau_premask",
    "postdecode_drift": "tau_postdecode_drift",
    "top1_lock_rate": "tau_lock_rate",
    "top1_flip_count": "tau_flip_count",
}


def write_summary_csvs(summaries: Sequence[OrderMetricsSummary], out_dir: str | Path) -> list[Path]:
    """One heatmap CSV per grid metric and one tau-curve CSV per metric.

    Columns: layer, step, tau, value, strategy (tau curves use the bin centre
    and the bin index as ``step``).
    """
    out_dir = Path(out_dir)
    paths = []
    for metric, attr in GRID_METRICS.items():
        p = out_dir / f"heatmap_{metric}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "step", "tau", "value", "strategy"])
            for s in summaries:
                grid = getattr(s, attr)
                if grid is None:
                    continue
                for li, layer in enumerate(s.layers):
                    for k in range(1, s.K + 1):
                        w.writerow([layer, k, repr(k / s.K), repr(float(grid[li, k - 1])), s.strategy])
        paths.append(p)
    for metric, attr in TAU_METRICS.items():
        p = out_dir / f"tau_{metric}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "step", "tau", "value", "strategy"])
            for s in summaries:
                curve = getattr(s, attr)
                for li, layer in enumerate(s.layers):
                    for b in range(TAU_BINS):
                        w.writerow([layer, b, repr((b + 0.5) / TAU_BINS), repr(float(curve[li, b])), s.strategy])
        paths.append(p)
    p = out_dir / "drift_by_layer.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "value", "strategy"])
        for s in summaries:
            for li, layer in enumerate(s.layers):
                w.writerow([layer, repr(float(s.drift_by_layer[li])), s.strategy])
    paths.append(p)
    return paths


# ---------------------------------------------------------------- trace files

TRACE_MAGIC = b"DTRC"
TRACE_VERSION = 1


def _put_varint(buf: io.BytesIO, n: int) -> None:
    if n < 0:
        raise ValueError("varints are unsigned")
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            buf.write(bytes([b | 0x80]))
        else:
            buf.write(bytes([b]))
            return


def _get_varint(raw: bytes, off: int) -> tuple[int, int]:
    shift = 0
    n = 0
    while True:
        b = raw[off]
        off += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, off
        shift += 7


def save_trace(trace: DecodingTrace, path: str | Path) -> None:
    """Magic, version, header (strategy, K, N, layers, k_feat), then per snapshot:
    masked positions and, per layer and position, the feature set and Top-1 id + 1
    (0 meaning no active feature), all varint-coded."""
    buf = io.BytesIO()
    buf.write(TRACE_MAGIC + struct.pack("<H", TRACE_VERSION))
    s = trace.strategy.encode("utf-8")
    _put_varint(buf, len(s))
    buf.write(s)
    for n in (trace.K, trace.N, len(trace.layers), *trace.layers, trace.k_feat):
        _put_varint(buf, n)
    for k in range(trace.K + 1):
        masked = sorted(trace.masked[k])
        _put_varint(buf, len(masked))
        for i in masked:
            _put_varint(buf, i)
        for li in range(len(trace.layers)):
            for i in range(trace.N):
                fs = trace.sets[k][li][i]
                _put_varint(buf, len(fs))
                for f in fs:
                    _put_varint(buf, f)
                _put_varint(buf, trace.top1[k][li][i] + 1)
    Path(path).write_bytes(buf.getvalue())


def load_trace(path: str | Path) -> DecodingTrace:
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: not a decoding trace (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {version}")
    off = 6
    n, off = _get_varint(raw, off)
    strategy = raw[off : off + n].decode("utf-8")
    off += n
    K, off = _get_varint(raw, off)
    N, off = _get_varint(raw, off)
    nl, off = _get_varint(raw, off)
    layers = []
    for _ in range(nl):
        v, off = _get_varint(raw, off)
        layers.append(v)
    k_feat, off = _get_varint(raw, off)
    trace = DecodingTrace(strategy, K, N, layers, k_feat)
    for _ in range(K + 1):
        cnt, off = _get_varint(raw, off)
        masked = []
        for _ in range(cnt):
            v, off = _get_varint(raw, off)
            masked.append(v)
        trace.masked.append(frozenset(masked))
        sets, tops = [], []
        for _ in range(nl):
            row_sets, row_tops = [], []
            for _ in range(N):
                m, off = _get_varint(raw, off)
                fs = []
                for _ in range(m):
                    v, off = _get_varint(raw, off)
                    fs.append(v)
                t1, off = _get_varint(raw, off)
                row_sets.append(tuple(fs))
                row_tops.append(t1 - 1)
            sets.append(row_sets)
            tops.append(row_tops)
        trace.sets.append(sets)
        trace.top1.append(tops)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after trace")
    trace.validate()
    return trace
