"""Top-K sparse autoencoders over residual-stream activations.

Includes activation harvesting under masked / unmasked / all position
selection, training, dead-latent counts and the binary store/checkpoint
formats.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dlmlab import numerics as nx
from dlmlab.dlm import DlmParams, TrainingError, dlm_forward, sample_corruption, sample_windows
from dlmlab.numerics import Tensor

log = logging.getLogger(__name__)

SELECTORS = ("mask", "unmask", "all")


# ---------------------------------------------------------------- parameters


class SaeParams:
    """Encoder (width x d), decoder (d x width) and biases with a TopK budget."""

    def __init__(self, w_enc, b_enc, w_dec, b_dec, k_act: int, meta: dict | None = None):
        self.w_enc = Tensor(w_enc, requires_grad=True)
        self.b_enc = Tensor(b_enc, requires_grad=True)
        self.w_dec = Tensor(w_dec, requires_grad=True)
        self.b_dec = Tensor(b_dec, requires_grad=True)
        width, d = self.w_enc.shape
        if self.w_dec.shape != (d, width) or self.b_enc.shape != (width,) or self.b_dec.shape != (d,):
            raise nx.ShapeError(
                f"inconsistent SAE shapes: W_E {self.w_enc.shape}, b_E {self.b_enc.shape}, "
                f"W_D {self.w_dec.shape}, b_D {self.b_dec.shape}"
            )
        if not 1 <= k_act <= width:
            raise ValueError(f"k_act must lie in [1, {width}], got {k_act}")
        self.k_act = int(k_act)
        self.meta = dict(meta or {})

    @classmethod
    def init(cls, d: int, width: int, k_act: int, rng: np.random.Generator, meta=None) -> "SaeParams":
        if width < d:
            raise ValueError(f"width {width} must be at least d={d}")
        w_dec = rng.normal(size=(d, width))
        w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
        return cls(w_dec.T.copy(), np.zeros(width), w_dec, np.zeros(d), k_act, meta)

    @property
    def d(self) -> int:
        return self.w_enc.shape[1]

    @property
    def width(self) -> int:
        return self.w_enc.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_enc, self.b_enc, self.w_dec, self.b_dec]

    def atom(self, f: int) -> np.ndarray:
        return self.w_dec.data[:, f]

    def with_k(self, k_act: int) -> "SaeParams":
        return SaeParams(self.w_enc.data.copy(), self.b_enc.data.copy(), self.w_dec.data.copy(),
                         self.b_dec.data.copy(), k_act, self.meta)

    def copy(self) -> "SaeParams":
        return self.with_k(self.k_act)

    def normalize_decoder(self) -> None:
        self.w_dec.data /= np.linalg.norm(self.w_dec.data, axis=0, keepdims=True)

    def equal(self, other: "SaeParams") -> bool:
        return self.k_act == other.k_act and all(
            np.array_equal(a.data, b.data) for a, b in zip(self.parameters(), other.parameters())
        )


@dataclass
class SaeLatents:
    h: np.ndarray
    active: np.ndarray  # indices with h > 0, descending by value


def _check_dim(params: SaeParams, x: np.ndarray) -> None:
    if x.shape[-1] != params.d:
        raise nx.ShapeError(f"input of width {x.shape[-1]} does not match SAE d={params.d}")


def encode_t(params: SaeParams, x: Tensor) -> Tensor:
    pre = x @ nx.transpose(params.w_enc) + params.b_enc
    return nx.relu_topk(pre, params.k_act)


def decode_t(params: SaeParams, h: Tensor) -> Tensor:
    return h @ nx.transpose(params.w_dec) + params.b_dec


def encode(params: SaeParams, x) -> np.ndarray:
    """ReLU(W_E x + b_E), then keep the k_act largest values (ties -> lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(params, x)
    pre = x @ params.w_enc.data.T + params.b_enc.data
    act = np.maximum(pre, 0.0)
    keep = nx.topk_mask(act, params.k_act) & (act > 0)
    return np.where(keep, act, 0.0)


def decode(params: SaeParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.width:
        raise nx.ShapeError(f"latent of width {h.shape[-1]} does not match SAE width {params.width}")
    return h @ params.w_dec.data.T + params.b_dec.data


def reconstruct(params: SaeParams, x) -> np.ndarray:
    return decode(params, encode(params, x))


def latents(params: SaeParams, x) -> SaeLatents:
    h = encode(params, x)
    nz = np.flatnonzero(h)
    return SaeLatents(h, nz[np.lexsort((nz, -h[nz]))])


# ---------------------------------------------------------------- activation store


@dataclass
class ActivationStore:
    """Residual vectors (float32) with the corruption rate, position and sample id of each."""

    backbone: str
    layer: int
    d: int
    selector: str
    protocol: str
    vectors: np.ndarray
    rates: np.ndarray
    positions: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.d)
        n = len(self.vectors)
        self.rates = np.asarray(self.rates, dtype=np.float32).reshape(n)
        self.positions = np.asarray(self.positions, dtype=np.uint32).reshape(n)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint32).reshape(n)
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")

    @property
    def count(self) -> int:
        return len(self.vectors)

    def __len__(self) -> int:
        return self.count

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)


STORE_MAGIC = b"ACTS"
STORE_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(raw: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", raw, off)
    return raw[off + 2 : off + 2 + n].decode("utf-8"), off + 2 + n


_REC_DTYPE_CACHE: dict[int, np.dtype] = {}


def _record_dtype(d: int) -> np.dtype:
    if d not in _REC_DTYPE_CACHE:
        _REC_DTYPE_CACHE[d] = np.dtype(
            [("vec", "<f4", (d,)), ("t", "<f4"), ("pos", "<u4"), ("sample", "<u4")]
        )
    return _REC_DTYPE_CACHE[d]


def save_store(store: ActivationStore, path: str | Path) -> None:
    """Header: magic, version, backbone, layer, d, selector, protocol hash, count; then records."""
    buf = io.BytesIO()
    buf.write(STORE_MAGIC + struct.pack("<H", STORE_VERSION))
    buf.write(_pack_str(store.backbone))
    buf.write(struct.pack("<II", store.layer, store.d))
    buf.write(_pack_str(store.selector))
    buf.write(_pack_str(store.protocol))
    buf.write(struct.pack("<Q", store.count))
    rec = np.empty(store.count, dtype=_record_dtype(store.d))
    rec["vec"] = store.vectors
    rec["t"] = store.rates
    rec["pos"] = store.positions
    rec["sample"] = store.sample_ids
    buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_store(path: str | Path) -> ActivationStore:
    raw = Path(path).read_bytes()
    if raw[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: not an activation store (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    backbone, off = _unpack_str(raw, 6)
    layer, d = struct.unpack_from("<II", raw, off)
    selector, off = _unpack_str(raw, off + 8)
    protocol, off = _unpack_str(raw, off)
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    dt = _record_dtype(d)
    if len(raw) - off != count * dt.itemsize:
        raise ValueError(f"{path}: record section does not match count {count}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    return ActivationStore(backbone, layer, d, selector, protocol, rec["vec"].copy(), rec["t"],
                           rec["pos"], rec["sample"])


# ---------------------------------------------------------------- harvesting


def protocol_hash(desc: dict) -> str:
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def select_positions(mask: np.ndarray, selector: str) -> np.ndarray:
    if selector == "mask":
        return np.flatnonzero(mask)
    if selector == "unmask":
        return np.flatnonzero(~mask)
    if selector == "all":
        return np.arange(mask.size)
    raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def harvest_layers(
    dlm: DlmParams,
    corpus_ids,
    layers: Sequence[int],
    selectors: Sequence[str],
    budget: int,
    rng: np.random.Generator,
    batch_size: int = 8,
    seq_len: int | None = None,
) -> dict[tuple[int, str], ActivationStore]:
    """Harvest residuals for several (layer, selector) pairs from one corruption stream.

    Each row of the stream is a corpus window x0 with t ~ U(0,1) and an
    i.i.d. mask. Stores are filled until each holds ``budget`` vectors; the
    first store to fill does not stop the others.
    """
    if budget <= 0:
        raise ValueError("token budget must be positive")
    for layer in layers:
        if not 0 <= layer < dlm.config.n_layers:
            raise ValueError(f"layer {layer} outside 0..{dlm.config.n_layers - 1}")
    seq_len = seq_len or dlm.config.context
    keys = [(layer, sel) for layer in layers for sel in selectors]
    chunks: dict = {k: {"vec": [], "t": [], "pos": [], "sample": [], "n": 0} for k in keys}
    sample_id = 0
    desc = {"rate": "uniform(0,1)", "mask": "iid-bernoulli", "empty": "resample-once-then-force-one",
            "seq_len": seq_len}
    while any(chunks[k]["n"] < budget for k in keys):
        batch = sample_windows(corpus_ids, batch_size, seq_len, rng)
        draw = sample_corruption(batch, rng, dlm.config.mask_id)
        with nx.no_grad():
            res = dlm_forward(dlm, draw.ids).residuals
        for b in range(batch_size):
            for layer, sel in keys:
                c = chunks[(layer, sel)]
                if c["n"] >= budget:
                    continue
                pos = select_positions(draw.mask[b], sel)
                if pos.size == 0:
                    log.info("sample %d has no %s positions; skipped", sample_id, sel)
                    continue
                pos = pos[: budget - c["n"]]
                c["vec"].append(res[layer][b, pos])
                c["t"].append(np.full(pos.size, draw.t[b]))
                c["pos"].append(pos)
                c["sample"].append(np.full(pos.size, sample_id))
                c["n"] += pos.size
            sample_id += 1
    out = {}
    for (layer, sel), c in chunks.items():
        out[(layer, sel)] = ActivationStore(
            dlm.config.name, layer, dlm.config.d_model, sel, protocol_hash(desc),
            np.concatenate(c["vec"]), np.concatenate(c["t"]), np.concatenate(c["pos"]),
            np.concatenate(c["sample"]),
        )
    return out


def harvest(dlm: DlmParams, corpus_ids, layer: int, selector: str, budget: int,
            rng: np.random.Generator, **kw) -> ActivationStore:
    return harvest_layers(dlm, corpus_ids, [layer], [selector], budget, rng, **kw)[(layer, selector)]


# ---------------------------------------------------------------- training


@dataclass
class SaeTrainConfig:
    width: int
    k_act: int
    lam: float = 0.0
    epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-2
    max_steps: int | None = None


@dataclass
class SaeTrainResult:
    params: SaeParams
    losses: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)


def sae_loss(params: SaeParams, x: Tensor, lam: float) -> tuple[Tensor, Tensor]:
    """Returns (mean of ||x - x_hat||^2 + lam * ||h||_1, mean squared error term)."""
    h = encode_t(params, x)
    err = x - decode_t(params, h)
    mse = nx.mean(nx.tsum(nx.square(err), axis=-1))
    if lam == 0.0:
        return mse, mse
    l1 = nx.mean(nx.tsum(nx.tabs(h), axis=-1))
    return mse + l1 * lam, mse


def train_sae(vectors, cfg: SaeTrainConfig, rng: np.random.Generator, meta=None,
              init: SaeParams | None = None) -> SaeTrainResult:
    """Minimise the per-record reconstruction (+ lam * L1) objective with Adam.

    Decoder columns are renormalised to unit length after every step.
    """
    x_all = np.asarray(vectors, dtype=np.float64)
    if x_all.ndim != 2 or len(x_all) == 0:
        raise ValueError("need a non-empty (n, d) array of activations")
    params = init.copy() if init is not None else SaeParams.init(x_all.shape[1], cfg.width, cfg.k_act, rng, meta)
    result = SaeTrainResult(params)
    opt = nx.Adam(params.parameters(), lr=cfg.lr, clip_norm=None)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x_all))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return result
            xb = Tensor(x_all[order[start : start + cfg.batch_size]])
            opt.zero_grad()
            loss, mse = sae_loss(params, xb, cfg.lam)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite SAE loss at step {step}")
            loss.backward()
            opt.step()
            params.normalize_decoder()
            result.losses.append(loss.item())
            result.mse.append(mse.item())
            step += 1
    return result


def activation_counts(params: SaeParams, vectors, batch: int = 4096) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    counts = np.zeros(params.width, dtype=np.int64)
    for s in range(0, len(x), batch):
        counts += (encode(params, x[s : s + batch]) > 0).sum(axis=0)
    return counts


def dead_latent_count(params: SaeParams, vectors, threshold: int) -> int:
    """Number of latents active fewer than ``threshold`` times over ``vectors``."""
    if len(vectors) == 0:
        raise ValueError("empty store")
    return int((activation_counts(params, vectors) < threshold).sum())


# ---------------------------------------------------------------- checkpoints

SAE_MAGIC = b"SAEC"
SAE_VERSION = 1


def save_sae(params: SaeParams, path: str | Path) -> None:
    """Magic, version, d, width, k_act, metadata JSON, then float32 LE W_E, b_E, W_D, b_D."""
    buf = io.BytesIO()
    buf.write(SAE_MAGIC + struct.pack("<H", SAE_VERSION))
    buf.write(struct.pack("<III", params.d, params.width, params.k_act))
    meta = json.dumps(params.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    for t in params.parameters():
        buf.write(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_sae(path: str | Path) -> SaeParams:
    raw = Path(path).read_bytes()
    if raw[:4] != SAE_MAGIC:
        raise ValueError(f"{path}: not an SAE checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != SAE_VERSION:
        raise ValueError(f"{path}: unsupported SAE checkpoint version {version}")
    d, width, k_act = struct.unpack_from("<III", raw, 6)
    (mlen,) = struct.unpack_from("<I", raw, 18)
    meta = json.loads(raw[22 : 22 + mlen].decode("utf-8"))
    off = 22 + mlen
    arrays = []
    for shape in ((width, d), (width,), (d, width), (d,)):
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape))
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after weights")
    return SaeParams(*arrays, k_act=k_act, meta=meta)
