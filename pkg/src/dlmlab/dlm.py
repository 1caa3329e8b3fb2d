"""Toy masked-diffusion language model.

A pre-norm transformer with bidirectional attention, trained with the
1/t-weighted masked-token cross-entropy, and decoded by iterative unmasking
under one of three commit orders (random, top-2 margin, entropy).
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from dlmlab import numerics as nx
from dlmlab.numerics import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("origin", "topk_margin", "entropy")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocab:
    """Regular tokens followed by the reserved MASK and PAD ids.

    ``byte_level`` vocabularies map UTF-8 bytes to ids 0..255.
    """

    tokens: tuple[str, ...]
    byte_level: bool = False
    mask_token: str = "[MASK]"
    pad_token: str = "[PAD]"

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if self.size < 4:
            raise ValueError(f"vocabulary needs at least 4 ids, got {self.size}")

    @classmethod
    def bytes(cls) -> "Vocab":
        return cls(tuple(f"<{b:02x}>" for b in range(256)), byte_level=True)

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Vocab":
        return cls(tuple(dict.fromkeys(chars)))

    @property
    def size(self) -> int:
        return len(self.tokens) + 2

    @property
    def mask_id(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens) + 1

    def encode(self, text: str) -> np.ndarray:
        if self.byte_level:
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        index = {t: i for i, t in enumerate(self.tokens)}
        return np.array([index[c] for c in text], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        ids = [int(i) for i in ids if int(i) < len(self.tokens)]
        if self.byte_level:
            return bytes(ids).decode("utf-8", errors="replace")
        return "".join(self.tokens[i] for i in ids)


# ---------------------------------------------------------------- states


@dataclass
class MaskedState:
    """Token ids with masked positions carrying the MASK id."""

    ids: np.ndarray
    mask: np.ndarray
    t: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask must have the same shape")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"mask rate must lie in [0, 1], got {self.t}")

    def check(self, mask_id: int) -> None:
        if not np.array_equal(self.mask, self.ids == mask_id):
            raise ValueError("mask indicator disagrees with MASK ids")

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def unmasked_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    def copy(self) -> "MaskedState":
        return MaskedState(self.ids.copy(), self.mask.copy(), self.t)


def corrupt(x0, t: float, rng: np.random.Generator, mask_id: int) -> MaskedState:
    """Replace each position by MASK independently with probability ``t``."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"mask rate must lie in (0, 1], got {t}")
    x0 = np.asarray(x0, dtype=np.int64)
    mask = rng.random(x0.shape) < t
    return MaskedState(np.where(mask, mask_id, x0), mask, t)


@dataclass(frozen=True)
class NoiseSchedule:
    """Mask rates ``rates[k] = t_k`` for k = 0..K with t_0 = 0."""

    rates: tuple[float, ...]
    strict: bool = True

    def __post_init__(self):
        r = self.rates
        if len(r) < 2 or r[0] != 0.0 or r[-1] > 1.0:
            raise ValueError(f"schedule must start at 0 and end at most 1, got {r}")
        diffs = np.diff(r)
        if self.strict and np.any(diffs <= 0):
            raise ValueError("schedule rates must be strictly increasing in k")
        if np.any(diffs < 0):
            raise ValueError("schedule rates must be non-decreasing in k")

    @classmethod
    def linear(cls, steps: int) -> "NoiseSchedule":
        if steps < 1:
            raise ValueError("need at least one denoising step")
        return cls(tuple(k / steps for k in range(steps + 1)))

    @property
    def steps(self) -> int:
        return len(self.rates) - 1

    def target_masked(self, k: int, n_gen: int) -> int:
        return round_half_up(self.rates[k] * n_gen)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class DlmConfig:
    vocab_size: int
    mask_id: int
    pad_id: int
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    context: int = 64
    d_mlp: int = 0
    rope: int = 1  # rotary position phases on queries and keys (1) or none (0)
    name: str = "toy-dlm"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.mask_id == self.pad_id:
            raise ValueError("MASK and PAD ids must differ")
        if self.rope and (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary positions need an even head width")
        if self.d_mlp == 0:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

    @classmethod
    def for_vocab(cls, vocab: Vocab, **kw) -> "DlmConfig":
        return cls(vocab_size=vocab.size, mask_id=vocab.mask_id, pad_id=vocab.pad_id, **kw)




class DlmParams:
    """Named float64 parameter tensors for a ``DlmConfig``."""

    def __init__(self, config: DlmConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: DlmConfig, rng: np.random.Generator, std: float = 0.02) -> "DlmParams":
        d, m, V = config.d_model, config.d_mlp, config.vocab_size
        out_std = std / math.sqrt(2 * config.n_layers)
        t: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, std, (V, d)),
            "pos_emb": rng.normal(0, std, (config.context, d)),
        }
        for layer in range(config.n_layers):
            p = f"blocks.{layer}."
            t[p + "ln1_g"] = np.ones(d)
            t[p + "ln1_b"] = np.zeros(d)
            t[p + "wq"] = rng.normal(0, std, (d, d))
            t[p + "wk"] = rng.normal(0, std, (d, d))
            t[p + "wv"] = rng.normal(0, std, (d, d))
            t[p + "wo"] = rng.normal(0, out_std, (d, d))
            t[p + "ln2_g"] = np.ones(d)
            t[p + "ln2_b"] = np.zeros(d)
            t[p + "w1"] = rng.normal(0, std, (d, m))
            t[p + "b1"] = np.zeros(m)
            t[p + "w2"] = rng.normal(0, out_std, (m, d))
            t[p + "b2"] = np.zeros(d)
        t["lnf_g"] = np.ones(d)
        t["lnf_b"] = np.zeros(d)
        t["w_u"] = rng.normal(0, std, (d, V))
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in t.items()})

    @classmethod
    def zeros(cls, config: DlmConfig) -> "DlmParams":
        p = cls.init(config, np.random.default_rng(0))
        for v in p.tensors.values():
            v.data[...] = 0.0
        return p

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def copy(self) -> "DlmParams":
        return DlmParams(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )

    def equal(self, other: "DlmParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in self.tensors
        )

    def n_params(self) -> int:
        return sum(v.data.size for v in self.tensors.values())


# ---------------------------------------------------------------- forward


def rotary_tables(n: int, dh: int, base: float = 10_000.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos/sin tables (n, dh) and the pair-rotation matrix R with (q @ R)[2i] = -q[2i+1], [2i+1] = q[2i]."""
    freq = base ** (-np.arange(0, dh, 2) / dh)
    ang = np.repeat(np.arange(n)[:, None] * freq[None, :], 2, axis=1)
    rot = np.zeros((dh, dh))
    for i in range(0, dh, 2):
        rot[i + 1, i] = -1.0
        rot[i, i + 1] = 1.0
    return np.cos(ang), np.sin(ang), rot


@dataclass
class ForwardResult:
    logits: Tensor
    residuals: list[np.ndarray]


def dlm_forward(
    params: DlmParams,
    ids,
    hooks: Mapping[int, Callable[[np.ndarray], np.ndarray]] | None = None,
    resume: tuple[int, np.ndarray] | None = None,
) -> ForwardResult:
    """Run the model on ``ids`` of shape (N,) or (B, N).

    ``residuals[l]`` is the residual stream after block ``l`` (after any hook
    at that layer), i.e. the input to block ``l + 1``. Attention is
    bidirectional: there is no attention mask at all.

    ``resume=(l, X)`` skips the embedding and blocks ``0..l`` and continues
    from residual ``X`` as if it were the output of block ``l``; the skipped
    entries of ``residuals`` are None.
    """
    if isinstance(ids, MaskedState):
        ids = ids.ids
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    cfg = params.config
    B, N = ids.shape
    if N > cfg.context:
        raise ValueError(f"sequence length {N} exceeds context length {cfg.context}")
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    scale = 1.0 / math.sqrt(dh)
    P = params.tensors

    first = 0
    residuals: list[np.ndarray | None] = []
    if resume is None:
        x = nx.take_rows(P["tok_emb"], ids) + nx.take_rows(P["pos_emb"], np.arange(N))
    else:
        first = resume[0] + 1
        x = Tensor(np.asarray(resume[1], dtype=np.float64).reshape(B, N, d))
        residuals = [None] * resume[0] + [x.data[0] if squeeze else x.data]
    if cfg.rope:
        cos, sin, rot = rotary_tables(N, dh)

        def rotate(z):
            return z * cos + (z @ rot) * sin
    for layer in range(first, cfg.n_layers):
        p = f"blocks.{layer}."
        h = nx.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"])

        def heads(w):
            return nx.transpose(nx.reshape(h @ P[p + w], (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        if cfg.rope:
            q, k = rotate(q), rotate(k)
        att = nx.softmax(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * scale)
        o = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (B, N, d))
        x = x + o @ P[p + "wo"]
        h2 = nx.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"])
        x = x + nx.gelu(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
        if hooks and layer in hooks:
            # hooks see (N, d) for a single sequence and (B, N, d) for a batch
            y = np.asarray(hooks[layer](x.data[0] if squeeze else x.data), dtype=np.float64)
            x = Tensor(y.reshape(x.shape))
        residuals.append(x.data[0] if squeeze else x.data)
    logits = nx.layer_norm(x, P["lnf_g"], P["lnf_b"]) @ P["w_u"]
    if squeeze:
        logits = nx.reshape(logits, (N, cfg.vocab_size))
    return ForwardResult(logits, residuals)


# ---------------------------------------------------------------- objective


@dataclass
class CorruptionDraw:
    """One batch of corruption draws: masked ids, mask indicators and rates."""

    x0: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    t: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.mask / self.t[:, None]


def sample_corruption(batch, rng: np.random.Generator, mask_id: int, maskable=None) -> CorruptionDraw:
    """Draw t ~ U(0,1) and a masked state per row of ``batch``.

    A row that ends up with no masked position gets one fresh t; if that is
    also empty, one uniformly chosen position is masked (t is kept).
    ``maskable`` (same shape as ``batch``) restricts which positions may be
    masked at all.
    """
    x0 = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    if x0.size == 0:
        raise ValueError("empty batch")
    B, N = x0.shape
    allowed = np.ones(x0.shape, dtype=bool) if maskable is None else np.atleast_2d(maskable)
    if allowed.shape != x0.shape or not allowed.any(axis=1).all():
        raise ValueError("every row needs at least one maskable position")
    ids = np.empty_like(x0)
    mask = np.empty(x0.shape, dtype=bool)
    ts = np.empty(B)
    for b in range(B):
        for attempt in range(2):
            t = _draw_rate(rng)
            m = (rng.random(N) < t) & allowed[b]
            if m.any():
                break
        else:
            m[rng.choice(np.flatnonzero(allowed[b]))] = True
        ids[b] = np.where(m, mask_id, x0[b])
        mask[b] = m
        ts[b] = t
    return CorruptionDraw(x0, ids, mask, ts)


def _draw_rate(rng: np.random.Generator) -> float:
    t = 0.0
    while t == 0.0:
        t = float(rng.random())
    return t


def masked_ce_loss(params: DlmParams, draw: CorruptionDraw, hooks=None) -> Tensor:
    """Batch mean of w(t) * sum over masked positions of -log p(x0 | x_t), w(t) = 1/t."""
    return masked_ce_from_logits(dlm_forward(params, draw.ids, hooks=hooks).logits, draw)


def masked_ce_from_logits(logits: Tensor, draw: CorruptionDraw) -> Tensor:
    return nx.weighted_cross_entropy(logits, draw.x0, draw.weights) * (1.0 / len(draw.t))


def dlm_loss(params: DlmParams, batch, rng: np.random.Generator) -> Tensor:
    return masked_ce_loss(params, sample_corruption(batch, rng, params.config.mask_id))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 1.0
    seq_len: int = 0  # 0 -> model context
    log_every: int = 100


def sample_windows(corpus_ids: np.ndarray, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    corpus_ids = np.asarray(corpus_ids, dtype=np.int64)
    if corpus_ids.size < length:
        raise ValueError(f"corpus has {corpus_ids.size} tokens, need at least {length}")
    starts = rng.integers(0, corpus_ids.size - length + 1, size=n)
    return np.stack([corpus_ids[s : s + length] for s in starts])


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


def _fit(params: DlmParams, corpus_ids: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
         progress: Callable[[int, float], None] | None = None) -> list[float]:
    seq_len = cfg.seq_len or params.config.context
    opt = nx.Adam(params.parameters(), lr=cfg.lr, betas=cfg.betas, clip_norm=cfg.clip_norm)
    losses: list[float] = []
    for step in range(cfg.steps):
        batch = sample_windows(corpus_ids, cfg.batch_size, seq_len, rng)
        opt.zero_grad()
        loss = dlm_loss(params, batch, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        loss.backward()
        opt.lr = _lr_at(cfg, step)
        opt.step()
        losses.append(value)
        if progress and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            progress(step, value)
    return losses


def train_dlm(corpus_ids, config: DlmConfig, train: TrainConfig, rng: np.random.Generator,
              init_rng: np.random.Generator | None = None, progress=None,
              init: DlmParams | None = None) -> tuple[DlmParams, list[float]]:
    """Initialise (or copy ``init``) and train a model; returns parameters and the per-step loss curve."""
    if init is not None:
        params = init.copy()
    else:
        params = DlmParams.init(config, init_rng if init_rng is not None else rng)
    losses = _fit(params, np.asarray(corpus_ids), train, rng, progress)
    return params, losses


def format_instruction(prompt: str, response: str) -> str:
    return f"User: {prompt}\nAssistant: {response}\n"


def load_instructions(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "prompt" not in rec or "response" not in rec:
                raise ValueError(f"{path}:{n}: record needs 'prompt' and 'response'")
            records.append(rec)
    return records


def instruction_ids(records: Sequence[dict], vocab: Vocab) -> np.ndarray:
    text = "".join(format_instruction(r["prompt"], r["response"]) for r in records)
    return vocab.encode(text)


def finetune_dlm(base: DlmParams, instruction_corpus_ids, train: TrainConfig,
                 rng: np.random.Generator, progress=None) -> tuple[DlmParams, list[float]]:
    """Continue training a copy of ``base`` on prompt/response formatted text."""
    params = base.copy()
    losses = _fit(params, np.asarray(instruction_corpus_ids), train, rng, progress)
    return params, losses


@nx.no_grad()
def heldout_loss(params: DlmParams, corpus_ids, n_batches: int, batch_size: int,
                 rng: np.random.Generator) -> float:
    vals = []
    for _ in range(n_batches):
        batch = sample_windows(corpus_ids, batch_size, params.config.context, rng)
        vals.append(dlm_loss(params, batch, rng).item())
    return float(np.mean(vals))


# ---------------------------------------------------------------- decoding


def _probs(logits: np.ndarray, cfg: DlmConfig, temperature: float = 1.0) -> np.ndarray:
    z = np.array(logits, dtype=np.float64)
    z[..., [cfg.mask_id, cfg.pad_id]] = -np.inf
    if temperature != 1.0:
        z = z / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def top2_margin(probs: np.ndarray) -> np.ndarray:
    part = -np.partition(-probs, 1, axis=-1)
    return part[..., 0] - part[..., 1]


def rank_positions(probs: np.ndarray, positions, strategy: str, rng: np.random.Generator) -> np.ndarray:
    """Order masked ``positions`` (rows of ``probs``) by when they should be committed.

    origin: seeded shuffle; topk_margin: descending p(1) - p(2);
    entropy: ascending entropy. Ties go to the lowest position.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("no masked positions to rank")
    if strategy == "origin":
        return positions[rng.permutation(positions.size)]
    if strategy == "topk_margin":
        key = -top2_margin(probs)
    elif strategy == "entropy":
        key = entropy(probs)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return positions[np.lexsort((positions, key))]


StepObserver = Callable[[int, MaskedState, ForwardResult], None]
# steer hook: (X for one sequence (N, d), current state) -> steered X
SteerFn = Callable[[np.ndarray, MaskedState], np.ndarray]


def _forward_state(params, state, steer_layer, steer):
    hooks = None
    if steer is not None:
        hooks = {steer_layer: lambda X: steer(X, state)}
    with nx.no_grad():
        return dlm_forward(params, state.ids, hooks=hooks)


def denoise_step(
    state: MaskedState,
    params: DlmParams,
    strategy: str,
    schedule: NoiseSchedule,
    k: int,
    rng: np.random.Generator,
    gen_start: int = 0,
    steer: SteerFn | None = None,
    steer_layer: int | None = None,
    temperature: float = 0.0,
    result: ForwardResult | None = None,
) -> tuple[MaskedState, ForwardResult]:
    """Move from mask rate t_k to t_{k-1}.

    Predicts tokens at masked positions, commits the top-ranked ones so that
    exactly round(t_{k-1} * N_gen) positions stay masked, and never re-masks a
    committed position. ``result`` lets the caller pass an already computed
    forward pass on ``state``.
    """
    if k < 1 or k > schedule.steps:
        raise ValueError(f"schedule exhausted: step {k} not in 1..{schedule.steps}")
    cfg = params.config
    n_gen = state.ids.size - gen_start
    masked = state.masked_positions
    if masked.size and masked.min() < gen_start:
        raise ValueError("masked positions found inside the prompt")
    expected = schedule.target_masked(k, n_gen)
    if masked.size != expected:
        raise ValueError(f"state has {masked.size} masked positions, schedule expects {expected} at step {k}")
    target = schedule.target_masked(k - 1, n_gen)
    if result is None:
        result = _forward_state(params, state, steer_layer, steer)
    n_commit = masked.size - target
    nxt = state.copy()
    nxt.t = schedule.rates[k - 1]
    if n_commit <= 0:
        return nxt, result
    logits = result.logits.data[masked]
    probs = _probs(logits, cfg)
    if temperature > 0:
        sample_p = _probs(logits, cfg, temperature)
        pred = np.array([rng.choice(cfg.vocab_size, p=row) for row in sample_p])
    else:
        pred = probs.argmax(axis=-1)
    order = rank_positions(probs, masked, strategy, rng)
    chosen = order[:n_commit]
    lookup = {int(p): i for i, p in enumerate(masked)}
    for pos in chosen:
        nxt.ids[pos] = pred[lookup[int(pos)]]
        nxt.mask[pos] = False
    return nxt, result


@dataclass
class Generation:
    ids: np.ndarray
    gen_start: int
    states: list[MaskedState] = field(default_factory=list)
    trace: object | None = None

    @property
    def continuation(self) -> np.ndarray:
        return self.ids[self.gen_start :]


def generate(
    params: DlmParams,
    prompt,
    gen_length: int,
    steps: int,
    strategy: str,
    rng: np.random.Generator,
    steer: SteerFn | None = None,
    steer_layer: int | None = None,
    trace_config=None,
    temperature: float = 0.0,
    observers: Sequence[StepObserver] = (),
    keep_states: bool = False,
) -> Generation:
    """Decode ``gen_length`` tokens after ``prompt`` in ``steps`` denoising steps.

    With ``trace_config`` set, the returned ``Generation.trace`` holds the
    per-step masked sets and SAE feature sets (snapshots 0..K, the last one a
    forward pass on the finished sequence). The steer hook runs at every
    forward pass, so without tracing it fires exactly ``steps`` times.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    cfg = params.config
    if prompt.size + gen_length > cfg.context:
        raise ValueError(f"prompt {prompt.size} + generation {gen_length} exceeds context {cfg.context}")
    if steer is not None and steer_layer is None:
        raise ValueError("steer hook needs a layer")
    schedule = NoiseSchedule.linear(steps)
    ids = np.concatenate([prompt, np.full(gen_length, cfg.mask_id, dtype=np.int64)])
    mask = np.zeros(ids.size, dtype=bool)
    mask[prompt.size :] = True
    state = MaskedState(ids, mask, 1.0)
    gen_start = prompt.size

    recorder = None
    if trace_config is not None:
        from dlmlab.order import TraceRecorder

        recorder = TraceRecorder(trace_config, strategy, steps, gen_start, gen_length)
        observers = [*observers, recorder]

    states = [state.copy()] if keep_states else []
    for step_index, k in enumerate(range(steps, 0, -1)):
        result = _forward_state(params, state, steer_layer, steer)
        for obs in observers:
            obs(step_index, state, result)
        state, _ = denoise_step(state, params, strategy, schedule, k, rng, gen_start=gen_start,
                                temperature=temperature, result=result)
        if keep_states:
            states.append(state.copy())
    if observers:
        result = _forward_state(params, state, steer_layer, steer)
        for obs in observers:
            obs(steps, state, result)
    return Generation(state.ids, gen_start, states, recorder.trace if recorder else None)


# ---------------------------------------------------------------- checkpoints

DLM_MAGIC = b"DLMS"
DLM_VERSION = 1
_CFG_FIELDS = ("vocab_size", "mask_id", "pad_id", "d_model", "n_layers", "n_heads", "context", "d_mlp", "rope")


def save_dlm(params: DlmParams, path: str | Path) -> None:
    """Binary checkpoint: magic, version, config block, float32 LE weights in name order."""
    cfg = params.config
    buf = io.BytesIO()
    buf.write(DLM_MAGIC)
    buf.write(struct.pack("<H", DLM_VERSION))
    buf.write(struct.pack(f"<{len(_CFG_FIELDS)}I", *(getattr(cfg, f) for f in _CFG_FIELDS)))
    name = cfg.name.encode("utf-8")
    buf.write(struct.pack("<H", len(name)) + name)
    for t in params.tensors.values():
        buf.write(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dlm(path: str | Path) -> DlmParams:
    raw = Path(path).read_bytes()
    if raw[:4] != DLM_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != DLM_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    vals = struct.unpack_from(f"<{len(_CFG_FIELDS)}I", raw, 6)
    off = 6 + 4 * len(_CFG_FIELDS)
    (nlen,) = struct.unpack_from("<H", raw, off)
    name = raw[off + 2 : off + 2 + nlen].decode("utf-8")
    off += 2 + nlen
    cfg = DlmConfig(**dict(zip(_CFG_FIELDS, vals)), name=name)
    params = DlmParams.init(cfg, np.random.default_rng(0))
    for t in params.tensors.values():
        n = t.data.size
        t.data[...] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t.shape)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after weights")
    return params


def config_dict(cfg: DlmConfig) -> dict:
    return asdict(cfg)
