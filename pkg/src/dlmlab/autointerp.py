"""Feature auto-interpretation: evidence windows, judge prompting and agreement scoring."""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from dlmlab import numerics as nx
from dlmlab.dlm import DlmParams, Vocab, dlm_forward
from dlmlab.sae import SaeParams, encode

log = logging.getLogger(__name__)

EXPLAIN = "explain"
SCORE = "score"
LABELS = ("top", "importance", "negative")


def _template(name: str) -> str:
    return resources.files("dlmlab").joinpath(f"assets/{name}").read_text("utf-8").rstrip("\n")


@dataclass
class EvidenceWindow:
    window_id: int
    tokens: np.ndarray
    acts: np.ndarray
    label: str

    @property
    def peak(self) -> float:
        return float(self.acts.max()) if self.acts.size else 0.0

    @property
    def peak_position(self) -> int:
        return int(np.argmax(self.acts))

    @property
    def active(self) -> bool:
        return self.peak > 0.0


@dataclass
class Evidence:
    feature: int
    explain: list[EvidenceWindow]
    scoring: list[EvidenceWindow]

    @property
    def truth(self) -> list[int]:
        """1-based indices of scoring windows whose activation exceeds the threshold."""
        return [i + 1 for i, w in enumerate(self.scoring) if w.active]


@dataclass
class AutointerpConfig:
    context_length: int = 128
    n_latents: int = 1000
    latent_batch_size: int = 100
    dead_threshold: int = 15
    n_top_explain: int = 10
    n_iw_explain: int = 5
    n_top_score: int = 2
    n_iw_score: int = 2
    n_neg_score: int = 10
    max_in_flight: int = 4
    seed: int = 0

    @property
    def n_scoring(self) -> int:
        return self.n_top_score + self.n_iw_score + self.n_neg_score


# ---------------------------------------------------------------- activations


@dataclass
class FeatureActivations:
    """Sparse (window, position, value) triples for every latent, grouped by latent.

    Top-K codes have at most k_act nonzeros per token, so this stays small
    where a dense windows x positions x width array would not.
    """

    windows: np.ndarray  # (W, C) token ids
    order: np.ndarray
    starts: np.ndarray  # (width + 1,)
    flat_pos: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dense(cls, windows: np.ndarray, acts: np.ndarray) -> "FeatureActivations":
        """acts: (W, C, width)."""
        w, c, f = np.nonzero(acts)
        return cls._build(windows, w * acts.shape[1] + c, f, acts[w, c, f], acts.shape[2])

    @classmethod
    def _build(cls, windows, flat_pos, feats, vals, width):
        order = np.argsort(feats, kind="stable")
        starts = np.searchsorted(feats[order], np.arange(width + 1))
        return cls(windows, order, starts, flat_pos[order], vals[order])

    @property
    def width(self) -> int:
        return self.starts.size - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def dense(self, f: int) -> np.ndarray:
        out = np.zeros(self.windows.shape, dtype=np.float64)
        sl = slice(self.starts[f], self.starts[f + 1])
        out.ravel()[self.flat_pos[sl]] = self.values[sl]
        return out


def collect_activations(dlm: DlmParams, sae: SaeParams, layer: int, corpus_ids, context_length: int,
                        max_tokens: int | None = None, batch_size: int = 16) -> FeatureActivations:
    """Forward fixed clean windows through the backbone and encode the residual at ``layer``."""
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if max_tokens is not None:
        ids = ids[:max_tokens]
    C = min(context_length, dlm.config.context)
    n = ids.size // C
    if n == 0:
        raise ValueError(f"corpus shorter than one window of {C} tokens")
    windows = ids[: n * C].reshape(n, C)
    pos_chunks, feat_chunks, val_chunks = [], [], []
    for s in range(0, n, batch_size):
        rows = windows[s : s + batch_size]
        with nx.no_grad():
            res = dlm_forward(dlm, rows).residuals[layer]
        h = encode(sae, res.reshape(-1, sae.d))
        tok, f = np.nonzero(h)
        pos_chunks.append(s * C + tok)
        feat_chunks.append(f)
        val_chunks.append(h[tok, f].astype(np.float32))
    return FeatureActivations._build(
        windows, np.concatenate(pos_chunks), np.concatenate(feat_chunks), np.concatenate(val_chunks), sae.width
    )


# ---------------------------------------------------------------- evidence


def build_evidence(acts: FeatureActivations, f: int, cfg: AutointerpConfig, rng: np.random.Generator) -> Evidence | None:
    """Pick explanation and scoring windows for feature f, or None for a dead feature.

    Explanation set: the strongest windows by peak activation, then windows
    drawn from the remaining active ones with probability proportional to
    their peak. Scoring set: the next strongest windows, more peak-weighted
    draws, and random windows where the feature is silent; shuffled.
    """
    if acts.counts()[f] < cfg.dead_threshold:
        return None
    dense = acts.dense(f)
    peaks = dense.max(axis=1)
    ranked = np.lexsort((np.arange(peaks.size), -peaks))
    active = ranked[peaks[ranked] > 0]

    def window(i, label):
        return EvidenceWindow(int(i), acts.windows[i], dense[i], label)

    n_top = cfg.n_top_explain + cfg.n_top_score
    top = active[:n_top]
    rest = active[n_top:]

    def weighted(pool, n):
        if n <= 0 or pool.size == 0:
            return pool[:0], pool
        p = peaks[pool] / peaks[pool].sum()
        pick = rng.choice(pool, size=min(n, pool.size), replace=False, p=p)
        return pick, np.setdiff1d(pool, pick)

    iw_explain, rest = weighted(rest, cfg.n_iw_explain)
    iw_score, rest = weighted(rest, cfg.n_iw_score)
    explain = [window(i, "top") for i in top[: cfg.n_top_explain]]
    explain += [window(i, "importance") for i in iw_explain]

    silent = np.flatnonzero(peaks == 0)
    negs = rng.choice(silent, size=min(cfg.n_neg_score, silent.size), replace=False) if silent.size else []
    scoring = [window(i, "top") for i in top[cfg.n_top_explain :]]
    scoring += [window(i, "importance") for i in iw_score]
    scoring += [window(i, "negative") for i in negs]
    perm = rng.permutation(len(scoring))
    return Evidence(f, explain, [scoring[i] for i in perm])


# ---------------------------------------------------------------- rendering


def _bytes_text(vocab: Vocab, ids) -> str:
    return vocab.decode(np.asarray(ids, dtype=np.int64))


def render_window(w: EvidenceWindow, vocab: Vocab, marked: bool) -> str:
    """Detokenize a window; with ``marked`` each maximal run of active tokens is wrapped in << >>."""
    if not marked:
        return _bytes_text(vocab, w.tokens)
    parts = []
    on = w.acts > 0
    start = 0
    for i in range(1, on.size + 1):
        if i == on.size or on[i] != on[start]:
            text = _bytes_text(vocab, w.tokens[start:i])
            parts.append(f"<<{text}>>" if on[start] and text else text)
            start = i
    return "".join(parts)


def _enumerate(texts: Sequence[str]) -> str:
    return "".join(f"\n\n{i}. {t}" for i, t in enumerate(texts, 1))


def render_prompt(texts: Sequence[str], stage: str, explanation: str | None = None) -> list[dict]:
    """Chat messages for the explanation or scoring stage from already rendered window texts."""
    if not texts:
        raise ValueError("no windows to render")
    if stage == EXPLAIN:
        user = _template("explain_user.txt").format(examples=_enumerate(texts))
        system = _template("explain_system.txt")
    elif stage == SCORE:
        if not explanation:
            raise ValueError("scoring stage needs an explanation")
        if any("<<" in t or ">>" in t for t in texts):
            texts = [t.replace("<<", "").replace(">>", "") for t in texts]
        user = _template("score_user.txt").format(explanation=explanation.strip().rstrip("."),
                                                  examples=_enumerate(texts))
        system = _template("score_system.txt")
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


# ---------------------------------------------------------------- judges


class JudgeClient(Protocol):
    name: str

    def complete(self, messages: list[dict]) -> str: ...


class JudgeError(RuntimeError):
    pass


@dataclass
class HttpJudge:
    """Minimal chat-completions client (POST {base_url}/chat/completions)."""

    base_url: str
    model: str
    token_env: str = "DLMLAB_JUDGE_TOKEN"
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    name: str = "http"
    thread_safe: bool = True

    def complete(self, messages: list[dict]) -> str:
        body = json.dumps({"model": self.model, "messages": messages, "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        url = self.base_url.rstrip("/") + "/chat/completions"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
                log.warning("judge request failed (attempt %d/%d): %s", attempt + 1, self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
            except (KeyError, IndexError, json.JSONDecodeError) as exc:
                raise JudgeError(f"malformed judge response: {exc}") from exc
        raise JudgeError(f"judge unreachable after {self.retries + 1} attempts: {last}")


def _examples(messages: list[dict]) -> list[str]:
    # numbered markers are searched in sequence so blank lines inside a window do not split it
    user = messages[-1]["content"]
    starts = []
    pos = 0
    while (j := user.find(f"\n\n{len(starts) + 1}. ", pos)) >= 0:
        starts.append(j)
        pos = j + 1
    ends = starts[1:] + [len(user)]
    return [user[s + len(f"\n\n{i}. ") : e] for i, (s, e) in enumerate(zip(starts, ends), 1)]


class OracleJudge:
    """Mock judge that answers the scoring stage from the true labels it is primed with."""

    name = "oracle"
    thread_safe = False

    def __init__(self):
        self._truth: list[int] = []

    def prime(self, evidence: Evidence) -> None:
        self._truth = evidence.truth

    def complete(self, messages: list[dict]) -> str:
        if messages[0]["content"] == _template("explain_system.txt"):
            return "Oracle explanation."
        return ", ".join(map(str, self._truth)) if self._truth else "None"


class RandomJudge:
    """Mock judge selecting each scoring example independently with probability p."""

    name = "random"
    thread_safe = False

    def __init__(self, rng: np.random.Generator, p: float = 0.5):
        self.rng = rng
        self.p = p

    def complete(self, messages: list[dict]) -> str:
        if messages[0]["content"] == _template("explain_system.txt"):
            return "Random explanation."
        n = len(_examples(messages))
        picked = [i + 1 for i in range(n) if self.rng.random() < self.p]
        return ", ".join(map(str, picked)) if picked else "None"


class SubstringJudge:
    """Deterministic offline judge.

    Explains a feature by the most frequent marked span and predicts that a
    scoring example activates when it contains that span.
    """

    name = "substring"
    thread_safe = True

    def complete(self, messages: list[dict]) -> str:
        examples = _examples(messages)
        if messages[0]["content"] == _template("explain_system.txt"):
            spans: dict[str, int] = {}
            for ex in examples:
                for s in re.findall(r"<<(.+?)>>", ex, flags=re.S):
                    spans[s] = spans.get(s, 0) + 1
            if not spans:
                return "No clear pattern."
            best = min(spans, key=lambda s: (-spans[s], -len(s), s))
            return f"The neuron activates on the substring {json.dumps(best)}."
        m = re.search(r'substring ("(?:[^"\\]|\\.)*")', messages[-1]["content"])
        if not m:
            return "None"
        needle = json.loads(m.group(1))
        picked = [i for i, ex in enumerate(examples, 1) if needle in ex]
        return ", ".join(map(str, picked)) if picked else "None"


def make_judge(kind: str, seed: int = 0, **http) -> JudgeClient:
    if kind == "oracle":
        return OracleJudge()
    if kind == "random":
        return RandomJudge(np.random.default_rng(seed))
    if kind == "substring":
        return SubstringJudge()
    if kind == "http":
        return HttpJudge(**http)
    raise ValueError(f"unknown judge kind {kind!r}")


# ---------------------------------------------------------------- scoring


def parse_reply(reply: str, n: int) -> list[int] | None:
    """Parse 'None' or comma-separated 1-based indices; None when unparseable."""
    text = reply.strip().rstrip(".").strip().strip('"')
    if text.lower() == "none":
        return []
    if not re.fullmatch(r"\d+(\s*,\s*\d+)*", text):
        return None
    idx = sorted({int(t) for t in text.split(",")})
    if idx and (idx[0] < 1 or idx[-1] > n):
        return None
    return idx


def agreement_accuracy(predicted: Sequence[int], truth: Sequence[int], n: int) -> float:
    """Fraction of the n examples whose predicted membership equals the true membership."""
    if n <= 0:
        raise ValueError("need at least one scoring example")
    p, t = set(predicted), set(truth)
    agree = sum((i in p) == (i in t) for i in range(1, n + 1))
    return agree / n


@dataclass
class ScoringResult:
    feature: int
    predicted: list[int]
    truth: list[int]
    accuracy: float | None
    status: str = "ok"


def score_explanation(judge: JudgeClient, explanation: str, texts: Sequence[str], truth: Sequence[int],
                      feature: int = -1) -> ScoringResult:
    messages = render_prompt(texts, SCORE, explanation)
    for attempt in range(2):
        reply = judge.complete(messages)
        pred = parse_reply(reply, len(texts))
        if pred is not None:
            return ScoringResult(feature, pred, list(truth), agreement_accuracy(pred, truth, len(texts)))
        log.warning("unparseable judge reply for feature %d (attempt %d): %r", feature, attempt + 1, reply)
    return ScoringResult(feature, [], list(truth), None, "failed")


# ---------------------------------------------------------------- pipeline


@dataclass
class FeatureResult:
    feature: int
    explanation: str
    predicted: list[int]
    truth: list[int]
    accuracy: float | None
    status: str
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def interpret_feature(acts: FeatureActivations, f: int, vocab: Vocab, judge: JudgeClient,
                      cfg: AutointerpConfig) -> FeatureResult:
    rng = np.random.default_rng([cfg.seed, f])
    ev = build_evidence(acts, f, cfg, rng)
    if ev is None:
        return FeatureResult(f, "", [], [], None, "dead")
    if not ev.scoring:
        return FeatureResult(f, "", [], [], None, "failed", {"error": "empty scoring set"})
    meta = {"judge": getattr(judge, "name", type(judge).__name__),
            "explain_windows": [w.window_id for w in ev.explain],
            "scoring_windows": [w.window_id for w in ev.scoring]}
    try:
        explanation = judge.complete(render_prompt([render_window(w, vocab, True) for w in ev.explain], EXPLAIN))
        explanation = explanation.strip()
        if not explanation:
            raise JudgeError("empty explanation")
        if hasattr(judge, "prime"):
            judge.prime(ev)
        res = score_explanation(judge, explanation, [render_window(w, vocab, False) for w in ev.scoring],
                                ev.truth, f)
    except JudgeError as exc:
        meta["error"] = str(exc)
        return FeatureResult(f, "", [], ev.truth, None, "failed", meta)
    return FeatureResult(f, explanation, res.predicted, res.truth, res.accuracy, res.status, meta)


def load_results(path: str | Path) -> dict[int, FeatureResult]:
    out: dict[int, FeatureResult] = {}
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text("utf-8").splitlines():
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            log.warning("skipping truncated result line in %s", p)
            continue
        out[row["feature"]] = FeatureResult(**row)
    return out


def run_autointerp(acts: FeatureActivations, vocab: Vocab, judge: JudgeClient, cfg: AutointerpConfig,
                   out_path: str | Path, features: Sequence[int] | None = None) -> list[FeatureResult]:
    """Interpret features, appending one JSON line per feature; finished features are skipped on resume."""
    done = load_results(out_path)
    todo = list(range(acts.width)) if features is None else list(features)
    todo = [f for f in todo[: cfg.n_latents] if f not in done or done[f].status == "failed"]
    # judges with internal state (priming, a shared rng) run one request at a time
    workers = max(1, cfg.max_in_flight) if getattr(judge, "thread_safe", False) else 1
    results = dict(done)
    _terminate_partial_line(Path(out_path))
    with open(out_path, "a", encoding="utf-8") as fh, ThreadPoolExecutor(workers) as pool:
        for s in range(0, len(todo), cfg.latent_batch_size):
            batch = todo[s : s + cfg.latent_batch_size]
            futures = [pool.submit(_safe_interpret, acts, f, vocab, judge, cfg) for f in batch]
            for fut in futures:
                r = fut.result()
                fh.write(r.to_json() + "\n")
                results[r.feature] = r
            fh.flush()
    return [results[f] for f in sorted(results)]


def _terminate_partial_line(path: Path) -> None:
    # an interrupted write leaves a fragment without a newline; start fresh records on a new line
    if path.exists() and path.stat().st_size:
        with open(path, "rb+") as fh:
            fh.seek(-1, 2)
            if fh.read(1) != b"\n":
                fh.write(b"\n")


def _safe_interpret(acts, f, vocab, judge, cfg) -> FeatureResult:
    try:
        return interpret_feature(acts, f, vocab, judge, cfg)
    except Exception as exc:  # one bad feature never aborts the run
        log.exception("feature %d failed", f)
        return FeatureResult(f, "", [], [], None, "failed", {"error": repr(exc)})
