"""Diffusion-time feature steering and concept / perplexity / combined scoring."""

from __future__ import annotations

import csv
import logging
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from dlmlab import numerics as nx
from dlmlab.dlm import DlmParams, MaskedState, Vocab, dlm_forward, generate
from dlmlab.sae import SaeParams, encode

log = logging.getLogger(__name__)

SELECTOR_KINDS = ("all", "update", "topk")
DEFAULT_LAMBDA = 0.3


@dataclass(frozen=True)
class SteeringSpec:
    feature: int
    alpha: float
    m_f: float
    layer: int
    selector: str = "all"
    k_pos: int = 0

    def __post_init__(self):
        if self.selector not in SELECTOR_KINDS:
            raise ValueError(f"unknown selector {self.selector!r}; expected one of {SELECTOR_KINDS}")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.m_f < 0:
            raise ValueError("m_f must be non-negative")
        if self.selector == "topk" and self.k_pos < 1:
            raise ValueError("topk selector needs k_pos >= 1")

    @classmethod
    def parse_scope(cls, scope: str) -> tuple[str, int]:
        """'all' | 'update' | 'topk:<n>' -> (selector, k_pos)."""
        if scope in ("all", "update"):
            return scope, 0
        m = re.fullmatch(r"topk:(\d+)", scope)
        if not m:
            raise ValueError(f"bad token scope {scope!r}; expected all, update or topk:<n>")
        return "topk", int(m.group(1))


def position_selector(X: np.ndarray, spec: SteeringSpec, state: MaskedState, sae: SaeParams | None) -> np.ndarray:
    """0/1 vector over the N rows of X choosing where the feature is injected."""
    N = X.shape[0]
    if spec.selector == "all":
        return np.ones(N)
    if spec.selector == "update":
        return state.mask.astype(np.float64)
    if sae is None:
        raise ValueError("topk selector needs the SAE to read feature activations")
    k = spec.k_pos
    if k > N:
        log.warning("k_pos=%d exceeds sequence length %d; clamped", k, N)
        k = N
    act = encode(sae, X)[:, spec.feature]
    s = np.zeros(N)
    s[nx.topk_indices(act, k)] = 1.0
    return s


def steer_hook(X: np.ndarray, spec: SteeringSpec, state: MaskedState, sae: SaeParams) -> np.ndarray:
    """X + alpha * m_f * s v_f^T for the selector's position vector s."""
    if spec.feature >= sae.width:
        raise ValueError(f"feature {spec.feature} outside SAE width {sae.width}")
    if spec.alpha == 0.0 or spec.m_f == 0.0:
        return X
    s = position_selector(X, spec, state, sae)
    return X + (spec.alpha * spec.m_f) * np.outer(s, sae.atom(spec.feature))


class SteerHook:
    """Callable passed to ``generate``; counts how often it fires."""

    def __init__(self, spec: SteeringSpec, sae: SaeParams):
        self.spec = spec
        self.sae = sae
        self.calls = 0

    @property
    def layer(self) -> int:
        return self.spec.layer

    def __call__(self, X: np.ndarray, state: MaskedState) -> np.ndarray:
        self.calls += 1
        if X.ndim == 3:
            return np.stack([steer_hook(x, self.spec, state, self.sae) for x in X])
        return steer_hook(X, self.spec, state, self.sae)


def calibrate_m_f(sae: SaeParams, vectors, f: int, q: float = 99.0) -> float:
    """99th percentile (linear interpolation) of feature f's nonzero activations; 0 if never active."""
    x = np.asarray(vectors, dtype=np.float64)
    acts = []
    for s in range(0, len(x), 8192):
        h = encode(sae, x[s : s + 8192])[:, f]
        acts.append(h[h > 0])
    acts = np.concatenate(acts) if acts else np.zeros(0)
    if acts.size == 0:
        warnings.warn(f"feature {f} never activates; steering with it is a no-op", RuntimeWarning)
        return 0.0
    return float(np.percentile(acts, q))


# ---------------------------------------------------------------- fluency


def pseudo_perplexity(dlm: DlmParams, continuation, context=None) -> float:
    """exp(mean CE) where each continuation position is masked alone and predicted
    from the full bidirectional context (``context`` ids precede it)."""
    cont = np.asarray(continuation, dtype=np.int64)
    if cont.size == 0:
        raise ValueError("empty continuation")
    ctx = np.zeros(0, dtype=np.int64) if context is None else np.asarray(context, dtype=np.int64)
    seq = np.concatenate([ctx, cont])
    n = cont.size
    batch = np.tile(seq, (n, 1))
    rows = np.arange(n)
    cols = ctx.size + rows
    batch[rows, cols] = dlm.config.mask_id
    with nx.no_grad():
        logits = dlm_forward(dlm, batch).logits.data[rows, cols]
    logp = nx.log_softmax_np(logits)
    return float(np.exp(-logp[rows, cont].mean()))


# ---------------------------------------------------------------- concept scorers


class ConceptScorer(Protocol):
    scale: float

    def score(self, text: str) -> float: ...


@dataclass
class LexiconScorer:
    """Percentage of characters covered by (case-insensitive) term occurrences."""

    terms: Sequence[str]
    scale: float = 100.0

    def __post_init__(self):
        if not self.terms:
            raise ValueError("lexicon needs at least one term")
        if self.scale not in (1.0, 100.0):
            raise ValueError("concept scale must be 1 or 100")
        alts = sorted((re.escape(t.lower()) for t in self.terms), key=len, reverse=True)
        self._pattern = re.compile("|".join(alts))

    def score(self, text: str) -> float:
        if not text:
            return 0.0
        covered = sum(m.end() - m.start() for m in self._pattern.finditer(text.lower()))
        return 100.0 * covered / len(text)


def feature_lexicon(acts, f: int, vocab: Vocab, n_terms: int = 3, min_len: int = 2) -> list[str]:
    """Most frequent maximal active spans of feature f (stripped, at least ``min_len`` chars)."""
    dense = acts.dense(f)
    counts: dict[str, int] = {}
    for row, toks in zip(dense, acts.windows):
        on = np.flatnonzero(row > 0)
        if on.size == 0:
            continue
        breaks = np.flatnonzero(np.diff(on) > 1)
        for seg in np.split(on, breaks + 1):
            text = vocab.decode(toks[seg[0] : seg[-1] + 1]).strip()
            if len(text) >= min_len:
                counts[text] = counts.get(text, 0) + 1
    return sorted(counts, key=lambda t: (-counts[t], t))[:n_terms]


JUDGE_CONCEPT_PROMPT = (
    "Rate from 0 to 100 how strongly the following text expresses the concept: {concept}. "
    "Reply with a single number only.\n\nText: {text}"
)


@dataclass
class JudgeScorer:
    """Concept score obtained from a chat-completion judge (0-100)."""

    client: object
    concept: str
    scale: float = 100.0

    def score(self, text: str) -> float:
        reply = self.client.complete(
            [{"role": "user", "content": JUDGE_CONCEPT_PROMPT.format(concept=self.concept, text=text)}]
        )
        m = re.search(r"-?\d+(?:\.\d+)?", reply)
        if not m:
            raise ValueError(f"judge reply is not a number: {reply!r}")
        return float(m.group(0))


# ---------------------------------------------------------------- evaluation


def steering_score(c: float, p: float, lam: float = DEFAULT_LAMBDA) -> float:
    return c + lam * p


@dataclass
class PrefixScores:
    prefix: str
    concept_before: float
    concept_after: float
    ppl_before: float
    ppl_after: float
    text_before: str = ""
    text_after: str = ""


@dataclass
class SteeringOutcome:
    feature: int
    C: float
    P: float
    S: float
    lam: float
    spec: SteeringSpec
    prefixes: list[PrefixScores] = field(default_factory=list)

    def __post_init__(self):
        if self.P > 1.0 + 1e-12:
            raise ValueError(f"relative perplexity reduction above 1: {self.P}")


def load_prefix_pool(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = resources.files("dlmlab").joinpath("assets/neutral_prefixes.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return [line for line in text.splitlines() if line.strip()]


def sample_prefixes(pool: Sequence[str], n: int, rng: np.random.Generator) -> list[str]:
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in idx]


@dataclass
class GenerationSettings:
    gen_length: int = 30
    steps: int = 30
    strategy: str = "entropy"


def steering_eval(
    dlm: DlmParams,
    sae: SaeParams,
    vocab: Vocab,
    specs: Sequence[SteeringSpec],
    prefixes: Sequence[str],
    scorer: ConceptScorer,
    lam: float = DEFAULT_LAMBDA,
    settings: GenerationSettings | None = None,
    seed: int = 0,
) -> list[SteeringOutcome]:
    """Generate with and without steering per prefix (shared seed) and score both.

    C = (mean C_after - mean C_before) / s_C, P = (mean p_before - mean p_after) / mean p_before,
    S = C + lam * P; means run over the prefixes that scored successfully.
    """
    if not specs:
        raise ValueError("no features to evaluate")
    settings = settings or GenerationSettings()
    budget = dlm.config.context - settings.gen_length
    outcomes = []
    cache: dict[int, tuple[np.ndarray, np.ndarray, str, float]] = {}
    for spec in specs:
        rows: list[PrefixScores] = []
        for j, prefix in enumerate(prefixes):
            prompt = vocab.encode(prefix)[-budget:]
            if j not in cache:
                g0 = generate(dlm, prompt, settings.gen_length, settings.steps, settings.strategy,
                              np.random.default_rng([seed, j]))
                text0 = vocab.decode(g0.continuation)
                cache[j] = (prompt, g0.continuation, text0, pseudo_perplexity(dlm, g0.continuation, prompt))
            _, cont0, text0, ppl0 = cache[j]
            hook = SteerHook(spec, sae)
            g1 = generate(dlm, prompt, settings.gen_length, settings.steps, settings.strategy,
                          np.random.default_rng([seed, j]), steer=hook, steer_layer=spec.layer)
            text1 = vocab.decode(g1.continuation)
            try:
                c0, c1 = scorer.score(text0), scorer.score(text1)
            except Exception as exc:  # scorer failures drop the prefix, not the feature
                log.warning("scorer failed on feature %d prefix %r: %s", spec.feature, prefix, exc)
                continue
            ppl1 = pseudo_perplexity(dlm, g1.continuation, prompt)
            rows.append(PrefixScores(prefix, c0, c1, ppl0, ppl1, text0, text1))
        if not rows:
            raise RuntimeError(f"every prefix failed to score for feature {spec.feature}")
        c_before = float(np.mean([r.concept_before for r in rows]))
        c_after = float(np.mean([r.concept_after for r in rows]))
        p_before = float(np.mean([r.ppl_before for r in rows]))
        p_after = float(np.mean([r.ppl_after for r in rows]))
        C = (c_after - c_before) / scorer.scale
        P = (p_before - p_after) / p_before
        outcomes.append(SteeringOutcome(spec.feature, C, P, steering_score(C, P, lam), lam, spec, rows))
    return outcomes


OUTCOME_COLUMNS = ("feature", "C", "P", "S", "alpha", "selector", "layer", "seed")


def write_outcomes_csv(outcomes: Sequence[SteeringOutcome], path: str | Path, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OUTCOME_COLUMNS)
        for o in outcomes:
            sel = o.spec.selector if o.spec.selector != "topk" else f"topk:{o.spec.k_pos}"
            w.writerow([o.feature, repr(o.C), repr(o.P), repr(o.S), repr(o.spec.alpha), sel, o.spec.layer, seed])
