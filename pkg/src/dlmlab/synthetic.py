"""Synthetic harnesses with planted ground truth, for checking steering and auto-interpretation machinery."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dlmlab.autointerp import FeatureActivations
from dlmlab.dlm import DlmConfig, DlmParams, Vocab, dlm_forward, sample_windows
from dlmlab.sae import SaeParams


@dataclass
class PlantedSteering:
    dlm: DlmParams
    sae: SaeParams
    vocab: Vocab
    feature: int
    layer: int
    terms: list[str]
    m_f: float


def planted_steering(seed: int, terms: Sequence[str] = ("q", "x", "z", "j"), d: int = 32, n_layers: int = 2,
                     width: int = 64, k_act: int = 8, context: int = 64) -> PlantedSteering:
    """Random-init byte model plus an SAE whose feature 0 points the unembedding at the term bytes.

    The atom lives at the last layer: it is the centred, unit-norm mean of the
    unembedding columns of the term bytes, so pushing the final residual along
    it raises those logits after the final layer norm. ``m_f`` is the mean
    residual norm at that layer on random byte text, so steering strength is
    relative to the natural activation scale.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocab.bytes()
    cfg = DlmConfig.for_vocab(vocab, d_model=d, n_layers=n_layers, n_heads=2, context=context,
                              name=f"planted-{seed}")
    dlm = DlmParams.init(cfg, rng, std=0.5)
    sae = SaeParams.init(d, width, k_act, rng)
    term_ids = sorted({b for t in terms for b in t.encode("utf-8")})
    w_u = dlm["w_u"].data
    direction = w_u[:, term_ids].mean(axis=1) - w_u[:, : vocab.mask_id].mean(axis=1)
    direction -= direction.mean()
    direction /= np.linalg.norm(direction)
    sae.w_dec.data[:, 0] = direction
    sae.w_enc.data[0] = direction
    layer = n_layers - 1
    probe = rng.integers(32, 127, size=(8, context))
    resid = dlm_forward(dlm, probe).residuals[layer]
    m_f = float(np.linalg.norm(resid, axis=-1).mean())
    return PlantedSteering(dlm, sae, vocab, 0, layer, list(terms), m_f)


@dataclass
class PlantedActivations:
    acts: FeatureActivations
    vocab: Vocab
    feature: int
    term: str


def planted_activations(seed: int, term: str = "zebra", n_windows: int = 200, context: int = 32,
                        width: int = 8, rate: float = 0.15) -> PlantedActivations:
    """Lower-case word windows where feature 0 fires exactly on occurrences of ``term``.

    Planted terms always fit inside the window, so every active window contains the full term.

    Other features fire at random positions so the store has realistic clutter.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocab.bytes()
    words = ["apple", "river", "stone", "music", "cloud", "green", "table", "quiet", "light", "paper"]
    term_b = term.encode("utf-8")
    windows = np.empty((n_windows, context), dtype=np.int64)
    acts = np.zeros((n_windows, context, width))
    for w in range(n_windows):
        out = bytearray()
        spans = []
        while len(out) < context:
            if rng.random() < rate and len(out) + len(term_b) <= context:
                spans.append((len(out), len(out) + len(term_b)))
                out += term_b
            else:
                out += words[rng.integers(len(words))].encode()
            out += b" "
        windows[w] = np.frombuffer(bytes(out[:context]), dtype=np.uint8)
        for a, b in spans:
            acts[w, a:b, 0] = rng.uniform(1.0, 3.0)
    noise = rng.random((n_windows, context, width - 1)) < 0.05
    acts[..., 1:] = noise * rng.uniform(0.1, 1.0, size=noise.shape)
    return PlantedActivations(FeatureActivations.from_dense(windows, acts), vocab, 0, term)


def random_byte_windows(n: int, length: int, seed: int) -> np.ndarray:
    """Printable-ASCII windows for probing untrained models."""
    corpus = np.random.default_rng(seed).integers(32, 127, size=n * length + length)
    return sample_windows(corpus, n, length, np.random.default_rng(seed + 1))
