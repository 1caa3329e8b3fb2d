"""Sparsity-fidelity evaluation: explained variance, spliced-loss change, sweeps and transfer."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from dlmlab import numerics as nx
from dlmlab.dlm import DlmParams, dlm_forward, generate, masked_ce_from_logits, sample_corruption
from dlmlab.sae import SaeParams, reconstruct

PROTOCOLS = ("denoising", "rollout")


@dataclass
class FidelityRecord:
    backbone: str
    sae: str
    layer: int
    k_act: int
    ev: float
    delta_loss: float
    protocol: str
    tokens: int
    seed: int
    source: str = ""
    target: str = ""

    def __post_init__(self):
        if self.ev > 1.0 + 1e-12:
            raise ValueError(f"explained variance above 1: {self.ev}")
        if self.tokens <= 0:
            raise ValueError("a record needs a positive eval-token count")


CSV_COLUMNS = ("backbone", "sae", "layer", "k_act", "ev", "delta_loss", "protocol", "tokens", "seed")


def explained_variance_arrays(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    energy = float((x * x).sum(axis=-1).mean())
    if energy == 0.0:
        raise ValueError("degenerate store: mean squared norm is zero")
    err = x - np.asarray(x_hat, dtype=np.float64)
    return 1.0 - float((err * err).sum(axis=-1).mean()) / energy


def explained_variance(sae: SaeParams, vectors, batch: int = 8192) -> float:
    """1 - E||x - x_hat||^2 / E||x||^2 with plain means over the store."""
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty store")
    if x.shape[1] != sae.d:
        raise nx.ShapeError(f"store width {x.shape[1]} does not match SAE d={sae.d}")
    err = 0.0
    energy = 0.0
    for s in range(0, len(x), batch):
        xb = x[s : s + batch]
        e = xb - reconstruct(sae, xb)
        err += float((e * e).sum())
        energy += float((xb * xb).sum())
    if energy == 0.0:
        raise ValueError("degenerate store: mean squared norm is zero")
    return 1.0 - err / energy


# ---------------------------------------------------------------- spliced loss


def splice_hook(sae: SaeParams) -> Callable[[np.ndarray], np.ndarray]:
    def hook(X):
        return reconstruct(sae, X)

    return hook


@dataclass
class EvalSet:
    """Held-out windows (denoising) or prompt+rollout sequences with a maskable span."""

    windows: np.ndarray  # (B, N)
    maskable: np.ndarray | None = None  # (B, N) bool, None -> every position

    @property
    def tokens(self) -> int:
        return int(self.windows.size if self.maskable is None else self.maskable.sum())


@dataclass
class DeltaLoss:
    delta: float
    base: float
    spliced: float
    masked_sets: list[np.ndarray]
    masked_sets_spliced: list[np.ndarray]


class SpliceEvaluator:
    """Fixed corruption draws and baseline losses for one (model, eval set, seed).

    Every spliced pass reuses the same draw objects, so masked sets are
    identical across passes by construction, and the unspliced baseline is
    computed once no matter how many SAEs are evaluated. With
    ``cache_residuals`` the baseline residuals are kept, and a spliced pass
    only runs the blocks after the spliced layer (bitwise identical to
    splicing through a forward hook).
    """

    def __init__(self, dlm: DlmParams, eval_set: EvalSet, seed: int, batch_size: int = 16,
                 cache_residuals: bool = True):
        self.dlm = dlm
        rng = np.random.default_rng(seed)
        windows = eval_set.windows
        self.draws = []
        self.base_losses = []
        self.residuals = []
        for s in range(0, len(windows), batch_size):
            maskable = None if eval_set.maskable is None else eval_set.maskable[s : s + batch_size]
            draw = sample_corruption(windows[s : s + batch_size], rng, dlm.config.mask_id, maskable=maskable)
            with nx.no_grad():
                out = dlm_forward(dlm, draw.ids)
                self.base_losses.append(masked_ce_from_logits(out.logits, draw).item())
            self.draws.append(draw)
            self.residuals.append(out.residuals if cache_residuals else None)
        self.n = len(windows)
        self.base = sum(l * len(d.t) for l, d in zip(self.base_losses, self.draws)) / self.n

    def masked_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for d in self.draws for m in d.mask]

    def delta(self, layer: int, splice: Callable[[np.ndarray], np.ndarray]) -> DeltaLoss:
        cfg = self.dlm.config
        if not 0 <= layer < cfg.n_layers:
            raise ValueError(f"layer {layer} outside 0..{cfg.n_layers - 1}")
        total = 0.0
        spliced_sets = []
        for draw, res in zip(self.draws, self.residuals):
            with nx.no_grad():
                if res is None:
                    logits = dlm_forward(self.dlm, draw.ids, hooks={layer: splice}).logits
                else:
                    x = np.asarray(splice(res[layer]), dtype=np.float64)
                    logits = dlm_forward(self.dlm, draw.ids, resume=(layer, x)).logits
                total += masked_ce_from_logits(logits, draw).item() * len(draw.t)
            spliced_sets.extend(np.flatnonzero(row == cfg.mask_id) for row in draw.ids)
        spliced = total / self.n
        return DeltaLoss(spliced - self.base, self.base, spliced, self.masked_sets(), spliced_sets)

    def delta_for(self, sae: SaeParams, layer: int) -> DeltaLoss:
        _check_width(sae, self.dlm)
        return self.delta(layer, splice_hook(sae))


def _check_width(sae: SaeParams, dlm: DlmParams) -> None:
    if sae.d != dlm.config.d_model:
        raise nx.ShapeError(f"SAE d={sae.d} does not match model width {dlm.config.d_model}")


def delta_dlm_loss(
    dlm: DlmParams,
    sae: SaeParams | None,
    layer: int,
    eval_set: EvalSet,
    seed: int,
    splice: Callable[[np.ndarray], np.ndarray] | None = None,
    batch_size: int = 16,
) -> DeltaLoss:
    """L_ins - L on identical corruption draws.

    The spliced pass replaces the residual output of ``layer`` at every
    position with the SAE reconstruction (or ``splice`` when given) before the
    rest of the forward pass.
    """
    if not 0 <= layer < dlm.config.n_layers:
        raise ValueError(f"layer {layer} outside 0..{dlm.config.n_layers - 1}")
    if splice is None:
        if sae is None:
            raise ValueError("need an SAE or an explicit splice")
        _check_width(sae, dlm)
        splice = splice_hook(sae)
    return SpliceEvaluator(dlm, eval_set, seed, batch_size, cache_residuals=False).delta(layer, splice)


# ---------------------------------------------------------------- rollouts


def rollout_eval_set(
    dlm: DlmParams,
    prompts: Sequence[np.ndarray],
    seed: int,
    gen_length: int = 30,
    steps: int = 30,
    strategy: str = "entropy",
) -> EvalSet:
    """Generate continuations and keep only the continuation span maskable.

    Prompts are right-aligned into one array by left-padding with PAD; PAD
    positions are never masked.
    """
    cfg = dlm.config
    seqs = []
    for j, prompt in enumerate(prompts):
        prompt = np.asarray(prompt, dtype=np.int64)[-(cfg.context - gen_length):]
        g = generate(dlm, prompt, gen_length, steps, strategy, np.random.default_rng([seed, j]))
        seqs.append((g.ids, g.gen_start))
    width = max(len(ids) for ids, _ in seqs)
    windows = np.full((len(seqs), width), cfg.pad_id, dtype=np.int64)
    maskable = np.zeros(windows.shape, dtype=bool)
    for r, (ids, start) in enumerate(seqs):
        pad = width - len(ids)
        windows[r, pad:] = ids
        maskable[r, pad + start :] = True
    return EvalSet(windows, maskable)


# ---------------------------------------------------------------- sweeps


def fidelity_record(dlm: DlmParams, sae: SaeParams, layer: int, ev_vectors, eval_set: EvalSet,
                    seed: int, protocol: str = "denoising", sae_id: str = "",
                    evaluator: SpliceEvaluator | None = None) -> FidelityRecord:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    ev = explained_variance(sae, ev_vectors)
    evaluator = evaluator or SpliceEvaluator(dlm, eval_set, seed)
    dl = evaluator.delta_for(sae, layer).delta
    return FidelityRecord(
        backbone=dlm.config.name,
        sae=sae_id or sae.meta.get("id", f"L{layer}-k{sae.k_act}"),
        layer=layer,
        k_act=sae.k_act,
        ev=ev,
        delta_loss=dl,
        protocol=protocol,
        tokens=eval_set.tokens,
        seed=seed,
        source=str(sae.meta.get("backbone", "")),
        target=dlm.config.name,
    )


def sparsity_sweep(
    dlm: DlmParams,
    saes: Mapping[tuple[int, int], SaeParams],
    layers: Sequence[int],
    ev_vectors: Mapping[int, np.ndarray],
    eval_set: EvalSet,
    seed: int,
    protocol: str = "denoising",
) -> list[FidelityRecord]:
    """One record per (layer, k_act) present in ``saes`` (keyed by (layer, k_act))."""
    if not saes:
        raise ValueError("empty SAE grid")
    evaluator = SpliceEvaluator(dlm, eval_set, seed)
    records = []
    for layer in layers:
        for (l, k), sae in sorted(saes.items()):
            if l != layer:
                continue
            records.append(fidelity_record(dlm, sae, layer, ev_vectors[layer], eval_set, seed, protocol,
                                           evaluator=evaluator))
    return records


def transfer_eval(
    target: DlmParams,
    saes: Mapping[int, SaeParams],
    ev_vectors: Mapping[int, np.ndarray],
    eval_set: EvalSet,
    seed: int,
    protocol: str = "denoising",
    evaluator: SpliceEvaluator | None = None,
) -> list[FidelityRecord]:
    """Insert per-layer SAEs (possibly trained on another backbone) into ``target``."""
    for sae in saes.values():
        _check_width(sae, target)
    evaluator = evaluator or SpliceEvaluator(target, eval_set, seed)
    return [fidelity_record(target, sae, layer, ev_vectors[layer], eval_set, seed, protocol, evaluator=evaluator)
            for layer, sae in sorted(saes.items())]


def write_records_csv(records: Sequence[FidelityRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_records_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_records_json(records: Sequence[FidelityRecord], path: str | Path) -> None:
    rows = [{c: getattr(r, c) for c in CSV_COLUMNS} for r in records]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def record_dict(r: FidelityRecord) -> dict:
    return asdict(r)


def record_key(r: FidelityRecord) -> tuple:
    return tuple(getattr(r, f.name) for f in fields(r) if f.name not in ("sae", "source"))
