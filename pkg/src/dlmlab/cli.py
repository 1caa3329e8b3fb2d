"""Command-line pipeline: train, harvest, fit SAEs, evaluate, steer, analyse decoding order."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from dlmlab import autointerp as ai
from dlmlab import corpus as toy
from dlmlab import dlm as D
from dlmlab import fidelity as F
from dlmlab import order as O
from dlmlab import sae as S
from dlmlab import steering as ST
from dlmlab.config import (
    ConfigError,
    ExperimentConfig,
    OutputExistsError,
    RunManifest,
    prepare_out_dir,
    seed_int,
    seed_stream,
)

log = logging.getLogger("dlmlab")
VOCAB = D.Vocab.bytes()
HELDOUT_FRACTION = 0.1
HELDOUT_BATCHES = 16


class Run:
    """Per-invocation context: resolved config, output dir and manifest."""

    def __init__(self, args: argparse.Namespace, cfg: ExperimentConfig, out: Path, argv: list[str]):
        self.args = args
        self.cfg = cfg
        self.out = out
        self.seed = args.seed
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config=cfg.to_dict(),
            seeds={"master": args.seed},
        )

    def rng(self, name: str) -> np.random.Generator:
        self.manifest.seeds[name] = seed_int(self.seed, name)
        return seed_stream(self.seed, name)

    def inp(self, path) -> Path:
        return self.manifest.add_input(path)

    def output(self, name: str) -> Path:
        return self.out / name

    def wrote(self, path: Path) -> None:
        self.manifest.add_output(path)


# ---------------------------------------------------------------- helpers


def _read_corpus(run: Run, path) -> np.ndarray:
    return VOCAB.encode(run.inp(path).read_text("utf-8"))


def _load_dlm(run: Run, path) -> D.DlmParams:
    return D.load_dlm(run.inp(path))


def _sae_path(sae_dir: Path, layer: int, k: int) -> Path:
    return sae_dir / f"sae_L{layer}_k{k}.bin"


def _acts_path(acts_dir: Path, layer: int, selector: str) -> Path:
    return acts_dir / f"acts_L{layer}_{selector}.bin"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _layers(args, cfg: ExperimentConfig) -> list[int]:
    return args.layers if args.layers is not None else list(cfg.sae.layers)


def _k_acts(args, cfg: ExperimentConfig) -> list[int]:
    return args.k_act if args.k_act is not None else list(cfg.sae.k_act)


def _progress(label: str):
    def report(step, value):
        log.info("%s step %d loss %.4f", label, step, value)

    return report


# ---------------------------------------------------------------- subcommands


def cmd_train_dlm(run: Run) -> None:
    cfg, a = run.cfg, run.args
    if a.corpus:
        text = run.inp(a.corpus).read_text("utf-8")
    else:
        text = toy.toy_corpus(cfg.model.corpus_chars, run.rng("corpus"))
    cut = int(len(text) * (1 - HELDOUT_FRACTION))
    for name, part in (("train.txt", text[:cut]), ("heldout.txt", text[cut:])):
        run.output(name).write_text(part, encoding="utf-8")
        run.wrote(run.output(name))
    m = cfg.model
    dcfg = D.DlmConfig.for_vocab(VOCAB, d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
                                 context=m.context, rope=int(m.rope), name=m.name)
    train = D.TrainConfig(steps=a.steps if a.steps is not None else m.steps, batch_size=m.batch_size,
                          lr=m.lr, warmup=m.warmup, clip_norm=m.clip_norm)
    init = D.DlmParams.init(dcfg, run.rng("init"))
    held = VOCAB.encode(text[cut:])
    # same seed before and after, so both losses see identical windows and masks
    before = D.heldout_loss(init, held, HELDOUT_BATCHES, m.batch_size, run.rng("eval"))
    params, losses = D.train_dlm(VOCAB.encode(text[:cut]), dcfg, train, run.rng("corruption"),
                                 init=init, progress=_progress("train"))
    after = D.heldout_loss(params, held, HELDOUT_BATCHES, m.batch_size, run.rng("eval"))
    log.info("held-out loss %.4f -> %.4f (ratio %.3f)", before, after, after / before)
    D.save_dlm(params, run.output("dlm.bin"))
    _write_csv(run.output("losses.csv"), ("step", "loss"), enumerate(losses))
    summary = {"heldout_initial": before, "heldout_final": after, "ratio": after / before}
    run.output("heldout_loss.json").write_text(json.dumps(summary, indent=1) + "\n")
    for name in ("dlm.bin", "losses.csv", "heldout_loss.json"):
        run.wrote(run.output(name))


def cmd_finetune_dlm(run: Run) -> None:
    cfg, a = run.cfg, run.args
    base = _load_dlm(run, a.dlm)
    if a.instructions:
        records = D.load_instructions(run.inp(a.instructions))
    else:
        records = toy.toy_instructions(4000, run.rng("instructions"))
        path = run.output("instructions.jsonl")
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        run.wrote(path)
    steps = a.steps if a.steps is not None else cfg.model.finetune_steps
    train = D.TrainConfig(steps=steps, batch_size=cfg.model.batch_size, lr=cfg.model.finetune_lr,
                          warmup=min(cfg.model.warmup, steps), clip_norm=cfg.model.clip_norm)
    params, losses = D.finetune_dlm(base, D.instruction_ids(records, VOCAB), train, run.rng("corruption"),
                                    progress=_progress("finetune"))
    params.config = D.DlmConfig(**{**D.config_dict(base.config), "name": base.config.name + "-sft"})
    D.save_dlm(params, run.output("dlm.bin"))
    _write_csv(run.output("losses.csv"), ("step", "loss"), enumerate(losses))
    run.wrote(run.output("dlm.bin"))
    run.wrote(run.output("losses.csv"))


def cmd_harvest(run: Run) -> None:
    cfg, a = run.cfg, run.args
    dlm = _load_dlm(run, a.dlm)
    ids = _read_corpus(run, a.corpus)
    layers = _layers(a, cfg)
    selectors = [a.selector or cfg.sae.selector]
    budget = a.budget or cfg.sae.budget
    stores = S.harvest_layers(dlm, ids, layers, selectors, budget, run.rng("corruption"))
    for (layer, sel), store in sorted(stores.items()):
        path = _acts_path(run.out, layer, sel)
        S.save_store(store, path)
        run.wrote(path)


def cmd_train_sae(run: Run) -> None:
    cfg, a = run.cfg, run.args
    acts_dir = Path(a.acts_dir)
    selector = a.selector or cfg.sae.selector
    rows = []
    for layer in _layers(a, cfg):
        store = S.load_store(run.inp(_acts_path(acts_dir, layer, selector)))
        x = store.as_float64()
        for k in _k_acts(a, cfg):
            tcfg = S.SaeTrainConfig(width=cfg.sae.width, k_act=k, lam=cfg.sae.lam, epochs=cfg.sae.epochs,
                                    batch_size=cfg.sae.batch_size, lr=cfg.sae.lr)
            meta = {"id": f"{store.backbone}-L{layer}-{selector}-k{k}", "backbone": store.backbone,
                    "layer": layer, "selector": selector, "protocol": store.protocol}
            # one shuffle stream per layer: every K sees the same init and batch order
            res = S.train_sae(x, tcfg, run.rng(f"shuffle-L{layer}"), meta=meta)
            path = _sae_path(run.out, layer, k)
            S.save_sae(res.params, path)
            run.wrote(path)
            ev = F.explained_variance(res.params, x)
            dead = S.dead_latent_count(res.params, x, cfg.autointerp.dead_threshold)
            rows.append((layer, k, res.mse[-1], ev, dead))
            log.info("SAE L%d k=%d EV %.4f dead %d", layer, k, ev, dead)
    _write_csv(run.output("sae_train.csv"), ("layer", "k_act", "final_mse", "ev_train", "dead"), rows)
    run.wrote(run.output("sae_train.csv"))


def _instruction_prompts(run: Run, n: int) -> list[np.ndarray]:
    """Prompt halves of instruction records, formatted up to the assistant turn."""
    if run.args.instructions:
        records = D.load_instructions(run.inp(run.args.instructions))
        pick = run.rng("instructions").choice(len(records), size=min(n, len(records)), replace=False)
        records = [records[i] for i in pick]
    else:
        records = toy.toy_instructions(n, run.rng("instructions"))
    return [VOCAB.encode(D.format_instruction(r["prompt"], "").rstrip("\n")) for r in records]


def _eval_set(run: Run, dlm: D.DlmParams, heldout: np.ndarray, protocol: str) -> F.EvalSet:
    e = run.cfg.eval
    if protocol == "denoising":
        return F.EvalSet(D.sample_windows(heldout, e.eval_windows, dlm.config.context, run.rng("eval")))
    prompts = _instruction_prompts(run, e.n_prompts)
    return F.rollout_eval_set(dlm, prompts, seed_int(run.seed, "generation"), e.gen_length, e.steps, e.strategy)


def _ev_vectors(run: Run, acts_dir: Path, layers, selector: str) -> dict[int, np.ndarray]:
    return {l: S.load_store(run.inp(_acts_path(acts_dir, l, selector))).as_float64() for l in layers}


def cmd_eval_fidelity(run: Run) -> None:
    cfg, a = run.cfg, run.args
    dlm = _load_dlm(run, a.dlm)
    heldout = _read_corpus(run, a.corpus)
    layers = _layers(a, cfg)
    selector = a.selector or cfg.sae.selector
    saes = {(l, k): S.load_sae(run.inp(_sae_path(Path(a.sae_dir), l, k))) for l in layers for k in _k_acts(a, cfg)}
    ev = _ev_vectors(run, Path(a.acts_dir), layers, selector)
    records = []
    for protocol in a.protocol or [cfg.eval.protocol]:
        es = _eval_set(run, dlm, heldout, protocol)
        records += F.sparsity_sweep(dlm, saes, layers, ev, es, seed_int(run.seed, "corruption"), protocol)
    F.write_records_csv(records, run.output("fidelity.csv"))
    run.wrote(run.output("fidelity.csv"))


def cmd_transfer(run: Run) -> None:
    cfg, a = run.cfg, run.args
    target = _load_dlm(run, a.target)
    heldout = _read_corpus(run, a.corpus)
    layers = _layers(a, cfg)
    k = _k_acts(a, cfg)[0]
    selector = a.selector or cfg.sae.selector
    ev = _ev_vectors(run, Path(a.acts_dir), layers, selector)
    groups = {"base": Path(a.base_saes), "sft": Path(a.sft_saes)}
    rows, gaps = [], []
    for protocol in a.protocol or ["denoising", "rollout"]:
        es = _eval_set(run, target, heldout, protocol)
        seed = seed_int(run.seed, "corruption")
        evaluator = F.SpliceEvaluator(target, es, seed)
        by = {}
        for label, d in groups.items():
            saes = {l: S.load_sae(run.inp(_sae_path(d, l, k))) for l in layers}
            by[label] = F.transfer_eval(target, saes, ev, es, seed, protocol, evaluator)
            rows += [(label, *[getattr(r, c) for c in F.CSV_COLUMNS]) for r in by[label]]
        for rb, rs in zip(by["base"], by["sft"]):
            gaps.append((rb.layer, protocol, rb.delta_loss, rs.delta_loss, rb.delta_loss - rs.delta_loss,
                         rb.ev, rs.ev))
    _write_csv(run.output("transfer.csv"), ("source", *F.CSV_COLUMNS), rows)
    _write_csv(run.output("transfer_gap.csv"),
               ("layer", "protocol", "delta_base", "delta_sft", "gap", "ev_base", "ev_sft"), gaps)
    run.wrote(run.output("transfer.csv"))
    run.wrote(run.output("transfer_gap.csv"))


def cmd_steer(run: Run) -> None:
    cfg, a = run.cfg, run.args
    sc = cfg.steering
    dlm = _load_dlm(run, a.dlm)
    sae = S.load_sae(run.inp(a.sae))
    layer = int(sae.meta.get("layer", sc.layer))
    store = S.load_store(run.inp(a.acts))
    corpus_ids = _read_corpus(run, a.corpus)
    selector, k_pos = ST.SteeringSpec.parse_scope(a.token_scope or sc.token_scope)
    alpha = a.alpha if a.alpha is not None else sc.alpha
    x = store.as_float64()
    features = a.features or sc.features
    if not features:
        counts = S.activation_counts(sae, x)
        features = [int(f) for f in np.argsort(-counts, kind="stable")[: sc.n_features] if counts[f] > 0]
    acts = ai.collect_activations(dlm, sae, layer, corpus_ids, dlm.config.context, max_tokens=65_536)
    prefixes = ST.sample_prefixes(ST.load_prefix_pool(a.prefixes), sc.n_prefix, run.rng("prefix"))
    settings = ST.GenerationSettings(sc.gen_length, a.steps or sc.steps, a.strategy or sc.strategy)
    outcomes, texts = [], []
    for f in features:
        terms = ST.feature_lexicon(acts, f, VOCAB, sc.n_terms) or ST.feature_lexicon(acts, f, VOCAB, sc.n_terms, 1)
        if not terms:
            log.warning("feature %d has no active spans in the corpus sample; skipped", f)
            continue
        spec = ST.SteeringSpec(f, alpha, ST.calibrate_m_f(sae, x, f), layer, selector, k_pos)
        (o,) = ST.steering_eval(dlm, sae, VOCAB, [spec], prefixes, ST.LexiconScorer(terms), sc.lam, settings,
                                seed_int(run.seed, "generation"))
        outcomes.append(o)
        texts += [{"feature": f, "terms": terms, "m_f": spec.m_f, **vars(p)} for p in o.prefixes]
    if not outcomes:
        raise RuntimeError("no feature could be evaluated")
    ST.write_outcomes_csv(outcomes, run.output("steering.csv"), run.seed)
    run.output("steering_texts.jsonl").write_text("".join(json.dumps(t) + "\n" for t in texts), encoding="utf-8")
    run.wrote(run.output("steering.csv"))
    run.wrote(run.output("steering_texts.jsonl"))


def cmd_decode_analyze(run: Run) -> None:
    cfg, a = run.cfg, run.args
    oc = cfg.order
    dlm = _load_dlm(run, a.dlm)
    heldout = _read_corpus(run, a.corpus)
    layers = _layers(a, cfg)
    k = _k_acts(a, cfg)[0]
    saes = {l: S.load_sae(run.inp(_sae_path(Path(a.sae_dir), l, k))) for l in layers}
    steps = a.steps or oc.steps
    prompts = D.sample_windows(heldout, oc.n_prompts, oc.prompt_length, run.rng("prompts"))
    trace_dir = run.out / "traces"
    trace_dir.mkdir(exist_ok=True)
    summaries = []
    gen_seed = seed_int(run.seed, "generation")
    for strategy in a.strategy or oc.strategies:
        traces = []
        for j, prompt in enumerate(prompts):
            g = D.generate(dlm, prompt, oc.gen_length, steps, strategy, np.random.default_rng([gen_seed, j]),
                           trace_config=O.TraceConfig(saes, oc.k_feat))
            path = trace_dir / f"{strategy}_{j:03d}.dtrc"
            O.save_trace(g.trace, path)
            run.wrote(path)
            traces.append(g.trace)
        summaries.append(O.summarize(traces, oc.k_feat))
    for path in O.write_summary_csvs(summaries, run.out):
        run.wrote(path)


def cmd_autointerp(run: Run) -> None:
    cfg, a = run.cfg, run.args
    ac = cfg.autointerp
    dlm = _load_dlm(run, a.dlm)
    sae = S.load_sae(run.inp(a.sae))
    layer = int(sae.meta.get("layer", 0))
    ids = _read_corpus(run, a.corpus)
    icfg = ai.AutointerpConfig(
        context_length=min(ac.context_length, dlm.config.context),
        n_latents=a.n_latents or ac.n_latents,
        latent_batch_size=ac.latent_batch_size,
        dead_threshold=ac.dead_threshold,
        n_neg_score=ac.n_scoring - 4,
        max_in_flight=ac.max_in_flight,
        seed=seed_int(run.seed, "judge-mock"),
    )
    kind = a.judge or ac.judge
    http = {"base_url": ac.base_url, "model": ac.model, "token_env": ac.token_env, "timeout": ac.timeout,
            "retries": ac.retries} if kind == "http" else {}
    judge = ai.make_judge(kind, seed_int(run.seed, "judge-mock"), **http)
    acts = ai.collect_activations(dlm, sae, layer, ids, icfg.context_length, max_tokens=ac.max_tokens)
    results = ai.run_autointerp(acts, VOCAB, judge, icfg, run.output("autointerp.jsonl"))
    scored = [r.accuracy for r in results if r.accuracy is not None]
    log.info("auto-interp: %d features, %d scored, mean accuracy %s", len(results), len(scored),
             f"{np.mean(scored):.3f}" if scored else "n/a")
    run.wrote(run.output("autointerp.jsonl"))


def cmd_plot_data(run: Run) -> None:
    """Collect per-run CSVs into plot-ready tables (one per figure type)."""
    tables: dict[str, list[dict]] = {}
    sources = {
        "fidelity.csv": "sparsity_fidelity",
        "transfer_gap.csv": "transfer_gap",
        "steering.csv": "steering_scores",
        "drift_by_layer.csv": "order_drift",
    }
    for d in run.args.inputs:
        for p in sorted(Path(d).glob("*.csv")):
            key = sources.get(p.name) or ("order_" + p.stem if p.name.startswith(("heatmap_", "tau_")) else None)
            if key is None:
                continue
            with open(run.inp(p), newline="") as fh:
                for row in csv.DictReader(fh):
                    tables.setdefault(key, []).append({"run": Path(d).name, **row})
    if not tables:
        raise RuntimeError("no known result tables found in the inputs")
    for key, rows in sorted(tables.items()):
        path = run.output(f"plot_{key}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        run.wrote(path)


# ---------------------------------------------------------------- parser


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("-v", "--verbose", action="store_true")


COMMANDS: dict[str, tuple[Callable[[Run], None], str]] = {
    "train-dlm": (cmd_train_dlm, "train the toy diffusion LM"),
    "finetune-dlm": (cmd_finetune_dlm, "instruction-tune a trained model"),
    "harvest": (cmd_harvest, "collect residual activations under corruption"),
    "train-sae": (cmd_train_sae, "fit Top-K SAEs on harvested activations"),
    "eval-fidelity": (cmd_eval_fidelity, "explained variance and spliced-loss sweep"),
    "transfer": (cmd_transfer, "insert base and fine-tuned SAEs into one backbone"),
    "steer": (cmd_steer, "diffusion-time feature steering evaluation"),
    "decode-analyze": (cmd_decode_analyze, "feature dynamics across decoding orders"),
    "autointerp": (cmd_autointerp, "explain and score features with a judge"),
    "plot-data": (cmd_plot_data, "gather result tables for plotting"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlmlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, help=text, description=text) for name, (_, text) in COMMANDS.items()}
    for sp in p.values():
        _common(sp)

    p["train-dlm"].add_argument("--corpus", type=Path, help="UTF-8 text; a toy corpus is generated if omitted")
    p["train-dlm"].add_argument("--steps", type=int)

    p["finetune-dlm"].add_argument("--dlm", type=Path, required=True)
    p["finetune-dlm"].add_argument("--instructions", type=Path, help="JSON lines with prompt/response")
    p["finetune-dlm"].add_argument("--steps", type=int)

    for name in ("harvest", "train-sae", "eval-fidelity", "transfer", "decode-analyze"):
        p[name].add_argument("--layers", type=_int_list, help="comma-separated layer indices")
    for name in ("harvest", "train-sae", "eval-fidelity", "transfer"):
        p[name].add_argument("--selector", choices=S.SELECTORS)
    for name in ("train-sae", "eval-fidelity", "transfer", "decode-analyze"):
        p[name].add_argument("--k-act", type=_int_list, help="comma-separated Top-K budgets")

    p["harvest"].add_argument("--dlm", type=Path, required=True)
    p["harvest"].add_argument("--corpus", type=Path, required=True)
    p["harvest"].add_argument("--budget", type=int, help="vectors per (layer, selector) store")

    p["train-sae"].add_argument("--acts-dir", type=Path, required=True)

    p["eval-fidelity"].add_argument("--dlm", type=Path, required=True)
    p["eval-fidelity"].add_argument("--sae-dir", type=Path, required=True)
    p["eval-fidelity"].add_argument("--acts-dir", type=Path, required=True)
    p["eval-fidelity"].add_argument("--corpus", type=Path, required=True, help="held-out text")
    p["eval-fidelity"].add_argument("--protocol", action="append", choices=F.PROTOCOLS)
    p["eval-fidelity"].add_argument("--instructions", type=Path, help="JSON lines; rollout prompts come from here")

    p["transfer"].add_argument("--target", type=Path, required=True, help="backbone receiving the SAEs")
    p["transfer"].add_argument("--base-saes", type=Path, required=True)
    p["transfer"].add_argument("--sft-saes", type=Path, required=True)
    p["transfer"].add_argument("--acts-dir", type=Path, required=True)
    p["transfer"].add_argument("--corpus", type=Path, required=True)
    p["transfer"].add_argument("--protocol", action="append", choices=F.PROTOCOLS)
    p["transfer"].add_argument("--instructions", type=Path, help="JSON lines; rollout prompts come from here")

    p["steer"].add_argument("--dlm", type=Path, required=True)
    p["steer"].add_argument("--sae", type=Path, required=True)
    p["steer"].add_argument("--acts", type=Path, required=True, help="store used to calibrate m_f")
    p["steer"].add_argument("--corpus", type=Path, required=True, help="text used to derive concept terms")
    p["steer"].add_argument("--features", type=_int_list)
    p["steer"].add_argument("--alpha", type=float)
    p["steer"].add_argument("--token-scope", help="all | update | topk:<n>")
    p["steer"].add_argument("--steps", type=int)
    p["steer"].add_argument("--strategy", choices=D.STRATEGIES)
    p["steer"].add_argument("--prefixes", type=Path, help="prefix pool file (one per line)")

    p["decode-analyze"].add_argument("--dlm", type=Path, required=True)
    p["decode-analyze"].add_argument("--sae-dir", type=Path, required=True)
    p["decode-analyze"].add_argument("--corpus", type=Path, required=True)
    p["decode-analyze"].add_argument("--strategy", action="append", choices=D.STRATEGIES)
    p["decode-analyze"].add_argument("--steps", type=int)

    p["autointerp"].add_argument("--dlm", type=Path, required=True)
    p["autointerp"].add_argument("--sae", type=Path, required=True)
    p["autointerp"].add_argument("--corpus", type=Path, required=True)
    p["autointerp"].add_argument("--judge", choices=("substring", "oracle", "random", "http"))
    p["autointerp"].add_argument("--n-latents", type=int)
    p["autointerp"].add_argument("--resume", action="store_true", help="continue an interrupted run in --out")

    p["plot-data"].add_argument("--inputs", type=Path, nargs="+", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.command == "steer" and args.token_scope:
            ST.SteeringSpec.parse_scope(args.token_scope)
        out = prepare_out_dir(args.out, args.force or getattr(args, "resume", False))
    except (ConfigError, OutputExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = Run(args, cfg, out, argv)
    if args.config:
        run.inp(args.config)
    func = COMMANDS[args.command][0]
    try:
        func(run)
    except Exception as exc:
        log.exception("%s failed", args.command)
        run.manifest.partial = sorted(run.manifest.outputs)
        run.manifest.finish(out, status=f"failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run.manifest.finish(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
