"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (sweep, transfer, end-to-end) share one default-config
pipeline run driven through ``dlmlab.cli.main``; expect about half an hour
on a single core.
"""

import csv
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dlmlab import autointerp as A
from dlmlab import cli
from dlmlab import dlm as D
from dlmlab import fidelity as F
from dlmlab import numerics as nx
from dlmlab import order as O
from dlmlab import sae as S
from dlmlab import steering as ST
from dlmlab import synthetic as syn
from dlmlab.config import MANIFEST_NAME, RunManifest, sha256_file, verify_inputs
from tests.conftest import make_model, make_sae, record_criterion
from tests.test_order import oracle_drift, oracle_flips, oracle_lock, oracle_premask, random_trace

SWEEP_K = (8, 16, 32, 64, 80, 128)
N_LAYERS = 6
PIPE_LAYER = 2
PIPE_K = 32


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Pipeline:
    """Default-config CLI runs under one root, timed per stage."""

    def __init__(self, root: Path):
        self.root = root
        self.codes: dict[str, int] = {}
        self.seconds: dict[str, float] = {}

    def __getitem__(self, name: str) -> Path:
        return self.root / name

    def run(self, name: str, command: str, *argv) -> int:
        t0 = time.perf_counter()
        code = cli.main([command, "--seed", "0", "--out", str(self[name]), *map(str, argv)])
        self.seconds[name] = time.perf_counter() - t0
        self.codes[name] = code
        return code

    def manifest(self, name: str) -> RunManifest:
        return RunManifest.load(self[name] / MANIFEST_NAME)


@pytest.fixture(scope="module")
def pipe(tmp_path_factory) -> Pipeline:
    """Train 2k steps, harvest 64k vectors per layer, one SAE, then every analysis stage."""
    p = Pipeline(tmp_path_factory.mktemp("e2e"))
    sae = p["sae"] / f"sae_L{PIPE_LAYER}_k{PIPE_K}.bin"
    stages = [
        ("base", "train-dlm"),
        ("acts", "harvest", "--dlm", p["base"] / "dlm.bin", "--corpus", p["base"] / "train.txt"),
        ("sae", "train-sae", "--acts-dir", p["acts"], "--layers", PIPE_LAYER, "--k-act", PIPE_K),
        ("fid", "eval-fidelity", "--dlm", p["base"] / "dlm.bin", "--sae-dir", p["sae"], "--acts-dir", p["acts"],
         "--corpus", p["base"] / "heldout.txt", "--layers", PIPE_LAYER, "--k-act", PIPE_K),
        ("steer", "steer", "--dlm", p["base"] / "dlm.bin", "--sae", sae,
         "--acts", p["acts"] / f"acts_L{PIPE_LAYER}_mask.bin", "--corpus", p["base"] / "heldout.txt"),
        ("order", "decode-analyze", "--dlm", p["base"] / "dlm.bin", "--sae-dir", p["sae"],
         "--corpus", p["base"] / "heldout.txt", "--layers", PIPE_LAYER, "--k-act", PIPE_K),
        ("ai", "autointerp", "--dlm", p["base"] / "dlm.bin", "--sae", sae, "--corpus", p["base"] / "heldout.txt",
         "--judge", "substring"),
    ]
    for name, command, *argv in stages:
        if p.run(name, command, *argv) != 0:
            break
    return p


@pytest.fixture(scope="module")
def sweep(pipe) -> Pipeline:
    pipe.run("sweep", "train-sae", "--acts-dir", pipe["acts"], "--k-act", ",".join(map(str, SWEEP_K)))
    pipe.run("sweep_fid", "eval-fidelity", "--dlm", pipe["base"] / "dlm.bin", "--sae-dir", pipe["sweep"],
             "--acts-dir", pipe["acts"], "--corpus", pipe["base"] / "heldout.txt",
             "--k-act", ",".join(map(str, SWEEP_K)))
    return pipe


@pytest.fixture(scope="module")
def trained(pipe):
    assert pipe.codes.get("base") == 0, "training stage failed"
    return D.load_dlm(pipe["base"] / "dlm.bin")


# ---------------------------------------------------------------- 1


def test_c01_gradient_check():
    t0 = time.perf_counter()
    errs = []
    vocab = D.Vocab.from_chars("abcdefghij")
    model = make_model(vocab, d=16, layers=2, heads=2, context=8, seed=1)
    ids = np.random.default_rng(1).integers(0, 10, (3, 8))
    draw = D.sample_corruption(ids, np.random.default_rng(7), model.config.mask_id)
    errs.append(nx.finite_diff_check(lambda: D.masked_ce_loss(model, draw), model.parameters()))
    sae = make_sae(d=16, width=32, k=5)
    x = nx.Tensor(np.random.default_rng(12).normal(size=(6, 16)))
    for lam in (0.0, 0.3):
        errs.append(nx.finite_diff_check(lambda: S.sae_loss(sae, x, lam)[0], sae.parameters()))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-3 and elapsed < 30
    record_criterion(1, ok, f"gradient check max rel err {max(errs):.2e} (< 1e-3), {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_c02_identity_splice_is_zero(trained, pipe):
    held = D.Vocab.bytes().encode((pipe["base"] / "heldout.txt").read_text("utf-8"))
    es = F.EvalSet(D.sample_windows(held, 64, trained.config.context, np.random.default_rng(0)))
    ev = F.SpliceEvaluator(trained, es, seed=1)
    deltas = [ev.delta(layer, lambda X: X).delta for layer in range(N_LAYERS)]
    worst = max(abs(d) for d in deltas)
    ok = trained.config.n_layers == N_LAYERS and worst < 1e-10
    record_criterion(2, ok, f"identity splice max |dL| over {N_LAYERS} layers = {worst:.1e} (< 1e-10)")
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_sparsity_fidelity_monotone(sweep):
    assert sweep.codes["sweep"] == 0 and sweep.codes["sweep_fid"] == 0
    recs = rows(sweep["sweep_fid"] / "fidelity.csv")
    problems = []
    for layer in range(N_LAYERS):
        by_k = {int(r["k_act"]): r for r in recs if int(r["layer"]) == layer}
        assert sorted(by_k) == list(SWEEP_K)
        evs = [float(by_k[k]["ev"]) for k in SWEEP_K]
        for (k0, e0), (k1, e1) in zip(zip(SWEEP_K, evs), zip(SWEEP_K[1:], evs[1:])):
            if e1 < e0 - 0.01:
                problems.append(f"L{layer} EV {k0}->{k1}: {e0:.4f}->{e1:.4f}")
        d8, d128 = abs(float(by_k[8]["delta_loss"])), abs(float(by_k[128]["delta_loss"]))
        if d128 > d8:
            problems.append(f"L{layer} |dL| k128 {d128:.3f} > k8 {d8:.3f}")
    seconds = sweep.manifest("sweep").wall_clock_s + sweep.manifest("sweep_fid").wall_clock_s
    ok = not problems and seconds < 15 * 60
    detail = "; ".join(problems) if problems else "EV non-decreasing within 0.01, |dL|@128 <= |dL|@8 on all layers"
    record_criterion(3, ok, f"{detail}; sweep {seconds / 60:.1f} min (< 15)")
    assert ok


# ---------------------------------------------------------------- 4


def full_sort_support(pre: np.ndarray, k: int) -> np.ndarray:
    relu = np.maximum(pre, 0.0)
    order = np.argsort(-relu, axis=1, kind="stable")  # ties -> lowest index first
    keep = np.zeros(pre.shape, dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    return keep & (relu > 0)


def test_c04_topk_exactness():
    rng = np.random.default_rng(2024)
    total = violations = mismatches = 0
    for trial in range(100):
        d = int(rng.integers(4, 33))
        width = int(rng.integers(d, 129))
        k = int(rng.integers(1, width + 1))
        sae = S.SaeParams.init(d, width, k, rng)
        sae.b_enc.data[:] = rng.normal(0.0, 0.3, width)
        if trial % 2:
            # duplicated encoder rows force exact ties in the pre-activations
            dup = rng.choice(width, size=width // 2)
            sae.w_enc.data[dup] = sae.w_enc.data[0]
            sae.b_enc.data[dup] = sae.b_enc.data[0]
        x = rng.normal(size=(1000, d))
        h = S.encode(sae, x)
        pre = x @ sae.w_enc.data.T + sae.b_enc.data
        violations += int((np.count_nonzero(h, axis=1) > k).sum())
        mismatches += int(((h != 0) != full_sort_support(pre, k)).any(axis=1).sum())
        total += len(x)
    ok = total == 100_000 and violations == 0 and mismatches == 0
    record_criterion(4, ok, f"{total} encodes: {violations} budget violations, {mismatches} oracle mismatches")
    assert ok


# ---------------------------------------------------------------- 5


def expected_masked(k: int, K: int, n_gen: int) -> int:
    """Masked count at rate k/K, rounded half up, in exact arithmetic."""
    return math.floor(Fraction(k, K) * n_gen + Fraction(1, 2))


def test_c05_remasking_schedule():
    model = make_model(D.Vocab.bytes(), d=16, layers=2, heads=2, context=32, seed=5, std=0.5)
    count_bad = commit_bad = runs = 0
    for strategy in D.STRATEGIES:
        for seed in range(100):
            rng = np.random.default_rng([seed, D.STRATEGIES.index(strategy)])
            n_gen = int(rng.integers(1, 17))
            K = int(rng.integers(1, 21))
            prompt = rng.integers(32, 127, size=int(rng.integers(0, 9)))
            g = D.generate(model, prompt, n_gen, K, strategy, rng, keep_states=True)
            runs += 1
            start = prompt.size
            if len(g.states) != K + 1 or g.states[0].mask[start:].sum() != n_gen:
                count_bad += 1
                continue
            for j in range(1, K + 1):
                cur, prev = g.states[j], g.states[j - 1]
                if cur.mask.sum() != expected_masked(K - j, K, n_gen):
                    count_bad += 1
                # monotone commitment: masks only shrink, committed tokens never change, prompt never masked
                committed = ~prev.mask
                if (cur.mask & ~prev.mask).any() or cur.mask[:start].any():
                    commit_bad += 1
                if not np.array_equal(cur.ids[committed], prev.ids[committed]):
                    commit_bad += 1
            if g.states[-1].mask.any() or not np.array_equal(g.ids[:start], prompt):
                commit_bad += 1
    ok = count_bad == 0 and commit_bad == 0 and runs == 100 * len(D.STRATEGIES)
    record_criterion(5, ok, f"{runs} generations: {count_bad} schedule violations, {commit_bad} commitment violations")
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_steering_null_and_row_audit(trained, pipe):
    vocab = D.Vocab.bytes()
    sae = S.load_sae(pipe["sae"] / f"sae_L{PIPE_LAYER}_k{PIPE_K}.bin")
    x = S.load_store(pipe["acts"] / f"acts_L{PIPE_LAYER}_mask.bin").as_float64()
    counts = S.activation_counts(sae, x)
    f = int(np.argmax(counts))
    m_f = ST.calibrate_m_f(sae, x, f)
    prompts = [vocab.encode(p) for p in ST.sample_prefixes(ST.load_prefix_pool(), 4, np.random.default_rng(0))]
    null_bad = 0
    for prompt in prompts:
        for strategy in D.STRATEGIES:
            base = D.generate(trained, prompt, 30, 30, strategy, np.random.default_rng(1))
            for scope in ("all", "update", "topk:5"):
                sel, kp = ST.SteeringSpec.parse_scope(scope)
                hook = ST.SteerHook(ST.SteeringSpec(f, 0.0, m_f, PIPE_LAYER, sel, kp), sae)
                out = D.generate(trained, prompt, 30, 30, strategy, np.random.default_rng(1), steer=hook,
                                 steer_layer=PIPE_LAYER)
                null_bad += not np.array_equal(out.ids, base.ids)

    seen = []

    def spy(X, state):
        seen.append((X.copy(), state.copy()))
        return X

    D.generate(trained, prompts[0], 30, 10, "entropy", np.random.default_rng(2), steer=spy, steer_layer=PIPE_LAYER)
    audit_bad = 0
    for X, state in seen:
        a = ST.steer_hook(X, ST.SteeringSpec(f, 2.0, m_f, PIPE_LAYER, "all"), state, sae)
        u = ST.steer_hook(X, ST.SteeringSpec(f, 2.0, m_f, PIPE_LAYER, "update"), state, sae)
        touched = np.any(u != X, axis=1)
        audit_bad += not np.array_equal(touched, state.mask)
        audit_bad += not np.array_equal(a[state.mask], u[state.mask])
        audit_bad += not np.array_equal(np.any(a != u, axis=1), ~state.mask)
    ok = null_bad == 0 and audit_bad == 0 and len(seen) == 10
    record_criterion(6, ok, f"alpha=0: {null_bad} non-identical generations of {len(prompts) * 9}; "
                            f"row audit over {len(seen)} steps: {audit_bad} violations")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_score_algebra_and_planted_harness():
    grid_err = max(abs(ST.steering_score(c, p) - (c + 0.3 * p))
                   for c in np.linspace(-1, 1, 5) for p in np.linspace(-1, 1, 5))
    pool = ST.load_prefix_pool()
    hits = 0
    for seed in range(20):
        ps = syn.planted_steering(seed)
        spec = ST.SteeringSpec(ps.feature, 2.0, ps.m_f, ps.layer)
        prefixes = ST.sample_prefixes(pool, 5, np.random.default_rng(seed))
        (out,) = ST.steering_eval(ps.dlm, ps.sae, ps.vocab, [spec], prefixes, ST.LexiconScorer(ps.terms), seed=seed)
        hits += out.C > 0
    ok = grid_err <= 1e-12 and hits >= 18
    record_criterion(7, ok, f"5x5 score grid max err {grid_err:.1e}; planted C > 0 in {hits}/20 seeds (>= 18)")
    assert ok


# ---------------------------------------------------------------- 8


def exact_match(got: np.ndarray, expect: dict) -> bool:
    return all(got[key] == val for key, val in expect.items()) and int(np.isnan(got).sum()) == got.size - len(expect)


def test_c08_order_metrics_match_oracle():
    rng = np.random.default_rng(8)
    bad = []
    for j in range(50):
        width = int(rng.integers(2, 33))
        k_feat = int(rng.integers(1, min(width, 10) + 1))
        K, N = int(rng.integers(1, 17)), int(rng.integers(1, 13))
        t = random_trace(1000 + j, K=K, N=N, n_layers=int(rng.integers(1, 4)), k_feat=k_feat, width=width)
        if not exact_match(O.premask_stability(t), oracle_premask(t)):
            bad.append(f"trace {j}: pre-mask stability")
        lock = O.top1_lock_rate(t)[:, 1:]
        expect_lock = {(li, k - 1): v for (li, k), v in oracle_lock(t).items()}
        if not exact_match(lock, expect_lock):
            bad.append(f"trace {j}: lock rate")
        flips = O.top1_flip_count(t)
        if any(int(flips[key]) != v for key, v in oracle_flips(t).items()):
            bad.append(f"trace {j}: flip count")
        if any(i not in t.masked[t.K] for i in range(t.N)):
            if not exact_match(O.postdecode_drift(t).drift, oracle_drift(t)):
                bad.append(f"trace {j}: post-decode drift")
    ok = not bad
    record_criterion(8, ok, "50 traces, all four metrics equal to brute force" if ok else "; ".join(bad[:5]))
    assert ok


# ---------------------------------------------------------------- 9


LISTED = [
    ({1, 4, 7, 9}, {1, 4, 7, 9}, 1.00),
    ({1, 4, 7, 9, 10, 13}, {2, 4, 7, 13}, 0.714),
    ({5, 8, 14}, {5, 6, 8, 14}, 0.929),
    (set(range(1, 15)), {3, 5, 9, 14}, 0.286),
]


def test_c09_listed_accuracies():
    got = [round(A.agreement_accuracy(p, t, 14), 3) for p, t, _ in LISTED]
    ok = got == [e for _, _, e in LISTED]
    record_criterion(9, ok, f"agreement accuracy on 14 examples: {got}")
    assert ok


# ---------------------------------------------------------------- 10


@pytest.fixture(scope="module")
def transfer(sweep) -> Pipeline:
    p = sweep
    for steps in (0, 100):
        tag = f"ft{steps}"
        p.run(tag, "finetune-dlm", "--dlm", p["base"] / "dlm.bin", "--steps", steps)
        p.run(f"{tag}_acts", "harvest", "--dlm", p[tag] / "dlm.bin", "--corpus", p["base"] / "train.txt")
        p.run(f"{tag}_saes", "train-sae", "--acts-dir", p[f"{tag}_acts"], "--k-act", PIPE_K)
        p.run(f"{tag}_transfer", "transfer", "--target", p[tag] / "dlm.bin", "--base-saes", p["sweep"],
              "--sft-saes", p[f"{tag}_saes"], "--acts-dir", p["acts"], "--corpus", p["base"] / "heldout.txt",
              "--k-act", PIPE_K, "--protocol", "denoising", "--protocol", "rollout")
    return p


def test_c10_transfer_harness(transfer):
    p = transfer
    failed = [n for n in p.codes if n.startswith("ft") and p.codes[n] != 0]
    assert not failed, f"stages failed: {failed}"
    numeric = ("layer", "k_act", "ev", "delta_loss", "protocol", "tokens", "seed")
    recs = rows(p["ft0_transfer"] / "transfer.csv")
    base = [tuple(r[c] for c in numeric) for r in recs if r["source"] == "base"]
    sft = [tuple(r[c] for c in numeric) for r in recs if r["source"] == "sft"]
    degenerate = base == sft and len(base) == 2 * N_LAYERS
    gaps = rows(p["ft100_transfer"] / "transfer_gap.csv")
    cover = {(int(g["layer"]), g["protocol"]) for g in gaps}
    finite = all(math.isfinite(float(g["gap"])) for g in gaps)
    moved = any(float(g["gap"]) != 0.0 for g in gaps)
    full = cover == {(l, pr) for l in range(N_LAYERS) for pr in ("denoising", "rollout")}
    ok = degenerate and full and finite and moved
    record_criterion(10, ok, f"0-step records identical: {degenerate}; 100-step gaps for {len(cover)} "
                             f"(layer, protocol) pairs, finite: {finite}, nonzero: {moved}")
    assert ok


# ---------------------------------------------------------------- 11


PIPE_STAGES = ("base", "acts", "sae", "fid", "steer", "order", "ai")


def test_c11_end_to_end(pipe):
    codes = {n: pipe.codes.get(n) for n in PIPE_STAGES}
    elapsed = sum(pipe.seconds.get(n, 0.0) for n in PIPE_STAGES)
    problems = [f"{n} exit {c}" for n, c in codes.items() if c != 0]
    produced: dict[str, str] = {}
    manifests = {}
    for n in PIPE_STAGES:
        if (pipe[n] / MANIFEST_NAME).exists():
            manifests[n] = pipe.manifest(n)
            produced.update(manifests[n].outputs)
    for n in PIPE_STAGES:
        m = manifests.get(n)
        if m is None or m.status != "ok":
            problems.append(f"{n} manifest missing or not ok")
            continue
        orphans = [path for path, digest in m.inputs.items() if produced.get(path) != digest]
        if orphans or verify_inputs(m):
            problems.append(f"{n} inputs without a producing run: {orphans}")
        if any(sha256_file(path) != digest for path, digest in m.outputs.items()):
            problems.append(f"{n} output digests stale")
    ratio = float("nan")
    if codes["base"] == 0:
        held = json.loads((pipe["base"] / "heldout_loss.json").read_text())
        ratio = held["ratio"]
        n_vectors = S.load_store(pipe["acts"] / f"acts_L{PIPE_LAYER}_mask.bin").count
        if n_vectors != 65_536:
            problems.append(f"harvested {n_vectors} vectors")
        if len(rows(pipe["base"] / "losses.csv")) != 2000:
            problems.append("training did not run 2000 steps")
    if not ratio < 0.5:
        problems.append(f"held-out loss ratio {ratio:.3f}")
    ok = not problems and elapsed < 20 * 60
    record_criterion(11, ok, f"pipeline {elapsed / 60:.1f} min (< 20), held-out loss ratio {ratio:.3f} (< 0.5)"
                             + (f"; {'; '.join(problems)}" if problems else "; exit 0 and complete manifest chain"))
    assert ok
