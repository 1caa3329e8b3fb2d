import numpy as np
import pytest

from dlmlab import dlm as D
from dlmlab.sae import SaeParams


@pytest.fixture
def small_vocab():
    return D.Vocab.from_chars("abcdefghij")


def make_model(vocab, d=16, layers=2, heads=2, context=8, seed=0, std=0.3, rope=1):
    cfg = D.DlmConfig.for_vocab(vocab, d_model=d, n_layers=layers, n_heads=heads, context=context, rope=rope)
    return D.DlmParams.init(cfg, np.random.default_rng(seed), std=std)


@pytest.fixture
def tiny_model(small_vocab):
    return make_model(small_vocab)


@pytest.fixture
def byte_model():
    return make_model(D.Vocab.bytes(), d=16, layers=2, heads=2, context=64, seed=3, std=0.5)


def make_sae(d=16, width=32, k=4, seed=0):
    return SaeParams.init(d, width, k, np.random.default_rng(seed))


def patterned_corpus(n=2000, seed=0):
    """Ids over a 10-letter alphabet with strong local structure (repeated short motifs)."""
    rng = np.random.default_rng(seed)
    motifs = [np.array(m) for m in ([0, 1, 2, 3], [4, 5, 6], [7, 8, 9, 8], [2, 4, 6, 8])]
    parts = []
    while sum(map(len, parts)) < n:
        parts.append(motifs[rng.integers(len(motifs))])
    return np.concatenate(parts)[:n]


@pytest.fixture(scope="session")
def trained_tiny():
    vocab = D.Vocab.from_chars("abcdefghij")
    cfg = D.DlmConfig.for_vocab(vocab, d_model=16, n_layers=2, n_heads=2, context=8)
    params, _ = D.train_dlm(patterned_corpus(), cfg, D.TrainConfig(steps=300, batch_size=8, lr=1e-2, warmup=20),
                            np.random.default_rng(0), init_rng=np.random.default_rng(1))
    return params


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict and echo it; the summary hook prints them all at the end."""
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
