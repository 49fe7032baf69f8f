import numpy as np
import pytest

from siamsearch.corpus import EncodedCorpus, build_vocabs
from siamsearch.models import ModelConfig, build
from siamsearch.synthcorpus import SynthSpec, generate_records


@pytest.fixture(scope="session")
def toy_records():
    return generate_records(SynthSpec(n_records=32, n_concepts=8, noise=0.0, seed=1))


@pytest.fixture(scope="session")
def toy_vocabs(toy_records):
    return build_vocabs(toy_records, min_freq=1)


@pytest.fixture(scope="session")
def toy_data(toy_records, toy_vocabs):
    return EncodedCorpus.from_records(toy_records, toy_vocabs)


def small_model(vocabs, arch="dcs", s_emb=100, seed=0, **kw):
    kw.setdefault("embed_dim", 8)
    kw.setdefault("lstm_hidden", 8)
    cfg = ModelConfig(arch=arch, s_emb=s_emb, seed=seed, vocab_sizes={f: len(v) for f, v in vocabs.items()}, **kw)
    return build(cfg)


def padded_batch(batch: dict, extra: int) -> dict:
    """Same batch with ``extra`` more pad columns on every field."""
    return {f: (np.pad(ids, ((0, 0), (0, extra))), lens) for f, (ids, lens) in batch.items()}


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
