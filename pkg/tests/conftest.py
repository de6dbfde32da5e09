import pytest
import torch
from _report import ACCEPTANCE

from ptqlab.corpus import synthetic_corpus
from ptqlab.toymodel import PRESETS, TrainConfig, make_dataset, train

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def corpus() -> bytes:
    return synthetic_corpus(150_000, seed=0)


@pytest.fixture(scope="session")
def tiny(corpus):
    """A briefly trained s1 model and its dataset; shared by the unit tests."""
    cfg = PRESETS["s1"]
    ds = make_dataset(corpus, cfg.ctx_len, 0)
    ckpt = train(corpus, cfg, seed=0, train_config=TrainConfig(steps=120, warmup=20), dataset=ds)
    return ckpt, ds
