import numpy as np
import pytest

from atm import autodiff as ad
from atm.corpus import CorpusConfig, build_dataset
from atm.models import ModelSizes
from atm.pipeline import load_split
from atm.train import TrainData

TINY_CORPUS = CorpusConfig(
    master_seed=3,
    train_dialogues=5,
    val_dialogues=1,
    test_se_dialogues=1,
    test_si_dialogues=2,
    noises=("white", "pink"),
    snrs_per_pair=1,
    test_snrs=(0.0,),
)
TINY_SIZES = ModelSizes(lstm_hidden=8, si_hidden=(16, 8), att_hidden=(8,), context=2)


def numeric_grad(loss_fn, t: ad.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``loss_fn()`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = loss_fn().item()
        t.data[idx] = orig - h
        down = loss_fn().item()
        t.data[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def max_grad_error(loss_fn, params: dict[str, ad.Tensor]) -> tuple[float, str]:
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    worst, where = 0.0, ""
    for name, p in params.items():
        err = rel_error(grads[p], numeric_grad(loss_fn, p))
        if err > worst:
            worst, where = err, name
    return worst, where


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    build_dataset(TINY_CORPUS, root)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    train = load_split(tiny_corpus, "train")
    val = load_split(tiny_corpus, "val")
    return TrainData.from_utterances(train, val, TINY_SIZES.n_classes)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion, printed after the run
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []
ACCEPTANCE_NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    for line in ACCEPTANCE_NOTES:
        terminalreporter.write_line(line)
