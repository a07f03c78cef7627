import numpy as np
import pytest

from stast import autodiff as ad
from stast.data import SynthConfig, collate, downsample_corpus, generate_corpus
from stast.model import ModelConfig, STASTModel

# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision("float64"):
        ad.reset_tape()
        yield
    ad.reset_tape()


def grad_check(loss_fn, tensors, step=1e-4, coords=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` rebuilds the graph and returns a scalar Tensor.  ``coords``
    limits the check to that many random entries per tensor.
    """
    for t in tensors:
        t.grad = None
    ad.reset_tape()
    ad.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f():
            with ad.no_grad():
                return float(loss_fn().data)

        if coords is None:
            numeric = ad.numeric_gradient(f, t, step)
            worst = max(worst, ad.relative_error(analytic, numeric))
            continue
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        num = np.zeros(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            num[j] = (fp - fm) / (2 * step)
        worst = max(worst, ad.relative_error(analytic.reshape(-1)[picks], num))
    return worst


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_feat=4, vocab_size=7, d_model=8, n_heads=2, d_ff=16,
                       n_layers_acoustic=1, n_layers_semantic=1, n_layers_decoder=1, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_cfg):
    return STASTModel(tiny_cfg, seed=3)


@pytest.fixture
def tiny_corpus():
    cfg = SynthConfig(seed=5, vocab_size=7, d_feat=4, min_len=2, max_len=3, n_utterances=6)
    corpus, vocab = generate_corpus(cfg)
    return downsample_corpus(corpus), vocab


@pytest.fixture
def tiny_batch(tiny_corpus):
    return collate(tiny_corpus[0][:3])
