import numpy as np
import pytest

from smlhsi import _backend
from smlhsi.sml import relative_error


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    if request.param == "numba" and not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    previous = _backend.get_backend()
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(previous)


def conv_oracle(x, w, b):
    """Direct nested-loop valid convolution, channels-last."""
    n, h, wd, c = x.shape
    o_ch, kh, kw, _ = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, o_ch))
    for s in range(n):
        for i in range(h - kh + 1):
            for j in range(wd - kw + 1):
                for o in range(o_ch):
                    acc = b[o]
                    for a in range(kh):
                        for q in range(kw):
                            for ch in range(c):
                                acc += x[s, i + a, j + q, ch] * w[o, a, q, ch]
                    out[s, i, j, o] = acc
    return out


def network_gradcheck(net, x, rng, n_coords=20, h=1e-5):
    """Central differences of J = sum(F * Rf) + sum(L * Rl) at random
    parameter coordinates. Returns the max relative error."""
    feats, logits, cache = net.forward(x)
    rf = rng.standard_normal(feats.shape)
    rl = rng.standard_normal(logits.shape)
    grads = net.backward(cache, rf, rl)

    def objective():
        f, lg, _ = net.forward(x)
        return float((f * rf).sum() + (lg * rl).sum())

    sizes = np.array([p.size for p in net.params])
    worst = 0.0
    for _ in range(n_coords):
        k = int(rng.choice(len(sizes), p=sizes / sizes.sum()))
        idx = int(rng.integers(sizes[k]))
        flat = net.params[k].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        plus = objective()
        flat[idx] = orig - h
        minus = objective()
        flat[idx] = orig
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, float(relative_error(grads[k].reshape(-1)[idx], numeric)))
    return worst


def network_gradcheck_all(net, x, rng, h=1e-5):
    """Every parameter coordinate (small nets only)."""
    feats, logits, cache = net.forward(x)
    rf = rng.standard_normal(feats.shape)
    rl = rng.standard_normal(logits.shape)
    grads = net.backward(cache, rf, rl)
    worst = 0.0
    for k, p in enumerate(net.params):
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f, lg, _ = net.forward(x)
            plus = (f * rf).sum() + (lg * rl).sum()
            flat[idx] = orig - h
            f, lg, _ = net.forward(x)
            minus = (f * rf).sum() + (lg * rl).sum()
            flat[idx] = orig
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, float(relative_error(grads[k].reshape(-1)[idx], numeric)))
    return worst


# Acceptance lines collected by test_acceptance.py, echoed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
