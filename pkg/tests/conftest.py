import numpy as np
import pytest

from stablequant import tensor as T

# acceptance verdicts, printed as one line each at the end of the session
AC_LINES: dict[str, str] = {}


def record(ac: str, passed: bool, detail: str) -> None:
    line = f"{ac} {'PASS' if passed else 'FAIL'}: {detail}"
    AC_LINES[ac] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not AC_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(AC_LINES, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(AC_LINES[key])


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def grad_rel_error(build, arrays: list[np.ndarray], seed: int = 99991, eps: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences.

    ``build`` maps a list of Tensors to an output Tensor; the scalar loss is
    a fixed random projection of that output. Entries whose gradient is tiny
    relative to the largest one are compared against that scale instead.
    """
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    w = rng.standard_normal(out.shape)
    (out * T.Tensor(w)).sum().backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [T.Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            with T.no_grad():
                return float((build(args).data * w).sum())

        num = numeric_grad(f, a.copy(), eps)
        ana = tensors[k].grad
        scale = max(np.abs(num).max(), 1e-12)
        denom = np.maximum(np.abs(num), 1e-3 * scale)
        worst = max(worst, float((np.abs(ana - num) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
