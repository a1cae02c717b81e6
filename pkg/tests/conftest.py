import numpy as np
import pytest

from gatel0rd import tensor as T
from gatel0rd.cells import CellConfig
from gatel0rd.model import ModelConfig, SeqModel
from gatel0rd.rng import RngStream


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_floor(loss: float, eps: float = 1e-6) -> float:
    """Denominator floor for relative errors against central differences.

    Rounding in the loss puts an absolute error of about ``u * |L| / eps``
    on every difference quotient (``u`` = unit roundoff). Components smaller
    than a million times that are compared on absolute rather than relative
    error, otherwise rounding noise alone could exceed 1e-5.
    """
    return 1e6 * np.finfo(float).eps * max(abs(loss), 1.0) / eps


def small_model(kind="gatel0rd", obs_dim=2, act_dim=0, H=4, warmup=2, noise=0.1, seed=0,
                pre=(6,), init=(5,), **cell_kw) -> SeqModel:
    cell = CellConfig(kind=kind, latent_dim=H, noise_variance=noise, **cell_kw)
    cfg = ModelConfig(obs_dim=obs_dim, act_dim=act_dim, cell=cell, warmup=warmup,
                      pre_widths=list(pre), init_widths=list(init))
    return SeqModel(cfg, seed=seed)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _float64():
    T.set_dtype(np.float64)
    yield
    T.set_dtype(np.float64)


# -- acceptance summary ------------------------------------------------------------


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records one pass/fail line."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
