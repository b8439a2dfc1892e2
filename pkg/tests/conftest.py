import numpy as np
import pytest
from hypothesis import settings

from m2s import tensor as T

settings.register_profile("m2s", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("m2s")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a, grad=True):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def numeric_grad(fn, x: np.ndarray, h=1e-5):
    """Central differences of scalar ``fn(x)``, a reference independent of the engine's backward."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        o = x[idx]
        x[idx] = o + h
        fp = fn(x)
        x[idx] = o - h
        fm = fn(x)
        x[idx] = o
        g[idx] = (fp - fm) / (2 * h)
    return g


def tiny_config(root, **train):
    """A run config small enough to train in a couple of seconds."""
    from m2s.config import RunConfig

    cfg = RunConfig(base_dir=root)
    cfg.model.backbone_channels = [4, 4, 8, 8, 8]
    cfg.model.cam_channels = [4, 8, 8]
    cfg.model.head_width = 4
    cfg.data.train_count, cfg.data.val_count = 8, 4
    cfg.train.phase1_epochs, cfg.train.phase2_epochs = 1, 1
    cfg.train.batch_size = 4
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def default_ablation(tmp_path_factory):
    """base vs cam+drm on the default dataset and schedule, seeds 0, 1, 2."""
    import time

    from m2s.ablate import ablate
    from m2s.config import RunConfig

    root = tmp_path_factory.mktemp("ablation")
    cfg = RunConfig(base_dir=root)
    t0 = time.perf_counter()
    report = ablate(cfg, ["base", "cam+drm"], [0, 1, 2], root / "runs")
    return cfg, root, report, time.perf_counter() - t0
