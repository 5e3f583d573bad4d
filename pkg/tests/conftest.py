import numpy as np
import pytest

from reprompt.encoders import VisionEncoder
from reprompt.retrieval import build_database
from reprompt.training import RePromptModel, TrainConfig

TINY_ARCH = dict(layers=2, dim=16, patches=4, heads=2, text_layers=2, M=2, k_re=2, J=1, n=1)


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY_ARCH, **kw})


def tiny_problem(seed=0, per_class=2, **kw):
    """Three separable classes in d=16 with a |D| = 3 * per_class database."""
    cfg = tiny_config(seed=seed, **kw)
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(3, cfg.dim))
    y = np.repeat(np.arange(3), per_class)
    X = means[y] + 0.1 * rng.normal(size=(len(y), cfg.dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    db = build_database(X, y, 3, fingerprint=VisionEncoder(cfg.vision_config()).fingerprint)
    return cfg, db, X, y


@pytest.fixture
def tiny():
    cfg, db, X, y = tiny_problem()
    return RePromptModel(cfg, db), db, X, y


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
