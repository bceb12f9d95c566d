import numpy as np
import pytest

from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture
def run_cli(capsys):
    """Invoke the CLI in-process; returns (exit_code, stdout, stderr)."""
    from ovdet.cli import main

    def run(*argv: str):
        code = main([str(a) for a in argv])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return run


def make_pyramid(rng: np.random.Generator, dim: int = 8, h5: int = 3, w5: int = 3):
    """Random feature pyramid with level-5 extents (h5, w5)."""
    from ovdet.fusion import FeaturePyramid, PYRAMID_LEVELS

    return FeaturePyramid({
        l: rng.standard_normal((h5 * 2 ** (5 - l), w5 * 2 ** (5 - l), dim))
        for l in PYRAMID_LEVELS
    })
