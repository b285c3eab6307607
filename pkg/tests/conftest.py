import numpy as np
import pytest

from framealign.dataset import AnnotatedClip, Region

# Annotated regions of one clip labelled by two annotators (onset, offset, original, cleaned).
TRAIN_CLIP_REGIONS = [
    ("A", 0.000, 2.605, "Train approaching with horn.", "A train approaches, sounding its horn."),
    ("A", 2.624, 20.848, "Train going by.", "A train passes by."),
    ("B", 0.040, 1.746, "A train horn blares in the distance.",
     "A train horn blares in the distance."),
    ("B", 1.760, 2.969, "A train drives by at a deafening volume and close distance.",
     "A train passes by at a deafening volume and close distance."),
    ("B", 2.982, 20.848, "A train drives off into the distance gradually decreasing in volume.",
     "A train moves away, gradually decreasing in volume."),
]
TRAIN_CLIP_WEAK = "A train approaches sounding its horn and then passes by."


@pytest.fixture
def train_clip():
    regions = [Region(on, off, orig, who) for who, on, off, orig, _ in TRAIN_CLIP_REGIONS]
    return AnnotatedClip("667739", 20.848, "Train", regions, TRAIN_CLIP_WEAK, "667739.wav")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error max|a - n| / max|n| (floored at 1e-8)."""
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


# Lines recorded by test_acceptance.py, echoed once at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
