import numpy as np
import pytest

from segment_retrieval.captioning import SegmentRecord, synthesize_caption
from segment_retrieval.core import Window, normalize_minmax
from segment_retrieval.segmentation import SegmentSpec
from segment_retrieval.synthetic import noisy_piecewise_window


def make_pairs(n_windows, seed=0, length=1024, prefix="w"):
    """Windows with planted knots, their knot segments and synthetic captions."""
    rng = np.random.default_rng(seed)
    windows, records = [], []
    for i in range(n_windows):
        values, knots = noisy_piecewise_window(rng, length, n_knots=int(rng.integers(1, 5)),
                                               noise=float(rng.choice([0.005, 0.05, 0.15])))
        norm = normalize_minmax(values)
        w = Window(f"{prefix}{i:03d}", "sub", f"s{i}", 0, norm.values, True, norm.degenerate)
        windows.append(w)
        bounds = [1] + [k + 1 for k in knots] + [length]
        for a, b in zip(bounds[:-1], bounds[1:]):
            spec = SegmentSpec(w.window_id, a, b)
            records.append(SegmentRecord(spec, synthesize_caption(w, spec)))
    return windows, records


@pytest.fixture(scope="session")
def toy_pairs():
    return make_pairs(60, seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
