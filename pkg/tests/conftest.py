import sys

import numpy as np
import pytest

from mofm.config import apply_overrides, desk_profile
from mofm.heatmap import PoseSequence, build_heatmap


def tiny_profile(**extra):
    """A few-hundred-parameter profile for fast unit tests."""
    base = {
        "frames": 4, "height": 8, "width": 8, "window_stride": 2,
        "dved.hidden": 4, "dved.vocab": 8, "dved.code_dim": 4, "dved.batch_size": 4,
        "backbone.hidden": 8, "backbone.heads": 2, "backbone.ffn": 16, "backbone.layers": 1,
        "backbone.max_seq": 4, "backbone.batch_size": 4,
        "classify.batch_size": 4, "oneshot.batch_size": 4, "oneshot.embed_dim": 6,
        "jigsaw.batch_size": 4, "jigsaw.row_bands": 2, "jigsaw.col_bands": 1, "jigsaw.pieces": 2, "anomaly.batch_size": 4,
    }
    base.update(extra)
    return apply_overrides(desk_profile(), base)


@pytest.fixture
def tiny():
    return tiny_profile()


def random_heatmaps(profile, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        coords = rng.uniform(0, profile.width - 1, (profile.frames, profile.joints, 2))
        out.append(build_heatmap(PoseSequence(coords), profile.height, profile.width, profile.sigma))
    return np.stack(out)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        lines = results[n]
        ok = all(p for p, _ in lines)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for p, text in lines:
            terminalreporter.write_line(f"    [{'PASS' if p else 'FAIL'}] {text}")
