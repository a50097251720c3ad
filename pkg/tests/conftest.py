import sys

import numpy as np
import pytest
import torch

from brailleocr import synth


@pytest.fixture(autouse=True)
def _single_thread():
    # Deterministic mode for every test.
    torch.set_num_threads(1)


def pytest_runtest_logreport(report):
    # One visible PASS/FAIL line per acceptance criterion, independent of -s.
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else ("FAIL" if report.failed else "SKIP")
    print(f"\nACCEPTANCE {name}: {status}", file=sys.__stderr__, flush=True)


def make_synthetic_pages(count, seed0, rotation=0.0, noise=0.0, rows=12, cols=18, prefix="page"):
    """Shared helper: deterministic synthetic pages with annotations."""
    options = synth.RenderOptions(max_rotation_deg=rotation, noise_sigma=noise)
    pages = []
    for i in range(count):
        text_rows = synth.random_rows(rows, cols, seed=seed0 + 2 * i)
        image, annotation = synth.render_synthetic_page(
            text_rows,
            options=options,
            seed=seed0 + 2 * i + 1,
            image_id=f"{prefix}{seed0}_{i}.png",
        )
        pages.append((annotation, image, text_rows))
    return pages


def random_box(rng, max_w=100.0, max_h=100.0):
    left = rng.uniform(0, max_w - 2)
    top = rng.uniform(0, max_h - 2)
    return (
        left,
        top,
        left + rng.uniform(0.5, max_w - left),
        top + rng.uniform(0.5, max_h - top),
    )
