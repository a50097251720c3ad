"""Acceptance suite: one test per criterion, each printing PASS/FAIL via the
conftest hook.  The desk-scale training run is shared by the end-to-end,
round-trip and determinism criteria through a session fixture."""

import difflib
import math
import time

import numpy as np
import pytest
import torch

from brailleocr import codec, detector, evaluation, geometry, imaging, reader, synth, trainer
from brailleocr.config import desk_config
from brailleocr.detector import assign_targets, decode_output, focal_loss, total_loss
from brailleocr.evaluation import dot_level_counts, match_characters
from brailleocr.geometry import Box, Detection, iou, make_anchors
from brailleocr.network import ModelConfig, build_network

from conftest import random_box
from test_evaluation import optimal_tp, random_instance
from test_geometry import brute_force_nms

DESK_TIME_BUDGET_MIN = 30.0


def make_pages(count, seed0, rotation=5.0, noise=4.0):
    options = synth.RenderOptions(max_rotation_deg=rotation, noise_sigma=noise)
    pages = []
    for i in range(count):
        rows = synth.random_rows(12, 18, seed=seed0 + 2 * i)
        image, annotation = synth.render_synthetic_page(
            rows, options=options, seed=seed0 + 2 * i + 1, image_id=f"page{seed0}_{i}.png"
        )
        pages.append((annotation, image))
    return pages


def run_desk_training(tmp_dir, seed=0):
    config = desk_config()
    train_pages = make_pages(50, 1000)
    test_pages = make_pages(10, 9000)
    net = build_network(config.model, seed=seed)
    run = trainer.Trainer(
        net, config.schedule, config.policy, train_pages, test_pages,
        seed=seed, jobs=1, out_dir=tmp_dir,
    )
    start = time.perf_counter()
    run.run()
    elapsed_min = (time.perf_counter() - start) / 60.0
    report = run.evaluate()
    return run, report, elapsed_min


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    return run_desk_training(out, seed=0) + (out,)


def test_codec_exhaustive_suite():
    start = time.perf_counter()
    patterns = set()
    for class_id in range(1, 64):
        pattern = codec.decode(class_id)
        assert codec.encode(pattern) == class_id
        patterns.add(pattern.dots)
        mirrored = codec.mirror(class_id)
        assert 1 <= mirrored <= 63
        assert codec.mirror(mirrored) == class_id
        assert ord(codec.to_unicode(class_id)) - 0x2800 == class_id
    assert len(patterns) == 63
    assert len({codec.mirror(c) for c in range(1, 64)}) == 63
    assert time.perf_counter() - start < 1.0


def test_normalization_statistics():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for i in range(100):
        h, w = int(rng.integers(8, 120)), int(rng.integers(8, 120))
        channels = int(rng.choice([1, 3]))
        shape = (h, w) if channels == 1 else (h, w, 3)
        if i % 5 == 0:  # low-contrast images exercise the std floor
            base = rng.integers(0, 250)
            image = (base + rng.integers(0, 4, size=shape)).astype(np.uint8)
        else:
            image = rng.integers(0, 256, size=shape).astype(np.uint8)
        out = imaging.normalize(image).astype(np.float64)
        flat_in = image.reshape(h, w, -1).astype(np.float64)
        flat_out = out.reshape(h, w, -1)
        for c in range(flat_out.shape[2]):
            assert abs(flat_out[:, :, c].mean()) < 1e-6
            if flat_in[:, :, c].std() >= 25.5:
                assert abs(flat_out[:, :, c].std() - 1.0 / 3.0) < 1e-6
    constant = np.full((40, 40), 128, dtype=np.uint8)
    assert np.all(imaging.normalize(constant) == 0.0)
    assert time.perf_counter() - start < 5.0


def test_geometry_oracles():
    start = time.perf_counter()
    # IOU hand cases, exact.
    assert iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0
    assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == 2.0 / 6.0

    # Delta round trip under 1e-6 px.
    rng = np.random.default_rng(1)
    anchors = np.array([random_box(rng) for _ in range(2000)])
    targets = np.array([random_box(rng) for _ in range(2000)])
    decoded = geometry.decode_deltas(anchors, geometry.encode_deltas(anchors, targets))
    assert np.abs(decoded - targets).max() < 1e-6

    # NMS vs the O(n^2) oracle on 1000 random instances.
    for k in range(1000):
        n = int(rng.integers(0, 51))
        dets = [
            Detection(
                Box(*random_box(rng)),
                int(rng.integers(1, 64)),
                float(np.round(rng.random(), 2)),
            )
            for _ in range(n)
        ]
        threshold = float(rng.choice([0.02, 0.1, 0.3, 0.5]))
        assert geometry.nms(dets, threshold) == brute_force_nms(dets, threshold)
    assert time.perf_counter() - start < 10.0


def test_gradient_check_against_finite_differences():
    start = time.perf_counter()
    config = ModelConfig(widths=(4, 5, 6, 6))
    net = build_network(config, seed=3).double()
    n_params = net.parameter_count()
    assert n_params <= 5000

    image, annotation = synth.render_synthetic_page(
        [[49]], options=synth.RenderOptions(noise_sigma=3.0), seed=4
    )
    box, class_id = annotation.chars[0]
    cx, cy = box.center()
    origin = (int(cx) - 16, int(cy) - 16)
    crop_img, boxes = imaging.crop(image, origin, 32, 32, [box])
    assert boxes, "the character must survive the crop"
    grid = make_anchors(32, 32, config.anchor_width, config.anchor_height)
    assignment = assign_targets(grid, boxes, [class_id])
    assert assignment.positive_count >= 1

    tensor = detector.image_to_tensor(imaging.normalize(crop_img)).double()

    def loss_value():
        return total_loss(net(tensor), assignment, lambda_cls=10.0).total

    loss = loss_value()
    net.zero_grad()
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy()

    step = 1e-3
    numeric = np.empty_like(analytic)
    index = 0
    with torch.no_grad():
        for param in net.parameters():
            flat = param.reshape(-1)
            for j in range(flat.numel()):
                original = flat[j].item()
                flat[j] = original + step
                up = loss_value().item()
                flat[j] = original - step
                down = loss_value().item()
                flat[j] = original
                numeric[index] = (up - down) / (2.0 * step)
                index += 1

    rel = np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
    )
    assert np.mean(rel < 1e-3) >= 0.99
    assert rel.max() < 1e-2
    assert time.perf_counter() - start < 120.0


def test_focal_loss_analytic_cases():
    rng = np.random.default_rng(5)
    logits = torch.tensor(rng.normal(size=(20, 63)), dtype=torch.float32)
    states = rng.choice([1, 0], size=20).astype(np.int8)
    classes = rng.integers(1, 64, size=20).astype(np.int32)
    assignment = detector.TargetAssignment(
        states=states, class_ids=classes, deltas=np.zeros((20, 4), np.float32)
    )
    targets = torch.zeros_like(logits)
    for i in range(20):
        if states[i] == 1:
            targets[i, classes[i] - 1] = 1.0
    expected = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="sum"
    ) / max(1, int((states == 1).sum()))
    got = focal_loss(logits, assignment, gamma=0.0, alpha=None)
    assert got.item() == pytest.approx(expected.item(), abs=1e-6)

    single = detector.TargetAssignment(
        states=np.array([1], np.int8),
        class_ids=np.array([1], np.int32),
        deltas=np.zeros((1, 4), np.float32),
    )
    value = focal_loss(torch.zeros((1, 1)), single, gamma=2.0, alpha=0.25)
    assert value.item() == pytest.approx(0.04333, abs=1e-4)


def test_metrics_oracles():
    rng = np.random.default_rng(6)
    for _ in range(500):
        detections, truths = random_instance(rng)
        match = match_characters(detections, truths)
        assert match.counts.tp == optimal_tp(detections, truths)

    # The worked dot-level example: truth dots {1,2,4} vs detected {1,2,5}.
    truths = [(Box(0, 0, 20, 32), 0b001011)]
    detections = [Detection(Box(0, 0, 20, 32), 0b010011, 0.9)]
    match = match_characters(detections, truths)
    counts = dot_level_counts(detections, truths, match)
    assert (counts.tp, counts.fp, counts.fn) == (2, 1, 1)


def test_end_to_end_desk_training(desk_run):
    _, report, elapsed_min, _ = desk_run
    char_f1 = report.char_prf[2]
    dot_f1 = report.dot_prf[2]
    print(f"desk run: char F1 {char_f1:.4f}, dot F1 {dot_f1:.4f}, {elapsed_min:.1f} min")
    assert char_f1 >= 0.95
    assert dot_f1 >= 0.97
    assert elapsed_min <= DESK_TIME_BUDGET_MIN


def test_text_round_trip(desk_run):
    run, _, _, _ = desk_run
    matched = total = 0
    for i in range(5):
        rows = synth.random_rows(12, 18, seed=77000 + i)
        image, _ = synth.render_synthetic_page(
            rows, options=synth.RenderOptions(noise_sigma=2.0), seed=88000 + i
        )
        detections = detector.detect_page(run.net, image)
        text = reader.render_text(reader.group_lines(detections))
        expected = synth.rows_to_unicode(rows)
        blocks = difflib.SequenceMatcher(a=expected, b=text, autojunk=False)
        matched += sum(block.size for block in blocks.get_matching_blocks())
        total += len(expected)
    assert matched / total >= 0.99


def test_throughput_proxy():
    torch.set_num_threads(1)
    rng = np.random.default_rng(7)
    # A 200-dpi-ish capture downscaled to the working width, as recognize does.
    raw = rng.integers(0, 256, size=(2300, 1728), dtype=np.uint8)
    grid = make_anchors(864, 1152)
    assert grid.count == 3888

    # A realistic decoded page: ~900 confident characters on a 32 px lattice
    # (as a 25 px character pitch produces non-overlapping neighbours).
    output = np.full((67, grid.grid_height, grid.grid_width), -9.0, dtype=np.float32)
    output[:4] = 0.0
    lattice = np.array(
        [iy * grid.grid_width + ix
         for iy in range(0, grid.grid_height, 2)
         for ix in range(0, grid.grid_width, 2)]
    )
    hot = rng.choice(lattice, size=900, replace=False)
    output_classes = rng.integers(0, 63, size=900)
    flat_view = output.reshape(67, -1)
    flat_view[4 + output_classes, hot] = rng.uniform(2.0, 9.0, size=900).astype(np.float32)

    def pipeline():
        resized = imaging.resize(raw, 864, 1150)
        padded = imaging.pad_to_multiple(resized, 16)
        normalized = imaging.normalize(padded)
        detections = decode_output(output, grid, score_threshold=0.5, nms_iou=0.02)
        return normalized, detections

    normalized, detections = pipeline()  # warm-up
    assert normalized.shape == (1152, 864)
    assert len(detections) == 900

    timings = []
    for _ in range(5):
        start = time.perf_counter()
        pipeline()
        timings.append(time.perf_counter() - start)
    best = min(timings)
    print(f"throughput proxy: {best * 1000:.1f} ms")
    assert best < 0.050


def test_determinism_bit_identical_runs(desk_run, tmp_path):
    run_a, report_a, _, out_a = desk_run
    run_b, report_b, _ = run_desk_training(tmp_path, seed=0)

    for pa, pb in zip(run_a.net.parameters(), run_b.net.parameters()):
        assert torch.equal(pa, pb)
    assert (out_a / "final.ckpt").read_bytes() == (tmp_path / "final.ckpt").read_bytes()

    assert report_a.char_counts == report_b.char_counts
    assert report_a.dot_counts == report_b.dot_counts
    for page_a, page_b in zip(report_a.pages, report_b.pages):
        assert page_a.page == page_b.page
        assert page_a.char == page_b.char
        assert page_a.dot == page_b.dot
