"""Acceptance suite: ten package-level properties, one verdict line each.

Every test prints a single ``criterion NN [label] PASS|FAIL`` line (shown
live with -s, or in the captured output on failure) and then asserts, so a
full run doubles as a scorecard.  Expected values come from hand
constructions and the independent references in oracles.py, never from the
code under test.
"""

from __future__ import annotations

import io
import json
import time
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import golden_scene as gs
from oracles import conv2d_ref, deconv2x_ref, match_ref, nms_ref

from panoflow import (
    Checkpoint,
    ConvParams,
    Detection,
    FeaturePyramid,
    FusionConfig,
    InstanceMask,
    PanopticMap,
    SegmentInfo,
    SubnetConfig,
    bilinear_resize,
    compute_pq,
    conv2d,
    deconv2x,
    fuse,
    group_norm,
    loss_compose,
    match_segments,
    nms_per_class,
    run_subnets,
    save_archive,
    save_detections,
    seeded_checkpoint,
    subnet_entries,
    write_tensor,
)
from panoflow.cli import main as cli_main
from panoflow.config import RunConfig
from panoflow.heads import run_cls_reg_heads, run_stuff_head
from panoflow.panoptic_io import (
    decode_rgb_png,
    encode_png,
    encode_rgb_png,
    id_to_rgb,
    load_archive,
    rgb_to_id,
)
from panoflow.pipeline import model_entries, run_fuse, seeded_image
from panoflow.pyramid import build_pyramid

GOLDEN_PNG = gs.__file__.rsplit("/", 1)[0] + "/data/golden_fusion.png"


def _verdict(num: int, label: str, failures: list[str], detail: str = "") -> None:
    ok = not failures
    line = f"criterion {num:02d} [{label}] {'PASS' if ok else 'FAIL'}"
    if ok and detail:
        line += f"  ({detail})"
    if failures:
        line += "  " + "; ".join(failures[:4])
    print(line)
    assert ok, line


def _run_cli(args: list[str]) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        rc = cli_main(args)
    return rc, out.getvalue(), err.getvalue()


def _random_panoptic(rng: np.random.Generator) -> PanopticMap:
    """32x32 map of up to 6 overpainted rectangles, 4 categories,
    void background and occasional crowd segments."""
    raster = np.zeros((32, 32), dtype=np.int32)
    for sid in range(1, int(rng.integers(1, 7)) + 1):
        r0 = int(rng.integers(0, 31))
        r1 = int(rng.integers(r0 + 1, 33))
        c0 = int(rng.integers(0, 31))
        c1 = int(rng.integers(c0 + 1, 33))
        raster[r0:r1, c0:c1] = sid
    segments = []
    for sid, area in zip(*(a.tolist() for a in np.unique(raster, return_counts=True))):
        if sid == 0:
            continue
        segments.append(
            SegmentInfo(
                id=sid,
                category_id=int(rng.integers(1, 5)),
                isthing=True,
                area=area,
                iscrowd=bool(rng.random() < 0.15),
            )
        )
    return PanopticMap(raster, segments)


def _bands(h, w, rows_by_id, cats):
    raster = np.zeros((h, w), dtype=np.int32)
    for sid, (r0, r1) in rows_by_id.items():
        raster[r0:r1] = sid
    ids, counts = np.unique(raster, return_counts=True)
    areas = dict(zip(ids.tolist(), counts.tolist()))
    segments = [
        SegmentInfo(id=sid, category_id=cats[sid], isthing=True, area=areas[sid], iscrowd=False)
        for sid in rows_by_id
    ]
    return PanopticMap(raster, segments)


def test_criterion_01_segment_matching_oracle():
    rng = np.random.default_rng(1001)
    failures: list[str] = []
    worst_gap = 0.0
    n_pairs = 1000
    start = time.perf_counter()
    for case in range(n_pairs):
        gt = _random_panoptic(rng)
        pred = _random_panoptic(rng)
        got = match_segments(gt, pred)
        want = match_ref(gt.id_raster, gt.segments, pred.id_raster, pred.segments)
        got_counts = {c: (s.tp, s.fp, s.fn) for c, s in got.per_class.items()}
        want_counts = {c: (row[1], row[2], row[3]) for c, row in want.items()}
        if got_counts != want_counts:
            failures.append(f"case {case}: counts {got_counts} != {want_counts}")
            break
        for cat, row in want.items():
            gap = abs(got.per_class[cat].iou_sum - row[0])
            worst_gap = max(worst_gap, gap)
            if gap > 1e-12:
                failures.append(f"case {case}: category {cat} iou_sum off by {gap:.3e}")
        if failures:
            break
    elapsed = time.perf_counter() - start
    if elapsed >= 60.0:
        failures.append(f"took {elapsed:.1f}s, budget is 60s")
    _verdict(
        1,
        "segment matching oracle",
        failures,
        f"{n_pairs} random pairs, max iou_sum gap {worst_gap:.2e}, {elapsed:.1f}s",
    )


def test_criterion_02_analytic_quality_scores():
    failures: list[str] = []

    gt = _bands(10, 10, {1: (0, 6), 2: (6, 10)}, {1: 1, 2: 9})
    report = compute_pq(match_segments(gt, gt), thing_ids={1})
    if report.all.pq * 100.0 != 100.0:
        failures.append(f"perfect prediction scored {report.all.pq * 100.0!r}")

    gt = _bands(10, 10, {1: (0, 10)}, {1: 1})
    pred = _bands(10, 10, {1: (0, 6)}, {1: 1})
    report = compute_pq(match_segments(gt, pred), thing_ids={1})
    cls = report.per_class[1]
    if (cls.sq, cls.rq) != (0.6, 1.0) or report.all.pq * 100.0 != 60.0:
        failures.append(
            f"single 0.6-overlap match scored sq={cls.sq!r} rq={cls.rq!r} "
            f"pq={report.all.pq * 100.0!r}"
        )

    pred = _bands(10, 10, {1: (0, 6), 2: (6, 10)}, {1: 1, 2: 1})
    report = compute_pq(match_segments(gt, pred), thing_ids={1})
    if report.all.pq * 100.0 != 40.0:
        failures.append(f"match plus false positive scored {report.all.pq * 100.0!r}")

    gt = _bands(10, 10, {1: (0, 5), 2: (5, 10)}, {1: 1, 2: 2})
    pred = _bands(10, 10, {1: (0, 10)}, {1: 1})
    stats = match_segments(gt, pred)
    counts = {c: (s.tp, s.fp, s.fn) for c, s in stats.per_class.items()}
    if counts != {1: (0, 1, 1), 2: (0, 0, 1)}:
        failures.append(f"exact 0.5 overlap should not match, got {counts}")

    _verdict(2, "analytic quality scores", failures, "4 hand cases exact")


def test_criterion_03_flow_ablation_equivalence():
    cfg_on = SubnetConfig()
    cfg_off = SubnetConfig(
        reg_to_cls=False, reg_to_stuff=False, reg_to_thing=False, stuff_to_thing=False
    )
    entries = subnet_entries(cfg_on)
    sides = {3: 8, 4: 4, 5: 2, 6: 1, 7: 1}
    n_seeds = 20
    failures: list[str] = []
    for seed in range(n_seeds):
        ckpt = seeded_checkpoint(entries, seed=seed)
        zeroed = Checkpoint()
        for name in ckpt.names():
            arr = ckpt.get(name)
            zeroed.put(name, np.zeros_like(arr) if name.startswith("flow.") else arr)
        rng = np.random.default_rng(1000 + seed)
        pyramid = FeaturePyramid(
            {
                lv: rng.uniform(-1.0, 1.0, (1, cfg_on.channels, s, s)).astype(np.float32)
                for lv, s in sides.items()
            }
        )
        with_zeroed = run_subnets(pyramid, cfg_on, zeroed)
        without_flows = run_subnets(pyramid, cfg_off, ckpt)
        for task in ("cls", "reg", "thing", "stuff"):
            da, db = getattr(with_zeroed, task), getattr(without_flows, task)
            for lv in da:
                if not np.array_equal(da[lv], db[lv]):
                    failures.append(f"seed {seed}: {task} P{lv} diverged")
        if failures:
            break
    _verdict(
        3,
        "flow ablation equivalence",
        failures,
        f"{n_seeds} seeds bitwise at {cfg_on.channels} channels",
    )


def test_criterion_04_output_shape_suite():
    cfg = RunConfig(image_size=512, seed=11)
    ckpt = seeded_checkpoint(model_entries(cfg), cfg.seed)
    pyramid = build_pyramid(seeded_image(cfg), ckpt)
    features = run_subnets(pyramid, cfg.subnet, ckpt)
    cls_logits, _ = run_cls_reg_heads(features, ckpt)
    stuff_probs = run_stuff_head(features, ckpt)

    failures: list[str] = []
    sides = {3: 64, 4: 32, 5: 16, 6: 8, 7: 4}
    for lv, side in sides.items():
        want = (1, 256, side, side)
        if pyramid[lv].shape != want:
            failures.append(f"P{lv} shape {pyramid[lv].shape} != {want}")
    if sorted(cls_logits) != sorted(sides):
        failures.append(f"cls head levels {sorted(cls_logits)}")
    for lv, side in sides.items():
        want = (1, 9 * cfg.num_things, side, side)
        if cls_logits[lv].shape != want:
            failures.append(f"cls P{lv} shape {cls_logits[lv].shape} != {want}")
    want = (1, cfg.num_stuff + 1, 512, 512)
    if stuff_probs.shape != want:
        failures.append(f"stuff shape {stuff_probs.shape} != {want}")
    sum_gap = float(np.abs(stuff_probs.sum(axis=1) - 1.0).max())
    if sum_gap > 1e-6:
        failures.append(f"stuff channel sums off by {sum_gap:.3e}")
    _verdict(
        4,
        "output shape suite",
        failures,
        f"512x512 input, stuff sum gap {sum_gap:.2e}",
    )


def _random_detections(rng: np.random.Generator, n: int, num_classes: int) -> list[Detection]:
    dets = []
    for _ in range(n):
        x1 = float(rng.uniform(0.0, 90.0))
        y1 = float(rng.uniform(0.0, 90.0))
        w = float(rng.uniform(1.0, 40.0))
        h = float(rng.uniform(1.0, 40.0))
        dets.append(
            Detection(
                box=(x1, y1, x1 + w, y1 + h),
                class_id=1 + int(rng.integers(0, num_classes)),
                # coarse score grid so ties actually happen
                score=float(rng.integers(0, 21)) / 20.0,
            )
        )
    return dets


def _oracle_nms(dets: list[Detection], thr: float, keep_top: int) -> list[Detection]:
    by_class: dict[int, list[int]] = {}
    for i, det in enumerate(dets):
        by_class.setdefault(det.class_id, []).append(i)
    kept: list[int] = []
    for class_id in sorted(by_class):
        idxs = by_class[class_id]
        boxes = [dets[i].box for i in idxs]
        scores = [dets[i].score for i in idxs]
        kept.extend(idxs[j] for j in nms_ref(boxes, scores, thr))
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept[:keep_top]]


def test_criterion_05_nms_oracle():
    rng = np.random.default_rng(1005)
    failures: list[str] = []
    n_cases = 0
    for thr in (0.3, 0.4, 0.5):
        for case in range(170):
            n = int(rng.integers(1, 51))
            dets = _random_detections(rng, n, num_classes=1 + case % 2)
            got = nms_per_class(dets, iou_threshold=thr, keep_top=100)
            want = _oracle_nms(dets, thr, keep_top=100)
            n_cases += 1
            if got != want:
                failures.append(f"thr {thr} case {case} (n={n}) diverged")
                break
        if failures:
            break

    # top-100 truncation with 150 mutually disjoint boxes
    rng = np.random.default_rng(1055)
    dets = [
        Detection(
            box=(i * 50.0, 0.0, i * 50.0 + 40.0, 40.0),
            class_id=1,
            score=float(rng.integers(0, 21)) / 20.0,
        )
        for i in range(150)
    ]
    got = nms_per_class(dets, iou_threshold=0.4, keep_top=100)
    want = _oracle_nms(dets, 0.4, keep_top=100)
    if len(got) != 100:
        failures.append(f"disjoint 150 kept {len(got)}, want 100")
    elif got != want:
        failures.append("disjoint 150 kept a different top-100")
    _verdict(5, "nms oracle", failures, f"{n_cases} random cases, 3 thresholds")


def test_criterion_06_fusion_invariants(tmp_path):
    failures: list[str] = []
    cfg = FusionConfig(stuff_category_base=8)

    result = fuse(gs.instance_masks(), gs.stuff_probability_map(), gs.detections(), cfg)
    raster_ids = set(np.unique(result.id_raster).tolist())
    segment_ids = {s.id for s in result.segments}
    if raster_ids - {0} != segment_ids:
        failures.append(f"raster ids {raster_ids} vs segments {segment_ids}")
    total = int((result.id_raster == 0).sum())
    for segment in result.segments:
        area = int((result.id_raster == segment.id).sum())
        if area != segment.area:
            failures.append(f"segment {segment.id} area {segment.area} != raster {area}")
        total += area
    if total != result.id_raster.size:
        failures.append("segment areas plus void do not partition the canvas")

    with open(GOLDEN_PNG, "rb") as fh:
        frozen = fh.read()
    if encode_png(result) != frozen:
        failures.append("golden scene PNG bytes diverged from the frozen file")

    below_gate = gs.instance_masks() + [
        InstanceMask(class_id=5, score=0.36, mask=gs.MASK_B.copy(), detection_index=None)
    ]
    again = fuse(below_gate, gs.stuff_probability_map(), gs.detections(), cfg)
    if encode_png(again) != encode_png(result):
        failures.append("a score-0.36 instance changed the output")

    def region_scene(drop_one_pixel: bool) -> np.ndarray:
        probs = np.full((3, 128, 128), 0.05, dtype=np.float32)
        probs[2] = 0.9
        probs[0, 0:50, 0:98] = 0.9
        probs[2, 0:50, 0:98] = 0.05
        if drop_one_pixel:
            probs[0, 49, 97] = 0.05
            probs[2, 49, 97] = 0.9
        return probs

    kept = fuse([], region_scene(False), [], cfg)
    if [(s.category_id, s.area) for s in kept.segments] != [(9, 4900)]:
        failures.append(f"4900-px region gave {[(s.category_id, s.area) for s in kept.segments]}")
    dropped = fuse([], region_scene(True), [], cfg)
    if dropped.segments or int((dropped.id_raster == 0).sum()) != 128 * 128:
        failures.append("4899-px region was not voided")

    rerun = fuse(gs.instance_masks(), gs.stuff_probability_map(), gs.detections(), cfg)
    if encode_png(rerun) != frozen:
        failures.append("rerun changed the fused bytes")

    with open(tmp_path / "instances.json", "w", encoding="utf-8") as fh:
        json.dump(gs.instance_rows(), fh)
    write_tensor(str(tmp_path / "instance_masks.ftns"), gs.mask_stack())
    write_tensor(str(tmp_path / "stuff_probs.ftns"), gs.stuff_probability_map())
    save_detections(str(tmp_path / "detections.json"), gs.detections())
    by_workers = []
    for workers in (1, 4, 8):
        fused = run_fuse(
            RunConfig(workers=workers),
            str(tmp_path / "instances.json"),
            str(tmp_path / "instance_masks.ftns"),
            str(tmp_path / "stuff_probs.ftns"),
            str(tmp_path / "detections.json"),
        )
        by_workers.append(encode_png(fused))
    if len(set(by_workers)) != 1 or by_workers[0] != frozen:
        failures.append("fused bytes depend on the worker count")

    _verdict(6, "fusion invariants", failures, "partition, frozen bytes, gates, determinism")


def test_criterion_07_kernel_oracles():
    failures: list[str] = []

    conv_cases = [
        ((1, 4, 8, 8), (3, 4, 3, 3), 1, 1),
        ((2, 3, 9, 7), (4, 3, 3, 3), 1, 1),
        ((2, 3, 16, 12), (5, 3, 3, 3), 2, 1),
        ((1, 4, 7, 7), (3, 4, 1, 1), 1, 0),
    ]
    for xs, ws, stride, pad in conv_cases:
        rng = np.random.default_rng(hash((xs, ws, stride, pad)) % 2**32)
        x = (rng.standard_normal(xs) * 3).astype(np.float32)
        w = (rng.standard_normal(ws) * 2).astype(np.float32)
        b = rng.standard_normal(ws[0]).astype(np.float32)
        got = conv2d(x, ConvParams(w, b), stride, pad)
        want = conv2d_ref(x, w, b, stride, pad)
        if not np.array_equal(got.view(np.uint32), want.view(np.uint32)):
            failures.append(f"conv2d {xs} stride {stride} pad {pad} not bitwise")

    for seed, xs in [(7, (1, 3, 4, 5)), (8, (2, 2, 6, 3))]:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal((4, xs[1], 2, 2)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = deconv2x(x, ConvParams(w, b))
        want = deconv2x_ref(x, w, b)
        if not np.array_equal(got.view(np.uint32), want.view(np.uint32)):
            failures.append(f"deconv2x {xs} not bitwise")

    rng = np.random.default_rng(5)
    x = (rng.standard_normal((1, 32, 4, 4)) * 4 + 2).astype(np.float32)
    out = group_norm(x, np.ones(32, dtype=np.float32), np.zeros(32, dtype=np.float32))
    for c in range(32):
        g = out[0, c].astype(np.float64)
        if abs(g.mean()) >= 1e-5:
            failures.append(f"group_norm channel {c} mean {g.mean():.3e}")
        if abs(g.var() - 1.0) >= 1e-3:
            failures.append(f"group_norm channel {c} var {g.var():.5f}")

    for target in [(7, 13), (4, 4), (1, 9), (16, 5)]:
        x = np.full((1, 2, 5, 6), np.float32(0.123456), dtype=np.float32)
        out = bilinear_resize(x, *target)
        if not np.all(out == np.float32(0.123456)):
            failures.append(f"bilinear {target} broke a constant image")

    _verdict(7, "kernel oracles", failures, "conv/deconv bitwise, norm stats, resize")


def test_criterion_08_png_and_archive_round_trip(tmp_path):
    failures: list[str] = []
    for sid in (1, 255, 256, 65536, 256**3 - 1):
        raster = np.array([[sid, 0], [sid, sid]], dtype=np.int64)
        rgb = id_to_rgb(raster)
        back = rgb_to_id(decode_rgb_png(encode_rgb_png(rgb)))
        if not np.array_equal(back, raster):
            failures.append(f"id {sid} did not survive the PNG round trip")

    maps = [
        (7, _bands(6, 4, {1: (0, 3), 2: (3, 6)}, {1: 3, 2: 9})),
        (12, _bands(6, 4, {5: (0, 6)}, {5: 3})),
    ]
    categories = [
        {"id": 3, "name": "thing_3", "isthing": 1},
        {"id": 9, "name": "stuff_1", "isthing": 0},
    ]
    save_archive(str(tmp_path / "maps.json"), str(tmp_path), maps, categories=categories)
    archive = load_archive(str(tmp_path / "maps.json"), str(tmp_path))
    loaded = list(archive)
    if [image_id for image_id, _ in loaded] != [7, 12]:
        failures.append(f"archive image ids {[i for i, _ in loaded]}")
    for (want_id, want_map), (got_id, got_map) in zip(maps, loaded):
        if not np.array_equal(got_map.id_raster, want_map.id_raster):
            failures.append(f"image {want_id} raster changed in the archive")
        want_rows = [(s.id, s.category_id, s.area, s.iscrowd) for s in want_map.segments]
        got_rows = [(s.id, s.category_id, s.area, s.iscrowd) for s in got_map.segments]
        if want_rows != got_rows:
            failures.append(f"image {want_id} segments changed in the archive")
    if archive.thing_ids != {3}:
        failures.append(f"archive thing ids {archive.thing_ids}")
    _verdict(8, "png and archive round trip", failures, "5 boundary ids, 2-image archive")


def test_criterion_09_loss_composition():
    failures: list[str] = []
    if loss_compose(1.0, 0.5, 1.0, 4.0) != 3.5:
        failures.append(f"default weight case gave {loss_compose(1.0, 0.5, 1.0, 4.0)!r}")
    if loss_compose(0.5, 0.25, 0.75, 2.0) != 2.0:
        failures.append(f"second hand case gave {loss_compose(0.5, 0.25, 0.75, 2.0)!r}")
    for lam in (1.0, 0.75, 0.5, 0.3, 0.25, 0.2):
        got = loss_compose(1.0, 1.0, 1.0, 1.0, lam=lam)
        if got != 3.0 + lam:
            failures.append(f"weight {lam} gave {got!r}")
    _verdict(9, "loss composition", failures, "hand values exact, 6-point weight sweep")


def test_criterion_10_end_to_end_smoke(tmp_path):
    failures: list[str] = []
    dump = tmp_path / "dump"
    fused = tmp_path / "fused"
    gt_dir = tmp_path / "gt"
    start = time.perf_counter()

    rc, _, err = _run_cli(["forward", "--size", "256", "--seed", "0", "--out", str(dump)])
    if rc != 0:
        failures.append(f"forward exited {rc}: {err.strip()}")
    else:
        rc, _, err = _run_cli(
            [
                "fuse",
                "--instances",
                str(dump / "instances.json"),
                "--masks",
                str(dump / "instance_masks.ftns"),
                "--stuff",
                str(dump / "stuff_probs.ftns"),
                "--detections",
                str(dump / "detections.json"),
                "--image-id",
                "1",
                "--out",
                str(fused),
            ]
        )
        if rc != 0:
            failures.append(f"fuse exited {rc}: {err.strip()}")

    if not failures:
        raster = np.zeros((256, 256), dtype=np.int32)
        raster[:, :128] = 1
        raster[:, 128:] = 2
        segments = [
            SegmentInfo(id=1, category_id=9, isthing=False, area=256 * 128, iscrowd=False),
            SegmentInfo(id=2, category_id=10, isthing=False, area=256 * 128, iscrowd=False),
        ]
        save_archive(
            str(tmp_path / "gt.json"),
            str(gt_dir),
            [(1, PanopticMap(raster, segments))],
            categories=RunConfig().category_table(),
        )
        rc, stdout, err = _run_cli(
            [
                "evaluate",
                "--gt-json",
                str(tmp_path / "gt.json"),
                "--gt-dir",
                str(gt_dir),
                "--pred-json",
                str(fused / "panoptic.json"),
                "--pred-dir",
                str(fused),
            ]
        )
        if rc != 0:
            failures.append(f"evaluate exited {rc}: {err.strip()}")
        elif "All" not in stdout:
            failures.append("evaluate printed no score table")

    elapsed = time.perf_counter() - start
    if elapsed >= 120.0:
        failures.append(f"pipeline took {elapsed:.1f}s, budget is 120s")
    _verdict(10, "end to end smoke", failures, f"256x256 forward/fuse/evaluate, {elapsed:.1f}s")
