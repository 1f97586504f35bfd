"""Detection head: location grids, target assignment, decoding, and NMS."""

import numpy as np
import pytest

from fusedet import tensor as T
from fusedet.head import (BoxXYXY, DEFAULT_LEVEL_RANGES, Detection,
                          HeadParams, assign_targets, box_iou_matrix,
                          compute_locations, decode_detections, head_forward,
                          nms, pyramid_locations)
from fusedet.pyramid import FeaturePyramid
from fusedet.tensor import ShapeError, Tensor


def make_pyramid(rng, image_hw, level_ids, channels):
    levels = {}
    h, w = image_hw
    for j in level_ids:
        eh, ew = -(-h // (1 << j)), -(-w // (1 << j))
        levels[j] = Tensor(rng.standard_normal((channels, eh, ew)))
    return FeaturePyramid(levels, image_hw)


class TestLocations:
    def test_stride16_2x2(self):
        got = compute_locations(4, (2, 2))
        want = np.array([[8, 8], [24, 8], [8, 24], [24, 24]], dtype=float)
        assert np.array_equal(got, want)

    def test_offset_is_half_stride(self):
        for j in (3, 5, 6):
            pts = compute_locations(j, (3, 4))
            s = 1 << j
            assert pts[0, 0] == s / 2 and pts[0, 1] == s / 2
            assert pts[1, 0] - pts[0, 0] == s

    def test_count_matches_extents(self):
        assert compute_locations(5, (4, 7)).shape == (28, 2)

    def test_pyramid_locations_segments(self, rng):
        pyr = make_pyramid(rng, (64, 64), (4, 5, 6), 8)
        params = HeadParams.create(8, (4, 5, 6), rng)
        out = head_forward(pyr, params)
        locs, segs = pyramid_locations(out)
        assert segs == [(4, 16), (5, 4), (6, 1)]
        assert len(locs) == 21


class TestHeadForward:
    def test_output_channels(self, rng):
        pyr = make_pyramid(rng, (64, 64), (4, 5, 6), 8)
        params = HeadParams.create(8, (4, 5, 6), rng)
        out = head_forward(pyr, params)
        for j in (4, 5, 6):
            eh, ew = pyr.levels[j].data.shape[-2:]
            assert out.cls_logits[j].data.shape == (1, eh, ew)
            assert out.distances[j].data.shape == (4, eh, ew)
            assert out.ctn_logits[j].data.shape == (1, eh, ew)

    def test_batched_output_channels(self, rng):
        levels = {j: Tensor(rng.standard_normal((2, 8, *s)))
                  for j, s in [(4, (4, 4)), (5, (2, 2)), (6, (1, 1))]}
        pyr = FeaturePyramid(levels, (64, 64))
        params = HeadParams.create(8, (4, 5, 6), rng)
        out = head_forward(pyr, params)
        assert out.cls_logits[4].data.shape == (2, 1, 4, 4)
        assert out.distances[6].data.shape == (2, 4, 1, 1)

    def test_distances_strictly_positive(self, rng):
        pyr = make_pyramid(rng, (32, 32), (4, 5), 8)
        params = HeadParams.create(8, (4, 5), rng)
        out = head_forward(pyr, params)
        for j in (4, 5):
            assert np.all(out.distances[j].data > 0)

    def test_weights_shared_across_levels(self, rng):
        # the same feature map fed through different level slots produces
        # identical class/centerness logits; only the per-level scale can
        # differentiate the regression output
        m = rng.standard_normal((8, 2, 2))
        pyr_a = FeaturePyramid({5: Tensor(m.copy())}, (64, 64))
        pyr_b = FeaturePyramid({6: Tensor(m.copy())}, (128, 128))
        pa = HeadParams.create(8, (5,), rng)
        pb = HeadParams.create(8, (6,), rng)
        for name, src in pa.named_params():
            dict(pb.named_params())[name].data[...] = src.data
        pa.scales[0].data[...] = 1.0
        pb.scales[0].data[...] = 2.0
        out_a = head_forward(pyr_a, pa)
        out_b = head_forward(pyr_b, pb)
        assert np.allclose(out_a.cls_logits[5].data, out_b.cls_logits[6].data)
        assert np.allclose(out_a.ctn_logits[5].data, out_b.ctn_logits[6].data)
        assert np.allclose(out_a.distances[5].data ** 2,
                           out_b.distances[6].data, rtol=1e-4)

    def test_level_mismatch_rejected(self, rng):
        pyr = make_pyramid(rng, (64, 64), (4, 5, 6), 8)
        params = HeadParams.create(8, (4, 5), rng)
        with pytest.raises(ShapeError):
            head_forward(pyr, params)

    def test_untrained_head_detects_nothing(self, rng):
        # the classification bias prior keeps fresh heads quiet
        pyr = make_pyramid(rng, (64, 64), (4, 5, 6), 8)
        params = HeadParams.create(8, (4, 5, 6), rng)
        for wname in ("cls_w", "ctn_w", "reg_w"):
            getattr(params, wname).data[...] *= 0.01
        out = head_forward(pyr, params)
        assert decode_detections(out) == []


class TestAssign:
    def grid(self, image=64, levels=(4, 5, 6)):
        return {j: compute_locations(j, (-(-image // (1 << j)),) * 2)
                for j in levels}

    def test_centerness_formula(self):
        # distances (l,t,r,b) = (1,3,2,2): sqrt((1/2) * (2/3)) = sqrt(1/3)
        locs = {4: np.array([[9.0, 11.0]])}
        box = BoxXYXY(8.0, 8.0, 11.0, 13.0)
        tgt = assign_targets(locs, [box], {4: (0.0, 100.0)})
        assert tgt.labels[0] == 1
        assert np.allclose(tgt.dists[0], [1, 3, 2, 2])
        assert tgt.centerness[0] == pytest.approx(np.sqrt(1 / 3), abs=1e-12)

    def test_positives_strictly_inside(self, rng):
        locs = self.grid()
        for _ in range(10):
            x1, y1 = rng.uniform(0, 40, 2)
            bw, bh = rng.uniform(10, 24, 2)
            box = BoxXYXY(x1, y1, x1 + bw, y1 + bh)
            tgt = assign_targets(locs, [box], DEFAULT_LEVEL_RANGES)
            flat = np.concatenate([locs[j] for j in sorted(locs)])
            for i in np.flatnonzero(tgt.labels):
                x, y = flat[i]
                assert box.x1 < x < box.x2 and box.y1 < y < box.y2

    def test_centerness_in_unit_interval(self, rng):
        locs = self.grid()
        boxes = [BoxXYXY(5, 5, 30, 50), BoxXYXY(20, 10, 60, 40)]
        tgt = assign_targets(locs, boxes, DEFAULT_LEVEL_RANGES)
        pos = tgt.labels == 1
        assert np.all(tgt.centerness[pos] > 0)
        assert np.all(tgt.centerness[pos] <= 1)
        assert np.all(tgt.centerness[~pos] == 0)

    def test_level_routing_by_box_size(self):
        locs = self.grid(image=128)
        small = BoxXYXY(30, 30, 50, 50)    # max distance < 32
        tgt = assign_targets(locs, [small], DEFAULT_LEVEL_RANGES)
        counts = {}
        start = 0
        for j, n in tgt.segments:
            counts[j] = int(tgt.labels[start:start + n].sum())
            start += n
        assert counts[4] > 0 and counts[5] == 0 and counts[6] == 0

        big = BoxXYXY(4, 4, 124, 124)      # central max distance > 32
        tgt = assign_targets(locs, [big], DEFAULT_LEVEL_RANGES)
        start = 0
        for j, n in tgt.segments:
            counts[j] = int(tgt.labels[start:start + n].sum())
            start += n
        assert counts[4] == 0 and counts[5] + counts[6] > 0

    def test_tighter_ranges_never_add_positives(self):
        locs = self.grid()
        boxes = [BoxXYXY(5, 5, 40, 40), BoxXYXY(25, 20, 60, 60)]
        wide = {j: (0.0, 1e9) for j in locs}
        tgt_wide = assign_targets(locs, boxes, wide)
        tgt_def = assign_targets(locs, boxes, DEFAULT_LEVEL_RANGES)
        assert tgt_def.labels.sum() <= tgt_wide.labels.sum()
        assert np.all(tgt_wide.labels[tgt_def.labels == 1] == 1)

    def test_smallest_area_wins_overlap(self):
        locs = {4: np.array([[16.0, 16.0]])}
        outer = BoxXYXY(2, 2, 30, 30)
        inner = BoxXYXY(10, 10, 22, 22)
        tgt = assign_targets(locs, [outer, inner], {4: (0.0, 1e9)})
        assert np.allclose(tgt.dists[0], [6, 6, 6, 6])  # inner box wins

    def test_targets_decode_back_to_box(self):
        locs = self.grid()
        box = BoxXYXY(6.0, 10.0, 38.0, 42.0)
        tgt = assign_targets(locs, [box], DEFAULT_LEVEL_RANGES)
        flat = np.concatenate([locs[j] for j in sorted(locs)])
        pos = np.flatnonzero(tgt.labels)
        assert len(pos)
        for i in pos:
            x, y = flat[i]
            l, t, r, b = tgt.dists[i]
            assert np.allclose([x - l, y - t, x + r, y + b],
                               box.as_array(), atol=1e-9)

    def test_no_boxes_all_background(self):
        tgt = assign_targets(self.grid(), [], DEFAULT_LEVEL_RANGES)
        assert tgt.labels.sum() == 0
        assert tgt.centerness.sum() == 0


class TestDecode:
    def one_loc_outputs(self, cls, ctn, dists, image=(64, 64)):
        from fusedet.head import HeadOutputs
        return HeadOutputs(
            {6: Tensor(np.full((1, 1, 1), cls))},
            {6: Tensor(np.array(dists, dtype=float).reshape(4, 1, 1))},
            {6: Tensor(np.full((1, 1, 1), ctn))},
            image)

    def test_confident_location_decodes_box(self):
        out = self.one_loc_outputs(6.0, 6.0, (8, 8, 8, 8))
        dets = decode_detections(out)
        assert len(dets) == 1
        d = dets[0]
        assert (d.x1, d.y1, d.x2, d.y2) == (24.0, 24.0, 40.0, 40.0)
        assert d.score > 0.99

    def test_all_negative_logits_empty(self):
        out = self.one_loc_outputs(-20.0, -20.0, (8, 8, 8, 8))
        assert decode_detections(out) == []

    def test_score_is_geometric_mean(self):
        out = self.one_loc_outputs(0.0, 6.0, (8, 8, 8, 8))
        d = decode_detections(out)[0]
        p = 1 / (1 + np.exp(-6.0))
        assert d.score == pytest.approx(np.sqrt(0.5 * p), abs=1e-9)

    def test_product_score_mode(self):
        out = self.one_loc_outputs(1.0, 1.0, (8, 8, 8, 8))
        geo = decode_detections(out, score_mode="geometric")[0].score
        prod = decode_detections(out, score_mode="product")[0].score
        assert prod == pytest.approx(geo ** 2, abs=1e-9)
        with pytest.raises(ValueError):
            decode_detections(out, score_mode="harmonic")

    def test_boxes_clipped_to_image(self):
        out = self.one_loc_outputs(6.0, 6.0, (60, 60, 60, 60))
        d = decode_detections(out)[0]
        assert (d.x1, d.y1, d.x2, d.y2) == (0.0, 0.0, 64.0, 64.0)

    def test_threshold_filters(self):
        out = self.one_loc_outputs(-1.0, -1.0, (8, 8, 8, 8))
        # score = sigmoid(-1) ~ 0.269 >= 0.2 passes; raising cuts it
        assert len(decode_detections(out, score_thresh=0.2)) == 1
        assert decode_detections(out, score_thresh=0.3) == []

    def test_duplicate_boxes_suppressed_to_one(self):
        from fusedet.head import HeadOutputs
        # two locations on a 1x2 stride-64 grid, both decoding to the same
        # box; only the higher-scoring detection survives
        cls = np.array([2.0, 1.0]).reshape(1, 1, 2)
        ctn = np.array([6.0, 6.0]).reshape(1, 1, 2)
        # locations (32,32) and (96,32); shared box (8,8,104,60)
        dists = np.array([[24.0, 88.0], [24.0, 24.0],
                          [72.0, 8.0], [28.0, 28.0]]).reshape(4, 1, 2)
        out = HeadOutputs({6: Tensor(cls)}, {6: Tensor(dists)},
                          {6: Tensor(ctn)}, (64, 128))
        dets = decode_detections(out)
        assert len(dets) == 1
        assert (dets[0].x1, dets[0].y1, dets[0].x2, dets[0].y2) == \
            (8.0, 8.0, 104.0, 60.0)
        p = 1 / (1 + np.exp(-2.0))
        assert dets[0].score == pytest.approx(
            np.sqrt(p / (1 + np.exp(-6.0))), abs=1e-9)

    def test_detection_line_format(self):
        d = Detection(0.875, 1.0, 2.0, 33.5, 44.25)
        assert d.line(7) == "7 0.875000 1.00 2.00 33.50 44.25"


def brute_force_nms(boxes, scores, thresh):
    """Independent reference: repeatedly take the best remaining box."""
    remaining = list(range(len(scores)))
    remaining.sort(key=lambda i: (-scores[i], i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(i)
        survivors = []
        for k in remaining:
            bi, bk = boxes[i], boxes[k]
            iw = min(bi[2], bk[2]) - max(bi[0], bk[0])
            ih = min(bi[3], bk[3]) - max(bi[1], bk[1])
            inter = max(iw, 0) * max(ih, 0)
            ai = (bi[2] - bi[0]) * (bi[3] - bi[1])
            ak = (bk[2] - bk[0]) * (bk[3] - bk[1])
            if inter / (ai + ak - inter) <= thresh:
                survivors.append(k)
        remaining = survivors
    return kept


class TestNms:
    def test_disjoint_all_kept(self):
        boxes = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [0, 20, 10, 30.0]])
        scores = np.array([0.5, 0.9, 0.7])
        assert sorted(nms(boxes, scores, 0.5)) == [0, 1, 2]

    def test_identical_keep_highest(self):
        boxes = np.array([[0, 0, 10, 10.0]] * 3)
        scores = np.array([0.3, 0.9, 0.6])
        assert nms(boxes, scores, 0.5) == [1]

    def test_equal_scores_lowest_index_first(self):
        boxes = np.array([[0, 0, 10, 10.0]] * 2)
        scores = np.array([0.7, 0.7])
        assert nms(boxes, scores, 0.5) == [0]

    def test_matches_brute_force_on_random_boxes(self, rng):
        for trial in range(5):
            n = 20
            x1 = rng.uniform(0, 80, n)
            y1 = rng.uniform(0, 80, n)
            boxes = np.stack([x1, y1, x1 + rng.uniform(5, 40, n),
                              y1 + rng.uniform(5, 40, n)], axis=1)
            scores = rng.uniform(0, 1, n)
            assert nms(boxes, scores, 0.5) == \
                brute_force_nms(boxes, scores, 0.5)

    def test_kept_pairwise_iou_bounded(self, rng):
        n = 30
        x1 = rng.uniform(0, 60, n)
        y1 = rng.uniform(0, 60, n)
        boxes = np.stack([x1, y1, x1 + rng.uniform(5, 50, n),
                          y1 + rng.uniform(5, 50, n)], axis=1)
        scores = rng.uniform(0, 1, n)
        kept = nms(boxes, scores, 0.4)
        sub = boxes[kept]
        iou = box_iou_matrix(sub, sub)
        np.fill_diagonal(iou, 0)
        assert np.all(iou <= 0.4)

    def test_empty_input(self):
        assert nms(np.zeros((0, 4)), np.zeros(0), 0.5) == []


class TestBoxTypes:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BoxXYXY(5, 5, 5, 10)
        with pytest.raises(ValueError):
            BoxXYXY(5, 5, 10, 4)

    def test_area(self):
        assert BoxXYXY(1, 2, 4, 6).area == 12


class TestHeadGradients:
    def test_loss_reaches_all_parameters(self, rng):
        pyr = make_pyramid(rng, (32, 32), (4, 5), 6)
        params = HeadParams.create(6, (4, 5), rng)
        params.require_grad()
        with T.Tape():
            out = head_forward(pyr, params)
            parts = [T.sum_all(out.cls_logits[j]) for j in (4, 5)]
            parts += [T.sum_all(out.distances[j]) for j in (4, 5)]
            parts += [T.sum_all(out.ctn_logits[j]) for j in (4, 5)]
            loss = parts[0]
            for p in parts[1:]:
                loss = T.add(loss, p)
            T.backward(loss)
        for name, p in params.named_params():
            assert p.grad is not None, name
            assert np.any(p.grad != 0) or "ctn" in name or "cls" in name, name
