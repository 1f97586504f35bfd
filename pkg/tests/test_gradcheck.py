"""The gradient-check registry: coverage, honesty, and reporting."""

import numpy as np
import pytest

import fusedet.tensor as T
from fusedet.gradcheck import (DEFAULT_TOLERANCE, CheckRow, registered_names,
                               run_suite)
from fusedet.necks import NECK_KINDS
from fusedet.tensor import Tensor

# every differentiable primitive must have a named row; adding an op to the
# tensor module without registering a check here is a test failure
PRIMITIVES = [
    "add", "sub", "mul", "div", "neg", "relu", "exp", "log", "sqrt",
    "pow_const", "absolute", "sigmoid", "logsigmoid", "maximum", "minimum",
    "sum_all", "sum_axis", "mean_all", "softmax_lastdim", "layer_norm",
    "reshape", "permute", "swap_last2", "concat", "narrow", "take_rows",
    "matmul", "affine", "conv2d", "depthwise_conv2d", "upsample_nearest_2x",
    "adaptive_avg_pool",
]

COMPOSITES = [
    "multi_head_attention", "pma", "dense_attention", "self_attention",
    "caf", "ha_block", "ha_finalize", "fpn_build", "vfm_build", "backbone",
    "head_forward", "focal_terms", "bce_terms", "regression_terms",
    "combined_loss",
]


class TestRegistry:
    def test_every_primitive_registered(self):
        missing = set(PRIMITIVES) - set(registered_names())
        assert not missing, f"primitives without a gradient check: {missing}"

    def test_every_neck_kind_registered(self):
        names = set(registered_names())
        for kind in NECK_KINDS:
            assert f"neck-{kind}" in names

    def test_composites_registered(self):
        missing = set(COMPOSITES) - set(registered_names())
        assert not missing

    def test_unknown_name_rejected(self):
        with pytest.raises(KeyError):
            run_suite(names=["definitely_not_registered"])


class TestRunSuite:
    def test_sample_rows_pass(self):
        rows = run_suite(names=["add", "matmul", "conv2d", "softmax_lastdim",
                                "neck-reweighting"])
        assert all(r.ok for r in rows)
        assert all(r.max_rel_err < DEFAULT_TOLERANCE for r in rows)

    def test_row_per_requested_check(self):
        names = ["relu", "exp", "log"]
        rows = run_suite(names=names)
        assert [r.name for r in rows] == names

    def test_report_callback_streams(self):
        seen = []
        run_suite(names=["add", "neg"], report=seen.append)
        assert [r.name for r in seen] == ["add", "neg"]

    def test_restores_float_mode(self):
        from fusedet.dtypes import is_float64
        before = is_float64()
        run_suite(names=["add"])
        assert is_float64() == before

    def test_line_format(self):
        row = CheckRow("demo", 3.0e-9, 1e-4, True, 0.01)
        assert "demo" in row.line()
        assert "ok" in row.line()
        assert "FAIL" in CheckRow("demo", 1.0, 1e-4, False, 0.0).line()


class TestSabotage:
    """A deliberately wrong backward must make its row fail; a suite that
    cannot detect a planted bug proves nothing."""

    def test_corrupted_backward_detected(self, monkeypatch):
        real_relu = T.relu

        def shifted_gradient(a):
            # same values as relu at the evaluation point, but the tape
            # picks up a spurious extra path with slope 0.1
            anchor = Tensor(a.data.copy())
            return T.add(real_relu(a), T.mul(T.sub(a, anchor), 0.1))

        monkeypatch.setattr(T, "relu", shifted_gradient)
        rows = run_suite(names=["relu"])
        assert not rows[0].ok
        assert rows[0].max_rel_err > 0.01

    def test_corrupted_composite_detected(self, monkeypatch):
        real_softmax = T.softmax_lastdim

        def shifted(a):
            anchor = Tensor(a.data.copy())
            return T.add(real_softmax(a), T.mul(T.sub(a, anchor), 0.05))

        monkeypatch.setattr(T, "softmax_lastdim", shifted)
        rows = run_suite(names=["multi_head_attention"])
        assert not rows[0].ok
