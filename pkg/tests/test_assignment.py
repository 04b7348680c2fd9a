import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadet.assignment import (
    BACKGROUND,
    IGNORE,
    AssignmentTable,
    SamplerConfig,
    assign_class_labels,
    assign_proposal_labels,
    sample_minibatch,
)
from tadet.geometry import TemporalSegment, generate_anchors, segment_iou

from .oracles import brute_force_class_labels, brute_force_proposal_labels


class TestProposalLabels:
    def test_identical_anchor_positive_zero_target(self):
        t = assign_proposal_labels(np.array([[0.0, 16.0], [100, 116]]), np.array([[0.0, 16.0]]))
        assert t.labels[0] == 1
        np.testing.assert_array_equal(t.targets[0], [0.0, 0.0])
        assert t.matched(0) == 0

    def test_disjoint_anchor_negative(self):
        t = assign_proposal_labels(np.array([[0.0, 16.0], [100, 116]]), np.array([[0.0, 16.0]]))
        assert t.labels[1] == BACKGROUND
        assert t.regression_target(1) is None

    def test_highest_iou_fallback(self):
        gt = np.array([[0.0, 10.0]])
        anchors = np.array(
            [
                [0.0, 20.0],  # IoU 0.5, the best for the gt
                [0.0, 25.0],  # IoU 0.4, ignored
                [6.0, 30.0],  # IoU 4/30, negative
                [50.0, 60.0],  # disjoint, negative
                [-15.0, 5.0],  # IoU 5/25 = 0.2, negative
            ]
        )
        t = assign_proposal_labels(anchors, gt)
        assert t.labels.tolist() == [1, IGNORE, 0, 0, 0]
        assert t.regression_target(0) is not None
        assert t.regression_target(1) is None
        assert brute_force_proposal_labels(anchors, gt) == set(
            zip(range(5), t.labels.tolist(), t.matched_gt.tolist())
        )

    def test_gt_tie_goes_to_lowest_index(self):
        anchors = np.array([[0.0, 10.0]])
        gts = np.array([[0.0, 9.0], [1.0, 10.0]])  # both IoU 0.9
        t = assign_proposal_labels(anchors, gts)
        assert t.matched(0) == 0

    def test_no_gts_all_negative(self):
        t = assign_proposal_labels(generate_anchors(4, [2, 4]), np.zeros((0, 2)))
        assert (t.labels == BACKGROUND).all()

    def test_empty_anchors(self):
        with pytest.raises(ValueError):
            assign_proposal_labels(np.zeros((0, 2)), np.array([[0.0, 1.0]]))

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            assign_proposal_labels(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]), hi=0.3, lo=0.7)

    def test_table_invariants(self):
        rng = np.random.default_rng(1)
        grid = generate_anchors(20, [2, 4, 8])
        gts = np.sort(rng.uniform(0, 160, (3, 2)), axis=1)
        t = assign_proposal_labels(grid, gts)
        for i in range(len(t)):
            if t.labels[i] > 0:
                assert t.matched(i) is not None and t.regression_target(i) is not None
            else:
                assert t.regression_target(i) is None and t.matched(i) is None

    def test_every_covered_gt_gets_a_positive(self):
        rng = np.random.default_rng(2)
        grid = generate_anchors(96, [2, 4, 5, 6, 8, 9, 10, 12, 14, 16])
        for _ in range(50):
            s = rng.uniform(0, 700)
            gts = np.array([[s, s + rng.uniform(1, 60)]])
            t = assign_proposal_labels(grid, gts)
            assert (t.matched_gt[t.labels > 0] == 0).any()

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_permutation_invariance(self, data):
        n = data.draw(st.integers(1, 20))
        g = data.draw(st.integers(0, 3))
        seed = data.draw(st.integers(0, 2**32 - 1))
        rng = np.random.default_rng(seed)
        anchors = np.sort(rng.uniform(0, 100, (n, 2)), axis=1)
        gts = np.sort(rng.uniform(0, 100, (g, 2)), axis=1)
        perm = rng.permutation(n)
        a = assign_proposal_labels(anchors, gts)
        b = assign_proposal_labels(anchors[perm], gts)
        np.testing.assert_array_equal(a.labels[perm], b.labels)
        np.testing.assert_array_equal(a.matched_gt[perm], b.matched_gt)
        assert brute_force_proposal_labels(anchors, gts) == set(zip(range(n), a.labels.tolist(), a.matched_gt.tolist()))


class TestClassLabels:
    def test_exact_match(self):
        t = assign_class_labels(np.array([[10.0, 50.0]]), np.array([[10.0, 50.0]]), [7])
        assert t.labels[0] == 7
        np.testing.assert_array_equal(t.targets[0], [0, 0])

    def test_below_threshold_background(self):
        # IoU = 20 / 50 = 0.4
        props = np.array([[0.0, 40.0]])
        gts = np.array([[20.0, 50.0]])
        assert segment_iou(TemporalSegment(0, 40), TemporalSegment(20, 50)) == pytest.approx(0.4)
        t = assign_class_labels(props, gts, [3])
        assert t.labels[0] == BACKGROUND
        assert brute_force_class_labels(props, gts, [3]) == {(0, 0, -1)}

    def test_argmax_class(self):
        prop = np.array([[0.0, 100.0]])
        gts = np.array([[0.0, 60.0], [0.0, 80.0]])  # IoU 0.6 and 0.8
        t = assign_class_labels(prop, gts, [2, 5])
        assert t.labels[0] == 5 and t.matched(0) == 1

    def test_exactly_half_is_background(self):
        t = assign_class_labels(np.array([[0.0, 20.0]]), np.array([[0.0, 10.0]]), [1])
        assert t.labels[0] == BACKGROUND

    def test_random_against_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            props = np.sort(rng.uniform(0, 100, (rng.integers(1, 30), 2)), axis=1)
            gts = np.sort(rng.uniform(0, 100, (rng.integers(0, 4), 2)), axis=1)
            cls = rng.integers(1, 6, gts.shape[0])
            t = assign_class_labels(props, gts, cls)
            got = set(zip(range(len(props)), t.labels.tolist(), t.matched_gt.tolist()))
            assert got == brute_force_class_labels(props, gts, cls)


def _table(npos, nneg, nign=0):
    labels = np.array([1] * npos + [0] * nneg + [IGNORE] * nign)
    return AssignmentTable(
        labels,np.where(labels > 0, 0, -1), np.zeros((labels.size, 2))
    )


class TestSampler:
    def test_balanced(self):
        idx = sample_minibatch(_table(100, 100), SamplerConfig(64, 0.5, 0))
        assert (idx < 100).sum() == 32 and (idx >= 100).sum() == 32

    def test_shortfall_filled_with_negatives(self):
        idx = sample_minibatch(_table(3, 1000), SamplerConfig(64, 0.5, 0))
        assert (idx < 3).sum() == 3 and (idx >= 3).sum() == 61

    def test_one_to_three(self):
        idx = sample_minibatch(_table(200, 200), SamplerConfig(64, 0.25, 0))
        assert (idx < 200).sum() == 16 and (idx >= 200).sum() == 48

    def test_small_supply(self):
        idx = sample_minibatch(_table(2, 5), SamplerConfig(64, 0.5, 0))
        assert len(idx) == 7

    def test_ignored_never_sampled(self):
        t = _table(10, 10, 500)
        for seed in range(20):
            idx = sample_minibatch(t, SamplerConfig(64, 0.5, seed))
            assert (t.labels[idx] != IGNORE).all()
            assert len(set(idx.tolist())) == len(idx)

    def test_seed_reproducible(self):
        t = _table(100, 300, 50)
        a = sample_minibatch(t, SamplerConfig(64, 0.5, 9))
        b = sample_minibatch(t, SamplerConfig(64, 0.5, 9))
        np.testing.assert_array_equal(a, b)
        c = sample_minibatch(t, SamplerConfig(64, 0.5, 10))
        assert not np.array_equal(a, c)

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            sample_minibatch(_table(0, 0, 5), SamplerConfig(64, 0.5))

    @pytest.mark.parametrize("kw", [dict(batch_size=1, positive_fraction=0.5), dict(batch_size=8, positive_fraction=1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)
