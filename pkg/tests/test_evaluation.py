import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crrn import evaluation as ev, synth
from crrn.evaluation import PadScores


@pytest.fixture(scope="module")
def layout():
    return synth.generate_layout(0)


def brute_counts(score, label, theta, polarity):
    tp = fp = fn = 0
    for s, l in zip(score, label):
        if polarity == "excessive":
            pred, pos = s > theta, l == 1
        else:
            pred, pos = s < -theta, l == -1
        tp += pred and pos
        fp += pred and not pos
        fn += (not pred) and pos
    return tp, fp, fn


class TestStatistical:
    def test_identical_volumes_score_zero(self, layout):
        s = synth.generate_normal(layout, amp_clean=0, amp_blade=0, sigma_noise=0, pad_noise=0, seed=0)
        sc = ev.statistical_detect(s)
        assert np.all(sc.score == 0)

    @pytest.mark.parametrize("window", ["board", "sequence"])
    def test_single_outlier(self, window):
        # one group of 101 pads: 100 at 0, one at 3 sigma of the rest
        pads = np.array([[0, 2 * i, 0, 1, 1] for i in range(16)] + [[2, 2 * i, 0, 1, 1] for i in range(16)]
                        + [[4, 2 * i, 0, 1, 1] for i in range(16)])
        lay = synth.BoardLayout(32, 32, pads, np.array([1.0]), np.array([0.05]))
        vol = np.zeros((1, 32, 32), np.float32)
        vol[0, 0, 0] = 10.0
        frames = np.stack([vol, lay.pad_mask()[None]], axis=1).astype(np.float32)
        seq = synth.SpiSequence(frames, lay, None, {})
        z = ev.statistical_detect(seq, window=window).score[0]
        n = lay.n_pads
        v = np.zeros(n)
        v[0] = 10.0
        assert z[0] == pytest.approx((10 - v.mean()) / v.std(ddof=1), rel=1e-12)
        assert z[0] == pytest.approx((n - 1) / np.sqrt(n), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-3, 3), g=st.integers(0, 3))
    def test_group_shift_invariance(self, seed, shift, g):
        lay = synth.generate_layout(0)
        s = synth.generate_normal(lay, seed=seed)
        frames = s.frames.astype(np.float64)
        sel = lay.pad_index_map()
        cells = np.isin(sel, np.flatnonzero(lay.pad_groups == g))
        frames[:, 0][:, cells] += shift
        shifted = synth.SpiSequence(frames, lay, s.labels, s.meta)
        np.testing.assert_allclose(ev.statistical_detect(shifted).score, ev.statistical_detect(s).score,
                                   atol=1e-6)

    def test_singleton_group_warns(self):
        pads = np.array([[0, 0, 0, 1, 1], [0, 4, 1, 1, 1], [0, 8, 1, 1, 1]])
        lay = synth.BoardLayout(16, 16, pads, np.array([1.0, 1.0]), np.array([0.05, 0.04]))
        seq = synth.generate_normal(lay, seed=0)
        with pytest.warns(UserWarning):
            sc = ev.statistical_detect(seq)
        assert np.all(sc.score[:, 0] == 0)

    def test_unknown_window(self, layout):
        with pytest.raises(ValueError):
            ev.statistical_detect(synth.generate_normal(layout, seed=0), window="day")


class TestCrrnScores:
    def test_zero_map(self, layout):
        assert np.all(ev.crrn_scores(np.zeros((3, 32, 32)), layout).score == 0)

    def test_single_pad(self, layout):
        eps = np.zeros((32, 32))
        eps[layout.pad_index_map() == 7] = 5.0
        sc = ev.crrn_scores(eps, layout).score[0]
        assert sc[7] == 5.0
        assert np.count_nonzero(sc) == 1

    def test_enumeration_oracle(self, layout):
        eps = np.random.default_rng(0).normal(size=(4, 32, 32))
        sc = ev.crrn_scores(eps, layout).score
        for t in range(4):
            for p, (r, c, _, ph, pw) in enumerate(layout.pads):
                cells = [eps[t, r + i, c + j] for i in range(ph) for j in range(pw)]
                assert sc[t, p] == pytest.approx(sum(cells) / len(cells), abs=1e-12)

    def test_labels_taken_at_pad_origin(self, layout):
        s = synth.inject_random(synth.generate_normal(layout, seed=1), 0.3, seed=2)
        sc = ev.crrn_scores(np.zeros((20, 32, 32)), layout, s.labels)
        assert np.array_equal(sc.label, s.pad_labels())


class TestCurves:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("polarity", ev.POLARITIES)
    def test_counting_oracle(self, seed, polarity):
        r = np.random.default_rng(seed)
        score = np.round(r.normal(size=100), 1)  # ties included on purpose
        label = r.choice([-1, 0, 1], size=100).astype(np.int8)
        curve = ev.pr_curve(PadScores(score[None], label[None]), polarity, n_thresholds=37)
        for i, th in enumerate(curve.threshold):
            tp, fp, fn = brute_counts(score, label, th, polarity)
            assert (curve.tp[i], curve.fp[i], curve.fn[i]) == (tp, fp, fn)
            assert curve.precision[i] == (tp / (tp + fp) if tp + fp else 1.0)
            assert curve.recall[i] == tp / (tp + fn)

    def test_perfect_separation(self):
        score = np.array([[3.0, 2.5, 0.1, -0.2, 0.0]])
        label = np.array([[1, 1, 0, 0, 0]])
        curve = ev.pr_curve(PadScores(score, label))
        assert np.any((curve.precision == 1) & (curve.recall == 1))
        assert ev.best_f1(curve)[0] == 1.0

    def test_random_scores_precision_near_prevalence(self):
        r = np.random.default_rng(0)
        score = r.normal(size=20_000)
        label = (r.random(20_000) < 0.5).astype(np.int8)
        curve = ev.pr_curve(PadScores(score[None], label[None]))
        enough = (curve.tp + curve.fp) > 1000
        assert np.all(np.abs(curve.precision[enough] - label.mean()) < 0.03)

    def test_degenerate_labels(self):
        with pytest.raises(ev.DegenerateLabelsError):
            ev.pr_curve(PadScores(np.ones((1, 4)), np.zeros((1, 4))))
        with pytest.raises(ev.DegenerateLabelsError):
            ev.pr_curve(PadScores(np.ones((1, 4)), -np.ones((1, 4))), "insufficient")

    def test_unknown_polarity(self):
        with pytest.raises(ValueError):
            ev.pr_curve(PadScores(np.ones((1, 2)), np.array([[0, 1]])), "both")

    def test_f1_values(self):
        assert ev.f1(0.8, 0.8) == pytest.approx(0.8, abs=1e-15)
        assert ev.f1(1.0, 0.5) == pytest.approx(2 / 3, abs=1e-15)
        assert ev.f1(0.0, 0.0) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_best_f1_scan_oracle(self, seed):
        r = np.random.default_rng(seed)
        score = r.normal(size=60) + 0.8 * (lab := (r.random(60) < 0.3).astype(np.int8))
        curve = ev.pr_curve(PadScores(score[None], lab[None]), n_thresholds=25)
        best, th = -1.0, None
        for i in range(len(curve.threshold)):
            p, rc = curve.precision[i], curve.recall[i]
            f = 2 * p * rc / (p + rc) if p + rc else 0.0
            if f > best:
                best, th = f, curve.threshold[i]
        assert ev.best_f1(curve) == (pytest.approx(best, abs=1e-15), th)


class TestRecallProfile:
    def test_unlabeled_boards_null(self):
        label = np.array([[0, 0], [1, 0], [0, -1]])
        score = np.array([[9.0, 9.0], [2.0, 0.0], [0.0, -2.0]])
        assert ev.recall_profile(PadScores(score, label), 1.0) == [None, 1.0, 1.0]

    def test_perfect_detector(self, layout):
        s = synth.inject_defect(synth.generate_normal(layout, seed=0), "support", seed=1)
        lab = s.pad_labels()
        prof = ev.recall_profile(PadScores(5.0 * lab, lab), 1.0)
        for t, v in enumerate(prof):
            assert v is None if not lab[t].any() else v == 1.0

    def test_partial(self):
        label = np.array([[1, 1, -1, -1]])
        score = np.array([[2.0, 0.5, -2.0, 3.0]])
        assert ev.recall_profile(PadScores(score, label), 1.0) == [0.5]


class TestBinarize:
    def test_zero_map_empty(self):
        assert not ev.binarize_channels(np.zeros((8, 8)), 0.5).any()

    def test_single_cell_blob(self):
        eps = np.zeros((8, 8))
        eps[3, 3] = 5.0
        out = ev.binarize_channels(eps, 1.0, pool_k=2)
        # a stride-1 2x2 window centred like scipy's filters covers rows/cols 3..4
        expect = np.zeros((8, 8), np.uint8)
        expect[3:5, 3:5] = 1
        assert np.array_equal(out[0], expect)
        assert not out[1].any()

    def test_negative_blob(self):
        eps = np.zeros((8, 8))
        eps[2:4, 5] = -5.0
        out = ev.binarize_channels(eps, 1.0, pool_k=1)
        assert np.array_equal(out[1], (eps < -1).astype(np.uint8))
        assert not out[0].any()

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 4), th=st.floats(0.0, 3.0))
    def test_channels_disjoint_without_pooling(self, seed, k, th):
        eps = np.random.default_rng(seed).normal(size=(2, 8, 8)) * 2
        out = ev.binarize_channels(eps, th, pool_k=1)
        assert out.shape == (2, 2, 8, 8)
        assert not np.any(out[:, 0] & out[:, 1])

    def test_bad_pool(self):
        with pytest.raises(ValueError):
            ev.binarize_channels(np.zeros((4, 4)), 1.0, pool_k=0)


def test_evaluate_scores_report(layout):
    seqs = [synth.inject_random(synth.generate_normal(layout, seed=i), 0.2, seed=50 + i) for i in range(3)]
    sc = PadScores.concat([ev.statistical_detect(s) for s in seqs])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = ev.evaluate_scores(sc, thresholds={"excessive": 2.0})
    d = rep.to_dict()
    assert set(d["best"]) <= set(ev.POLARITIES) and d["best"]
    assert len(d["recall_profile"]["excessive"]) == 1
