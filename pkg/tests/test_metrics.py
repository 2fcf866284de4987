import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from nodulesat.exceptions import ConfigurationError, ContractError, UndefinedMetricError
from nodulesat.metrics import Candidate, auc, cpm, filter_candidates, format_report, froc, froc_report, kfold_by_patient

TARGETS = (0.125, 0.25, 0.5, 1, 2, 4, 8)


def cand(score, nodule=None, series="s0"):
    return Candidate(series, (0.0, 0.0, 0.0), score, nodule is not None, nodule)


def brute_force_cpm(cands, n_scans):
    """Straight from the definition: every cutoff, then step-function lookup."""
    nodules = {c.nodule_id for c in cands if c.is_nodule}
    points = []
    for t in sorted({c.score for c in cands}, reverse=True):
        found = {c.nodule_id for c in cands if c.is_nodule and c.score >= t}
        fps = sum(1 for c in cands if not c.is_nodule and c.score >= t)
        points.append((fps / n_scans, len(found) / len(nodules)))
    sens = []
    for target in TARGETS:
        reachable = [p for p in points if p[0] <= target]
        if not reachable:
            sens.append(0.0)
        else:
            far = max(f for f, _ in reachable)
            sens.append(max(s for f, s in reachable if f == far))
    return sum(sens) / len(sens)


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    num = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return num / (len(pos) * len(neg))


def random_candidates(rng, n, n_series=3, grid=None):
    scores = rng.random(n)
    if grid:
        scores = np.round(scores * grid) / grid
    truth = rng.random(n) < 0.4
    truth[0] = True
    return [
        Candidate(f"s{rng.integers(n_series)}", (0.0, 0.0, 0.0), float(s), bool(t), f"n{rng.integers(6)}" if t else None)
        for s, t in zip(scores, truth)
    ]


class TestFROC:
    def test_perfect_separation(self):
        cands = [cand(1.0, "a"), cand(1.0, "b"), cand(0.0), cand(0.0)]
        assert froc(cands, 2).cpm == 1.0

    def test_inverted_separation(self):
        cands = [cand(0.0, "a"), cand(0.0, "b")] + [cand(1.0) for _ in range(17)]
        assert froc(cands, 2).cpm == 0.0

    def test_inverted_at_exactly_eight_per_scan(self):
        # the final cutoff lands on 8 FP/scan and recovers both nodules there
        cands = [cand(0.0, "a"), cand(0.0, "b")] + [cand(1.0) for _ in range(16)]
        assert froc(cands, 2).sensitivities == (0, 0, 0, 0, 0, 0, 1.0)

    def test_two_scan_example(self):
        cands = [cand(0.9, "A", "s0"), cand(0.4, "B", "s1"), cand(0.8, series="s0"), cand(0.6, series="s1"), cand(0.3, series="s0")]
        curve = froc(cands, 2)
        assert (0.5, 0.5) in curve.points and (1.0, 1.0) in curve.points
        # the top-scored nodule is found before any false positive
        assert (0.0, 0.5) in curve.points
        assert curve.cpm == pytest.approx(brute_force_cpm(cands, 2), abs=1e-15)
        assert curve.cpm == pytest.approx(5.5 / 7, abs=1e-12)

    def test_cpm_of_stated_sensitivities(self):
        curve = froc([cand(1.0, "a")], 1)
        curve.sensitivities = (0, 0, 0.5, 1, 1, 1, 1)
        assert cpm(curve) == pytest.approx(0.6429, abs=1e-4)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            cands = random_candidates(rng, int(rng.integers(1, 51)), grid=10 if trial % 2 else None)
            n_scans = int(rng.integers(1, 5))
            assert froc(cands, n_scans).cpm == brute_force_cpm(cands, n_scans)

    def test_duplicate_hits_count_once(self):
        cands = [cand(0.9, "a"), cand(0.8, "a"), cand(0.1, "b")]
        assert max(s for _, s in froc(cands, 1).points) == 1.0
        assert froc(cands[:2] + [cand(0.5)], 1).points[0] == (0.0, 1.0)

    def test_sensitivity_monotone(self):
        rng = np.random.default_rng(1)
        curve = froc(random_candidates(rng, 40), 2)
        fps = [f for f, _ in curve.points]
        sens = [s for _, s in curve.points]
        assert fps == sorted(fps) and sens == sorted(sens)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        cands = random_candidates(rng, 30)
        squashed = [Candidate(c.series_id, c.position, c.score**3, c.is_nodule, c.nodule_id) for c in cands]
        assert froc(cands, 2).cpm == froc(squashed, 2).cpm

    def test_no_nodules(self):
        with pytest.raises(UndefinedMetricError):
            froc([cand(0.5)], 1)

    def test_bad_scan_count(self):
        with pytest.raises(ConfigurationError):
            froc([cand(0.5, "a")], 0)

    def test_candidate_contract(self):
        with pytest.raises(ContractError):
            Candidate("s", (0, 0, 0), 1.5, False)
        with pytest.raises(ContractError):
            Candidate("s", (0, 0, 0), 0.5, True, None)

    def test_report_keys(self):
        report = froc_report(froc([cand(0.9, "a"), cand(0.1)], 1))
        assert list(report) == ["cpm"] + [f"sens@{t:g}" for t in TARGETS]
        assert format_report({"cpm": 0.5}) == "cpm=0.500000\n"


class TestAUC:
    def test_worked_example(self):
        assert auc([0.9, 0.8, 0.7, 0.3], [1, 0, 1, 0]) == 0.75

    def test_perfect(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert auc([0.5] * 6, [0, 1] * 3) == 0.5

    def test_pair_counting_and_sklearn(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            scores = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            assert auc(scores, labels) == pair_count_auc(scores, labels)
            assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_label_complement(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(20) / 20.0
        labels = rng.integers(0, 2, 20)
        labels[:2] = [0, 1]
        assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            auc([0.1, 0.2], [1])


class TestFolds:
    def test_uniform(self):
        folds = kfold_by_patient({f"p{i}": 1 for i in range(10)}, 5)
        assert [len(f) for f in folds] == [2] * 5

    def test_greedy_trace(self):
        counts = {"a": 5, "b": 1, "c": 1, "d": 1, "e": 1, "f": 1}
        folds = kfold_by_patient(counts, 2)
        assert sorted(sum(counts[p] for p in f) for f in folds) == [5, 5]

    def test_partition_and_balance(self):
        rng = np.random.default_rng(3)
        counts = {f"p{i}": int(rng.integers(1, 6)) for i in range(60)}
        folds = kfold_by_patient(counts, 5, seed=4)
        flat = [p for f in folds for p in f]
        assert sorted(flat) == sorted(counts) and len(flat) == len(set(flat))
        loads = [sum(counts[p] for p in f) for f in folds]
        assert max(loads) / min(loads) <= 1.5

    def test_deterministic(self):
        counts = {f"p{i}": i % 3 + 1 for i in range(12)}
        assert kfold_by_patient(counts, 3, seed=7) == kfold_by_patient(counts, 3, seed=7)

    def test_too_many_folds(self):
        with pytest.raises(ConfigurationError):
            kfold_by_patient({"a": 1}, 2)


class TestFilter:
    def test_boundary_kept(self):
        cands = [cand(0.05), cand(0.1), cand(0.95)]
        assert [c.score for c in filter_candidates(cands, 0.1)] == [0.1, 0.95]

    def test_zero_is_identity(self):
        cands = [cand(0.3), cand(0.0)]
        assert filter_candidates(cands, 0.0) == cands

    def test_threshold_range(self):
        with pytest.raises(ContractError):
            filter_candidates([], 1.01)
