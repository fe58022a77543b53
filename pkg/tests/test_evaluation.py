import numpy as np
import pytest

from csdetect.errors import ConfigError
from csdetect.evaluation import (EvalConfig, evaluate, f1_score, match, report)
from csdetect.rng import CounterRng


def test_perfect_detections():
    truth = [(1.0, 2.0), (5.0, 5.0), (9.0, 1.0)]
    res = match(truth, truth, rho=2.0)
    assert len(res.pairs) == 3
    assert res.false_positives == [] and res.false_negatives == []


def test_one_detection_cannot_match_two_truths():
    res = match([(5.0, 0.0)], [(4.0, 0.0), (6.0, 0.0)], rho=2.0)
    assert len(res.pairs) == 1
    assert len(res.false_negatives) == 1
    assert res.false_positives == []


def test_counts_and_scores_example():
    # 10 truths, 8 matched, 2 extra detections
    truth = [(float(10 * i), 0.0) for i in range(10)]
    dets = [(float(10 * i) + 0.5, 0.0) for i in range(8)]
    dets += [(500.0, 500.0), (600.0, 600.0)]
    res = match(dets, truth, rho=2.0)
    rep = report(len(res.pairs), len(res.false_positives), len(res.false_negatives))
    assert (rep.tp, rep.fp, rep.fn) == (8, 2, 2)
    assert rep.precision == rep.recall == 0.8
    assert abs(rep.f1 - 0.8) < 1e-12


def test_strictly_less_than_rho():
    res = match([(3.0, 0.0)], [(0.0, 0.0)], rho=3.0)
    assert res.pairs == []
    res = match([(2.999, 0.0)], [(0.0, 0.0)], rho=3.0)
    assert len(res.pairs) == 1


def test_zero_denominator_conventions():
    rep = report(0, 0, 0)
    assert rep.precision == rep.recall == rep.f1 == 0.0
    assert report(0, 5, 0).precision == 0.0
    assert report(0, 0, 5).recall == 0.0


def test_f1_equals_p_when_p_equals_r():
    for v in (0.25, 0.5, 0.8):
        assert abs(f1_score(v, v) - v) < 1e-12


def test_paper_row_cross_check():
    assert abs(f1_score(0.853, 0.791) - 0.821) <= 0.001


def test_matching_invariant_to_detection_order():
    rng = CounterRng(3)
    truth = [tuple(p) for p in rng.uniform((12, 2)) * 100]
    dets = [tuple(p + rng.normal((2,))) for p in rng.uniform((15, 2)) * 100]
    a = match(dets, truth, rho=5.0)
    b = match(dets[::-1], truth, rho=5.0)
    remap = {len(dets) - 1 - i: i for i in range(len(dets))}
    assert sorted((remap[d], t) for d, t in b.pairs) == sorted(a.pairs)


def test_tp_monotone_in_rho():
    rng = CounterRng(4)
    truth = [tuple(p) for p in rng.uniform((10, 2)) * 50]
    dets = [tuple(p) for p in rng.uniform((10, 2)) * 50]
    last = -1
    for rho in (1.0, 3.0, 8.0, 20.0, 60.0):
        tp = len(match(dets, truth, rho).pairs)
        assert tp >= last
        last = tp


def test_optimal_matching_beats_greedy_on_chain():
    # greedy grabs the closest pair and strands the second detection
    truth = [(0.0, 0.0), (6.0, 0.0)]
    dets = [(4.9, 0.0), (10.9, 0.0)]
    greedy = match(dets, truth, rho=5.0, matching="greedy")
    optimal = match(dets, truth, rho=5.0, matching="optimal")
    assert len(greedy.pairs) == 1
    assert len(optimal.pairs) == 2


def test_evaluate_pools_patches():
    dets = {0: [(1.0, 1.0)], 1: [(2.0, 2.0), (50.0, 50.0)]}
    truth = {0: [(1.2, 1.0)], 1: [(2.0, 2.2)], 2: [(9.0, 9.0)]}
    rep = evaluate(dets, truth, EvalConfig(rho=2.0))
    assert (rep.tp, rep.fp, rep.fn) == (2, 1, 1)
    assert rep.per_patch == [(0, 1, 0, 0), (1, 1, 1, 0), (2, 0, 0, 1)]
    assert rep.summary_line().startswith("P=0.6667 R=0.6667 F1=0.6667")


def test_validation():
    with pytest.raises(ConfigError):
        EvalConfig(rho=0.0)
    with pytest.raises(ConfigError):
        match([], [], rho=-1.0)
    with pytest.raises(ConfigError):
        report(-1, 0, 0)
