import csv
import json
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindvis.config import EvalSection
from mindvis.metrics import (LookupOracle, MetricReport, across_input_agreement, candidate_rank_success,
                             check_probabilities, fid, nway_topk_accuracy, pixel_mse, sampling_consistency)


class TableOracle:
    """Returns a fixed probability row keyed by the first pixel value of each image."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def __call__(self, images):
        keys = np.asarray(images)[:, 0, 0, 0].round().astype(int)
        return self.rows[keys]


def keyed_image(key, size=2):
    return np.full((size, size, 3), float(key))


# rows: 0 is the ground truth's distribution, 1 is a generated image
ROWS = [[0.7, 0.1, 0.1, 0.1], [0.3, 0.4, 0.1, 0.2]]
ORACLE = TableOracle(ROWS)
GT, GEN = keyed_image(0), keyed_image(1)


def test_nway_example_expectations():
    # true class 0 beats classes 2 and 3 but not class 1
    rng = np.random.default_rng(0)
    acc = nway_topk_accuracy(GEN, GT, ORACLE, n=2, trials=20_000, rng=rng)
    assert abs(acc - 2 / 3) < 3 * math.sqrt(2 / 9 / 20_000)
    acc3 = nway_topk_accuracy(GEN, GT, ORACLE, n=3, trials=20_000, rng=rng)
    assert abs(acc3 - 1 / 3) < 3 * math.sqrt(2 / 9 / 20_000)
    assert nway_topk_accuracy(GEN, GT, ORACLE, n=4, trials=50, rng=rng) == 0.0
    assert nway_topk_accuracy(GEN, GT, ORACLE, n=4, k=2, trials=50, rng=rng) == 1.0


def test_nway_with_one_way_always_succeeds():
    assert nway_topk_accuracy(GEN, GT, ORACLE, n=1, trials=10) == 1.0


@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_topk_monotone_in_k(n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(6), size=2)
    oracle = TableOracle(p)
    gen, gt = np.stack([keyed_image(1)] * 3), np.stack([keyed_image(0)] * 3)
    accs = [nway_topk_accuracy(gen, gt, oracle, n=n, k=k, trials=20, rng=np.random.default_rng(seed))
            for k in range(1, n + 1)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0


def test_nway_matches_brute_force_with_shared_seed():
    rng = np.random.default_rng(3)
    C = 7
    probs = rng.dirichlet(np.ones(C), size=6)
    oracle = TableOracle(probs)
    gen = np.stack([keyed_image(i) for i in (0, 1, 2)])
    gt = np.stack([keyed_image(i) for i in (3, 4, 5)])
    for n, k in ((2, 1), (5, 2), (7, 3)):
        got = nway_topk_accuracy(gen, gt, oracle, n=n, k=k, trials=100, rng=np.random.default_rng(9))
        draw = np.random.default_rng(9)
        hits = 0
        for i in range(3):
            p_gen, p_gt = probs[i], probs[i + 3]
            y = max(range(C), key=lambda c: (p_gt[c], -c))
            others = [c for c in range(C) if c != y]
            for _ in range(100):
                cand = [y] + list(draw.choice(np.array(others), size=n - 1, replace=False))
                ranked = sorted(cand, key=lambda c: (-p_gen[c], c))
                hits += y in ranked[:k]
        assert got == hits / 300


def test_candidate_rank_ties_go_to_lower_index():
    p = np.array([0.25, 0.25, 0.25, 0.25])
    assert candidate_rank_success(p, 0, np.array([0, 3]), 1)
    assert not candidate_rank_success(p, 3, np.array([3, 0]), 1)


@pytest.mark.parametrize("kw", [dict(n=0), dict(n=5), dict(n=2, k=3), dict(n=2, k=0)])
def test_nway_argument_errors(kw):
    with pytest.raises(ValueError):
        nway_topk_accuracy(GEN, GT, ORACLE, trials=1, **kw)


def test_nway_shape_and_probability_errors():
    with pytest.raises(ValueError):
        nway_topk_accuracy(GEN, keyed_image(0, 3), ORACLE, n=2)
    with pytest.raises(ValueError):
        nway_topk_accuracy(GEN, GT, lambda x: np.full((len(x), 4), 0.3), n=2)
    with pytest.raises(ValueError):
        check_probabilities(np.array([[1.5, -0.5]]))


# --- FID -------------------------------------------------------------------------

def test_fid_identical_sets_is_zero(rng):
    a = rng.normal(size=(200, 5))
    assert fid(a, a) == pytest.approx(0.0, abs=1e-8)


def test_fid_of_shifted_copies_is_squared_shift(rng):
    a = rng.normal(size=(100, 3))
    shift = np.array([1.0, -2.0, 0.5])
    assert fid(a, a + shift) == pytest.approx(float(shift @ shift), rel=1e-8)


def test_fid_point_masses():
    a = np.tile([1.0, 2.0], (5, 1))
    b = np.tile([4.0, 6.0], (5, 1))
    assert fid(a, b) == pytest.approx(25.0)


def test_fid_one_dimensional_closed_form(rng):
    a = rng.normal(0.5, 2.0, size=(300, 1))
    b = rng.normal(-1.0, 0.5, size=(400, 1))
    s1, s2 = a.std(ddof=1), b.std(ddof=1)
    expect = (a.mean() - b.mean()) ** 2 + (s1 - s2) ** 2
    assert fid(a, b) == pytest.approx(expect, rel=1e-9)


@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_fid_symmetric_and_non_negative(seed, d):
    g = np.random.default_rng(seed)
    a = g.normal(size=(20, d))
    b = g.normal(size=(15, d)) * g.uniform(0.1, 3)
    ab, ba = fid(a, b), fid(b, a)
    assert ab >= 0 and ba >= 0
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-8)


def test_fid_errors(rng):
    with pytest.raises(ValueError):
        fid(rng.normal(size=(5, 2)), rng.normal(size=(5, 3)))
    with pytest.raises(ValueError):
        fid(rng.normal(size=(1, 2)), rng.normal(size=(5, 2)))


# --- pixel MSE ------------------------------------------------------------------

def test_pixel_mse_examples(rng):
    assert pixel_mse(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 1.0
    a = rng.random((3, 4, 4, 3))
    b = rng.random((3, 4, 4, 3))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    assert abs(pixel_mse(a, b) - total / a.size) < 1e-12
    with pytest.raises(ValueError):
        pixel_mse(a, b[:2])


# --- consistency ----------------------------------------------------------------

def test_identical_samplings_are_fully_consistent():
    oracle = TableOracle(np.eye(3))
    s = np.stack([np.stack([keyed_image(c)] * 5) for c in (0, 1, 2)])
    assert sampling_consistency(s, oracle) == (1.0, 0.0)
    rate, pairs = across_input_agreement(s, oracle)
    assert rate == 0.0 and pairs == 3 * 25


def test_consistency_hand_example():
    oracle = TableOracle(np.eye(3))
    # labels (0, 0, 1): one agreeing pair out of three
    s = np.stack([keyed_image(0), keyed_image(0), keyed_image(1)])[None]
    mean, std = sampling_consistency(s, oracle)
    assert mean == pytest.approx(1 / 3) and std == 0.0


def test_random_labels_agree_at_chance():
    C, n_inputs = 5, 2000
    g = np.random.default_rng(4)

    def oracle(images):
        return np.eye(C)[g.integers(0, C, size=len(images))]

    s = np.zeros((n_inputs, 2, 1, 1, 3))
    mean, _ = sampling_consistency(s, oracle)
    assert abs(mean - 1 / C) < 3 * math.sqrt((1 / C) * (1 - 1 / C) / n_inputs)


def test_consistency_needs_two_samplings():
    with pytest.raises(ValueError):
        sampling_consistency(np.zeros((3, 1, 2, 2, 3)), TableOracle(np.eye(1)))


def test_default_samplings_is_five():
    assert EvalSection().samplings == 5


# --- oracles and reports ------------------------------------------------------------

def test_lookup_oracle_is_nearest_reference(rng):
    refs = rng.random((4, 3, 3, 3))
    oracle = LookupOracle(refs)
    noisy = refs[[2, 0]] + 0.01
    np.testing.assert_array_equal(oracle(noisy), np.eye(4)[[2, 0]])
    assert oracle.n_classes == 4


def test_metric_report_csv_and_json(tmp_path):
    rep = MetricReport(n=10, k=1, trials=100, success_rate=0.25, fid=3.5, consistency_mean=0.5, seed=7)
    rep.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["metric", "n", "k", "trials", "value", "seed"]
    assert [r[0] for r in rows[1:]] == ["nway_top1", "fid", "consistency_mean"]
    assert float(rows[1][4]) == 0.25 and rows[1][5] == "7"
    rep.write_json(tmp_path / "m.json")
    back = json.loads((tmp_path / "m.json").read_text())
    assert back["success_rate"] == 0.25 and back["mse"] is None
    with pytest.raises(ValueError):
        MetricReport(n=2, k=1, trials=1, success_rate=1.5)
    with pytest.raises(ValueError):
        MetricReport(n=2, k=1, trials=0, success_rate=0.5)


def test_across_input_pairs_count():
    oracle = TableOracle(np.eye(2))
    s = np.stack([np.stack([keyed_image(0)] * 3)] * 4)
    rate, pairs = across_input_agreement(s, oracle)
    assert rate == 1.0 and pairs == len(list(combinations(range(4), 2))) * 9
