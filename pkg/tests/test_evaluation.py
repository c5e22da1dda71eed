import json
import math

import numpy as np
import pytest

from etndnet.errors import DimensionMismatch, NoValidGallery
from etndnet.evaluation import EvalSet, evaluate, pairwise_distances
from oracles import brute_distances, brute_scores


def test_identical_vectors_zero_distance():
    v = np.array([[0.3, -1.2, 2.0]])
    for metric in ("euclidean", "cosine"):
        assert pairwise_distances(v, v, metric)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_unit_vectors():
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert pairwise_distances(a, b)[0, 0] == pytest.approx(math.sqrt(2))
    assert pairwise_distances(a, b, "cosine")[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_distances_match_double_loop(metric):
    rng = np.random.default_rng(0)
    q, g = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    assert np.allclose(pairwise_distances(q, g, metric), brute_distances(q.tolist(), g.tolist(), metric), atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))


def test_hand_enumerated_ap():
    dist = np.array([[0.1, 0.2, 0.3]])
    es = EvalSet(np.zeros((1, 2)), [7], np.zeros((3, 2)), [7, 1, 7])
    r = evaluate(es, dist=dist, max_rank=3)
    assert r.map == pytest.approx((1 / 1 + 2 / 3) / 2)
    assert r.cmc[0] == 1.0


def test_unique_match_at_rank_one():
    es = EvalSet(np.zeros((1, 2)), [3], np.zeros((4, 2)), [3, 0, 1, 2])
    r = evaluate(es, dist=np.array([[0.0, 1.0, 2.0, 3.0]]), max_rank=4)
    assert r.map == 1.0 and (r.cmc == 1).all()


def _random_instance(rng, nq=None, ng=None):
    nq = nq or int(rng.integers(1, 21))
    ng = ng or int(rng.integers(1, 51))
    ids = int(rng.integers(2, 8))
    qids = rng.integers(0, ids, nq)
    gids = rng.integers(0, ids, ng)
    gids[rng.integers(0, ng)] = qids[0]  # at least one query is scorable
    qc, gc = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
    # quantized distances so ties occur
    dist = np.round(rng.random((nq, ng)) * 10) / 10
    return dist, qids, gids, qc, gc


def test_against_brute_force_scorer():
    rng = np.random.default_rng(0)
    done = 0
    while done < 100:
        dist, qids, gids, qc, gc = _random_instance(rng)
        for filt in (False, True):
            es = EvalSet(np.zeros((len(qids), 1)), qids, np.zeros((len(gids), 1)), gids, qc, gc)
            try:
                r = evaluate(es, dist=dist, cross_camera_filter=filt)
            except NoValidGallery:
                continue
            cmc, mean_ap, skipped = brute_scores(dist.tolist(), qids, gids, qc, gc, 20, filt)
            assert np.allclose(r.cmc, cmc, atol=1e-9, rtol=0)
            assert abs(r.map - mean_ap) <= 1e-9
            assert r.num_skipped == skipped
        done += 1


def test_cmc_monotone_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dist, qids, gids, *_ = _random_instance(rng, 20, 50)
        es = EvalSet(np.zeros((20, 1)), qids, np.zeros((50, 1)), gids)
        r = evaluate(es, dist=dist)
        assert (np.diff(r.cmc) >= 0).all() and 0 <= r.cmc.min() and r.cmc.max() <= 1
        assert r.map == pytest.approx(r.per_query_ap.mean())


def test_gallery_permutation_invariance():
    rng = np.random.default_rng(2)
    q, g = rng.normal(size=(10, 6)), rng.normal(size=(30, 6))
    qids, gids = rng.integers(0, 5, 10), rng.integers(0, 5, 30)
    base = evaluate(EvalSet(q, qids, g, gids))
    perm = rng.permutation(30)
    moved = evaluate(EvalSet(q, qids, g[perm], gids[perm]))
    assert np.allclose(base.cmc, moved.cmc) and base.map == pytest.approx(moved.map)


def test_ties_break_by_gallery_index():
    es = EvalSet(np.zeros((1, 1)), [1], np.zeros((2, 1)), [0, 1])
    r = evaluate(es, dist=np.array([[0.5, 0.5]]), max_rank=2)
    assert r.cmc.tolist() == [0.0, 1.0]


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    dist = rng.random((15, 40))
    qids, gids = rng.integers(0, 6, 15), rng.integers(0, 6, 40)
    es = EvalSet(np.zeros((15, 1)), qids, np.zeros((40, 1)), gids)
    a, b = evaluate(es, dist=dist), evaluate(es, dist=dist ** 3)
    assert a.map == b.map and np.array_equal(a.cmc, b.cmc)


def test_cross_camera_filter_and_skips():
    es = EvalSet(np.zeros((2, 1)), [0, 1], np.zeros((3, 1)), [0, 0, 1], [0, 0], [0, 1, 0])
    r = evaluate(es, dist=np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]), max_rank=3)
    # query 1's only match shares its camera and is dropped; query 0 keeps its cam-1 match
    assert r.num_skipped == 1 and r.cmc.tolist() == [1.0, 1.0, 1.0]
    off = evaluate(es, dist=np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]), max_rank=3, cross_camera_filter=False)
    assert off.num_skipped == 0 and off.info["cross_camera_filter"] is False


def test_no_valid_gallery():
    es = EvalSet(np.zeros((1, 1)), [5], np.zeros((2, 1)), [0, 1])
    with pytest.raises(NoValidGallery):
        evaluate(es, dist=np.zeros((1, 2)))


def test_result_file(tmp_path):
    es = EvalSet(np.eye(3), [0, 1, 2], np.eye(3), [0, 1, 2])
    r = evaluate(es, max_rank=3, cross_camera_filter=False)
    r.save(tmp_path / "r.json")
    blob = json.loads((tmp_path / "r.json").read_text())
    assert blob["rank1"] == 1.0 and blob["metric"] == "euclidean"
    assert set(blob) >= {"cmc", "map", "cross_camera_filter", "num_skipped_queries"}
