import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from oracles import sort_recall, unit_rows

from petl_retrieval.config import EncoderConfig, PetlStrategy
from petl_retrieval.data import RetrievalSplit
from petl_retrieval.encoder import BOS_ID, EOS_ID, build_model
from petl_retrieval.errors import InputError
from petl_retrieval.metrics import (
    FIELDS,
    MetricsRecord,
    evaluate_retrieval,
    kfold_aggregate,
    mean_recall,
    metrics_from_similarity,
    recall_at_k,
    similarity_matrix,
)
from petl_retrieval.petl import attach_strategy
from petl_retrieval.training import chance_mr

DIRECTIONS = ["image_query", "text_query"]


def _record(mr):
    return MetricsRecord(mr, mr, mr, mr, mr, mr, mr, 10, 100)


def test_similarity_examples():
    e = np.eye(3)
    assert np.array_equal(similarity_matrix(e, e), e)
    assert np.array_equal(similarity_matrix(e[:1], e[1:]), np.zeros((1, 2)))
    with pytest.raises(InputError):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


@given(n=st.integers(1, 20), m=st.integers(1, 20), d=st.integers(1, 12), seed=st.integers(0, 2**31 - 1))
def test_similarity_bounded(n, m, d, seed):
    rng = np.random.default_rng(seed)
    assert np.abs(similarity_matrix(unit_rows(rng, n, d), unit_rows(rng, m, d))).max() <= 1 + 1e-9


def test_identity_recall():
    S = np.eye(5)
    for direction in DIRECTIONS:
        assert recall_at_k(S, range(5), 1, direction) == 100.0


def test_ground_truth_second_everywhere():
    S = np.array([[0.1, 0.9], [0.9, 0.1]])
    for direction in DIRECTIONS:
        assert recall_at_k(S, [0, 1], 1, direction) == 0.0
        assert recall_at_k(S, [0, 1], 2, direction) == 100.0


def test_any_caption_success():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 5)
    S = rng.uniform(-1, 0.5, size=(4, 20))
    for i in range(4):
        S[i, i * 5 + 2] = 1.0
    assert recall_at_k(S, labels, 1, "image_query") == 100.0


def test_ties_go_to_lower_index():
    S = np.zeros((3, 3))
    assert recall_at_k(S, [0, 1, 2], 1, "text_query") == pytest.approx(100 / 3)
    assert recall_at_k(S, [0, 1, 2], 2, "image_query") == pytest.approx(200 / 3)


def test_k_errors():
    S = np.eye(3)
    with pytest.raises(InputError):
        recall_at_k(S, [0, 1, 2], 4, "text_query")
    with pytest.raises(InputError):
        recall_at_k(S, [0, 1, 2], 0, "text_query")
    with pytest.raises(InputError):
        recall_at_k(S, [0, 1], 1, "text_query")
    with pytest.raises(InputError):
        recall_at_k(S, [0, 1, 2], 1, "sideways")


def _random_problem(rng, ties):
    n_img = int(rng.integers(1, 12))
    per = rng.integers(1, 6, size=n_img)
    labels = np.repeat(np.arange(n_img), per)
    rng.shuffle(labels)
    if ties:
        S = rng.integers(0, 4, size=(n_img, len(labels))) / 4.0
    else:
        S = rng.standard_normal((n_img, len(labels)))
    return S, labels


def test_recall_matches_sort_oracle_100_matrices():
    rng = np.random.default_rng(0)
    for trial in range(100):
        S, labels = _random_problem(rng, ties=trial % 2 == 0)
        n_img, n_cap = S.shape
        for direction, n in (("image_query", n_cap), ("text_query", n_img)):
            for K in sorted({1, min(5, n), min(10, n), n}):
                expected = sort_recall(S, labels, K, direction)
                assert recall_at_k(S, labels, K, direction) == pytest.approx(expected, abs=1e-12)


@given(seed=st.integers(0, 2**31 - 1), ties=st.booleans())
def test_recall_monotone_in_k(seed, ties):
    S, labels = _random_problem(np.random.default_rng(seed), ties)
    for direction, n in (("image_query", S.shape[1]), ("text_query", S.shape[0])):
        values = [recall_at_k(S, labels, k, direction) for k in range(1, n + 1)]
        assert values == sorted(values)
        assert values[-1] == 100.0


@given(seed=st.integers(0, 2**31 - 1))
def test_joint_image_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    S, labels = _random_problem(rng, ties=False)
    perm = rng.permutation(S.shape[0])
    inverse = np.argsort(perm)
    a = metrics_from_similarity(S, labels)
    b = metrics_from_similarity(S[perm], inverse[labels])
    assert a == b


def test_mean_recall_examples():
    assert mean_recall([10] * 6) == 10
    assert mean_recall([0] * 6) == 0
    assert mean_recall([23.67, 44.07, 60.36, 20.10, 50.63, 67.97]) == pytest.approx(44.47, abs=0.005)
    with pytest.raises(InputError):
        mean_recall([1, 2, 3])


@given(st.lists(st.floats(0, 100), min_size=6, max_size=6))
def test_mean_recall_bounded(values):
    assert min(values) - 1e-9 <= mean_recall(values) <= max(values) + 1e-9


def test_metrics_record_schema():
    rec = metrics_from_similarity(np.eye(3), [0, 1, 2], 5, 50)
    assert tuple(rec.as_dict()) == FIELDS
    assert rec.mr == mean_recall(rec.recalls())
    assert rec.tr_r1 <= rec.tr_r5 <= rec.tr_r10 and rec.ir_r1 <= rec.ir_r5 <= rec.ir_r10


def test_single_item_all_recalls_100():
    rec = metrics_from_similarity(np.array([[0.3]]), [0])
    assert rec.recalls() == [100.0] * 6


def test_kfold_aggregate_examples():
    assert kfold_aggregate([_record(40)]) == _record(40)
    assert kfold_aggregate([_record(40), _record(60)]).mr == 50
    assert kfold_aggregate([_record(33.3)] * 5) == _record(33.3)
    with pytest.raises(InputError):
        kfold_aggregate([])


def test_random_embeddings_r1_near_chance():
    """n=100, one caption each: R@1 ~ 1% for a random ranking."""
    values = []
    for seed in range(40):
        rng = np.random.default_rng(seed)
        S = similarity_matrix(unit_rows(rng, 100, 16), unit_rows(rng, 100, 16))
        values.append(recall_at_k(S, range(100), 1, "text_query"))
    mean = np.mean(values)
    sigma = np.sqrt(0.01 * 0.99 / 100) * 100 / np.sqrt(len(values))
    assert abs(mean - 1.0) < 3 * sigma


def _split(n_img, caps_per, cfg, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_img), caps_per)
    tokens = [[BOS_ID, *rng.integers(4, cfg.vocab_size, size=3).tolist(), EOS_ID] for _ in labels]
    images = rng.standard_normal((n_img, cfg.image_size, cfg.image_size, 3)).astype(np.float32)
    return RetrievalSplit(images, tokens, labels, [f"i{k}" for k in range(n_img)])


def test_evaluate_retrieval_deterministic():
    cfg = EncoderConfig.toy()
    model = attach_strategy(build_model(cfg, seed=0), PetlStrategy("mrs_adapter", {"d": 4, "r": 4}))
    split = _split(6, 2, cfg)
    a = evaluate_retrieval(model, split, batch_size=4)
    b = evaluate_retrieval(model, split, batch_size=4)
    assert a == b
    assert a.params_trainable == 4 * (2 * 32 + 2 * 24 - 4)


def test_evaluate_single_pair_and_empty():
    cfg = EncoderConfig.toy()
    model = build_model(cfg)
    assert evaluate_retrieval(model, _split(1, 1, cfg)).recalls() == [100.0] * 6
    empty = RetrievalSplit(np.zeros((0, 32, 32, 3), np.float32), [], np.zeros(0, np.int64), [])
    with pytest.raises(InputError):
        evaluate_retrieval(model, empty)


def test_chance_mr_matches_monte_carlo():
    cfg = EncoderConfig.toy()
    split = _split(7, 3, cfg)
    rng = np.random.default_rng(0)
    sims = [metrics_from_similarity(rng.random((7, 21)), split.caption_to_image).mr for _ in range(3000)]
    assert abs(np.mean(sims) - chance_mr(split)) < 4 * np.std(sims) / np.sqrt(len(sims))


def test_encode_split_returns_numpy():
    from petl_retrieval.metrics import encode_split

    cfg = EncoderConfig.toy()
    V, T = encode_split(build_model(cfg, dtype=torch.float64), _split(3, 2, cfg))
    assert V.shape == (3, 16) and T.shape == (6, 16)
