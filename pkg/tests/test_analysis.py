import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoatt.analysis import (SimilarityAccumulator, SimilarityReport, attention_similarity, build_plan,
                              cosine_similarity, select_unchanged_layers)
from echoatt.cli import match_published_label
from echoatt.errors import ContractError, DegenerateInputError, InputError
from echoatt.model import TransformerModel
from echoatt.plan import SharingPlan
from echoatt.tensor import no_grad

from conftest import tiny_config


def naive_similarity(model, samples):
    """Store every attention tensor, then loop over sample and layer pairs."""
    n = model.config.n_layers
    stored = []
    with no_grad():
        for s in samples:
            _, trace = model(s[None, :])
            stored.append([trace.attention(j)[0].ravel().copy() for j in range(n)])
    sims = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            vals = []
            for per_layer in stored:
                u, v = per_layer[i], per_layer[j]
                vals.append(float(u @ v) / (np.sqrt(u @ u) * np.sqrt(v @ v)))
            sims[i, j] = sum(vals) / len(vals)
    return sims


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(DegenerateInputError):
        cosine_similarity([0, 0], [1, 1])


def test_similarity_matches_naive_loop(rng):
    cfg = tiny_config(n_layers=3, max_seq_len=16)
    model = TransformerModel(cfg, seed=6)
    samples = rng.integers(0, cfg.vocab_size, (5, 12))
    report = attention_similarity(model, [samples[:2], samples[2:]])
    np.testing.assert_allclose(report.pairwise, naive_similarity(model, samples), atol=1e-12)
    assert report.n_samples == 5 and report.seq_len == 12


def test_streaming_equals_single_batch_and_threads(rng):
    cfg = tiny_config(n_layers=3)
    model = TransformerModel(cfg, seed=6)
    samples = rng.integers(0, cfg.vocab_size, (6, 10))
    one = attention_similarity(model, [samples])
    chunks = attention_similarity(model, [samples[i:i + 1] for i in range(6)], workers=3)
    np.testing.assert_allclose(one.pairwise, chunks.pairwise, atol=1e-13)
    np.testing.assert_allclose(one.per_layer_avg, chunks.per_layer_avg, atol=1e-13)


def test_report_shape_properties(rng):
    cfg = tiny_config(n_layers=4)
    rep = attention_similarity(TransformerModel(cfg, seed=1), rng.integers(0, cfg.vocab_size, (3, 8)))
    assert np.array_equal(rep.pairwise, rep.pairwise.T)
    assert np.all(np.diag(rep.pairwise) == 1.0)
    assert np.all((rep.pairwise >= -1) & (rep.pairwise <= 1))
    np.testing.assert_allclose(rep.per_layer_avg, (rep.pairwise.sum(1) - 1) / 3, atol=1e-15)


def test_report_round_trip(tmp_path, rng):
    cfg = tiny_config()
    rep = attention_similarity(TransformerModel(cfg, seed=1), rng.integers(0, cfg.vocab_size, (2, 6)))
    rep.write(tmp_path / "r.json", tmp_path / "p.csv", tmp_path / "a.csv")
    back = SimilarityReport.read(tmp_path / "r.json")
    np.testing.assert_array_equal(back.pairwise, rep.pairwise)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "i,j,similarity"
    assert len((tmp_path / "a.csv").read_text().splitlines()) == cfg.n_layers + 1


def test_ragged_and_shared_inputs_rejected(rng):
    cfg = tiny_config()
    model = TransformerModel(cfg, seed=1)
    with pytest.raises(InputError):
        attention_similarity(model, [np.zeros((1, 4), int), np.zeros((1, 5), int)])
    with pytest.raises(InputError):
        attention_similarity(model, [[[1, 2], [3]]])
    with pytest.raises(ContractError):
        attention_similarity(TransformerModel(cfg, SharingPlan((0, 0, 2))), np.zeros((1, 4), int))
    acc = SimilarityAccumulator(2)
    acc.add_sample(np.ones((2, 3)))
    other = SimilarityAccumulator(2, seq_len=4)
    acc.seq_len = 3
    with pytest.raises(InputError):
        acc.merge(other)


def test_accumulator_merge_is_associative(rng):
    parts = []
    for _ in range(3):
        a = SimilarityAccumulator(3)
        for _ in range(2):
            a.add_sample(rng.uniform(0, 1, (3, 5)))
        parts.append(a)
    left = parts[0].merge(parts[1]).merge(parts[2]).report()
    right = parts[0].merge(parts[1].merge(parts[2])).report()
    np.testing.assert_allclose(left.pairwise, right.pairwise, atol=1e-15)


def test_selection_worked_examples():
    sel = select_unchanged_layers([0.20, 0.85, 0.90, 0.92, 0.30])
    assert sel.unchanged == {0, 4} and sel.warning is None
    assert select_unchanged_layers([0.2, 0.21, 0.9, 0.91]).unchanged == {0, 1}
    flat = select_unchanged_layers([0.5, 0.5, 0.5])
    assert flat.unchanged == set() and flat.warning


def test_selection_rejects_interior_layers():
    sel = select_unchanged_layers([0.1, 0.9, 0.15, 0.95, 0.92])
    assert sel.unchanged == {0}
    assert sel.rejected == {2}
    assert "2" in sel.warning


def test_selection_tie_takes_lowest_gap():
    # gaps 0.4 and 0.4: the cut sits after the lowest value
    sel = select_unchanged_layers([0.1, 0.5, 0.9])
    assert sel.candidates == {0}


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=12))
def test_selection_properties(avgs):
    sel = select_unchanged_layers(avgs)
    n = len(avgs)
    assert sel.unchanged <= sel.candidates
    assert sel.unchanged | sel.rejected == sel.candidates
    if sel.candidates:
        assert len(sel.candidates) < n
        hi = min(avgs[i] for i in range(n) if i not in sel.candidates)
        assert all(avgs[i] <= hi for i in sel.candidates)
    for u in sel.unchanged:
        assert all(i in sel.unchanged for i in range(u)) or all(i in sel.unchanged for i in range(u, n))


def test_build_plan_examples():
    assert build_plan({0, 5}, 6, 2).source_of == (0, 1, 1, 3, 3, 5)
    assert build_plan({0, 5}, 6, 3).source_of == (0, 1, 1, 1, 4, 5)
    assert build_plan(set(range(4)), 4, 2).source_of == (0, 1, 2, 3)
    assert build_plan({0, 5}, 6, 2).b == 1
    with pytest.raises(ContractError):
        build_plan({0}, 4, 1)
    with pytest.raises(ContractError):
        build_plan({7}, 4, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 16).flatmap(lambda n: st.tuples(st.just(n), st.sets(st.integers(0, n - 1)),
                                                        st.integers(2, 5))))
def test_build_plan_properties(args):
    n, unchanged, k = args
    plan = build_plan(unchanged, n, k)
    for u in unchanged:
        assert plan.source_of[u] == u
        assert u not in plan.source_of[:u] + plan.source_of[u + 1:]
    for run in plan.runs():
        assert len(run) <= k
        assert run == list(range(run[0], run[0] + len(run)))


def test_published_index_list_is_labelled():
    plan = SharingPlan.from_shared_indices([2, 5, 4, 3, 7], 22)
    assert plan.n_shared == 5
    assert plan.sharing_ratio == pytest.approx(5 / 22)
    assert match_published_label([2, 5, 4, 3, 7], 22) == "published-23%"
    assert match_published_label([2, 5], 22) is None
