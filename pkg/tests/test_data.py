import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoatt import toycorpus
from echoatt.data import (EOD, BatchPlan, ByteTokenizer, VocabTokenizer, batches, fixed_length_samples,
                          load_corpus, n_windows, read_documents)
from echoatt.errors import InputError


def test_byte_tokenizer():
    tok = ByteTokenizer()
    assert tok.encode("ab").tolist() == [97, 98]
    text = "héllo\nwörld"
    assert tok.decode(tok.encode(text)) == text
    assert tok.decode([104, EOD, 105]) == "hi"


def test_vocab_tokenizer(tmp_path):
    tok = VocabTokenizer({"<unk>": 0, "the": 1, "film": 2})
    assert tok.encode("the  film rocks").tolist() == [1, 2, 0]
    with pytest.raises(InputError):
        VocabTokenizer({"a": 0})
    (tmp_path / "c.txt").write_text("the film\n\nthe end\n\nfilm film\n")
    (tmp_path / "v.json").write_text('{"<unk>": 0, "the": 1, "film": 2}')
    c = load_corpus(tmp_path / "c.txt", "vocab", tmp_path / "v.json", val_fraction=0.34, seed=0)
    assert c.vocab_size == 3 and c.n_docs == 3


def test_documents_and_split(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("\n\n".join(f"doc {i}" for i in range(40)) + "\n")
    assert len(read_documents(path)) == 40
    a = load_corpus(path, seed=3)
    b = load_corpus(path, seed=3)
    c = load_corpus(path, seed=4)
    assert a.split_hash == b.split_hash != c.split_hash
    assert len(a.val_doc_ids) == 2
    assert (a.train == EOD).sum() == 38 and (a.val == EOD).sum() == 2


def test_empty_and_missing_corpus(tmp_path):
    (tmp_path / "e.txt").write_text("\n\n  \n")
    with pytest.raises(InputError):
        load_corpus(tmp_path / "e.txt")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope.txt")


def test_first_window_example():
    x, y = next(batches(np.arange(1, 11), BatchPlan(seq_len=4, batch_size=1, shuffle=False)))
    assert x.tolist() == [[1, 2, 3, 4]] and y.tolist() == [[2, 3, 4, 5]]


def test_short_corpus_rejected():
    with pytest.raises(InputError):
        next(batches(np.arange(8), BatchPlan(seq_len=4, batch_size=2)))
    with pytest.raises(InputError):
        fixed_length_samples(np.arange(10), 4, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300), st.integers(1, 12), st.integers(1, 4), st.integers(0, 3))
def test_windows_cover_stream(n, seq_len, batch, epoch):
    tokens = np.arange(n)
    assert n_windows(n, seq_len) == (n - 1) // seq_len
    nw = n_windows(n, seq_len)
    if nw < batch:
        return
    plan = BatchPlan(seq_len, batch, seed=5)
    got = list(batches(tokens, plan, epoch=epoch))
    assert len(got) == nw // batch
    for x, y in got:
        assert x.shape == (batch, seq_len)
        np.testing.assert_array_equal(y, x + 1)
        assert np.all(x % seq_len == np.arange(seq_len))
    starts = sorted(int(x[i, 0]) for x, _ in got for i in range(batch))
    assert len(set(starts)) == len(starts)
    unshuffled = list(batches(tokens, BatchPlan(seq_len, batch, shuffle=False)))
    if nw % batch == 0:
        assert starts == sorted(int(x[i, 0]) for x, _ in unshuffled for i in range(batch))


def test_shuffle_depends_on_seed_and_epoch():
    tokens = np.arange(1001)
    first = lambda **kw: next(batches(tokens, BatchPlan(10, 4, **kw)))[0]
    np.testing.assert_array_equal(first(seed=1), first(seed=1))
    assert not np.array_equal(first(seed=1), first(seed=2))
    e0 = next(batches(tokens, BatchPlan(10, 4, seed=1), epoch=0))[0]
    e1 = next(batches(tokens, BatchPlan(10, 4, seed=1), epoch=1))[0]
    assert not np.array_equal(e0, e1)


def test_bundled_corpus_is_reproducible():
    text = toycorpus.bundled_corpus_path().read_text()
    assert text == toycorpus.generate()
    c = load_corpus(toycorpus.bundled_corpus_path())
    assert 1_000_000 <= c.train.size + c.val.size <= 5_000_000
