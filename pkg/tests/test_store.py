from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignet.errors import (
    BadMagic,
    ChoiceNotInTriple,
    DuplicateIndexInTriple,
    FormatError,
    IndexOutOfRange,
    IoFailure,
    NonFiniteValue,
    SoftNotNormalized,
    TruncatedFile,
    ValidationError,
)
from alignet.store import (
    EmbeddingMatrix,
    HierarchyLabels,
    ResponseTimeTable,
    TripletDataset,
    embeddings_from_bytes,
    embeddings_to_bytes,
    load_embeddings,
    load_labels,
    load_rts,
    load_triplets,
    save_embeddings,
    save_labels,
    save_rts,
    save_triplets,
    validate_pairing,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# embeddings ---------------------------------------------------------------


def test_minimal_file_is_twenty_bytes(tmp_path):
    p = tmp_path / "one.emb"
    save_embeddings(EmbeddingMatrix([[0.5]]), p)
    raw = p.read_bytes()
    assert len(raw) == 20
    # magic, dims, payload and the empty id block length
    assert raw == b"EMB1" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.5) + struct.pack("<I", 0)
    assert load_embeddings(p).item_ids is None
    (tmp_path / "short.emb").write_bytes(raw[:16])
    assert load_embeddings(tmp_path / "short.emb") == EmbeddingMatrix([[0.5]])


def test_round_trip_with_ids(tmp_path):
    mat = EmbeddingMatrix(np.arange(6, dtype=float).reshape(2, 3) / 4, ("cat", "dög"))
    p = tmp_path / "m.emb"
    save_embeddings(mat, p)
    back = load_embeddings(p)
    assert back == mat
    assert back.item_ids == ("cat", "dög")


def test_values_are_rounded_to_float32(tmp_path):
    mat = EmbeddingMatrix([[0.1, 1 / 3]])
    p = tmp_path / "m.emb"
    save_embeddings(mat, p)
    np.testing.assert_array_equal(load_embeddings(p).data, np.float32([[0.1, 1 / 3]]).astype(float))


def test_truncated_payload():
    buf = b"EMB1" + struct.pack("<II", 2, 3) + struct.pack("<5f", *range(5))
    with pytest.raises(TruncatedFile, match="byte"):
        embeddings_from_bytes(buf)


def test_nan_reports_offset():
    buf = b"EMB1" + struct.pack("<II", 1, 3) + struct.pack("<3f", 1.0, float("nan"), 2.0)
    with pytest.raises(NonFiniteValue, match="offset 16"):
        embeddings_from_bytes(buf)


def test_bad_magic():
    with pytest.raises(BadMagic, match="offset 0"):
        embeddings_from_bytes(b"EMB2" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.0))


def test_trailing_garbage_rejected():
    mat = EmbeddingMatrix([[1.0, 2.0]], ("a",))
    with pytest.raises(FormatError, match="trailing"):
        embeddings_from_bytes(embeddings_to_bytes(mat) + b"x")


def test_float32_overflow_rejected_on_save(tmp_path):
    with pytest.raises(NonFiniteValue):
        save_embeddings(EmbeddingMatrix([[1e300]]), tmp_path / "big.emb")


def test_unwritable_path(tmp_path):
    with pytest.raises(IoFailure):
        save_embeddings(EmbeddingMatrix([[1.0]]), tmp_path / "missing" / "dir" / "x.emb")


def test_matrix_invariants():
    with pytest.raises(NonFiniteValue):
        EmbeddingMatrix([[np.inf]])
    with pytest.raises(ValidationError):
        EmbeddingMatrix([[1.0], [2.0]], ("a", "a"))
    with pytest.raises(ValidationError):
        EmbeddingMatrix([[1.0], [2.0]], ("a",))
    mat = EmbeddingMatrix([[1.0]])
    with pytest.raises(ValueError):
        mat.data[0, 0] = 2.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_save_load_is_byte_identity(m, p, seed):
    x = np.random.default_rng(seed).normal(size=(m, p)).astype(np.float32).astype(np.float64)
    buf = embeddings_to_bytes(EmbeddingMatrix(x))
    back = embeddings_from_bytes(buf)
    assert embeddings_to_bytes(back) == buf
    np.testing.assert_array_equal(back.data, x)


# triplets -----------------------------------------------------------------


def test_hard_line(tmp_path):
    ds = load_triplets(write(tmp_path, "h.tsv", "# comment\n0\t1\t2\t0\t1\n"), "hard")
    assert ds.triplets.tolist() == [[0, 1, 2]]
    assert ds.choice.tolist() == [0]
    assert ds.chosen_pairs().tolist() == [[0, 1]]
    assert ds.odd_items().tolist() == [2]
    assert ds.line_numbers.tolist() == [2]


def test_hard_choice_order_irrelevant(tmp_path):
    ds = load_triplets(write(tmp_path, "h.tsv", "4 7 9 9 7\n"), "hard")
    assert ds.choice.tolist() == [2]


def test_soft_line(tmp_path):
    ds = load_triplets(write(tmp_path, "s.tsv", "0 1 2 0.5 0.25 0.25\n"), "soft")
    np.testing.assert_array_equal(ds.soft, [[0.5, 0.25, 0.25]])


def test_soft_rounding_is_renormalized(tmp_path):
    ds = load_triplets(write(tmp_path, "s.tsv", "0 1 2 0.3333333 0.3333333 0.3333333\n"), "soft")
    assert abs(ds.soft.sum() - 1.0) <= 1e-12


def test_soft_far_from_one_rejected(tmp_path):
    with pytest.raises(SoftNotNormalized, match="line 1"):
        load_triplets(write(tmp_path, "s.tsv", "0 1 2 0.5 0.25 0.2\n"), "soft")


def test_duplicate_index_names_line(tmp_path):
    with pytest.raises(DuplicateIndexInTriple, match="line 2"):
        load_triplets(write(tmp_path, "h.tsv", "0 1 2 0 1\n0 0 2 0 2\n"), "hard")


def test_choice_not_in_triple(tmp_path):
    with pytest.raises(ChoiceNotInTriple, match="line 1"):
        load_triplets(write(tmp_path, "h.tsv", "0 1 2 0 3\n"), "hard")


def test_wrong_column_count(tmp_path):
    with pytest.raises(FormatError, match="line 1"):
        load_triplets(write(tmp_path, "h.tsv", "0 1 2 0\n"), "hard")


def test_non_numeric_and_non_finite(tmp_path):
    with pytest.raises(FormatError):
        load_triplets(write(tmp_path, "h.tsv", "0 x 2\n"), "unlabeled")
    with pytest.raises(NonFiniteValue):
        load_triplets(write(tmp_path, "s.tsv", "0 1 2 nan 0.5 0.5\n"), "soft")


def test_index_checked_against_m(tmp_path):
    p = write(tmp_path, "u.tsv", "0 1 9\n0 1 10\n")
    with pytest.raises(IndexOutOfRange, match="lines 2"):
        load_triplets(p, "unlabeled", m=10)
    assert len(load_triplets(p, "unlabeled", m=11)) == 2


def test_validate_pairing_cases():
    validate_pairing(EmbeddingMatrix(np.zeros((10, 2))), TripletDataset([[0, 5, 9]]))
    with pytest.raises(IndexOutOfRange, match="rows 1"):
        validate_pairing(10, TripletDataset([[0, 5, 9], [1, 2, 10]]))
    validate_pairing(10, TripletDataset(np.empty((0, 3))))


def test_alignet_consistency_checked(tmp_path):
    text = "# transform=abc tau=1.0\n0 1 2 0 1 0.7 0.2 0.1\n"
    ds = load_triplets(write(tmp_path, "a.tsv", text), "alignet")
    assert ds.meta["transform"] == "abc" and ds.meta["tau"] == "1.0"
    with pytest.raises(ValidationError, match="line 1"):
        load_triplets(write(tmp_path, "b.tsv", "0 1 2 0 2 0.7 0.2 0.1\n"), "alignet")


def test_soft_round_trip_is_exact(tmp_path, rng):
    soft = rng.dirichlet(np.ones(3), size=50)
    soft /= soft.sum(axis=1, keepdims=True)
    ds = TripletDataset(np.tile([0, 1, 2], (50, 1)), soft=soft)
    p = tmp_path / "s.tsv"
    save_triplets(ds, p, "soft")
    back = load_triplets(p, "soft")
    assert np.max(np.abs(back.soft.sum(axis=1) - 1)) <= 1e-9
    np.testing.assert_allclose(back.soft, soft, rtol=0, atol=1e-15)


def test_dataset_invariants():
    with pytest.raises(DuplicateIndexInTriple):
        TripletDataset([[1, 1, 2]])
    with pytest.raises(SoftNotNormalized):
        TripletDataset([[0, 1, 2]], soft=[[0.5, 0.5, 0.5]])
    with pytest.raises(ValidationError):
        TripletDataset([[0, 1, 2]], choice=[3])
    assert TripletDataset([[0, 1, 2]], choice=[0], soft=[[1, 0, 0]]).kind == "both"


# labels and response times ------------------------------------------------


def test_labels_round_trip(tmp_path):
    lab = HierarchyLabels([0, 0, 1], [0, 0, -1], [0, 0, 0], [2, -1, 1], ("a", "b", "c"))
    p = tmp_path / "l.tsv"
    save_labels(lab, p)
    back = load_labels(p)
    assert back.item_ids == ("a", "b", "c")
    assert back.basic.tolist() == [0, 0, -1]
    assert back.cluster.tolist() == [2, -1, 1]


def test_labels_without_cluster_column(tmp_path):
    back = load_labels(write(tmp_path, "l.tsv", "x 0 1 2\ny 3 4 5\n"))
    assert back.cluster.tolist() == [-1, -1]
    with pytest.raises(FormatError):
        load_labels(write(tmp_path, "bad.tsv", "x 0 1\n"))


def test_rt_cutoff_and_log_mean(tmp_path):
    p = write(tmp_path, "rt.tsv", "0 1.0\n0 4.0\n0 12.0\n1 20.0\n")
    agg = load_rts(p).aggregate(cutoff=10.0)
    assert agg == {0: pytest.approx(np.log(2.0), abs=1e-15)}
    med = ResponseTimeTable({0: (1.0, 2.0, 8.0)}).aggregate(how="median")
    assert med[0] == pytest.approx(np.log(2.0), abs=1e-15)


def test_rt_validation(tmp_path):
    with pytest.raises(ValidationError):
        ResponseTimeTable({0: (-1.0,)})
    with pytest.raises(ValidationError):
        load_rts(write(tmp_path, "rt.tsv", "0 0\n"))
    rts = ResponseTimeTable({3: (1.5, 2.5)})
    p = tmp_path / "out.tsv"
    save_rts(rts, p)
    assert load_rts(p).rts == {3: (1.5, 2.5)}
