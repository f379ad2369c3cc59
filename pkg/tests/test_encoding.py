import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from premirna.encoding import dump_onehot, encode_batch, load_onehot, one_hot_encode


@given(st.text(alphabet="ACGU", min_size=1, max_size=160))
def test_onehot_columns_and_roundtrip(bases):
    m = one_hot_encode(bases)
    assert m.values.shape == (4, 160)
    sums = m.values.sum(axis=0)
    assert np.all(sums[: len(bases)] == 1) and np.all(sums[len(bases):] == 0)
    assert m.decode() == bases


def test_row_order_and_width_error():
    m = one_hot_encode("ACGU", width=4)
    np.testing.assert_array_equal(m.values, np.eye(4))
    with pytest.raises(ValueError, match="exceeds"):
        one_hot_encode("ACGUA", width=4)


def test_batch_and_dump_roundtrip(tmp_path):
    seqs = ["ACGU", "GGGAAACCC", "U"]
    batch = encode_batch(seqs)
    assert batch.shape == (3, 4, 160)
    mats = [one_hot_encode(s) for s in seqs]
    dump_onehot(mats, tmp_path / "x.bin")
    back = load_onehot(tmp_path / "x.bin")
    assert [m.decode() for m in back] == seqs
    data = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_onehot(tmp_path / "t.bin")
