import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from linkforge import formats
from linkforge.graph import split_edges

from conftest import random_graph


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(0, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_matrix_round_trip(mat):
    assert np.array_equal(formats.matrix_from_bytes(formats.matrix_to_bytes(mat)), mat)


def test_matrix_header_checks():
    buf = formats.matrix_to_bytes(np.ones((2, 3), np.float32))
    with pytest.raises(formats.FormatError, match="magic"):
        formats.matrix_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(formats.FormatError, match="size"):
        formats.matrix_from_bytes(buf[:-1])
    with pytest.raises(formats.FormatError):
        formats.matrix_from_bytes(buf[:5])
    with pytest.raises(ValueError):
        formats.matrix_to_bytes(np.ones(3))


def test_split_file_round_trip(tmp_path):
    s = split_edges(random_graph(40, 0.2, 0), num_eval_neg=7, seed=3)
    formats.write_split(tmp_path / "s.lfsp", s)
    back = formats.read_split(tmp_path / "s.lfsp")
    assert back.to_bytes() == s.to_bytes()
    assert back.seed == 3


def test_split_trailing_bytes():
    s = split_edges(random_graph(20, 0.3, 1), num_eval_neg=2, seed=0)
    with pytest.raises(formats.FormatError):
        formats.split_from_bytes(s.to_bytes() + b"\0")


def test_atomic_write_leaves_no_temp(tmp_path):
    formats.atomic_write(tmp_path / "f.bin", b"abc")
    formats.atomic_write(tmp_path / "f.bin", b"xyz")
    assert (tmp_path / "f.bin").read_bytes() == b"xyz"
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]
