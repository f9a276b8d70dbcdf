import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mrfrecon import container
from mrfrecon.errors import ValidationError


def test_roundtrip_all_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"f": rng.standard_normal((3, 4)), "c": rng.standard_normal(5) + 1j,
              "i": np.arange(7), "u": np.array([1, 0, 1], dtype=np.uint8),
              "scalar": np.float64(2.5)}
    path = tmp_path / "x.mrft"
    container.save(path, arrays, {"kind": "test", "n": 3})
    back, meta = container.load(path)
    assert meta == {"kind": "test", "n": 3}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)


def test_header_layout():
    blob = container.encode({"a": np.array([1.0, 2.0])})
    assert blob[:4] == b"MRFT"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    # name length, name, dtype code, rank, one dim, 16 data bytes
    assert len(blob) == 12 + 2 + 1 + 2 + 8 + 16
    assert blob[15] == 1 and blob[16] == 1


def test_bool_stored_as_uint8():
    back, _ = container.decode(container.encode({"m": np.array([True, False])}))
    assert back["m"].dtype == np.uint8


def test_bad_magic_and_truncation():
    with pytest.raises(ValidationError):
        container.decode(b"NOPE" + b"\0" * 8)
    blob = container.encode({"a": np.arange(10.0)})
    with pytest.raises(ValidationError):
        container.decode(blob[:-8])


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        container.load(tmp_path / "missing.mrft")


def test_hashes_sensitive_to_content_and_dtype():
    a = np.arange(4.0)
    assert container.array_hash(a) == container.array_hash(a.copy())
    assert container.array_hash(a) != container.array_hash(a + 1e-12)
    assert container.array_hash(a) != container.array_hash(a.astype(np.int64))
    assert container.config_hash({"a": 1, "b": 2}) == container.config_hash({"b": 2, "a": 1})


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.complex128, hnp.array_shapes(max_dims=3, max_side=5),
                  elements=st.complex_numbers(allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(arr):
    back, _ = container.decode(container.encode({"x": arr}))
    np.testing.assert_array_equal(back["x"], arr)
