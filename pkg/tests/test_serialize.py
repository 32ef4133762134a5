import json

import numpy as np
import pytest

from trimodal.serialize import ContainerError, load_container, save_container


@pytest.fixture
def arrays(rng):
    return {
        "weights/a": rng.standard_normal((3, 4)).astype(np.float32),
        "weights/b": rng.standard_normal(7),  # float64
        "scalar": np.array([1.5], dtype=np.float32),
    }


class TestRoundtrip:
    def test_values_and_dtypes_survive(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        save_container(stem, arrays, meta={"epoch": 3}, kind="checkpoint")
        loaded, meta, kind = load_container(stem)
        assert kind == "checkpoint"
        assert meta == {"epoch": 3}
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            assert np.array_equal(loaded[name], arrays[name])

    def test_write_read_write_byte_identical(self, tmp_path, arrays):
        """Canonical output: re-serializing the loaded container must give
        the same bytes for both manifest and blob."""
        stem1, stem2 = str(tmp_path / "one"), str(tmp_path / "two")
        m1, b1 = save_container(stem1, arrays, meta={"k": [1, 2]})
        loaded, meta, kind = load_container(stem1)
        m2, b2 = save_container(stem2, loaded, meta=meta, kind=kind)
        assert m1.read_bytes() == m2.read_bytes()
        assert b1.read_bytes() == b2.read_bytes()

    def test_insertion_order_irrelevant(self, tmp_path, arrays):
        stem1, stem2 = str(tmp_path / "one"), str(tmp_path / "two")
        reordered = dict(sorted(arrays.items(), reverse=True))
        m1, b1 = save_container(stem1, arrays)
        m2, b2 = save_container(stem2, reordered)
        assert m1.read_bytes() == m2.read_bytes()
        assert b1.read_bytes() == b2.read_bytes()

    def test_blob_is_little_endian_concatenation(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        _, blob_path = save_container(stem, arrays)
        blob = blob_path.read_bytes()
        expect = b"".join(np.ascontiguousarray(arrays[n]).astype(
            "<f8" if arrays[n].dtype == np.float64 else "<f4").tobytes()
            for n in sorted(arrays))
        assert blob == expect


class TestErrors:
    def test_missing_files(self, tmp_path):
        with pytest.raises(ContainerError, match="incomplete"):
            load_container(str(tmp_path / "absent"))

    def test_missing_blob_only(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        _, blob_path = save_container(stem, arrays)
        blob_path.unlink()
        with pytest.raises(ContainerError, match="incomplete"):
            load_container(stem)

    def test_truncated_blob(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        _, blob_path = save_container(stem, arrays)
        blob_path.write_bytes(blob_path.read_bytes()[:-8])
        with pytest.raises(ContainerError, match="truncated"):
            load_container(stem)

    def test_unknown_format_version(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        manifest_path, _ = save_container(stem, arrays)
        doc = json.loads(manifest_path.read_text())
        doc["format_version"] = 99
        manifest_path.write_text(json.dumps(doc))
        with pytest.raises(ContainerError, match="format_version"):
            load_container(stem)

    def test_unknown_dtype(self, tmp_path, arrays):
        stem = str(tmp_path / "c")
        manifest_path, _ = save_container(stem, arrays)
        doc = json.loads(manifest_path.read_text())
        doc["arrays"][0]["dtype"] = "<i4"
        manifest_path.write_text(json.dumps(doc))
        with pytest.raises(ContainerError, match="dtype"):
            load_container(stem)
