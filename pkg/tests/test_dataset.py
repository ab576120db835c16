import numpy as np
import pytest

from fogfusion.dataset import (
    DATA_FILE,
    INDEX_FILE,
    DatasetFormatError,
    DatasetReader,
    FrameRecord,
    InsufficientDataError,
    SplitManifest,
    frame_from_record,
    make_split,
    read_dataset,
    record_from_frame,
    write_dataset,
)
from fogfusion.encoding import CalibrationModel
from fogfusion.weather import GroundTruthBox, WeatherCondition, apply_condition, random_scene, render_clear

FOG = WeatherCondition("dense_fog", 40.0)


def _rec(i, kind="clear", scene=None, n=8):
    rng = np.random.default_rng(i)
    w = {"clear": WeatherCondition(), "dense_fog": FOG, "snow_rain": WeatherCondition("snow_rain", clutter_rate=300)}[kind]
    return FrameRecord(f"{kind}-{i}", {"a": rng.random((2, n)).astype(np.float32), "k": np.arange(3)},
                       [GroundTruthBox((1.0, 2.0, 3.5, 9.25), occlusion=0.1)], w, i, scene)


def test_real_frame_round_trip(tmp_path):
    cal = CalibrationModel.default()
    frames = [render_clear(random_scene(s), cal) for s in range(3)]
    frames.append(apply_condition(frames[0], FOG))
    recs = [record_from_frame(f, f"f{k}", scene_seed=k) for k, f in enumerate(frames)]
    write_dataset(recs, tmp_path, digest="d1")
    back = read_dataset(tmp_path)
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(recs, back):
        assert a.tensors.keys() == b.tensors.keys()
        for k in a.tensors:
            assert a.tensors[k].dtype == b.tensors[k].dtype
            assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
        assert a.boxes == b.boxes and a.weather == b.weather and a.seed == b.seed and a.scene_seed == b.scene_seed
    f = frame_from_record(back[3])
    np.testing.assert_array_equal(f.camera, frames[3].camera)
    assert f.weather.kind == "dense_fog"
    assert DatasetReader(tmp_path).digest == "d1"


def test_empty_dataset(tmp_path):
    write_dataset([], tmp_path)
    assert read_dataset(tmp_path) == []
    assert (tmp_path / INDEX_FILE).read_text().startswith("# FGD1")


def test_duplicate_and_whitespace_ids_rejected(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_dataset([_rec(1), _rec(1)], tmp_path)
    bad = _rec(2)
    bad.id = "a b"
    with pytest.raises(ValueError, match="whitespace"):
        write_dataset([bad], tmp_path)


class _CountingFile:
    def __init__(self, fh):
        self.fh, self.reads = fh, 0

    def read(self, n=-1):
        self.reads += 1
        return self.fh.read(n)

    def seek(self, off):
        return self.fh.seek(off)

    def close(self):
        self.fh.close()


def test_index_lookup_is_one_read(tmp_path):
    recs = [_rec(i, n=4) for i in range(1000)]
    write_dataset(recs, tmp_path)
    reader = DatasetReader(tmp_path)
    assert len(reader) == 1000
    linear = read_dataset(tmp_path)
    reader._fh = _CountingFile(reader._fh)
    rng = np.random.default_rng(0)
    for i in rng.integers(0, 1000, 50):
        want = next(r for r in linear if r.id == f"clear-{i}")
        got = reader[f"clear-{i}"]
        np.testing.assert_array_equal(got.tensors["a"], want.tensors["a"])
    # each lookup is a single seek + read through the offset table, independent of position
    assert reader._fh.reads == 50
    reader.close()


def test_bad_magic_reports_offset_zero(tmp_path):
    write_dataset([_rec(1)], tmp_path)
    p = tmp_path / DATA_FILE
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(DatasetFormatError) as e:
        DatasetReader(tmp_path)
    assert e.value.offset == 0 and "magic" in str(e.value)


def test_truncated_file_reports_offset(tmp_path):
    write_dataset([_rec(1), _rec(2)], tmp_path)
    off2 = int((tmp_path / INDEX_FILE).read_text().splitlines()[2].split()[1])
    p = tmp_path / DATA_FILE
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError) as e:
        DatasetReader(tmp_path)
    assert e.value.offset == off2 and "offset" in str(e.value)


def test_truncated_payload_reports_offset(tmp_path):
    write_dataset([_rec(1)], tmp_path)
    idx = tmp_path / INDEX_FILE
    lines = idx.read_text().splitlines()
    rid, off, n = lines[1].split()
    idx.write_text("\n".join([lines[0], f"{rid} {off} {int(n) - 10}"]) + "\n")
    with pytest.raises(DatasetFormatError, match="truncated payload") as e:
        DatasetReader(tmp_path)[rid]
    assert e.value.offset > int(off)


def test_missing_dataset():
    with pytest.raises(FileNotFoundError):
        DatasetReader("/nonexistent/place")


def test_split_counts_and_determinism():
    recs = [_rec(i) for i in range(100)]
    m = make_split(recs, {"train": 0.8, "test": 0.2}, seed=3)
    assert len(m.splits["train"]) == 80 and len(m.splits["test"]) == 20
    again = make_split(recs, {"train": 0.8, "test": 0.2}, seed=3)
    assert again.to_json() == m.to_json()
    assert SplitManifest.from_json(m.to_json()) == m
    assert make_split(recs, {"train": 0.8, "test": 0.2}, seed=4).splits != m.splits


def test_split_keeps_training_clear_and_scenes_disjoint():
    recs = []
    for s in range(40):
        recs += [_rec(s, "clear", s), _rec(1000 + s, "dense_fog", s), _rec(2000 + s, "snow_rain", s)]
    m = make_split(recs, {"train": 0.7, "test": 0.3}, seed=1, required_kinds={"test": ("dense_fog",)})
    kinds = {r.id: r.kind for r in recs}
    scene = {r.id: r.scene_seed for r in recs}
    assert m.splits["train"] and all(kinds[i] == "clear" for i in m.splits["train"])
    assert {scene[i] for i in m.splits["train"]}.isdisjoint({scene[i] for i in m.splits["test"]})
    assert set(m.strata["test"]) == {"clear", "dense_fog", "snow_rain"}
    assert m.constraint == "clear-only-training"


def test_split_names_missing_kind():
    recs = [_rec(i) for i in range(10)]
    with pytest.raises(InsufficientDataError, match="dense_fog") as e:
        make_split(recs, {"train": 0.5, "test": 0.5}, required_kinds={"test": ("dense_fog",)})
    assert e.value.kind == "dense_fog"
    with pytest.raises(InsufficientDataError, match="clear"):
        make_split([_rec(1, "dense_fog")], {"train": 1.0})
