"""Binary frame datasets with a plain-text offset index, and scene-disjoint splits.

Layout of ``frames.fgd``::

    "FGD1" | u64 header_len | header JSON | record*

and each record is ``u64 meta_len | meta JSON | tensor payloads``. The meta
lists every tensor's name, dtype and shape in payload order. Integers are
little-endian 64-bit and float tensors are stored as 32-bit. ``index.txt``
holds one ``id offset length`` line per record, so any frame is one seek away.
"""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoding import GatedSlices, LidarPointSet, RadarScan
from .weather import GroundTruthBox, MultimodalFrame, WeatherCondition

MAGIC = b"FGD1"
DATA_FILE = "frames.fgd"
INDEX_FILE = "index.txt"
_U64 = struct.Struct("<Q")
_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InsufficientDataError(ValueError):
    def __init__(self, kind: str, split: str, have: int, need: int):
        super().__init__(f"not enough {kind!r} frames for split {split!r}: have {have}, need {need}")
        self.kind = kind


@dataclass
class FrameRecord:
    id: str
    tensors: dict[str, np.ndarray]
    boxes: list[GroundTruthBox]
    weather: WeatherCondition
    seed: int
    scene_seed: int | None = None

    def __post_init__(self):
        if self.scene_seed is None:
            self.scene_seed = self.seed
        self.tensors = {k: _storable(v) for k, v in self.tensors.items()}

    @property
    def kind(self) -> str:
        return self.weather.kind


def _storable(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return np.ascontiguousarray(a, dtype="<f4")
    if a.dtype.kind in "iu" and a.dtype != np.uint8:
        return np.ascontiguousarray(a, dtype="<i8")
    if a.dtype == np.bool_:
        return np.ascontiguousarray(a, dtype=np.uint8)
    return np.ascontiguousarray(a)


def _code(dtype: np.dtype) -> str:
    for k, v in _DTYPES.items():
        if np.dtype(dtype) == v:
            return k
    raise TypeError(f"unsupported dtype {dtype}")


# ---------------------------------------------------------------------------
# frame <-> record


def record_from_frame(frame: MultimodalFrame, frame_id: str, scene_seed: int | None = None) -> FrameRecord:
    t = {
        "camera": frame.camera,
        "lidar": frame.lidar.points,
        "radar": frame.radar.detections,
        "gated": frame.gated.images,
        "gated_homography": frame.gated.homography,
        "gated_ambient": frame.gated_ambient,
    }
    if frame.depth is not None:
        t["depth"] = frame.depth
    if frame.gated_depth is not None:
        t["gated_depth"] = frame.gated_depth
    return FrameRecord(frame_id, t, list(frame.boxes), frame.weather, frame.seed, scene_seed)


def frame_from_record(rec: FrameRecord) -> MultimodalFrame:
    t = rec.tensors
    return MultimodalFrame(
        camera=t["camera"],
        depth=t.get("depth"),
        lidar=LidarPointSet(t["lidar"]),
        radar=RadarScan(t["radar"]),
        gated=GatedSlices(t["gated"], t["gated_homography"]),
        gated_depth=t.get("gated_depth"),
        gated_ambient=t["gated_ambient"],
        boxes=list(rec.boxes),
        weather=rec.weather,
        seed=rec.seed,
    )


def _weather_json(w: WeatherCondition) -> dict:
    vis = w.visibility
    return {"kind": w.kind, "visibility": None if vis == float("inf") else vis,
            "ambient_light": w.ambient_light, "clutter_rate": w.clutter_rate}


def _weather_from(d: dict) -> WeatherCondition:
    vis = d.get("visibility")
    return WeatherCondition(d["kind"], float("inf") if vis is None else vis, d["ambient_light"], d["clutter_rate"])


def _encode_record(rec: FrameRecord) -> bytes:
    names = sorted(rec.tensors)
    meta = {
        "id": rec.id,
        "seed": int(rec.seed),
        "scene_seed": int(rec.scene_seed),
        "weather": _weather_json(rec.weather),
        "boxes": [{"box": list(b.box), "cls": b.cls, "occlusion": b.occlusion, "truncation": b.truncation,
                   "distance": b.distance} for b in rec.boxes],
        "tensors": [{"name": n, "dtype": _code(rec.tensors[n].dtype), "shape": list(rec.tensors[n].shape)}
                    for n in names],
    }
    mb = json.dumps(meta, separators=(",", ":")).encode()
    return b"".join([_U64.pack(len(mb)), mb] + [rec.tensors[n].tobytes() for n in names])


def _decode_record(buf: bytes, base: int) -> FrameRecord:
    if len(buf) < 8:
        raise DatasetFormatError("truncated record header", base)
    (n,) = _U64.unpack_from(buf, 0)
    if 8 + n > len(buf):
        raise DatasetFormatError(f"record metadata of {n} bytes overruns record", base)
    try:
        meta = json.loads(buf[8 : 8 + n])
    except ValueError:
        raise DatasetFormatError("unreadable record metadata", base + 8) from None
    off = 8 + n
    tensors = {}
    for t in meta["tensors"]:
        dt = _DTYPES[t["dtype"]]
        count = int(np.prod(t["shape"], dtype=np.int64))
        nb = count * dt.itemsize
        if off + nb > len(buf):
            raise DatasetFormatError(f"truncated payload for tensor {t['name']!r}", base + off)
        tensors[t["name"]] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(t["shape"]).copy()
        off += nb
    boxes = [GroundTruthBox(tuple(b["box"]), b["cls"], b["occlusion"], b["truncation"], b["distance"])
             for b in meta["boxes"]]
    return FrameRecord(meta["id"], tensors, boxes, _weather_from(meta["weather"]), meta["seed"], meta["scene_seed"])


# ---------------------------------------------------------------------------
# files


def write_dataset(frames: Iterable[FrameRecord], directory, digest: str = "") -> Path:
    """Write records to ``directory``; returns the directory path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"version": 1, "config_digest": digest}).encode()
    index_lines = [f"# FGD1 config_digest={digest}"]
    seen = set()
    with open(d / DATA_FILE, "wb") as fh:
        fh.write(MAGIC + _U64.pack(len(header)) + header)
        off = fh.tell()
        for rec in frames:
            if rec.id in seen:
                raise ValueError(f"duplicate frame id {rec.id!r}")
            if any(c.isspace() for c in rec.id):
                raise ValueError(f"frame id {rec.id!r} contains whitespace")
            seen.add(rec.id)
            blob = _encode_record(rec)
            fh.write(blob)
            index_lines.append(f"{rec.id} {off} {len(blob)}")
            off += len(blob)
    (d / INDEX_FILE).write_text("\n".join(index_lines) + "\n")
    return d


class DatasetReader:
    """Random access to a written dataset through its offset index."""

    def __init__(self, directory):
        self.directory = Path(directory)
        data = self.directory / DATA_FILE
        index = self.directory / INDEX_FILE
        if not data.exists() or not index.exists():
            raise FileNotFoundError(f"no dataset at {self.directory} (expected {DATA_FILE} and {INDEX_FILE})")
        self._fh = open(data, "rb")
        self.size = data.stat().st_size
        head = self._fh.read(12)
        if len(head) < 4 or head[:4] != MAGIC:
            raise DatasetFormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}", 0)
        if len(head) < 12:
            raise DatasetFormatError("truncated file header", 4)
        (hn,) = _U64.unpack_from(head, 4)
        hb = self._fh.read(hn)
        if len(hb) != hn:
            raise DatasetFormatError("truncated file header", 12)
        self.header = json.loads(hb)
        self.digest = self.header.get("config_digest", "")
        self.offsets: dict[str, tuple[int, int]] = {}
        for lineno, line in enumerate(index.read_text().splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DatasetFormatError(f"index line {lineno} malformed: {line!r}", 0)
            off, n = int(parts[1]), int(parts[2])
            if off + n > self.size:
                raise DatasetFormatError(f"record {parts[0]!r} extends past end of file ({self.size} bytes)", off)
            self.offsets[parts[0]] = (off, n)

    def __len__(self) -> int:
        return len(self.offsets)

    def __contains__(self, frame_id: str) -> bool:
        return frame_id in self.offsets

    def ids(self) -> list[str]:
        return list(self.offsets)

    def __getitem__(self, frame_id: str) -> FrameRecord:
        off, n = self.offsets[frame_id]
        self._fh.seek(off)
        buf = self._fh.read(n)
        if len(buf) != n:
            raise DatasetFormatError(f"truncated record {frame_id!r}", off + len(buf))
        return _decode_record(buf, off)

    def __iter__(self):
        for k in self.offsets:
            yield self[k]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_dataset(directory) -> list[FrameRecord]:
    with DatasetReader(directory) as r:
        return list(r)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    splits: dict[str, list[str]]
    strata: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    constraint: str = "clear-only-training"
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({"splits": self.splits, "strata": self.strata, "constraint": self.constraint,
                           "seed": self.seed}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(d["splits"], d.get("strata", {}), d.get("constraint", "clear-only-training"), d.get("seed", 0))


def make_split(frames: Sequence[FrameRecord], fractions: Mapping[str, float] | None = None, seed: int = 0,
               train_split: str = "train", required_kinds: Mapping[str, Sequence[str]] | None = None,
               min_per_kind: int = 1) -> SplitManifest:
    """Partition frames by scene seed so no scene appears in two splits.

    Scene groups are bucketed by the set of weather kinds they contain and each
    bucket is divided by ``fractions`` (stratification). The training split keeps
    only clear frames. ``required_kinds`` maps a split name to kinds that must
    each have at least ``min_per_kind`` frames there.
    """
    fractions = dict(fractions or {"train": 0.8, "test": 0.2})
    total = sum(fractions.values())
    if total <= 0 or any(v < 0 for v in fractions.values()):
        raise ValueError(f"invalid split fractions {fractions}")
    names = list(fractions)
    groups: dict[int, list[FrameRecord]] = defaultdict(list)
    for f in frames:
        groups[int(f.scene_seed)].append(f)
    buckets: dict[tuple[str, ...], list[int]] = defaultdict(list)
    for s in sorted(groups):
        buckets[tuple(sorted({f.kind for f in groups[s]}))].append(s)
    rng = np.random.default_rng(seed)
    assign: dict[str, list[int]] = {n: [] for n in names}
    for key in sorted(buckets):
        seeds = list(buckets[key])
        seeds = [seeds[i] for i in rng.permutation(len(seeds))]
        cum = np.cumsum([fractions[n] for n in names]) / total
        cuts = np.rint(cum * len(seeds)).astype(int)
        start = 0
        for n, c in zip(names, cuts):
            assign[n].extend(seeds[start:c])
            start = c
    splits: dict[str, list[str]] = {}
    strata: dict[str, dict[str, list[str]]] = {}
    for n in names:
        recs = [f for s in sorted(assign[n]) for f in groups[s]]
        if n == train_split:
            recs = [f for f in recs if f.kind == "clear"]
        splits[n] = [f.id for f in recs]
        by_kind: dict[str, list[str]] = defaultdict(list)
        for f in recs:
            by_kind[f.kind].append(f.id)
        strata[n] = dict(sorted(by_kind.items()))
    if train_split in splits:
        required = {train_split: ("clear",), **(required_kinds or {})}
    else:
        required = dict(required_kinds or {})
    for n, kinds in required.items():
        for k in kinds:
            have = len(strata.get(n, {}).get(k, []))
            if have < min_per_kind:
                raise InsufficientDataError(k, n, have, min_per_kind)
    return SplitManifest(splits, strata, seed=seed)
