"""End-to-end workflow: synthesize frames, encode, train every fusion mode, evaluate."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .dataset import FrameRecord, SplitManifest, frame_from_record, make_split, record_from_frame
from .encoding import STREAMS, CalibrationModel, EncoderConfig, encode_frame
from .entropy import EntropyConfig, patch_entropy_grid
from .evaluation import DifficultyRule, EvalReport, ablation_table
from .fusion import ALL_MODES, BranchConfig, FusionMode, FusionNet, dropout_streams
from .ssd import AnchorConfig, AnchorSet, Detection, classification_loss, decode_and_nms, huber_loss, match_anchors
from .weather import GroundTruthBox, MultimodalFrame, WeatherCondition, apply_condition, random_scene, render_clear

_TAG_ILLUM, _TAG_ORDER, _TAG_DROP = 0x111, 0x222, 0x333
TEST_SPLITS = ("clear", "light_fog", "dense_fog", "snow_rain")
LOSS_LOG_COLUMNS = ("epoch", "step", "classification_loss", "regression_loss", "active_streams_histogram")


def calibration_for(cfg: RunConfig) -> CalibrationModel:
    H, W = cfg.data.plane
    return CalibrationModel.default(W, H, round(W * 2 / 3), round(H * 3 / 4))


def test_conditions(cfg: RunConfig) -> dict[str, WeatherCondition]:
    d = cfg.data
    return {
        "clear": WeatherCondition("clear"),
        "light_fog": WeatherCondition("light_fog", d.light_fog_visibility),
        "dense_fog": WeatherCondition("dense_fog", d.dense_fog_visibility),
        "snow_rain": WeatherCondition("snow_rain", clutter_rate=d.snow_rate),
    }


def training_illumination(scene_seed: int) -> WeatherCondition:
    """Clear weather across the day: half daylight, a quarter dusk, a quarter night."""
    rng = np.random.default_rng([scene_seed, _TAG_ILLUM])
    u = rng.random()
    if u < 0.5:
        ambient = 1.0
    elif u < 0.75:
        ambient = float(rng.uniform(0.2, 0.8))
    else:
        ambient = float(rng.uniform(0.0, 0.2))
    return WeatherCondition("clear", ambient_light=ambient)


def train_scene_seeds(cfg: RunConfig) -> range:
    base = cfg.data.train_seed_base + cfg.seed * 100_000
    return range(base, base + cfg.data.train_frames)


def test_scene_seeds(cfg: RunConfig) -> range:
    base = cfg.data.test_seed_base + cfg.seed * 100_000
    return range(base, base + cfg.data.test_frames)


def iter_records(cfg: RunConfig, calib: CalibrationModel | None = None) -> Iterable[FrameRecord]:
    """Training frames (clear, varied illumination) then every test scene under every test condition."""
    calib = calib or calibration_for(cfg)
    for s in train_scene_seeds(cfg):
        frame = apply_condition(render_clear(random_scene(s), calib), training_illumination(s))
        yield record_from_frame(frame, f"train-{s}", s)
    conds = test_conditions(cfg)
    for s in test_scene_seeds(cfg):
        clear = render_clear(random_scene(s), calib)
        for name, cond in conds.items():
            yield record_from_frame(apply_condition(clear, cond), f"{name}-{s}", s)


def designed_split(records: Sequence[FrameRecord], seed: int = 0) -> SplitManifest:
    """Manifest honouring the disjoint train/test scene-seed ranges used by :func:`iter_records`."""
    train = [r for r in records if r.id.startswith("train-")]
    test = [r for r in records if not r.id.startswith("train-")]
    a = make_split(train, {"train": 1.0}, seed) if train else SplitManifest({"train": []}, {"train": {}}, seed=seed)
    b = make_split(test, {"test": 1.0}, seed, train_split="")
    return SplitManifest({**a.splits, **b.splits}, {**a.strata, **b.strata}, seed=seed)


# ---------------------------------------------------------------------------
# encoded, entropy-annotated frame sets


@dataclass
class PreparedSet:
    planes: dict[str, np.ndarray]  # stream -> [N, C, H, W] float16
    entropy: np.ndarray  # [N, 4, gh, gw] patch entropies in bits
    boxes: list[list[GroundTruthBox]]
    kinds: list[str]
    patch: tuple[int, int]

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, idx: Sequence[int]) -> "PreparedSet":
        idx = list(idx)
        return PreparedSet({k: v[idx] for k, v in self.planes.items()}, self.entropy[idx],
                           [self.boxes[i] for i in idx], [self.kinds[i] for i in idx], self.patch)

    def batch(self, idx: Sequence[int], flip: np.ndarray | None = None):
        """Float32 inputs, full-resolution entropy in [0, 1] and boxes for ``idx``."""
        idx = np.asarray(idx)
        inputs = {k: v[idx].astype(np.float32) for k, v in self.planes.items()}
        ent = self.entropy[idx].astype(np.float32)
        boxes = [list(self.boxes[i]) for i in idx]
        if flip is not None and flip.any():
            W = next(iter(inputs.values())).shape[-1]
            for k in inputs:
                inputs[k][flip] = inputs[k][flip][..., ::-1]
            ent[flip] = ent[flip][..., ::-1]
            for j in np.flatnonzero(flip):
                boxes[j] = [GroundTruthBox((W - g.box[2], g.box[1], W - g.box[0], g.box[3]), g.cls, g.occlusion,
                                           g.truncation, g.distance) for g in boxes[j]]
        return inputs, ent, boxes

    def full_entropy(self, ent: np.ndarray, plane: tuple[int, int]) -> np.ndarray:
        m, n = self.patch
        full = np.repeat(np.repeat(ent, m, axis=-2), n, axis=-1)[..., : plane[0], : plane[1]]
        return full / np.float32(8.0)


def prepare(frames: Iterable[MultimodalFrame], calib: CalibrationModel, cfg: RunConfig,
            enc: EncoderConfig | None = None) -> PreparedSet:
    ecfg = EntropyConfig(cfg.entropy.patch_m, cfg.entropy.patch_n)
    planes: dict[str, list] = {s: [] for s in STREAMS}
    ents, boxes, kinds = [], [], []
    for fr in frames:
        e = encode_frame(fr, calib, enc)
        grids = []
        for s in STREAMS:
            x = e.stream(s)
            planes[s].append(x.astype(np.float16))
            grids.append(patch_entropy_grid(x, ecfg))
        ents.append(np.stack(grids).astype(np.float32))
        boxes.append(list(fr.boxes))
        kinds.append(fr.weather.kind)
    H, W = calib.camera.height, calib.camera.width
    gh, gw = -(-H // ecfg.patch_m), -(-W // ecfg.patch_n)
    stacked = {s: (np.stack(v) if v else np.zeros((0, 1, H, W), np.float16)) for s, v in planes.items()}
    ent = np.stack(ents) if ents else np.zeros((0, len(STREAMS), gh, gw), np.float32)
    return PreparedSet(stacked, ent, boxes, kinds, (ecfg.patch_m, ecfg.patch_n))


def prepare_records(records: Iterable[FrameRecord], calib: CalibrationModel, cfg: RunConfig) -> PreparedSet:
    return prepare((frame_from_record(r) for r in records), calib, cfg)


def build_sets(cfg: RunConfig, calib: CalibrationModel | None = None) -> tuple[PreparedSet, dict[str, PreparedSet]]:
    """Render and encode the training set and the four test splits in memory."""
    calib = calib or calibration_for(cfg)
    train_frames = (apply_condition(render_clear(random_scene(s), calib), training_illumination(s))
                    for s in train_scene_seeds(cfg))
    train = prepare(train_frames, calib, cfg)
    conds = test_conditions(cfg)
    per_split: dict[str, list[MultimodalFrame]] = {k: [] for k in conds}
    for s in test_scene_seeds(cfg):
        clear = render_clear(random_scene(s), calib)
        for name, cond in conds.items():
            per_split[name].append(apply_condition(clear, cond))
    tests = {k: prepare(v, calib, cfg) for k, v in per_split.items()}
    return train, tests


# ---------------------------------------------------------------------------
# model construction, training and inference


def make_model(mode: FusionMode | str, cfg: RunConfig, seed: int | None = None) -> FusionNet:
    m = cfg.model
    branch = BranchConfig(tuple(m.widths), m.stem_width)
    return FusionNet(mode, cfg.data.plane, branch, len(cfg.anchors.aspect_ratios), m.num_classes,
                     cfg.seed if seed is None else seed, m.exchange)


def make_anchors(net: FusionNet, cfg: RunConfig) -> AnchorSet:
    a = cfg.anchors
    return AnchorSet(net.shapes, net.plane, AnchorConfig(a.scale_min, a.scale_max, tuple(a.aspect_ratios)))


def uses_dropout(mode: FusionMode) -> bool:
    return mode.kind in ("entropy_deep", "deep_no_entropy")


def _checkpoint_header(net: FusionNet, cfg: RunConfig, epoch: int) -> str:
    a = cfg.anchors
    return json.dumps({"architecture": net.architecture(), "config_digest": cfg.digest(), "epoch": epoch,
                       "anchors": {"scale_min": a.scale_min, "scale_max": a.scale_max,
                                   "aspect_ratios": list(a.aspect_ratios)}}, sort_keys=True)


def load_model(path) -> tuple[FusionNet, dict]:
    header, params = T.load_checkpoint(path)
    meta = json.loads(header)
    net = FusionNet.from_architecture(meta["architecture"])
    net.load_state_dict(params)
    return net, meta


def _histogram(active: list[int]) -> str:
    counts = np.bincount(np.asarray(active, dtype=np.int64), minlength=len(STREAMS) + 1)[1:]
    return " ".join(f"{k}:{c}" for k, c in enumerate(counts, start=1))


def train_model(mode: FusionMode | str, data: PreparedSet, cfg: RunConfig, out_dir: Path | None = None,
                log: list | None = None, progress: Callable[[str], None] | None = None) -> FusionNet:
    """Train one mode; data order, flips and dropout draws depend only on the run seed."""
    mode = FusionMode.parse(mode) if isinstance(mode, str) else mode
    t = cfg.train
    net = make_model(mode, cfg)
    anchors = make_anchors(net, cfg)
    if t.optimizer == "adam":
        opt = T.Adam(net.parameters(), t.learning_rate, t.weight_decay)
    else:
        opt = T.SGD(net.parameters(), t.learning_rate, t.weight_decay, t.momentum)
    order_rng = np.random.default_rng([cfg.seed, _TAG_ORDER])
    drop_rng = np.random.default_rng([cfg.seed, _TAG_DROP])
    rows = log if log is not None else []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        T.save_checkpoint(out_dir / f"{mode.name}_epoch0.ckpt", net.state_dict(), _checkpoint_header(net, cfg, 0))
    n = len(data)
    step = 0
    for epoch in range(1, t.epochs + 1):
        perm = order_rng.permutation(n)
        flips = order_rng.random(n) < 0.5 if t.flip else np.zeros(n, dtype=bool)
        for lo in range(0, n, t.batch_size):
            idx = perm[lo : lo + t.batch_size]
            inputs, ent, boxes = data.batch(idx, flips[lo : lo + t.batch_size])
            active = []
            if uses_dropout(mode) and t.dropout_p > 0:
                for j in range(len(idx)):
                    fr = {s: inputs[s][j] for s in STREAMS}
                    fr, ent[j], kept = dropout_streams(fr, ent[j], t.dropout_p, rng=drop_rng)
                    for s in STREAMS:
                        inputs[s][j] = fr[s]
                    active.append(int(kept.sum()))
            else:
                active = [len(mode.streams)] * len(idx)
            full_ent = data.full_entropy(ent, net.plane) if mode.exchanges else None
            labels, regs = [], []
            for bx in boxes:
                tg = match_anchors(anchors, [g.box for g in bx], cfg.anchors.match_threshold)
                labels.append(tg.labels)
                regs.append(tg.regression)
            labels = np.stack(labels)
            regs = np.stack(regs)
            logits, reg_pred = net(inputs, full_ent)
            l_cls = classification_loss(logits, labels, t.mining_ratio)
            l_reg = huber_loss(reg_pred, regs, labels > 0)
            T.backward(T.add(l_cls, l_reg))
            opt.step()
            step += 1
            rows.append((epoch, step, float(l_cls.item()), float(l_reg.item()), _histogram(active)))
        if out_dir is not None:
            T.save_checkpoint(out_dir / f"{mode.name}_epoch{epoch}.ckpt", net.state_dict(),
                              _checkpoint_header(net, cfg, epoch))
        if progress:
            recent = [r[2] + r[3] for r in rows[-50:]]
            progress(f"{mode.name} epoch {epoch}: loss {np.mean(recent) if recent else float('nan'):.4f}")
    return net


def write_loss_log(rows: Sequence[tuple], path, digest: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_LOG_COLUMNS)
    for r in rows:
        w.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}", r[4]])
    Path(path).write_text(buf.getvalue())


def predict(net: FusionNet, data: PreparedSet, cfg: RunConfig, batch_size: int = 16) -> list[list[Detection]]:
    anchors = make_anchors(net, cfg)
    e = cfg.eval
    out: list[list[Detection]] = []
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        inputs, ent, _ = data.batch(idx)
        full_ent = data.full_entropy(ent, net.plane) if net.mode.exchanges else None
        logits, regs = net(inputs, full_ent)
        for j in range(len(idx)):
            out.append(decode_and_nms(logits.data[j], regs.data[j], anchors, e.score_thresh, e.nms_iou, e.max_det,
                                      net.plane, e.pre_nms_top_k))
    return out


def evaluate(models: dict[str, FusionNet], tests: dict[str, PreparedSet], cfg: RunConfig) -> EvalReport:
    cache: dict[tuple[str, str], list] = {}

    def predictor(name):
        def run(split):
            key = (name, split)
            if key not in cache:
                cache[key] = predict(models[name], tests[split], cfg)
            return cache[key]
        return run

    rule = DifficultyRule.for_plane(cfg.data.plane_h)
    return ablation_table({k: predictor(k) for k in models}, {k: v.boxes for k, v in tests.items()}, rule,
                          cfg.eval.iou_thresh, cfg.digest())


def run_ablation(cfg: RunConfig, modes: Sequence[FusionMode] = ALL_MODES, out_dir: Path | None = None,
                 progress: Callable[[str], None] | None = None,
                 sets: tuple[PreparedSet, dict[str, PreparedSet]] | None = None) -> EvalReport:
    """Train every mode on identical data and evaluate all of them on every test split."""
    train, tests = sets if sets is not None else build_sets(cfg)
    models = {}
    for m in modes:
        log: list = []
        sub = Path(out_dir) / m.name if out_dir is not None else None
        models[m.name] = train_model(m, train, cfg, sub, log, progress)
        if sub is not None:
            write_loss_log(log, sub / "loss_log.csv", cfg.digest())
    return evaluate(models, tests, cfg)


# ---------------------------------------------------------------------------
# entropy sweep


def entropy_sweep(cfg: RunConfig, calib: CalibrationModel | None = None,
                  map_writer: Callable[[str, str, np.ndarray], None] | None = None) -> list[dict]:
    """Normalized entropy per stream across visibilities and ambient levels.

    Each value is the summed mean entropy over all scenes divided by the same
    sum for the clear daylight frames, so empty radar views do not divide by zero.
    """
    calib = calib or calibration_for(cfg)
    ecfg = EntropyConfig(cfg.entropy.patch_m, cfg.entropy.patch_n)
    conds: list[tuple[str, WeatherCondition]] = []
    for v in cfg.entropy.visibilities:
        if math.isinf(v):
            conds.append(("clear", WeatherCondition("clear")))
        else:
            conds.append((f"fog_{v:g}m", WeatherCondition.fog(v)))
    for a in cfg.entropy.ambients:
        if a < 1.0:
            conds.append((f"ambient_{a:g}", WeatherCondition("clear", ambient_light=a)))
    sums = {name: np.zeros(len(STREAMS)) for name, _ in conds}
    ref = np.zeros(len(STREAMS))
    base = cfg.data.test_seed_base + cfg.seed * 100_000
    for k in range(cfg.entropy.scenes):
        seed = base + k
        clear = render_clear(random_scene(seed), calib)
        ref += _stream_entropies(encode_frame(clear, calib), ecfg)
        for name, cond in conds:
            fr = apply_condition(clear, cond)
            enc = encode_frame(fr, calib)
            sums[name] += _stream_entropies(enc, ecfg)
            if map_writer is not None:
                for s in STREAMS:
                    map_writer(f"{name}_{seed}_{s}", s, patch_entropy_grid(enc.stream(s), ecfg))
    rows = []
    for name, cond in conds:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(ref > 0, sums[name] / ref, np.nan)
        row = {"condition": name, "visibility": cond.visibility, "ambient": cond.ambient_light,
               "mean": {s: float(v) / max(1, cfg.entropy.scenes) for s, v in zip(STREAMS, sums[name])}}
        row.update({s: float(r) for s, r in zip(STREAMS, ratio)})
        rows.append(row)
    return rows


def _stream_entropies(enc, ecfg: EntropyConfig) -> np.ndarray:
    return np.array([float(patch_entropy_grid(enc.stream(s), ecfg).mean()) for s in STREAMS])
