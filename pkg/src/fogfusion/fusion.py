"""Four-branch single-shot fusion network with entropy-gated feature exchange.

Each sensor stream runs its own VGG-style feature stack. In the deep fusion
modes an exchange block after every pyramid stage gates the concatenated
branch activations with a sigmoid of the (1x1-convolved) entropy maps, mixes
them with a 1x1 convolution over ``[gated features, entropies]`` and adds the
result back into every branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoding import STREAM_CHANNELS, STREAMS
from .entropy import downsample_mean
from .tensor import Tensor

FUSION_KINDS = ("entropy_deep", "deep_no_entropy", "late_fusion", "early_concat", "single_sensor")

# pyramid of the reference implementation and the input plane (H, W) that yields it exactly
REFERENCE_PYRAMID = ((24, 78), (24, 78), (12, 39), (12, 39), (6, 20), (3, 10))
REFERENCE_PLANE = (96, 312)

# per-stage stride after the stem; the stem itself reduces by 4
STAGE_STRIDES = (1, 1, 2, 1, 2, 2)

# how an exchange block's output re-enters its branch
EXCHANGE_RULES = ("residual", "replace")


@dataclass(frozen=True)
class FusionMode:
    kind: str
    stream: str | None = None

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion mode {self.kind!r}")
        if self.kind == "single_sensor":
            if self.stream not in STREAMS:
                raise ValueError(f"single_sensor needs a stream in {STREAMS}, got {self.stream!r}")
        elif self.stream is not None:
            raise ValueError(f"mode {self.kind} takes no stream, got {self.stream!r}")

    @classmethod
    def parse(cls, name: str) -> "FusionMode":
        """``entropy_deep`` ... or ``single_sensor:camera`` / ``camera_only``."""
        if name.endswith("_only"):
            return cls("single_sensor", name[: -len("_only")])
        if ":" in name:
            kind, stream = name.split(":", 1)
            return cls(kind, stream)
        return cls(name)

    @property
    def name(self) -> str:
        return f"{self.stream}_only" if self.kind == "single_sensor" else self.kind

    @property
    def streams(self) -> tuple[str, ...]:
        """Streams whose data the mode consumes."""
        return (self.stream,) if self.kind == "single_sensor" else STREAMS

    @property
    def branches(self) -> tuple[str, ...]:
        if self.kind == "single_sensor":
            return (self.stream,)
        if self.kind == "early_concat":
            return ("concat",)
        return STREAMS

    @property
    def exchanges(self) -> bool:
        return self.kind in ("entropy_deep", "deep_no_entropy")

    def __str__(self) -> str:
        return self.name


ALL_MODES = tuple(FusionMode.parse(n) for n in (
    "entropy_deep", "deep_no_entropy", "late_fusion", "early_concat",
    "camera_only", "lidar_only", "radar_only", "gated_only",
))


@dataclass
class BranchConfig:
    widths: tuple[int, ...] = (16, 32, 48, 48, 48, 48)
    stem_width: int = 8
    in_channels: dict[str, int] = field(default_factory=lambda: dict(STREAM_CHANNELS))

    def __post_init__(self):
        if len(self.widths) != len(STAGE_STRIDES):
            raise ValueError(f"need {len(STAGE_STRIDES)} stage widths, got {len(self.widths)}")


def _ceil_half(n: int) -> int:
    return (n + 2 - 3) // 2 + 1


def pyramid_shapes(plane: tuple[int, int]) -> list[tuple[int, int]]:
    """Per-level feature shapes the backbone produces for an ``(H, W)`` input plane."""
    H, W = plane
    if H % 4 or W % 4:
        raise ValueError(f"plane extents must be multiples of 4, got {plane}")
    h, w = H // 4, W // 4
    shapes = []
    for s in STAGE_STRIDES:
        if s == 2:
            h, w = _ceil_half(h), _ceil_half(w)
        shapes.append((h, w))
    return shapes


def scaled_reference_pyramid(plane: tuple[int, int]) -> list[tuple[int, int]]:
    """Reference pyramid rescaled per axis from :data:`REFERENCE_PLANE` to ``plane``."""
    sy = plane[0] / REFERENCE_PLANE[0]
    sx = plane[1] / REFERENCE_PLANE[1]
    return [(int(round(h * sy)), int(round(w * sx))) for h, w in REFERENCE_PYRAMID]


def exchange_block(features: list[Tensor], entropies: np.ndarray, proj_w: Tensor, proj_b: Tensor,
                   gate_w: Tensor | None = None, gate_b: Tensor | None = None,
                   force_gate: float | None = None, return_gate: bool = False, residual: bool = True):
    """Entropy-steered feature exchange between parallel branches.

    ``entropies`` is ``[B, S, h, w]`` (already pooled to this level). The gate is
    ``sigmoid(conv1x1(entropies))`` with one channel per concatenated feature
    channel; ``force_gate`` replaces it by a constant. Returns the updated
    per-branch features and optionally the gate tensor. With ``residual`` the
    projection is added to each branch input, otherwise it replaces it.
    """
    shape = features[0].shape[2:]
    for k, f in enumerate(features[1:], start=1):
        if f.shape[2:] != shape:
            raise T.ShapeError(f"exchange_block: branch {k} spatial extent {f.shape[2:]} != {shape}")
    if entropies.shape[2:] != shape:
        raise T.ShapeError(f"exchange_block: entropy extent {entropies.shape[2:]} != feature extent {shape}")
    stacked = T.concat(features, axis=1) if len(features) > 1 else features[0]
    ent = Tensor(entropies.astype(stacked.data.dtype, copy=False))
    if force_gate is not None:
        gate = None
        fused = stacked if force_gate == 1.0 else T.scale(stacked, force_gate)
    else:
        gate = T.sigmoid(T.conv2d(ent, gate_w, gate_b))
        fused = T.elementwise_mul(stacked, gate)
    mixed = T.conv2d(T.concat([fused, ent], axis=1), proj_w, proj_b)
    parts = T.split(mixed, [f.shape[1] for f in features], axis=1)
    outs = [T.add(f, p) for f, p in zip(features, parts)] if residual else list(parts)
    return (outs, gate) if return_gate else outs


class FusionNet:
    """Single-shot detector over one of the :class:`FusionMode` variants."""

    def __init__(self, mode: FusionMode | str, plane: tuple[int, int] = (96, 192), branch: BranchConfig | None = None,
                 anchors_per_cell: int = 3, num_classes: int = 2, seed: int = 0, exchange: str = "residual"):
        if exchange not in EXCHANGE_RULES:
            raise ValueError(f"exchange must be one of {EXCHANGE_RULES}, got {exchange!r}")
        self.exchange = exchange
        self.mode = FusionMode.parse(mode) if isinstance(mode, str) else mode
        self.plane = tuple(plane)
        self.branch = branch or BranchConfig()
        self.anchors_per_cell = anchors_per_cell
        self.num_classes = num_classes
        self.seed = seed
        self.shapes = pyramid_shapes(self.plane)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed, 0xF0])
        widths = self.branch.widths
        for b in self.mode.branches:
            cin = sum(self.branch.in_channels[s] for s in STREAMS) if b == "concat" else self.branch.in_channels[b]
            sw = self.branch.stem_width
            self._conv(f"{b}.stem0", cin, sw, 3, rng)
            self._conv(f"{b}.stem1", sw, widths[0], 3, rng)
            for l in range(1, len(widths)):
                self._conv(f"{b}.stage{l}", widths[l - 1], widths[l], 3, rng)
        n_br = len(self.mode.branches)
        if self.mode.exchanges:
            for l, w in enumerate(widths):
                ctot = w * n_br
                if self.mode.kind == "entropy_deep":
                    self._zeros(f"x{l}.gate", n_br, ctot, 1)
                if exchange == "replace":
                    # start as identity on the features, undoing the initial gate of 0.5
                    self._zeros(f"x{l}.proj", ctot + n_br, ctot, 1)
                    gain = 2.0 if self.mode.kind == "entropy_deep" else 1.0
                    self.params[f"x{l}.proj.w"].data[np.arange(ctot), np.arange(ctot), 0, 0] = gain
                else:
                    # a zero projection would also zero the gate's gradient
                    self._conv(f"x{l}.proj", ctot + n_br, ctot, 1, rng)
        for l, w in enumerate(widths):
            cin = w * n_br
            self._conv(f"head{l}.cls", cin, anchors_per_cell * num_classes, 3, rng, gain=0.1)
            self._conv(f"head{l}.reg", cin, anchors_per_cell * 4, 3, rng, gain=0.1)

    # -- parameters -------------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k: int, rng, gain: float = 1.0) -> None:
        w = T.glorot_uniform((cout, cin, k, k), rng)
        if gain != 1.0:
            w.data *= np.float32(gain)
        w.name = f"{name}.w"
        self.params[w.name] = w
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True, name=f"{name}.b")

    def _zeros(self, name: str, cin: int, cout: int, k: int) -> None:
        self.params[f"{name}.w"] = Tensor(np.zeros((cout, cin, k, k), dtype=np.float32), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True, name=f"{name}.b")

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype) -> "FusionNet":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, p in self.params.items():
            if k not in state:
                if strict:
                    raise KeyError(f"missing parameter {k}")
                continue
            if state[k].shape != p.shape:
                raise T.ShapeError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def architecture(self) -> dict:
        return {
            "mode": self.mode.name,
            "plane": list(self.plane),
            "widths": list(self.branch.widths),
            "stem_width": self.branch.stem_width,
            "in_channels": dict(self.branch.in_channels),
            "anchors_per_cell": self.anchors_per_cell,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "exchange": self.exchange,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "FusionNet":
        branch = BranchConfig(tuple(arch["widths"]), arch["stem_width"], dict(arch["in_channels"]))
        return cls(arch["mode"], tuple(arch["plane"]), branch, arch["anchors_per_cell"], arch["num_classes"], arch["seed"],
                   arch.get("exchange", "residual"))

    # -- forward ----------------------------------------------------------

    def _stage(self, b: str, l: int, h: Tensor) -> Tensor:
        p = self.params
        if l == 0:
            h = T.relu(T.conv2d(h, p[f"{b}.stem0.w"], p[f"{b}.stem0.b"], stride=2, padding=1))
            h = T.relu(T.conv2d(h, p[f"{b}.stem1.w"], p[f"{b}.stem1.b"], padding=1))
            return T.maxpool2(h)
        return T.relu(T.conv2d(h, p[f"{b}.stage{l}.w"], p[f"{b}.stage{l}.b"], stride=STAGE_STRIDES[l], padding=1))

    def _branch_inputs(self, inputs: dict[str, np.ndarray]) -> dict[str, Tensor]:
        for s in self.mode.streams:
            if s not in inputs:
                raise ValueError(f"mode {self.mode.name} needs stream {s!r}")
            if tuple(inputs[s].shape[2:]) != self.plane:
                raise T.ShapeError(f"stream {s} plane {tuple(inputs[s].shape[2:])} != configured {self.plane}")
        dt = self.dtype
        if self.mode.kind == "early_concat":
            return {"concat": Tensor(np.concatenate([np.asarray(inputs[s], dtype=dt) for s in STREAMS], axis=1))}
        return {b: Tensor(np.asarray(inputs[b], dtype=dt)) for b in self.mode.branches}

    def forward(self, inputs: dict[str, np.ndarray], entropies: np.ndarray | None = None,
                force_gate: float | None = None, probe: dict | None = None) -> list[Tensor]:
        """Per-level fused feature maps.

        ``inputs`` maps stream name to ``[B, C, H, W]``; ``entropies`` is
        ``[B, 4, H, W]`` in [0, 1] (bits / 8), stream order as in ``STREAMS``.
        Zeroing a stream's planes and entropy is how dropout is expressed.
        """
        h = self._branch_inputs(inputs)
        branches = self.mode.branches
        ent_levels = None
        if self.mode.exchanges:
            if entropies is None:
                raise ValueError(f"mode {self.mode.name} needs entropy maps")
            ent = np.asarray(entropies, dtype=self.dtype)
            ent_levels = [downsample_mean(ent, s) for s in self.shapes]
        if self.mode.kind == "deep_no_entropy":
            force_gate = 1.0
        feats = []
        for l in range(len(self.branch.widths)):
            for b in branches:
                h[b] = self._stage(b, l, h[b])
            if self.mode.exchanges:
                p = self.params
                outs, gate = exchange_block(
                    [h[b] for b in branches], ent_levels[l], p[f"x{l}.proj.w"], p[f"x{l}.proj.b"],
                    p.get(f"x{l}.gate.w"), p.get(f"x{l}.gate.b"), force_gate=force_gate, return_gate=True,
                    residual=self.exchange == "residual")
                if probe is not None:
                    probe.setdefault("gates", []).append(gate)
                    probe.setdefault("branch", []).append(dict(zip(branches, outs)))
                h = dict(zip(branches, outs))
            feats.append(T.concat([h[b] for b in branches], axis=1) if len(branches) > 1 else h[branches[0]])
        return feats

    def head(self, feats: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Class logits ``[B, N, K]`` and box regressions ``[B, N, 4]`` over all anchors."""
        A, K = self.anchors_per_cell, self.num_classes
        logits, regs = [], []
        for l, f in enumerate(feats):
            B, _, hh, ww = f.shape
            p = self.params
            # one convolution for both outputs shares the im2col work
            w = T.concat([p[f"head{l}.cls.w"], p[f"head{l}.reg.w"]], axis=0)
            b = T.concat([p[f"head{l}.cls.b"], p[f"head{l}.reg.b"]], axis=0)
            c, r = T.split(T.conv2d(f, w, b, padding=1), [A * K, A * 4], axis=1)
            logits.append(T.reshape(T.transpose(c, (0, 2, 3, 1)), (B, hh * ww * A, K)))
            regs.append(T.reshape(T.transpose(r, (0, 2, 3, 1)), (B, hh * ww * A, 4)))
        return T.concat(logits, axis=1), T.concat(regs, axis=1)

    def __call__(self, inputs, entropies=None, force_gate=None):
        return self.head(self.forward(inputs, entropies, force_gate))


def dropout_streams(frame: dict[str, np.ndarray], entropies: np.ndarray, p: float = 0.5, seed=None,
                    rng: np.random.Generator | None = None):
    """Zero each stream (planes and entropy) independently with probability ``p``.

    If every stream would be dropped, one uniformly chosen stream is kept.
    Returns ``(frame', entropies', kept_mask)``.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    streams = [s for s in STREAMS if s in frame]
    dropped = rng.random(len(streams)) < p
    if dropped.all():
        dropped[int(rng.integers(len(streams)))] = False
    out = dict(frame)
    ent = np.array(entropies, copy=True)
    for k, s in enumerate(streams):
        if dropped[k]:
            out[s] = np.zeros_like(frame[s])
            ent[STREAMS.index(s)] = 0
    return out, ent, ~dropped
