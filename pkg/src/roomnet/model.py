"""RoomNet encoder-decoder, its recurrent (MRED) extension and the variants.

Layout of the network for input size R and encoder widths w[0..S-1]:

* encoder stage i: ``convs_per_stage`` x (3x3 conv, BN, ReLU) at width
  w[i], then 2x2 max pooling for the first P stages, where P is the
  largest count with R divisible by 2**P (capped at S);
* trimmed decoder: for pool j = P-1 down to 3, unpool with the saved
  indices, then convs narrowing to w[j-1]; the output is at R/8;
* heatmap head: linear 3x3 conv to 48 channels;
* side head: three fully-connected layers on the bottleneck -> 11 logits.

The *central block* is every encoder stage from ``central_from`` on plus
the whole decoder; the stages before it form the stem.  In the MRED
variants each conv of the central block also convolves its own previous
output (``w_prev``), with weights shared across iterations.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from roomnet.engine import ops
from roomnet.engine.optim import he_init
from roomnet.engine.tensor import Tensor
from roomnet.errors import InvalidArgumentError
from roomnet.geometry import NUM_KEYPOINT_CHANNELS, NUM_ROOM_TYPES
from roomnet.heatmaps import CHANNELS

VARIANTS = ("vanilla", "stacked", "stacked-skip", "feedback", "mred", "mred-feedback")
SINGLE_PASS = ("vanilla", "stacked", "stacked-skip")
RECURRENT = ("mred", "mred-feedback")
FEEDBACK = ("feedback", "mred-feedback")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 80
    widths: tuple = (8, 16, 32, 64, 64)
    variant: str = "vanilla"
    iterations: int = 1
    deep_supervision: bool = True
    loss_weight: float = 5.0
    num_room_types: int = NUM_ROOM_TYPES
    num_keypoints: int = NUM_KEYPOINT_CHANNELS
    central_from: int = 3
    convs_per_stage: int = 1
    side_hidden: tuple = (128, 128)
    dropout: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "side_hidden", tuple(int(w) for w in self.side_hidden))
        self.validate()

    @property
    def num_pools(self) -> int:
        p = 0
        while p < len(self.widths) and self.input_size % (2 ** (p + 1)) == 0:
            p += 1
        return p

    @property
    def output_size(self) -> int:
        return self.input_size // 8

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.num_pools

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        r, s, p = self.input_size, len(self.widths), self.num_pools
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if r <= 0 or r % 8:
            raise InvalidArgumentError(f"input size {r} must be a positive multiple of 8")
        if s < 4:
            raise InvalidArgumentError("need at least four encoder stages")
        if p < 3:
            raise InvalidArgumentError(f"input size {r} allows only {p} pooling stages; need 3")
        if self.widths[s - 1] != self.widths[p - 1]:
            raise InvalidArgumentError(
                f"bottleneck width {self.widths[s - 1]} must equal the width of the last pooled stage "
                f"({self.widths[p - 1]}) so its indices can be reused")
        if not 1 <= self.central_from <= min(3, p):
            raise InvalidArgumentError(f"central_from must lie in [1, 3], got {self.central_from}")
        if self.iterations < 1:
            raise InvalidArgumentError(f"iterations must be >= 1, got {self.iterations}")
        if self.variant in SINGLE_PASS and self.iterations != 1:
            raise InvalidArgumentError(f"variant {self.variant!r} runs a single pass (iterations=1)")
        if self.variant.startswith("stacked") and (self.central_from != 3 or p < 4):
            raise InvalidArgumentError("stacked variants need central_from=3 and at least 4 pooling stages")
        if self.convs_per_stage < 1 or len(self.side_hidden) != 2:
            raise InvalidArgumentError("need convs_per_stage >= 1 and two hidden side-head layers")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["side_hidden"] = tuple(d["side_hidden"])
        return cls(**d)


@dataclass
class RoomNet:
    """Parameters (trainable tensors) and BatchNorm running statistics."""

    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def conv_parameter_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if not n.startswith("side."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class ForwardTrace:
    heatmaps: list          # one (N, 48, R/8, R/8) Tensor per supervised output
    logits: Tensor          # (N, 11)
    hidden: list = field(default_factory=list)  # per iteration: {layer name: activation}


# ---------------------------------------------------------------- building

def _stat_key(name: str, stat: str, step: int) -> str:
    # iterations see different input distributions (no memory at t=0), so each
    # unrolled step keeps its own running statistics; gamma/beta stay shared
    return f"{name}.{stat}" if step == 0 else f"{name}.{stat}.t{step}"


class _Builder:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.model = RoomNet(config)
        self.rng = rng
        self.dtype = config.np_dtype

    def conv(self, name: str, cin: int, cout: int, recurrent: bool = False, bn: bool = True,
             steps: int = 1) -> None:
        p = self.model.params
        p[f"{name}.w"] = he_init((cout, cin, 3, 3), cin * 9, self.rng, self.dtype)
        p[f"{name}.b"] = Tensor(np.zeros(cout), dtype=self.dtype, requires_grad=True)
        if recurrent:
            p[f"{name}.w_prev"] = he_init((cout, cout, 3, 3), cout * 9, self.rng, self.dtype)
        if bn:
            p[f"{name}.gamma"] = Tensor(np.ones(cout), dtype=self.dtype, requires_grad=True)
            p[f"{name}.beta"] = Tensor(np.zeros(cout), dtype=self.dtype, requires_grad=True)
            for t in range(steps):
                self.model.buffers[_stat_key(name, "running_mean", t)] = np.zeros(cout, dtype=self.dtype)
                self.model.buffers[_stat_key(name, "running_var", t)] = np.ones(cout, dtype=self.dtype)


    def fc(self, name: str, din: int, dout: int) -> None:
        self.model.params[f"{name}.w"] = he_init((din, dout), din, self.rng, self.dtype)
        self.model.params[f"{name}.b"] = Tensor(np.zeros(dout), dtype=self.dtype, requires_grad=True)


def _stage_channels(cfg: ModelConfig, i: int, c: int, cin_stage: int) -> tuple[int, int]:
    return (cin_stage if c == 0 else cfg.widths[i]), cfg.widths[i]


def _decoder_channels(cfg: ModelConfig, j: int, c: int) -> tuple[int, int]:
    cout = cfg.widths[j - 1] if c == cfg.convs_per_stage - 1 else cfg.widths[j]
    return cfg.widths[j], cout


def block_out_channels(cfg: ModelConfig) -> int:
    return cfg.widths[2] if cfg.num_pools >= 4 else cfg.widths[-1]


def _build_central(b: _Builder, prefix: str, recurrent: bool, steps: int = 1) -> None:
    cfg = b.model.config
    for i in range(cfg.central_from, len(cfg.widths)):
        for c in range(cfg.convs_per_stage):
            cin, cout = _stage_channels(cfg, i, c, cfg.widths[i - 1])
            b.conv(f"{prefix}enc{i}.conv{c}", cin, cout, recurrent, steps=steps)
    for j in range(cfg.num_pools - 1, 2, -1):
        for c in range(cfg.convs_per_stage):
            cin, cout = _decoder_channels(cfg, j, c)
            b.conv(f"{prefix}dec{j}.conv{c}", cin, cout, recurrent, steps=steps)
    b.conv(f"{prefix}head", block_out_channels(cfg), cfg.num_keypoints, bn=False)


def build_variant(kind: str, config: ModelConfig, rng: np.random.Generator) -> RoomNet:
    """Build any of the six encoder-decoder configurations with He-initialized weights."""
    if kind not in VARIANTS:
        raise InvalidArgumentError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    if config.variant != kind:
        config = replace(config, variant=kind)
    b = _Builder(config, rng)
    in_ch = 3 + (config.num_keypoints if kind in FEEDBACK else 0)
    steps = 1 if kind in SINGLE_PASS else config.iterations
    for i in range(config.central_from):
        for c in range(config.convs_per_stage):
            cin, cout = _stage_channels(config, i, c, in_ch if i == 0 else config.widths[i - 1])
            b.conv(f"enc{i}.conv{c}", cin, cout, steps=steps if kind in FEEDBACK else 1)
    if kind.startswith("stacked"):
        _build_central(b, "stack0.", recurrent=False)
        _build_central(b, "stack1.", recurrent=False)
    else:
        _build_central(b, "", recurrent=kind in RECURRENT, steps=steps)
    d = config.widths[-1] * config.bottleneck_size ** 2
    h1, h2 = config.side_hidden
    b.fc("side.fc0", d, h1)
    b.fc("side.fc1", h1, h2)
    b.fc("side.fc2", h2, config.num_room_types)
    return b.model


def build_model(config: ModelConfig, rng: np.random.Generator) -> RoomNet:
    return build_variant(config.variant, config, rng)


# ---------------------------------------------------------------- forward pieces

def _layer(model: RoomNet, name: str, x: Tensor, train: bool, memory: Optional[Tensor] = None,
           step: int = 0) -> Tensor:
    p, buf = model.params, model.buffers
    z = ops.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], pad=1)
    if memory is not None:
        z = ops.add(z, ops.conv2d(memory, p[f"{name}.w_prev"], None, pad=1))
    # steps beyond the configured count reuse the last step's statistics
    while step > 0 and _stat_key(name, "running_mean", step) not in buf:
        step -= 1
    z = ops.batch_norm2d(z, p[f"{name}.gamma"], p[f"{name}.beta"],
                         buf[_stat_key(name, "running_mean", step)], buf[_stat_key(name, "running_var", step)], train)
    return ops.relu(z)


def _stem(model: RoomNet, x: Tensor, train: bool, step: int = 0) -> Tensor:
    cfg = model.config
    for i in range(cfg.central_from):
        for c in range(cfg.convs_per_stage):
            x = _layer(model, f"enc{i}.conv{c}", x, train, step=step)
        x, _ = ops.max_pool2d_indices(x, 2)
    return x


def _central(model: RoomNet, x: Tensor, train: bool, prefix: str = "",
             memory: Optional[dict] = None, step: int = 0) -> tuple[Tensor, Tensor, dict]:
    """One pass through the central block; returns (features, bottleneck, hidden states)."""
    cfg = model.config
    hidden: dict = {}
    pools: dict = {}

    def apply(name, h):
        h = _layer(model, name, h, train, None if memory is None else memory[name], step)
        hidden[name] = h
        return h

    h = x
    for i in range(cfg.central_from, len(cfg.widths)):
        for c in range(cfg.convs_per_stage):
            h = apply(f"{prefix}enc{i}.conv{c}", h)
        if i < cfg.num_pools:
            shape = h.shape
            h, idx = ops.max_pool2d_indices(h, 2)
            pools[i] = (idx, shape)
    bottleneck = h
    for j in range(cfg.num_pools - 1, 2, -1):
        idx, shape = pools[j]
        h = ops.max_unpool2d(h, idx, shape)
        for c in range(cfg.convs_per_stage):
            h = apply(f"{prefix}dec{j}.conv{c}", h)
    return h, bottleneck, hidden


def _head(model: RoomNet, h: Tensor, prefix: str = "") -> Tensor:
    p = model.params
    return ops.conv2d(h, p[f"{prefix}head.w"], p[f"{prefix}head.b"], pad=1)


def _side_head(model: RoomNet, bottleneck: Tensor, train: bool, rng) -> Tensor:
    p, rate = model.params, model.config.dropout
    z = ops.reshape(bottleneck, (bottleneck.shape[0], -1))
    for k in range(2):
        z = ops.relu(ops.fully_connected(z, p[f"side.fc{k}.w"], p[f"side.fc{k}.b"]))
        z = ops.dropout(z, rate, train, rng)
    return ops.fully_connected(z, p["side.fc2.w"], p["side.fc2.b"])


def _as_input(model: RoomNet, image) -> Tensor:
    cfg = model.config
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=cfg.np_dtype)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise InvalidArgumentError(
            f"expected images of shape (N, 3, {cfg.input_size}, {cfg.input_size}), got {tuple(x.shape)}")
    return x


# ---------------------------------------------------------------- forward passes

def forward_basic(model: RoomNet, image, train: bool = False, rng=None) -> ForwardTrace:
    """Single pass of the plain encoder-decoder (recurrent weights, if any, are ignored)."""
    x = _as_input(model, image)
    if model.config.variant in FEEDBACK:
        x = ops.concat([x, _zeros_like_prediction(model, x)], axis=1)
    out, bottleneck, hidden = _central(model, _stem(model, x, train), train)
    return ForwardTrace([_head(model, out)], _side_head(model, bottleneck, train, rng), [hidden])


def forward_mred(model: RoomNet, image, iterations: Optional[int] = None, train: bool = False,
                 rng=None) -> ForwardTrace:
    """Unrolled memory-augmented recurrent encoder-decoder.

    Iteration 0 computes every central layer from the layer below only; each
    later iteration adds the layer's own previous output convolved with its
    shared ``w_prev``.  The side head reads the iteration-0 bottleneck.
    """
    t_max = model.config.iterations if iterations is None else int(iterations)
    if t_max < 1:
        raise InvalidArgumentError(f"need at least one iteration, got {t_max}")
    if not any(n.endswith(".w_prev") for n in model.params):
        raise InvalidArgumentError("forward_mred needs a model built with recurrent weights")
    x = _as_input(model, image)
    stem = _stem(model, x, train)
    heatmaps, hidden_states = [], []
    memory = None
    logits = None
    for t in range(t_max):
        out, bottleneck, memory = _central(model, stem, train, memory=memory, step=t)
        if t == 0:
            logits = _side_head(model, bottleneck, train, rng)
        heatmaps.append(_head(model, out))
        hidden_states.append(memory)
    return ForwardTrace(heatmaps, logits, hidden_states)


def _zeros_like_prediction(model: RoomNet, x: Tensor) -> Tensor:
    cfg = model.config
    return Tensor(np.zeros((x.shape[0], cfg.num_keypoints, cfg.input_size, cfg.input_size)), dtype=x.dtype)


def _forward_feedback(model: RoomNet, image, iterations: int, train: bool, rng) -> ForwardTrace:
    """Re-run the shared network on input + previous prediction (nearest-upsampled to input size)."""
    recurrent = model.config.variant == "mred-feedback"
    x = _as_input(model, image)
    prev = _zeros_like_prediction(model, x)
    heatmaps, hidden_states = [], []
    memory = None
    logits = None
    for t in range(iterations):
        stem = _stem(model, ops.concat([x, prev], axis=1), train, step=t)
        out, bottleneck, hidden = _central(model, stem, train, memory=memory if recurrent else None, step=t)
        if recurrent:
            memory = hidden
        if t == 0:
            logits = _side_head(model, bottleneck, train, rng)
        hm = _head(model, out)
        heatmaps.append(hm)
        hidden_states.append(hidden)
        prev = ops.upsample_nearest(hm, 8)
    return ForwardTrace(heatmaps, logits, hidden_states)


def _forward_stacked(model: RoomNet, image, train: bool, rng) -> ForwardTrace:
    """Two unshared central blocks chained; the skip variant adds identity shortcuts."""
    skip = model.config.variant == "stacked-skip"
    x = _as_input(model, image)
    stem = _stem(model, x, train)
    out0, bottleneck, hidden0 = _central(model, stem, train, prefix="stack0.")
    logits = _side_head(model, bottleneck, train, rng)
    hm0 = _head(model, out0, "stack0.")
    inp1 = ops.add(out0, stem) if skip else out0
    out1, _, hidden1 = _central(model, inp1, train, prefix="stack1.")
    if skip:
        out1 = ops.add(out1, inp1)
    hm1 = _head(model, out1, "stack1.")
    return ForwardTrace([hm0, hm1], logits, [hidden0, hidden1])


def forward(model: RoomNet, image, train: bool = False, rng=None, iterations: Optional[int] = None) -> ForwardTrace:
    """Dispatch on the configured variant."""
    variant = model.config.variant
    t = model.config.iterations if iterations is None else int(iterations)
    if variant == "vanilla":
        return forward_basic(model, image, train, rng)
    if variant == "mred":
        return forward_mred(model, image, t, train, rng)
    if variant in FEEDBACK:
        if t < 1:
            raise InvalidArgumentError(f"need at least one iteration, got {t}")
        return _forward_feedback(model, image, t, train, rng)
    return _forward_stacked(model, image, train, rng)


# ---------------------------------------------------------------- loss + selection

def joint_loss(trace: ForwardTrace, gt_heatmaps: np.ndarray, weights: np.ndarray, room_types,
               loss_weight: float = 5.0, deep_supervision: bool = True) -> Tensor:
    """Weighted heatmap regression plus ``loss_weight`` x room-type cross-entropy.

    ``weights`` is zero on channels outside each sample's ground-truth type,
    so those channels never contribute.  With deep supervision every
    supervised output is compared to the same ground truth; otherwise only
    the last one.  Reduction: sum over cells and channels, mean over batch.
    """
    types = np.asarray(room_types, dtype=np.int64).reshape(-1)
    if types.size and (types.min() < 0 or types.max() >= trace.logits.shape[1]):
        raise InvalidArgumentError(f"room type outside [0, {trace.logits.shape[1] - 1}]")
    n = trace.logits.shape[0]
    terms = trace.heatmaps if deep_supervision else trace.heatmaps[-1:]
    dtype = trace.logits.dtype
    gt = np.asarray(gt_heatmaps, dtype=dtype)
    w = np.asarray(weights, dtype=dtype)
    total = None
    for hm in terms:
        term = ops.weighted_sse(hm, gt, w)
        total = term if total is None else ops.add(total, term)
    total = ops.mul(total, 1.0 / n)
    ce = ops.softmax_cross_entropy(trace.logits, types)
    return ops.add(total, ops.mul(ce, float(loss_weight)))


def predicted_types(logits) -> np.ndarray:
    """Argmax over room-type logits (ties -> lowest index)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-1)


def select_heatmaps_by_type(trace: ForwardTrace) -> list[tuple[int, np.ndarray]]:
    """Per sample: (predicted type, that type's channels from the final output)."""
    final = trace.heatmaps[-1].data
    out = []
    for i, t in enumerate(predicted_types(trace.logits)):
        out.append((int(t), final[i, CHANNELS.channels(int(t))]))
    return out
