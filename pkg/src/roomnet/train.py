"""Training loop, checkpoint conversion, evaluation and inference helpers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from roomnet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from roomnet.config import TrainConfig
from roomnet.data import DEFAULT_MEAN, SceneSample, preprocess
from roomnet.engine.optim import SGD
from roomnet.engine.tensor import Tape, Tensor, backward
from roomnet.errors import CheckpointError, ConfigError, InvalidArgumentError
from roomnet.geometry import Layout, flip_layout, keypoint_error, pixel_error, rasterize_layout
from roomnet.heatmaps import CHANNELS, decode_keypoints, flip_heatmaps, heatmap_targets
from roomnet.model import ModelConfig, RoomNet, build_model, forward, joint_loss

log = logging.getLogger("roomnet")

METRIC_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "keypoint_error", "pixel_error", "type_accuracy")


# ---------------------------------------------------------------- data at model resolution

@dataclass
class PreparedSplit:
    """Mean-subtracted images resized to the model input, plus layouts in both frames."""

    images: np.ndarray            # (N, 3, R, R)
    layouts: list                 # at model resolution
    originals: list               # at source resolution

    def __len__(self) -> int:
        return len(self.layouts)


def prepare_split(samples: Sequence[SceneSample], size: int, dtype=np.float64,
                  require_native: bool = False) -> PreparedSplit:
    if not samples:
        raise InvalidArgumentError("dataset is empty")
    images, layouts = [], []
    for s in samples:
        if require_native and s.image.shape[1:] != (size, size):
            raise ConfigError(f"image {s.metadata.get('source', '?')} is {s.image.shape[2]}x{s.image.shape[1]} "
                              f"but the model expects {size}x{size}; pass --resize to rescale")
        img, lay = preprocess(s.image, size, DEFAULT_MEAN, s.layout)
        images.append(img)
        layouts.append(lay)
    return PreparedSplit(np.stack(images).astype(dtype), layouts, [s.layout for s in samples])


# ---------------------------------------------------------------- prediction

@dataclass
class Prediction:
    """Network output for one image, with the decoded layout in source coordinates."""

    layout: Layout
    heatmaps: np.ndarray   # (48, h, w) final-iteration output
    logits: np.ndarray     # (11,)
    model_size: int

    def keypoints_for(self, t: int) -> np.ndarray:
        """Decoded keypoints of room type ``t`` in source coordinates."""
        if t == self.layout.room_type:
            return self.layout.keypoints
        return _to_source(decode_keypoints(self.heatmaps, t, self.model_size / self.heatmaps.shape[-1]),
                          self.model_size, self.layout.width, self.layout.height)


def _to_source(kps: np.ndarray, size: int, width: int, height: int) -> np.ndarray:
    out = np.asarray(kps, dtype=np.float64).copy()
    out[:, 0] = (out[:, 0] + 0.5) * (width / size) - 0.5
    out[:, 1] = (out[:, 1] + 0.5) * (height / size) - 0.5
    return out


def run_network(model: RoomNet, images: np.ndarray, flip_average: bool = False,
                batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Final-iteration heatmaps (N, 48, h, w) and logits (N, 11) in eval mode.

    With ``flip_average`` the mirrored images are also run; their heatmaps
    are mapped back with the flip permutation and both heatmaps and logits
    are averaged.
    """
    hms, logits = [], []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        trace = forward(model, x, train=False)
        h, z = trace.heatmaps[-1].data, trace.logits.data
        if flip_average:
            trace_f = forward(model, np.ascontiguousarray(x[..., ::-1]), train=False)
            h = (h + flip_heatmaps(trace_f.heatmaps[-1].data)) / 2
            z = (z + trace_f.logits.data) / 2
        hms.append(h)
        logits.append(z)
    return np.concatenate(hms), np.concatenate(logits)


def predict(model: RoomNet, split: PreparedSplit, flip_average: bool = False) -> list[Prediction]:
    size = model.config.input_size
    hms, logits = run_network(model, split.images, flip_average)
    scale = size / hms.shape[-1]
    out = []
    for h, z, orig in zip(hms, logits, split.originals):
        t = int(np.argmax(z))
        kps = _to_source(decode_keypoints(h, t, scale), size, orig.width, orig.height)
        out.append(Prediction(Layout(t, kps, orig.width, orig.height), h, z, size))
    return out


# ---------------------------------------------------------------- scoring

@dataclass
class SampleScore:
    index: int
    true_type: int
    pred_type: int
    keypoint_error: float
    pixel_error: float

    @property
    def correct(self) -> bool:
        return self.true_type == self.pred_type


def score(pred_layout: Layout, gt: Layout, index: int = 0,
          keypoints_for: Optional[Callable[[int], np.ndarray]] = None) -> SampleScore:
    """Score one prediction against ground truth.

    Pixel error rasterizes the predicted layout as is.  Keypoint error needs
    keypoints of the ground-truth type; when the predicted type differs they
    come from ``keypoints_for`` (decoding the true type's channels), and
    without it the keypoint error is NaN.
    """
    if pred_layout.room_type == gt.room_type:
        kps = pred_layout.keypoints
    elif keypoints_for is not None:
        kps = keypoints_for(gt.room_type)
    else:
        kps = None
    kerr = math.nan if kps is None else keypoint_error(kps, gt.keypoints, gt.width, gt.height)
    perr = pixel_error(rasterize_layout(pred_layout, gt.width, gt.height), rasterize_layout(gt))
    return SampleScore(index, gt.room_type, pred_layout.room_type, kerr, perr)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # SampleScore per sample
    loss: float = math.nan

    @property
    def keypoint_error(self) -> float:
        return float(np.nanmean([r.keypoint_error for r in self.rows]))

    @property
    def pixel_error(self) -> float:
        return float(np.mean([r.pixel_error for r in self.rows]))

    @property
    def type_accuracy(self) -> float:
        return 100.0 * float(np.mean([r.correct for r in self.rows]))

    def summary(self) -> dict:
        return {"samples": len(self.rows), "keypoint_error": self.keypoint_error,
                "pixel_error": self.pixel_error, "type_accuracy": self.type_accuracy}

    def format_text(self) -> str:
        s = self.summary()
        return "\n".join([
            f"{'samples':<20}{s['samples']:>10d}",
            f"{'keypoint error %':<20}{s['keypoint_error']:>10.3f}",
            f"{'pixel error %':<20}{s['pixel_error']:>10.3f}",
            f"{'type accuracy %':<20}{s['type_accuracy']:>10.2f}",
        ])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "true_type", "pred_type", "keypoint_error", "pixel_error", "correct"])
            for r in self.rows:
                w.writerow([r.index, r.true_type, r.pred_type, repr(r.keypoint_error), repr(r.pixel_error),
                            int(r.correct)])


def score_predictions(preds: Sequence, gts: Sequence[Layout]) -> EvalReport:
    """``preds`` holds Prediction objects or bare Layouts (e.g. an oracle)."""
    if len(preds) != len(gts):
        raise InvalidArgumentError(f"{len(preds)} predictions for {len(gts)} ground-truth layouts")
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        if isinstance(p, Prediction):
            rows.append(score(p.layout, g, i, p.keypoints_for))
        else:
            rows.append(score(p, g, i))
    return EvalReport(rows)


def split_loss(model: RoomNet, split: PreparedSplit, background_factor: float = 0.2,
               batch_size: int = 16) -> float:
    """Mean joint loss in eval mode (no dropout, running BN statistics)."""
    cfg = model.config
    total = 0.0
    for start in range(0, len(split), batch_size):
        x = split.images[start:start + batch_size]
        lays = split.layouts[start:start + batch_size]
        gt, w = heatmap_targets(lays, cfg.output_size, factor=background_factor)
        trace = forward(model, x, train=False)
        loss = joint_loss(trace, gt, w, [l.room_type for l in lays], cfg.loss_weight, cfg.deep_supervision)
        total += float(loss.data) * len(lays)
    return total / len(split)


def evaluate(model: RoomNet, split: PreparedSplit, flip_average: bool = False,
             background_factor: float = 0.2) -> EvalReport:
    report = score_predictions(predict(model, split, flip_average), split.originals)
    report.loss = split_loss(model, split, background_factor)
    return report


# ---------------------------------------------------------------- training

class Trainer:
    """Minibatch SGD over a prepared split; all randomness comes from one seeded generator.

    Per epoch the generator is consumed in a fixed order: the shuffle
    permutation, then per batch the flip draws followed by dropout masks.
    """

    def __init__(self, cfg: TrainConfig, train: PreparedSplit, val: Optional[PreparedSplit] = None,
                 out_dir=None, model: Optional[RoomNet] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.train_split, self.val_split = train, val
        if len(train) == 0:
            raise InvalidArgumentError("training set is empty")
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.model = model if model is not None else build_model(cfg.model, self.rng)
        self.optimizer = SGD(self.model.parameters(), cfg.lr_at(0), cfg.momentum, cfg.weight_decay)
        self.epoch = 0
        self.history: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            try:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                probe = self.out_dir / ".write-test"
                probe.write_bytes(b"")
                probe.unlink()
            except OSError as exc:
                raise CheckpointError(f"checkpoint directory {self.out_dir} is not writable: {exc}") from None
        self._targets = {}
        self.train_split.images = self.train_split.images.astype(cfg.model.np_dtype, copy=False)

    def _target(self, i: int, flipped: bool):
        key = (i, flipped)
        if key not in self._targets:
            lay = self.train_split.layouts[i]
            lay = flip_layout(lay) if flipped else lay
            gt, w = heatmap_targets([lay], self.cfg.model.output_size, factor=self.cfg.background_factor)
            self._targets[key] = (gt[0], w[0], lay.room_type)
        return self._targets[key]

    def train_step(self, idx: np.ndarray) -> float:
        cfg, model = self.cfg, self.model
        flips = self.rng.random(len(idx)) < cfg.flip_prob
        x = self.train_split.images[idx].copy()
        x[flips] = x[flips][..., ::-1]
        targets = [self._target(int(i), bool(f)) for i, f in zip(idx, flips)]
        gt = np.stack([t[0] for t in targets])
        w = np.stack([t[1] for t in targets])
        types = [t[2] for t in targets]
        model.zero_grad()
        with Tape() as tape:
            trace = forward(model, x, train=True, rng=self.rng)
            loss = joint_loss(trace, gt, w, types, cfg.model.loss_weight, cfg.model.deep_supervision)
        backward(tape, loss)
        self.optimizer.step()
        return float(loss.data)

    def train_epoch(self) -> float:
        self.optimizer.lr = self.cfg.lr_at(self.epoch)
        n, bs = len(self.train_split), self.cfg.batch_size
        perm = self.rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            total += self.train_step(idx) * len(idx)
        self.epoch += 1
        return total / n

    def run(self, epochs: Optional[int] = None, metrics_path=None) -> list[dict]:
        """Train until ``epochs`` (default: the configured total) epochs are complete."""
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            lr = self.cfg.lr_at(self.epoch)
            train_loss = self.train_epoch()
            row = {"epoch": self.epoch, "lr": lr, "train_loss": train_loss}
            if self.val_split is not None:
                rep = evaluate(self.model, self.val_split, self.cfg.flip_average, self.cfg.background_factor)
                row.update(val_loss=rep.loss, keypoint_error=rep.keypoint_error, pixel_error=rep.pixel_error,
                           type_accuracy=rep.type_accuracy)
            self.history.append(row)
            log.info("epoch %d lr %.3g loss %.5f%s", self.epoch, lr, train_loss,
                     "" if self.val_split is None else
                     f" val kp {row['keypoint_error']:.3f}% px {row['pixel_error']:.3f}% "
                     f"acc {row['type_accuracy']:.1f}%")
            if metrics_path:
                write_metrics(self.history, metrics_path)
            if self.out_dir:
                every = self.cfg.checkpoint_every
                if (every and self.epoch % every == 0) or self.epoch == target:
                    save_checkpoint(self.checkpoint(), self.out_dir / f"epoch{self.epoch:04d}.rnck")
                    save_checkpoint(self.checkpoint(), self.out_dir / "last.rnck")
        best = self.best_epoch()
        if best is not None:
            log.info("best validation keypoint error at epoch %d (%.3f%%)", best["epoch"], best["keypoint_error"])
        return self.history

    def best_epoch(self) -> Optional[dict]:
        rows = [r for r in self.history if "keypoint_error" in r and not math.isnan(r["keypoint_error"])]
        return min(rows, key=lambda r: r["keypoint_error"]) if rows else None

    # -------------------------------------------------------- persistence

    def checkpoint(self) -> Checkpoint:
        return model_checkpoint(self.model, self.optimizer, self.epoch, self.rng,
                                extra={"train_config": self.cfg.to_dict(), "history": self.history})

    @classmethod
    def resume(cls, ckpt: Checkpoint, cfg: TrainConfig, train: PreparedSplit,
               val: Optional[PreparedSplit] = None, out_dir=None) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        if model.config != cfg.model:
            raise ConfigError("checkpoint model configuration differs from the training configuration")
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        tr = cls(cfg, train, val, out_dir, model=model, rng=rng)
        momentum = ckpt.group("momentum")
        names = list(model.params)
        for i, name in enumerate(names):
            if name in momentum:
                tr.optimizer.state.buffers[i][...] = momentum[name]
        tr.epoch = ckpt.epoch
        tr.history = list(ckpt.extra.get("history", []))
        return tr


def model_checkpoint(model: RoomNet, optimizer: Optional[SGD] = None, epoch: int = 0,
                     rng: Optional[np.random.Generator] = None, extra: Optional[dict] = None) -> Checkpoint:
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    opt = {}
    if optimizer is not None:
        for name, buf in zip(model.params, optimizer.state.buffers):
            tensors[f"momentum/{name}"] = buf
        opt = {"lr": optimizer.lr, "momentum": optimizer.state.momentum,
               "weight_decay": optimizer.state.weight_decay}
    state = None if rng is None else rng.bit_generator.state
    return Checkpoint(model.config.to_dict(), tensors, epoch, state, opt, extra or {})


def model_from_checkpoint(ckpt: Checkpoint) -> RoomNet:
    try:
        cfg = ModelConfig.from_dict(ckpt.model_config)
    except (TypeError, KeyError, InvalidArgumentError) as exc:
        raise CheckpointError(f"checkpoint holds an invalid model configuration: {exc}") from None
    model = build_model(cfg, np.random.default_rng(0))
    params, buffers = ckpt.group("param"), ckpt.group("buffer")
    if set(params) != set(model.params) or set(buffers) != set(model.buffers):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    for name, p in model.params.items():
        if params[name].shape != p.shape:
            raise CheckpointError(f"tensor {name}: shape {params[name].shape} != {p.shape}")
        p.data = params[name].astype(cfg.np_dtype, copy=True)
    for name in model.buffers:
        model.buffers[name][...] = buffers[name]
    return model


def load_model(path) -> RoomNet:
    return model_from_checkpoint(load_checkpoint(path))


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- rendering

_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                     [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.float64)


def draw_segments(image: np.ndarray, layout: Layout, color=(255, 0, 0), thickness: int = 1) -> np.ndarray:
    """Draw the layout's edges (and border extensions) over an (H, W, 3) uint8 image."""
    from roomnet.geometry import layout_to_edges

    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    r = thickness // 2
    for seg in layout_to_edges(layout):
        (x0, y0), (x1, y1) = seg.start, seg.end
        n = int(math.ceil(2 * max(abs(x1 - x0), abs(y1 - y0)))) + 1
        ts = np.linspace(0.0, 1.0, n)
        xs = np.rint(x0 + ts * (x1 - x0)).astype(np.int64)
        ys = np.rint(y0 + ts * (y1 - y0)).astype(np.int64)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                xx, yy = xs + dx, ys + dy
                ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
                out[yy[ok], xx[ok]] = color
    return out


def composite_heatmaps(heatmaps: np.ndarray, t: int, size: int) -> np.ndarray:
    """Color-coded (size, size, 3) uint8 rendering of type ``t``'s channels (max over channels)."""
    chans = np.clip(np.asarray(heatmaps)[CHANNELS.channels(t)], 0.0, 1.0)
    rep = size // chans.shape[-1]
    chans = chans.repeat(rep, axis=-2).repeat(rep, axis=-1)
    colors = _PALETTE[np.arange(len(chans)) % len(_PALETTE)]
    rgb = (chans[:, :, :, None] * colors[:, None, None, :]).max(axis=0)
    return np.round(rgb).astype(np.uint8)
