"""Micro anchor-based single-scale detector.

Architecture: a stack of stride-2 3x3 leaky-relu conv blocks that reduces a
square input to a GxG grid, then a linear 1x1 head emitting, per grid cell
and per anchor, the raw vector (tx, ty, tw, th, t_obj, t_c1 .. t_cK).

Decoding follows the usual anchor-box convention: centers are the cell
offset plus a sigmoid, dimensions are the anchor scaled by exp(). The
detector is differentiable end to end, including the training loss, and
exposes the loss gradient with respect to the input image (the quantity the
attacks consume).
"""

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import anchor_iou, iou
from .errors import (
    NonFiniteLossError,
    ParseError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
from .numerics import ConvLayer, backward_stack, forward_stack, sigmoid
from .rng import derive_rng

BCE_CLAMP = 1e-7

WEIGHTS_MAGIC = b"TOGW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 64
    grid: int = 4
    anchors: tuple = ((0.25, 0.25), (0.55, 0.55))
    num_classes: int = 3
    channels: tuple = (16, 32, 64, 64)
    lambda_noobj: float = 0.5
    lambda_loc: float = 5.0
    confidence_threshold: float = 0.5
    nms_iou_threshold: float = 0.45
    leaky_slope: float = 0.1
    seed: int = 0

    @property
    def num_anchors(self):
        return len(self.anchors)

    @property
    def num_slots(self):
        return self.grid * self.grid * self.num_anchors

    @property
    def head_channels(self):
        return self.num_anchors * (5 + self.num_classes)

    def validate(self):
        problems = []
        if self.input_size < 4:
            problems.append(f"input_size: must be >= 4, got {self.input_size}")
        if self.grid < 1:
            problems.append(f"grid: must be >= 1, got {self.grid}")
        if self.num_classes < 2:
            problems.append(f"num_classes: must be >= 2, got {self.num_classes}")
        if not self.anchors:
            problems.append("anchors: must be non-empty")
        elif any(w <= 0 or h <= 0 for w, h in self.anchors):
            problems.append(f"anchors: all dims must be > 0, got {self.anchors}")
        if not self.channels:
            problems.append("channels: must be non-empty")
        elif any(c < 1 for c in self.channels):
            problems.append(f"channels: all widths must be >= 1, got {self.channels}")
        else:
            expect = self.input_size >> len(self.channels)
            if self.input_size % (1 << len(self.channels)) != 0 or expect != self.grid:
                problems.append(
                    f"grid: input_size {self.input_size} through "
                    f"{len(self.channels)} stride-2 blocks gives {expect}, "
                    f"config says {self.grid}"
                )
        for name in ("confidence_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                problems.append(f"{name}: must be in (0, 1), got {v}")
        if not 0.0 < self.leaky_slope < 1.0:
            problems.append(f"leaky_slope: must be in (0, 1), got {self.leaky_slope}")
        if self.lambda_noobj < 0 or self.lambda_loc < 0:
            problems.append("lambda_noobj/lambda_loc: must be >= 0")
        if problems:
            raise ValidationError("invalid detector config: " + "; ".join(problems))

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "grid": self.grid,
            "anchors": [list(a) for a in self.anchors],
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "lambda_noobj": self.lambda_noobj,
            "lambda_loc": self.lambda_loc,
            "confidence_threshold": self.confidence_threshold,
            "nms_iou_threshold": self.nms_iou_threshold,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown detector config keys: {sorted(unknown)}")
        d = dict(d)
        if "anchors" in d:
            d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Candidate:
    """One decoded detector slot, before thresholding and NMS."""

    bx: float
    by: float
    bw: float
    bh: float
    objectness: float
    class_probs: np.ndarray
    slot_index: int  # 1-based, in (row, col, anchor) order

    @property
    def box(self):
        return (self.bx, self.by, self.bw, self.bh)


@dataclass
class DetectedObject:
    box: tuple
    class_id: int  # 1..K
    confidence: float
    slot_index: int = 0


@dataclass(frozen=True)
class GroundTruthObject:
    box: tuple
    class_id: int


@dataclass
class Assignment:
    """Per-slot training targets: mask, target box, one-hot class."""

    mask: np.ndarray     # (S,) float32, 1 where a slot owns an object
    boxes: np.ndarray    # (S, 4) float32, zeros where mask == 0
    classes: np.ndarray  # (S, K) float32 one-hot, zeros where mask == 0
    dropped: int = 0     # objects that lost the race for an occupied slot


@dataclass
class LossBreakdown:
    obj: float
    noobj: float
    loc: float
    prob: float
    total: float


@dataclass
class DetectorWeights:
    config: DetectorConfig
    layers: list = field(default_factory=list)

    def copy(self):
        copied = [
            replace(l, kernels=l.kernels.copy(), bias=l.bias.copy())
            for l in self.layers
        ]
        return DetectorWeights(self.config, copied)

    def astype(self, dtype):
        cast = [
            replace(l, kernels=l.kernels.astype(dtype), bias=l.bias.astype(dtype))
            for l in self.layers
        ]
        return DetectorWeights(self.config, cast)


OBJECTNESS_BIAS_PRIOR = -2.0


def _make_layers(config, rng=None):
    """Backbone + head ConvLayers; zero-filled when rng is None."""
    specs = []
    in_ch = 3
    for out_ch in config.channels:
        specs.append((out_ch, in_ch, 3, 2, 1, "leaky_relu"))
        in_ch = out_ch
    specs.append((config.head_channels, in_ch, 1, 1, 0, "linear"))

    layers = []
    for out_ch, in_ch, k, stride, pad, act in specs:
        shape = (out_ch, in_ch, k, k)
        if rng is None:
            kern = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = in_ch * k * k
            fan_out = out_ch * k * k
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            kern = rng.uniform(-lim, lim, size=shape).astype(np.float32)
        bias = np.zeros(out_ch, dtype=np.float32)
        layers.append(
            ConvLayer(kern, bias, stride=stride, padding=pad, activation=act,
                      leaky_slope=config.leaky_slope)
        )
    return layers


def build_detector(config: DetectorConfig) -> DetectorWeights:
    """Fresh detector, deterministic from config.seed.

    Kernels use scaled-uniform init; the head's objectness biases start at a
    negative prior so the fresh detector predicts few objects, which keeps
    the no-object loss from swamping the assigned slots early in training.
    """
    config.validate()
    rng = derive_rng(config.seed, "detector-init")
    weights = DetectorWeights(config, _make_layers(config, rng))
    head_bias = weights.layers[-1].bias
    per_anchor = 5 + config.num_classes
    for a in range(config.num_anchors):
        head_bias[a * per_anchor + 4] = OBJECTNESS_BIAS_PRIOR
    return weights


def _check_image(image, config):
    n = config.input_size
    if image.shape != (n, n, 3):
        raise ShapeError(f"image shape {image.shape}, expected {(n, n, 3)}")


def forward_head(weights, image):
    """Raw head tensor (G, G, B*(5+K)) for one image."""
    _check_image(image, weights.config)
    out, _ = forward_stack(weights.layers, image)
    return out


def _check_head(raw_head, config):
    expect = (config.grid, config.grid, config.head_channels)
    if raw_head.shape != expect:
        raise ShapeError(f"raw head shape {raw_head.shape}, expected {expect}")


def _decode_arrays(raw_head, config):
    """Vectorized decode to float64 arrays (bx, by, bw, bh, chat, phat)."""
    g = config.grid
    b = config.num_anchors
    k = config.num_classes
    r = raw_head.astype(np.float64).reshape(g, g, b, 5 + k)
    rows = np.arange(g, dtype=np.float64)[:, None, None]
    cols = np.arange(g, dtype=np.float64)[None, :, None]
    anchors = np.asarray(config.anchors, dtype=np.float64)
    bx = (cols + sigmoid(r[..., 0])) / g
    by = (rows + sigmoid(r[..., 1])) / g
    bw = anchors[:, 0] * np.exp(r[..., 2])
    bh = anchors[:, 1] * np.exp(r[..., 3])
    chat = sigmoid(r[..., 4])
    phat = sigmoid(r[..., 5:])
    return bx, by, bw, bh, chat, phat


def decode(raw_head, config):
    """All S candidates of one head tensor, slot-indexed in (row, col, anchor) order."""
    _check_head(raw_head, config)
    bx, by, bw, bh, chat, phat = _decode_arrays(raw_head, config)
    g, b = config.grid, config.num_anchors
    out = []
    for row in range(g):
        for col in range(g):
            for a in range(b):
                slot = (row * g + col) * b + a + 1
                out.append(Candidate(
                    bx=float(bx[row, col, a]),
                    by=float(by[row, col, a]),
                    bw=float(bw[row, col, a]),
                    bh=float(bh[row, col, a]),
                    objectness=float(chat[row, col, a]),
                    class_probs=phat[row, col, a].copy(),
                    slot_index=slot,
                ))
    return out


def nms(detections, iou_threshold):
    """Greedy class-aware NMS; input and output sorted by descending confidence."""
    ordered = sorted(detections, key=lambda d: (-d.confidence, d.slot_index))
    kept = []
    for det in ordered:
        suppressed = any(
            k.class_id == det.class_id and iou(k.box, det.box) > iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(det)
    return kept


def detect(weights, image):
    """Final detections: score, threshold, class-aware NMS, sort by confidence."""
    config = weights.config
    raw = forward_head(weights, image)
    scored = []
    for cand in decode(raw, config):
        cls = int(np.argmax(cand.class_probs))
        conf = cand.objectness * float(cand.class_probs[cls])
        if conf >= config.confidence_threshold:
            scored.append(DetectedObject(
                box=cand.box, class_id=cls + 1, confidence=conf,
                slot_index=cand.slot_index,
            ))
    return nms(scored, config.nms_iou_threshold)


def assign_targets(objects, config) -> Assignment:
    """Map ground-truth objects to slots: center cell + best-IoU anchor.

    A slot already claimed by an earlier object wins; the later object is
    dropped and counted in Assignment.dropped.
    """
    g, b, k = config.grid, config.num_anchors, config.num_classes
    s = config.num_slots
    mask = np.zeros(s, dtype=np.float32)
    boxes = np.zeros((s, 4), dtype=np.float32)
    classes = np.zeros((s, k), dtype=np.float32)
    dropped = 0
    for obj in objects:
        bx, by, bw, bh = obj.box
        if not 1 <= obj.class_id <= k:
            raise ValidationError(f"class_id {obj.class_id} outside 1..{k}")
        if bw <= 0 or bh <= 0:
            raise ValidationError(f"object box dims must be positive, got {obj.box}")
        col = min(int(bx * g), g - 1)
        row = min(int(by * g), g - 1)
        ious = [anchor_iou((bw, bh), a) for a in config.anchors]
        anchor = int(np.argmax(ious))
        slot = (row * g + col) * b + anchor
        if mask[slot]:
            dropped += 1
            continue
        mask[slot] = 1.0
        boxes[slot] = (bx, by, bw, bh)
        classes[slot, obj.class_id - 1] = 1.0
    return Assignment(mask=mask, boxes=boxes, classes=classes, dropped=dropped)


def _loss_terms(raw_head, assignment, config):
    """Shared forward pieces for the loss and its gradient, all float64."""
    g, b, k = config.grid, config.num_anchors, config.num_classes
    bx, by, bw, bh, chat, phat = _decode_arrays(raw_head, config)
    m = assignment.mask.astype(np.float64).reshape(g, g, b)
    tb = assignment.boxes.astype(np.float64).reshape(g, g, b, 4)
    tc = assignment.classes.astype(np.float64).reshape(g, g, b, k)
    cc = np.clip(chat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pc = np.clip(phat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return bx, by, bw, bh, chat, phat, m, tb, tc, cc, pc


def detection_loss(raw_head, assignment, config) -> LossBreakdown:
    """Objectness + no-object + localization + class-probability loss.

    All sums run over the S slots; predictions inside each BCE are clamped
    to [1e-7, 1 - 1e-7] so the loss stays finite at saturation.
    """
    _check_head(raw_head, config)
    bx, by, bw, bh, _, _, m, tb, tc, cc, pc = _loss_terms(raw_head, assignment, config)

    l_obj = float(np.sum(m * -np.log(cc)))
    l_noobj = float(np.sum((1.0 - m) * -np.log(1.0 - cc)))
    l_loc = float(np.sum(m * (
        (bx - tb[..., 0]) ** 2
        + (by - tb[..., 1]) ** 2
        + (np.sqrt(bw) - np.sqrt(tb[..., 2])) ** 2
        + (np.sqrt(bh) - np.sqrt(tb[..., 3])) ** 2
    )))
    l_prob = float(np.sum(
        m[..., None] * -(tc * np.log(pc) + (1.0 - tc) * np.log(1.0 - pc))
    ))
    total = l_obj + config.lambda_noobj * l_noobj + config.lambda_loc * l_loc + l_prob

    breakdown = LossBreakdown(l_obj, l_noobj, l_loc, l_prob, total)
    for name in ("obj", "noobj", "loc", "prob"):
        if not np.isfinite(getattr(breakdown, name)):
            raise NonFiniteLossError(f"loss component '{name}' is non-finite", component=name)
    return breakdown


def head_gradient(raw_head, assignment, config):
    """d(total loss)/d(raw head), same shape as raw_head, float64."""
    _check_head(raw_head, config)
    g, b, k = config.grid, config.num_anchors, config.num_classes
    bx, by, bw, bh, chat, phat, m, tb, tc, cc, pc = _loss_terms(raw_head, assignment, config)
    r = raw_head.astype(np.float64).reshape(g, g, b, 5 + k)
    anchors = np.asarray(config.anchors, dtype=np.float64)

    grad = np.zeros_like(r)
    sx = sigmoid(r[..., 0])
    sy = sigmoid(r[..., 1])
    lam_loc = config.lambda_loc
    lam_no = config.lambda_noobj

    # localization terms exist only on assigned slots
    grad[..., 0] = lam_loc * m * 2.0 * (bx - tb[..., 0]) * sx * (1.0 - sx) / g
    grad[..., 1] = lam_loc * m * 2.0 * (by - tb[..., 1]) * sy * (1.0 - sy) / g
    # d sqrt(anchor * exp(t)) / dt = sqrt(anchor * exp(t)) / 2
    sqw = np.sqrt(bw)
    sqh = np.sqrt(bh)
    grad[..., 2] = lam_loc * m * 2.0 * (sqw - np.sqrt(tb[..., 2])) * 0.5 * sqw
    grad[..., 3] = lam_loc * m * 2.0 * (sqh - np.sqrt(tb[..., 3])) * 0.5 * sqh

    # objectness BCE; derivative vanishes where the clamp is active
    c_in = (chat > BCE_CLAMP) & (chat < 1.0 - BCE_CLAMP)
    dchat = np.where(c_in, m * (-1.0 / cc) + lam_no * (1.0 - m) * (1.0 / (1.0 - cc)), 0.0)
    grad[..., 4] = dchat * chat * (1.0 - chat)

    p_in = (phat > BCE_CLAMP) & (phat < 1.0 - BCE_CLAMP)
    dphat = np.where(p_in, -tc / pc + (1.0 - tc) / (1.0 - pc), 0.0)
    grad[..., 5:] = m[..., None] * dphat * phat * (1.0 - phat)

    return grad.reshape(raw_head.shape)


def loss_with_gradients(weights, image, assignment, need_input=True, need_weights=True):
    """One full pass: loss, gradient w.r.t. image, gradients w.r.t. weights."""
    config = weights.config
    _check_image(image, config)
    raw, caches = forward_stack(weights.layers, image)
    loss = detection_loss(raw, assignment, config)
    dhead = head_gradient(raw, assignment, config).astype(image.dtype)
    dimage, wgrads = backward_stack(weights.layers, caches, dhead,
                                    need_input=need_input, need_weights=need_weights)
    return loss, dimage, wgrads


def loss_input_gradient(weights, image, assignment):
    """Gradient of the detection loss w.r.t. the input image, weights fixed."""
    _, dimage, _ = loss_with_gradients(weights, image, assignment, need_weights=False)
    if not np.all(np.isfinite(dimage)):
        raise NonFiniteLossError("input gradient is non-finite", component="input")
    return dimage


def train_step(weights, batch, learning_rate):
    """One gradient-descent update against the mean loss over the batch.

    Returns (new_weights, batch_loss); the input weights are not mutated.
    """
    if not batch:
        raise ValidationError("batch must be non-empty")
    config = weights.config
    n = len(batch)
    acc = [
        (np.zeros(l.kernels.shape, dtype=np.float64), np.zeros(l.bias.shape, dtype=np.float64))
        for l in weights.layers
    ]
    total = 0.0
    for image, objects in batch:
        assignment = objects if isinstance(objects, Assignment) else assign_targets(objects, config)
        loss, _, wgrads = loss_with_gradients(weights, image, assignment, need_input=False)
        total += loss.total
        for (ak, ab), (dk, db) in zip(acc, wgrads):
            ak += dk
            ab += db
    batch_loss = total / n
    if not np.isfinite(batch_loss):
        raise TrainingDivergedError("batch loss is non-finite")
    new_layers = []
    for layer, (ak, ab) in zip(weights.layers, acc):
        new_layers.append(replace(
            layer,
            kernels=(layer.kernels - learning_rate * (ak / n)).astype(np.float32),
            bias=(layer.bias - learning_rate * (ab / n)).astype(np.float32),
        ))
    return DetectorWeights(config, new_layers), batch_loss


def train(config, dataset, epochs, learning_rate, batch_size=8, momentum=0.9,
          max_grad_norm=10.0):
    """Mini-batch training from a fresh seeded init.

    dataset: sequence of (image, list[GroundTruthObject]). Shuffling is
    deterministic from config.seed. The update is gradient descent with
    classical momentum (velocity starts at zero, so momentum=0 reduces to
    the plain train_step rule) and global-norm gradient clipping, which
    keeps the exp() box terms from blowing up at useful learning rates.
    Returns (weights, per-epoch mean loss history).
    """
    if not dataset:
        raise ValidationError("dataset must be non-empty")
    weights = build_detector(config)
    rng = derive_rng(config.seed, "train-shuffle")
    # assignments never change during training, compute them once
    prepared = [
        (img, assign_targets(objs, config) if not isinstance(objs, Assignment) else objs)
        for img, objs in dataset
    ]
    velocity = [
        (np.zeros(l.kernels.shape, dtype=np.float64), np.zeros(l.bias.shape, dtype=np.float64))
        for l in weights.layers
    ]
    history = []
    last_finite = None
    for _ in range(epochs):
        order = rng.permutation(len(prepared))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [prepared[i] for i in order[start:start + batch_size]]
            n = len(batch)
            acc = [
                (np.zeros(l.kernels.shape, dtype=np.float64), np.zeros(l.bias.shape, dtype=np.float64))
                for l in weights.layers
            ]
            total = 0.0
            try:
                for image, assignment in batch:
                    loss, _, wgrads = loss_with_gradients(weights, image, assignment,
                                                          need_input=False)
                    total += loss.total
                    for (ak, ab), (dk, db) in zip(acc, wgrads):
                        ak += dk
                        ab += db
            except NonFiniteLossError as exc:
                raise TrainingDivergedError(
                    f"training diverged (last finite loss: {last_finite})",
                    last_finite_loss=last_finite,
                ) from exc
            batch_loss = total / n
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"training diverged (last finite loss: {last_finite})",
                    last_finite_loss=last_finite,
                )
            sq = sum(float(np.sum((ak / n) ** 2)) + float(np.sum((ab / n) ** 2))
                     for ak, ab in acc)
            scale = 1.0
            if max_grad_norm is not None and sq > max_grad_norm ** 2:
                scale = max_grad_norm / np.sqrt(sq)
            new_layers = []
            for layer, (vk, vb), (ak, ab) in zip(weights.layers, velocity, acc):
                vk *= momentum
                vk -= learning_rate * scale * (ak / n)
                vb *= momentum
                vb -= learning_rate * scale * (ab / n)
                new_layers.append(replace(
                    layer,
                    kernels=(layer.kernels + vk).astype(np.float32),
                    bias=(layer.bias + vb).astype(np.float32),
                ))
            weights = DetectorWeights(config, new_layers)
            losses.append(batch_loss)
            last_finite = batch_loss
        history.append(float(np.mean(losses)))
    return weights, history


# ------------------------------------------------------------- TOGW format

def save_weights(weights, path):
    """Checkpoint: magic TOGW, u16 version, config JSON block, f32 LE arrays."""
    config_blob = json.dumps(weights.config.to_dict(), sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<H", WEIGHTS_VERSION))
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    for layer in weights.layers:
        buf.write(layer.kernels.astype("<f4").tobytes())
        buf.write(layer.bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path) -> DetectorWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ParseError(f"unsupported weights version {version}", offset=4)
    (clen,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if len(blob) < off + clen:
        raise ParseError("truncated config block", offset=len(blob))
    config = DetectorConfig.from_dict(json.loads(blob[off:off + clen].decode("utf-8")))
    config.validate()
    off += clen
    weights = DetectorWeights(config, _make_layers(config, rng=None))
    for layer in weights.layers:
        for arr in (layer.kernels, layer.bias):
            nbytes = arr.size * 4
            if len(blob) < off + nbytes:
                raise ParseError("truncated weight payload", offset=len(blob))
            arr[...] = np.frombuffer(blob[off:off + nbytes], dtype="<f4").reshape(arr.shape)
            off += nbytes
    if off != len(blob):
        raise ParseError(f"{len(blob) - off} trailing bytes after weights", offset=off)
    return weights
