"""Objectness-gradient attacks on the detector.

All four variants share one iteration: step the image against the sign of
the detection-loss gradient, then project back into the L-inf ball of
radius epsilon around the clean image (intersected with valid intensities
[0, 1]). They differ only in the target detections the loss is computed
against and in the sign of the loss:

  vanishing     empty target set, descend the loss (all slots go quiet)
  fabrication   current detections as pseudo-ground-truth, ascend the loss
  mislabel_ml   current detections relabeled to each one's runner-up class
  mislabel_ll   current detections relabeled to each one's least-likely class

The universal variant trains a single input-agnostic perturbation offline
against the vanishing objective and applies it with one elementwise pass.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .detector import (
    Assignment,
    GroundTruthObject,
    assign_targets,
    decode,
    detect,
    forward_head,
    loss_input_gradient,
)
from .boxes import iou
from .errors import EmptyDetectionsError, ParseError, ShapeError, ValidationError
from .rng import derive_rng

VARIANTS = ("vanishing", "fabrication", "mislabel_ml", "mislabel_ll", "universal_apply")

PERTURBATION_MAGIC = b"TOGP"
PERTURBATION_VERSION = 1


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "vanishing"
    epsilon: float = 0.031
    step_size: float = 0.008
    max_iterations: int = 10
    norm: str = "linf"  # only L-inf is implemented
    fabrication_min_ratio: float = 3.0
    fabrication_min_count: int = 5
    match_iou: float = 0.5

    def validate(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant: {self.variant!r} not in {VARIANTS}")
        if not 0.0 <= self.epsilon < 1.0:
            problems.append(f"epsilon: must be in [0, 1), got {self.epsilon}")
        if not 0.0 <= self.step_size < 1.0:
            problems.append(f"step_size: must be in [0, 1), got {self.step_size}")
        if self.max_iterations < 1:
            problems.append(f"max_iterations: must be >= 1, got {self.max_iterations}")
        if self.norm != "linf":
            problems.append(f"norm: only 'linf' is supported, got {self.norm!r}")
        if problems:
            raise ValidationError("invalid attack config: " + "; ".join(problems))


@dataclass(frozen=True)
class UniversalConfig:
    epsilon: float = 0.031
    step_size: float = 0.002
    epochs: int = 20
    kappa: float = 95.0  # percent of objects that must vanish to stop early
    training_set_size: int = 512
    seed: int = 0

    def validate(self):
        problems = []
        if not 0.0 <= self.epsilon < 1.0:
            problems.append(f"epsilon: must be in [0, 1), got {self.epsilon}")
        if self.step_size < 0:
            problems.append(f"step_size: must be >= 0, got {self.step_size}")
        if self.epochs < 1:
            problems.append(f"epochs: must be >= 1, got {self.epochs}")
        if not 0.0 < self.kappa <= 100.0:
            problems.append(f"kappa: must be in (0, 100], got {self.kappa}")
        if self.training_set_size < 1:
            problems.append(f"training_set_size: must be >= 1, got {self.training_set_size}")
        if problems:
            raise ValidationError("invalid universal config: " + "; ".join(problems))


@dataclass
class DetectionTarget:
    """Target detections plus the derived per-slot assignment and loss sign."""

    variant: str
    target_objects: list          # ordered like the benign detections
    assignment: Assignment
    loss_sign: int = 1

    def __post_init__(self):
        if self.loss_sign not in (1, -1):
            raise ValidationError(f"loss_sign must be +1 or -1, got {self.loss_sign}")
        if self.loss_sign == -1 and self.variant != "fabrication":
            raise ValidationError("loss_sign -1 is reserved for fabrication")
        if self.variant == "vanishing" and self.target_objects:
            raise ValidationError("vanishing target must be empty")


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon_used: float


@dataclass
class AttackResult:
    adversarial: np.ndarray
    log: list = field(default_factory=list)   # per-iteration dicts
    success: bool = False
    stalled: bool = False
    iterations: int = 0


def sign(g):
    """Elementwise -1 / 0 / +1."""
    return np.sign(np.asarray(g))


def project_linf(candidate, origin, epsilon):
    """Clamp into the L-inf ball around origin, then into valid [0, 1] range."""
    candidate = np.asarray(candidate)
    origin = np.asarray(origin)
    if candidate.shape != origin.shape:
        raise ShapeError(
            f"candidate shape {candidate.shape} != origin shape {origin.shape}"
        )
    out = np.clip(candidate, origin - epsilon, origin + epsilon)
    return np.clip(out, 0.0, 1.0).astype(candidate.dtype)


def _empty_assignment(config):
    return Assignment(
        mask=np.zeros(config.num_slots, dtype=np.float32),
        boxes=np.zeros((config.num_slots, 4), dtype=np.float32),
        classes=np.zeros((config.num_slots, config.num_classes), dtype=np.float32),
    )


def _sanitize_box(box):
    # detections can stray outside [0,1]; keep assignment and loss well-defined
    bx, by, bw, bh = box
    return (
        float(np.clip(bx, 0.0, 1.0)),
        float(np.clip(by, 0.0, 1.0)),
        float(np.clip(bw, 1e-3, 1.0)),
        float(np.clip(bh, 1e-3, 1.0)),
    )


def _mislabel_class(class_probs, mode):
    probs = np.asarray(class_probs, dtype=np.float64)
    if mode == "mislabel_ll":
        return int(np.argmin(probs)) + 1
    top = int(np.argmax(probs))
    below = probs < probs[top]
    if not np.any(below):
        # degenerate all-equal case: lowest index other than the top class
        return 1 if top != 0 else 2
    runner = int(np.argmax(np.where(below, probs, -np.inf)))
    return runner + 1


def build_target(weights, image, variant) -> DetectionTarget:
    """Construct the per-variant target set and its slot assignment."""
    config = weights.config
    if variant == "vanishing":
        return DetectionTarget("vanishing", [], _empty_assignment(config), loss_sign=1)
    if variant not in ("fabrication", "mislabel_ml", "mislabel_ll"):
        raise ValidationError(f"cannot build a per-input target for variant {variant!r}")

    detections = detect(weights, image)
    if not detections:
        raise EmptyDetectionsError(
            f"{variant} needs at least one benign detection; "
            "the vanishing variant is the defined fallback"
        )
    if variant == "fabrication":
        targets = [
            GroundTruthObject(box=_sanitize_box(d.box), class_id=d.class_id)
            for d in detections
        ]
        loss_sign = -1
    else:
        candidates = {c.slot_index: c for c in decode(forward_head(weights, image), config)}
        targets = []
        for det in detections:
            probs = candidates[det.slot_index].class_probs
            targets.append(GroundTruthObject(
                box=_sanitize_box(det.box),
                class_id=_mislabel_class(probs, variant),
            ))
        loss_sign = 1
    assignment = assign_targets(targets, config)
    return DetectionTarget(variant, targets, assignment, loss_sign=loss_sign)


def _match_greedy(benign, adversarial, iou_threshold):
    """One-to-one matching by adversarial confidence; returns [(b_idx, a_idx)]."""
    taken = set()
    pairs = []
    order = sorted(range(len(adversarial)),
                   key=lambda i: (-adversarial[i].confidence, i))
    for ai in order:
        best, best_iou = None, iou_threshold
        for bi in range(len(benign)):
            if bi in taken:
                continue
            v = iou(adversarial[ai].box, benign[bi].box)
            if v >= best_iou:
                best, best_iou = bi, v
        if best is not None:
            taken.add(best)
            pairs.append((best, ai))
    return pairs


def attack_success(benign_dets, adv_dets, variant, target=None, config=None):
    """Per-variant termination predicate on two detection lists."""
    cfg = config if config is not None else AttackConfig(variant=variant)
    if variant == "vanishing":
        return len(adv_dets) == 0
    if variant == "fabrication":
        return (len(adv_dets) >= cfg.fabrication_min_ratio * len(benign_dets)
                and len(adv_dets) >= cfg.fabrication_min_count)
    if variant in ("mislabel_ml", "mislabel_ll"):
        if target is None:
            raise ValidationError("mislabeling success needs the DetectionTarget")
        pairs = _match_greedy(benign_dets, adv_dets, cfg.match_iou)
        if not pairs:
            return False
        return all(
            adv_dets[ai].class_id == target.target_objects[bi].class_id
            for bi, ai in pairs
        )
    raise ValidationError(f"no success predicate for variant {variant!r}")


def tog_attack(weights, image, config: AttackConfig, target=None) -> AttackResult:
    """Iterated sign-gradient attack with L-inf projection.

    Starts from the clean image; each iteration steps against the signed
    loss gradient, projects, and re-runs detection to test the success
    predicate. The target set is fixed once up front (pass `target` to
    reuse one that was already built).
    """
    config.validate()
    if config.variant == "universal_apply":
        raise ValidationError("universal_apply is driven by apply_universal(), not tog_attack()")
    if target is None:
        target = build_target(weights, image, config.variant)

    benign = detect(weights, image)
    x_adv = np.asarray(image, dtype=np.float32).copy()
    result = AttackResult(adversarial=x_adv, log=[])

    # the paper-style loop observes detections before perturbing; on the
    # clean image that fresh call would reproduce `benign` exactly
    if attack_success(benign, benign, config.variant, target, config):
        result.success = True
        result.log.append({"iteration": 0, "detections": len(benign), "success": True})
        return result

    for t in range(1, config.max_iterations + 1):
        grad = target.loss_sign * loss_input_gradient(weights, x_adv, target.assignment)
        step = sign(grad)
        if t == 1 and not np.any(step):
            result.stalled = True
            result.log.append({"iteration": 0, "detections": len(benign), "success": False})
            return result
        x_adv = project_linf(x_adv - config.step_size * step, image, config.epsilon)
        dets = detect(weights, x_adv)
        ok = attack_success(benign, dets, config.variant, target, config)
        result.log.append({"iteration": t, "detections": len(dets), "success": ok})
        result.iterations = t
        if ok:
            result.success = True
            break

    result.adversarial = x_adv
    return result


def apply_universal(image, perturbation: Perturbation):
    """Add a pretrained perturbation and clamp to valid intensities."""
    image = np.asarray(image)
    if perturbation.delta.shape != image.shape:
        raise ShapeError(
            f"perturbation shape {perturbation.delta.shape} != image shape {image.shape}"
        )
    return np.clip(image + perturbation.delta, 0.0, 1.0).astype(np.float32)


def _vanish_rate(weights, dataset, benign_counts, perturbation):
    adv_total = 0
    for (image, _), _n in zip(dataset, benign_counts):
        adv_total += len(detect(weights, apply_universal(image, perturbation)))
    benign_total = sum(benign_counts)
    if benign_total == 0:
        return 1.0 if adv_total == 0 else 0.0
    return float(np.clip(1.0 - adv_total / benign_total, 0.0, 1.0))


def train_universal(weights, dataset, uconfig: UniversalConfig):
    """Accumulate a single vanishing perturbation over the training set.

    Per sample: one signed-gradient step of the vanishing objective taken at
    (sample + current eta), added into eta and clipped to [-eps, +eps].
    Stops when the epoch-end vanish rate reaches kappa percent or after the
    configured number of epochs. Returns (Perturbation, per-epoch log).
    """
    uconfig.validate()
    if not dataset:
        raise ValidationError("universal training set must be non-empty")
    config = weights.config
    empty = _empty_assignment(config)
    eta = np.zeros((config.input_size, config.input_size, 3), dtype=np.float32)
    rng = derive_rng(uconfig.seed, "universal-shuffle")
    benign_counts = [len(detect(weights, image)) for image, _ in dataset]

    history = []
    for epoch in range(1, uconfig.epochs + 1):
        for i in rng.permutation(len(dataset)):
            image = dataset[i][0]
            grad = loss_input_gradient(weights, image + eta, empty)
            eta = np.clip(eta - uconfig.step_size * sign(grad).astype(np.float32),
                          -uconfig.epsilon, uconfig.epsilon).astype(np.float32)
        rate = _vanish_rate(weights, dataset, benign_counts,
                            Perturbation(eta, uconfig.epsilon))
        history.append({"epoch": epoch, "vanish_rate": rate})
        if rate * 100.0 >= uconfig.kappa:
            break
    return Perturbation(delta=eta, epsilon_used=uconfig.epsilon), history


# ------------------------------------------------------------- TOGP format

def save_perturbation(perturbation: Perturbation, path):
    """Perturbation file: magic TOGP, u16 version, f64 eps, dims, f32 LE data."""
    buf = io.BytesIO()
    buf.write(PERTURBATION_MAGIC)
    buf.write(struct.pack("<H", PERTURBATION_VERSION))
    buf.write(struct.pack("<d", float(perturbation.epsilon_used)))
    dims = perturbation.delta.shape
    buf.write(struct.pack("<I", len(dims)))
    for d in dims:
        buf.write(struct.pack("<I", d))
    buf.write(perturbation.delta.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_perturbation(path) -> Perturbation:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PERTURBATION_MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {PERTURBATION_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != PERTURBATION_VERSION:
        raise ParseError(f"unsupported perturbation version {version}", offset=4)
    (epsilon,) = struct.unpack_from("<d", blob, 6)
    (ndim,) = struct.unpack_from("<I", blob, 14)
    dims = struct.unpack_from(f"<{ndim}I", blob, 18)
    off = 18 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    delta = np.frombuffer(blob[off:off + 4 * count], dtype="<f4")
    if delta.size != count:
        raise ParseError("truncated perturbation payload", offset=len(blob))
    return Perturbation(delta=delta.reshape(dims).copy(), epsilon_used=epsilon)
