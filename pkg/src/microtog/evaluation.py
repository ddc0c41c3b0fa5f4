"""Detection quality and attack-effect metrics.

Average precision follows the all-point interpolation rule: greedy TP
matching in confidence order (each ground truth claimed at most once),
precision envelope made monotone non-increasing, exact area under the
piecewise-constant PR curve. mAP averages over the classes present in the
ground truth. Adversarial reports always score against the clean labels.
"""

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from . import attacks as A
from . import detector as D
from .boxes import iou
from .data import quantize
from .errors import EmptyDetectionsError, ValidationError

__all__ = [
    "iou", "average_precision", "EvalReport", "evaluate", "TransferCell",
    "transfer_matrix", "write_eval_csv", "write_markdown_report", "attack_timing",
]


def average_precision(detections, ground_truths, iou_threshold=0.5):
    """AP for one class.

    detections: iterable of (image_id, confidence, box), ranked by
    descending confidence (re-sorted here for safety; ties keep input
    order). ground_truths: mapping image_id -> list of boxes.
    """
    n_gt = sum(len(v) for v in ground_truths.values())
    dets = sorted(enumerate(detections), key=lambda t: (-t[1][1], t[0]))
    if n_gt == 0:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0

    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in ground_truths.items()}
    tp = np.zeros(len(dets))
    for rank, (_, (img, _conf, box)) in enumerate(dets):
        boxes = ground_truths.get(img, [])
        best_j, best_iou = -1, iou_threshold
        for j, gt_box in enumerate(boxes):
            if matched[img][j]:
                continue
            v = iou(box, gt_box)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[img][best_j] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(dets) + 1)

    # envelope + area under the piecewise-constant curve
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


@dataclass
class EvalReport:
    condition: str
    per_class_ap: dict
    mean_ap: float
    detection_count_mean: float
    precision: float
    recall: float
    attack_metrics: dict = None


def _score(dets_per_image, gts_per_image, num_classes, iou_threshold=0.5):
    """(per_class_ap over GT classes, mAP, precision, recall, det count mean)."""
    present = sorted({o.class_id for gts in gts_per_image for o in gts})
    for c in present:
        if c > num_classes:
            raise ValidationError(
                f"ground truth class {c} exceeds detector num_classes {num_classes}"
            )
    per_class = {}
    for c in present:
        dets_c = [
            (i, d.confidence, d.box)
            for i, dets in enumerate(dets_per_image)
            for d in dets if d.class_id == c
        ]
        gts_c = {
            i: [o.box for o in gts if o.class_id == c]
            for i, gts in enumerate(gts_per_image)
        }
        per_class[c] = average_precision(dets_c, gts_c, iou_threshold)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 1.0

    n_det = sum(len(d) for d in dets_per_image)
    n_gt = sum(len(g) for g in gts_per_image)
    tp = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        used = [False] * len(gts)
        for det in sorted(dets, key=lambda d: -d.confidence):
            best_j, best_iou = -1, iou_threshold
            for j, gt in enumerate(gts):
                if used[j] or gt.class_id != det.class_id:
                    continue
                v = iou(det.box, gt.box)
                if v >= best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0:
                used[best_j] = True
                tp += 1
    precision = tp / n_det if n_det else 1.0
    recall = tp / n_gt if n_gt else 1.0
    count_mean = n_det / len(dets_per_image) if dets_per_image else 0.0
    return per_class, mean_ap, precision, recall, count_mean


def generate_adversarial_images(weights, dataset, attack, perturbation=None):
    """Adversarial version of every image; returns (images, targets, fallbacks).

    Per-input variants run the full iterated attack; images where the
    target construction is undefined (no benign detections) fall back to
    the vanishing variant and are counted in `fallbacks`. The universal
    variant just applies the pretrained perturbation.
    """
    attack.validate()
    adv_images, targets = [], []
    fallbacks = 0
    if attack.variant == "universal_apply":
        if perturbation is None:
            raise ValidationError("universal_apply needs a Perturbation")
        for image, _ in dataset:
            adv_images.append(A.apply_universal(image, perturbation))
            targets.append(None)
        return adv_images, targets, fallbacks

    vanish_cfg = replace(attack, variant="vanishing")
    for image, _ in dataset:
        cfg = attack
        try:
            target = A.build_target(weights, image, attack.variant)
        except EmptyDetectionsError:
            target = A.build_target(weights, image, "vanishing")
            cfg = vanish_cfg
            fallbacks += 1
        result = A.tog_attack(weights, image, cfg, target=target)
        adv_images.append(result.adversarial)
        targets.append(target if cfg is attack else None)
    return adv_images, targets, fallbacks


def evaluate(weights, dataset, attack=None, perturbation=None) -> EvalReport:
    """Score a detector on a dataset, optionally through an attack first.

    Adversarial detections are scored against the clean ground truth. The
    report adds attack signatures (vanish rate, fabrication ratio,
    mislabeling rates, max L-inf distortion) plus the mAP measured after
    8-bit quantization of the adversarial images.
    """
    if not dataset:
        raise ValidationError("dataset must be non-empty")
    config = weights.config
    gts_per_image = [objs for _, objs in dataset]
    benign_dets = [D.detect(weights, image) for image, _ in dataset]

    if attack is None:
        per_class, mean_ap, precision, recall, count_mean = _score(
            benign_dets, gts_per_image, config.num_classes)
        return EvalReport("benign", per_class, mean_ap, count_mean, precision, recall)

    adv_images, targets, fallbacks = generate_adversarial_images(
        weights, dataset, attack, perturbation)
    adv_dets = [D.detect(weights, image) for image in adv_images]
    per_class, mean_ap, precision, recall, count_mean = _score(
        adv_dets, gts_per_image, config.num_classes)

    benign_total = sum(len(d) for d in benign_dets)
    adv_total = sum(len(d) for d in adv_dets)
    if benign_total:
        vanish_rate = float(np.clip(1.0 - adv_total / benign_total, 0.0, 1.0))
        fab_ratio = adv_total / benign_total
    else:
        vanish_rate = 1.0 if adv_total == 0 else 0.0
        fab_ratio = float("inf") if adv_total else 1.0

    metrics = {
        "vanish_rate": vanish_rate,
        "fabrication_ratio": fab_ratio,
        "zero_detection_fraction": float(np.mean([len(d) == 0 for d in adv_dets])),
        "linf_distortion_max": float(max(
            np.max(np.abs(adv.astype(np.float64) - img.astype(np.float64)))
            for adv, (img, _) in zip(adv_images, dataset)
        )),
        "fallback_count": fallbacks,
    }
    if attack.variant in ("mislabel_ml", "mislabel_ll"):
        n_benign = matched = on_target = 0
        for bdets, adets, target in zip(benign_dets, adv_dets, targets):
            if target is None or not bdets:
                continue
            n_benign += len(bdets)
            pairs = A._match_greedy(bdets, adets, attack.match_iou)
            matched += len(pairs)
            on_target += sum(
                adets[ai].class_id == target.target_objects[bi].class_id
                for bi, ai in pairs
            )
        metrics["mislabel_match_rate"] = matched / n_benign if n_benign else 0.0
        metrics["mislabel_target_rate"] = on_target / matched if matched else 0.0

    quant_dets = [D.detect(weights, quantize(image)) for image in adv_images]
    _, quant_map, _, _, _ = _score(quant_dets, gts_per_image, config.num_classes)
    metrics["quantized_map"] = quant_map

    return EvalReport(attack.variant, per_class, mean_ap, count_mean,
                      precision, recall, metrics)


@dataclass
class TransferCell:
    source_id: int
    target_id: int
    variant: str
    benign_map: float
    adversarial_map: float
    transfers: bool


def transfer_matrix(detectors, variants, dataset, attack: A.AttackConfig,
                    perturbations=None, transfer_map_ratio=0.5):
    """Cross-detector attack evaluation.

    For each (source, variant) the adversarial images are generated once
    against the source, then every detector (source included) is scored on
    them. A cell "transfers" when the target's adversarial mAP falls to at
    most `transfer_map_ratio` of its benign mAP.
    """
    if len(detectors) < 2:
        raise ValidationError("transfer study needs at least 2 detectors")
    first = detectors[0].config
    for w in detectors[1:]:
        if w.config.input_size != first.input_size:
            raise ValidationError("detectors must share the input size")
        if w.config.num_classes != first.num_classes:
            raise ValidationError("detectors must share the class set")

    gts_per_image = [objs for _, objs in dataset]
    benign_maps = []
    for w in detectors:
        dets = [D.detect(w, image) for image, _ in dataset]
        _, mean_ap, _, _, _ = _score(dets, gts_per_image, w.config.num_classes)
        benign_maps.append(mean_ap)

    cells = []
    for si, source in enumerate(detectors):
        for variant in variants:
            cfg = replace(attack, variant=variant)
            eta = perturbations.get(si) if (perturbations and variant == "universal_apply") else None
            adv_images, _, _ = generate_adversarial_images(source, dataset, cfg, eta)
            for ti, target_w in enumerate(detectors):
                dets = [D.detect(target_w, image) for image in adv_images]
                _, adv_map, _, _, _ = _score(dets, gts_per_image, target_w.config.num_classes)
                cells.append(TransferCell(
                    source_id=si, target_id=ti, variant=variant,
                    benign_map=benign_maps[ti], adversarial_map=adv_map,
                    transfers=adv_map <= transfer_map_ratio * benign_maps[ti],
                ))
    return cells


# ------------------------------------------------------------------ reports

_CSV_FIELDS = [
    "condition", "class_id", "ap", "map", "detection_count_mean", "precision",
    "recall", "vanish_rate", "fabrication_ratio", "zero_detection_fraction",
    "mislabel_match_rate", "mislabel_target_rate", "linf_distortion_max",
    "quantized_map",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_eval_csv(reports, path):
    """One row per class per condition plus an 'all' aggregate row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for rep in reports:
            metrics = rep.attack_metrics or {}
            base = {
                "condition": rep.condition,
                "map": _fmt(rep.mean_ap),
                "detection_count_mean": _fmt(rep.detection_count_mean),
                "precision": _fmt(rep.precision),
                "recall": _fmt(rep.recall),
                "vanish_rate": _fmt(metrics.get("vanish_rate")),
                "fabrication_ratio": _fmt(metrics.get("fabrication_ratio")),
                "zero_detection_fraction": _fmt(metrics.get("zero_detection_fraction")),
                "mislabel_match_rate": _fmt(metrics.get("mislabel_match_rate")),
                "mislabel_target_rate": _fmt(metrics.get("mislabel_target_rate")),
                "linf_distortion_max": _fmt(metrics.get("linf_distortion_max")),
                "quantized_map": _fmt(metrics.get("quantized_map")),
            }
            for class_id in sorted(rep.per_class_ap):
                writer.writerow({**base, "class_id": class_id,
                                 "ap": _fmt(rep.per_class_ap[class_id])})
            writer.writerow({**base, "class_id": "all", "ap": _fmt(rep.mean_ap)})


def read_eval_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_markdown_report(reports, path, class_names=None):
    """Summary table: one row per class plus mAP, one column per condition."""
    class_ids = sorted({c for rep in reports for c in rep.per_class_ap})
    names = {}
    for c in class_ids:
        if class_names and 1 <= c <= len(class_names):
            names[c] = class_names[c - 1]
        else:
            names[c] = f"class {c}"
    lines = []
    header = ["Class"] + [rep.condition for rep in reports]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for c in class_ids:
        row = [names[c]] + [
            _fmt(rep.per_class_ap.get(c)) if rep.per_class_ap.get(c) is not None else "-"
            for rep in reports
        ]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("| " + " | ".join(["**mAP**"] + [_fmt(rep.mean_ap) for rep in reports]) + " |")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_transfer_csv(cells, path):
    fields = ["source_id", "target_id", "variant", "benign_map",
              "adversarial_map", "relative_map", "transfers"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for cell in cells:
            rel = cell.adversarial_map / cell.benign_map if cell.benign_map else float("inf")
            writer.writerow({
                "source_id": cell.source_id,
                "target_id": cell.target_id,
                "variant": cell.variant,
                "benign_map": _fmt(cell.benign_map),
                "adversarial_map": _fmt(cell.adversarial_map),
                "relative_map": _fmt(rel),
                "transfers": str(cell.transfers).lower(),
            })


def attack_timing(weights, image, attack: A.AttackConfig, perturbation,
                  attack_repeats=3, apply_repeats=200):
    """Wall-clock comparison: per-input attack vs universal application.

    Returns median seconds for one tog_attack call, mean seconds for one
    apply_universal call, and their ratio.
    """
    A.tog_attack(weights, image, attack)          # warm the kernels
    A.apply_universal(image, perturbation)
    times = []
    for _ in range(attack_repeats):
        t0 = time.perf_counter()
        A.tog_attack(weights, image, attack)
        times.append(time.perf_counter() - t0)
    attack_s = float(np.median(times))
    t0 = time.perf_counter()
    for _ in range(apply_repeats):
        A.apply_universal(image, perturbation)
    apply_s = (time.perf_counter() - t0) / apply_repeats
    return {"attack_seconds": attack_s, "apply_seconds": apply_s,
            "speedup": attack_s / apply_s if apply_s > 0 else float("inf")}
