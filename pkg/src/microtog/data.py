"""Procedural shapes dataset: rendered scenes, PPM images, JSON annotations.

Scenes are solid-color backgrounds with 1-3 filled shapes (circle, square,
triangle = classes 1, 2, 3), light Gaussian pixel noise, and tight bounding
boxes read back from the rasterized mask. Everything is a pure function of
(spec, seed): regenerating a dataset reproduces every file byte for byte.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .detector import GroundTruthObject
from .errors import ParseError, ValidationError
from .rng import derive_seed_sequence

CLASS_NAMES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    num_classes: int = 3
    size_range: tuple = (0.15, 0.45)
    min_center_dist: float = 0.2
    min_contrast: float = 0.25  # max-channel gap between shape and background
    noise_std: float = 0.02
    seed: int = 0

    def validate(self):
        problems = []
        if self.image_size < 8:
            problems.append(f"image_size: must be >= 8, got {self.image_size}")
        if not 1 <= self.min_objects <= self.max_objects:
            problems.append(
                f"objects: need 1 <= min <= max, got {self.min_objects}..{self.max_objects}"
            )
        if self.num_classes != 3:
            problems.append("num_classes: the shape renderer supports exactly 3 classes")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi < 1.0:
            problems.append(f"size_range: need 0 < lo <= hi < 1, got {self.size_range}")
        if self.noise_std < 0:
            problems.append(f"noise_std: must be >= 0, got {self.noise_std}")
        if problems:
            raise ValidationError("invalid scene spec: " + "; ".join(problems))

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "num_classes": self.num_classes,
            "size_range": list(self.size_range),
            "min_center_dist": self.min_center_dist,
            "min_contrast": self.min_contrast,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        if "size_range" in d:
            d["size_range"] = tuple(d["size_range"])
        return cls(**d)


def _pixel_grid(n):
    # pixel-center coordinates in [0, 1]
    c = (np.arange(n, dtype=np.float64) + 0.5) / n
    return np.meshgrid(c, c, indexing="xy")


def _shape_mask(class_id, cx, cy, s, xx, yy):
    half = s / 2.0
    if class_id == 1:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    if class_id == 2:  # square
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # triangle: apex up, flat base
    t = (yy - (cy - half)) / s
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half * t)


def _mask_box(mask, n):
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    r0, r1 = np.argmax(rows), n - np.argmax(rows[::-1])
    c0, c1 = np.argmax(cols), n - np.argmax(cols[::-1])
    bx = (c0 + c1) / (2.0 * n)
    by = (r0 + r1) / (2.0 * n)
    return (bx, by, (c1 - c0) / n, (r1 - r0) / n)


def generate_scene(spec: SceneSpec, rng: np.random.Generator):
    """One rendered scene and its annotations, deterministic from rng state."""
    spec.validate()
    n = spec.image_size
    xx, yy = _pixel_grid(n)
    background = rng.uniform(0.0, 1.0, size=3)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    while True:
        img = np.broadcast_to(background, (n, n, 3)).copy()
        centers = []
        objects = []
        failed = False
        for _ in range(n_objects):
            placed = False
            for _ in range(100):
                s = float(rng.uniform(*spec.size_range))
                margin = s / 2.0 + 1.0 / n
                if margin >= 0.5:
                    continue
                cx = float(rng.uniform(margin, 1.0 - margin))
                cy = float(rng.uniform(margin, 1.0 - margin))
                if all((cx - px) ** 2 + (cy - py) ** 2 >= spec.min_center_dist ** 2
                       for px, py in centers):
                    placed = True
                    break
            if not placed:
                failed = True
                break
            class_id = int(rng.integers(1, spec.num_classes + 1))
            color = rng.uniform(0.0, 1.0, size=3)
            while np.max(np.abs(color - background)) < spec.min_contrast:
                color = rng.uniform(0.0, 1.0, size=3)
            mask = _shape_mask(class_id, cx, cy, s, xx, yy)
            img[mask] = color
            centers.append((cx, cy))
            objects.append(GroundTruthObject(box=_mask_box(mask, n), class_id=class_id))
        if not failed:
            break
        n_objects = max(spec.min_objects, n_objects - 1)

    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), objects


# ---------------------------------------------------------------- image I/O

def save_image(image, path):
    """Binary PPM (P6), 8 bits per channel, values mapped by round(v * 255)."""
    h, w, c = image.shape
    if c != 3:
        raise ValidationError(f"image must have 3 channels, got {c}")
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.astype(np.uint8).tobytes())


def quantize(image):
    """The value actually stored by save_image, back in [0, 1] float32."""
    return (np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
            / 255.0).astype(np.float32)


def _read_ppm_token(blob, pos):
    # skip whitespace and '#' comments, return (token, new_pos)
    n = len(blob)
    while pos < n:
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and blob[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PPM header", offset=start)
    return blob[start:pos], pos


def load_image(path):
    """Read a P6 PPM written by save_image; intensities scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise ParseError(f"bad PPM magic {blob[:2]!r}", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_ppm_token(blob, pos)
        if not tok.isdigit():
            raise ParseError(f"non-numeric PPM header field {tok!r}", offset=pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = blob[pos:pos + need]
    if len(payload) < need:
        raise ParseError(
            f"truncated pixel payload, need {need} bytes, have {len(payload)}",
            offset=len(blob),
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)


# ----------------------------------------------------------- annotation I/O

def save_annotations(objects, path):
    """JSON annotation document; floats kept to 6 significant digits."""
    records = [
        {
            "class_id": obj.class_id,
            "bx": float(f"{obj.box[0]:.6g}"),
            "by": float(f"{obj.box[1]:.6g}"),
            "bw": float(f"{obj.box[2]:.6g}"),
            "bh": float(f"{obj.box[3]:.6g}"),
        }
        for obj in objects
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"objects": records}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_annotations(path, num_classes=None):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "objects" not in doc:
        raise ValidationError(f"{path}: missing top-level 'objects' list")
    out = []
    for i, rec in enumerate(doc["objects"]):
        try:
            class_id = int(rec["class_id"])
            box = (float(rec["bx"]), float(rec["by"]), float(rec["bw"]), float(rec["bh"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: record {i} malformed: {exc}") from exc
        if class_id < 1 or (num_classes is not None and class_id > num_classes):
            raise ValidationError(
                f"{path}: record {i}: class_id {class_id} outside 1..{num_classes or 'K'}"
            )
        bx, by, bw, bh = box
        eps = 1e-6
        if bw <= 0 or bh <= 0 or not (
            -eps <= bx - bw / 2 and bx + bw / 2 <= 1 + eps
            and -eps <= by - bh / 2 and by + bh / 2 <= 1 + eps
        ):
            raise ValidationError(f"{path}: record {i}: box {box} outside [0, 1]")
        out.append(GroundTruthObject(box=box, class_id=class_id))
    return out


# ------------------------------------------------------------------ dataset

def generate_dataset(spec: SceneSpec, n_train, n_test, out_dir):
    """Write images, annotations and manifest.json; returns the manifest path.

    Train and test scenes draw from disjoint seed sub-streams, so the splits
    stay independent and each file depends only on (spec, split, index).
    """
    spec.validate()
    if n_train < 0 or n_test < 0:
        raise ValidationError("n_train and n_test must be >= 0")
    os.makedirs(out_dir, exist_ok=True)
    splits = {}
    for split_id, (split, count) in enumerate((("train", n_train), ("test", n_test))):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        entries = []
        for i in range(count):
            rng = np.random.default_rng(
                derive_seed_sequence(spec.seed, f"scene-{split}", split_id, i)
            )
            image, objects = generate_scene(spec, rng)
            img_rel = f"{split}/scene_{i:05d}.ppm"
            ann_rel = f"{split}/scene_{i:05d}.json"
            save_image(image, os.path.join(out_dir, img_rel))
            save_annotations(objects, os.path.join(out_dir, ann_rel))
            entries.append({"image": img_rel, "annotations": ann_rel})
        splits[split] = entries
    manifest = {"spec": spec.to_dict(), "seed": spec.seed, "splits": splits}
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_manifest(manifest_path):
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("spec", "splits"):
        if key not in doc:
            raise ValidationError(f"{manifest_path}: missing '{key}'")
    return doc


def load_dataset(manifest_path, split, limit=None):
    """Materialize one split as a list of (image, [GroundTruthObject])."""
    doc = load_manifest(manifest_path)
    if split not in doc["splits"]:
        raise ValidationError(f"{manifest_path}: no split named {split!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    num_classes = doc["spec"].get("num_classes")
    entries = doc["splits"][split]
    if limit is not None:
        entries = entries[:limit]
    out = []
    for entry in entries:
        image = load_image(os.path.join(base, entry["image"]))
        objects = load_annotations(os.path.join(base, entry["annotations"]), num_classes)
        out.append((image, objects))
    return out
