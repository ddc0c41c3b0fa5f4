"""Box geometry in center-size coordinates (bx, by, bw, bh), relative units."""

from .errors import ValidationError


def iou(box_a, box_b):
    """Intersection-over-union of two center-size boxes, in [0, 1]."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValidationError(
            f"boxes must have positive dimensions, got {box_a} and {box_b}"
        )
    ix = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    iy = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def anchor_iou(wh_a, wh_b):
    """IoU of two boxes sharing a center, given as (w, h) pairs."""
    inter = min(wh_a[0], wh_b[0]) * min(wh_a[1], wh_b[1])
    return inter / (wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter)
