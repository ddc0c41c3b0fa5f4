"""microtog: objectness-gradient attacks on a micro anchor-based detector.

Train a small single-scale detector on procedural shape scenes, then attack
it with per-input vanishing / fabrication / mislabeling perturbations or a
pretrained universal perturbation, all under a hard L-inf budget.
"""

from ._backend import backend_name
from .attacks import (
    AttackConfig,
    AttackResult,
    DetectionTarget,
    Perturbation,
    UniversalConfig,
    apply_universal,
    attack_success,
    build_target,
    load_perturbation,
    project_linf,
    save_perturbation,
    sign,
    tog_attack,
    train_universal,
)
from .data import (
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_annotations,
    load_dataset,
    load_image,
    quantize,
    save_annotations,
    save_image,
)
from .detector import (
    Assignment,
    Candidate,
    DetectedObject,
    DetectorConfig,
    DetectorWeights,
    GroundTruthObject,
    LossBreakdown,
    assign_targets,
    build_detector,
    decode,
    detect,
    detection_loss,
    forward_head,
    load_weights,
    loss_input_gradient,
    save_weights,
    train,
    train_step,
)
from .evaluation import (
    EvalReport,
    TransferCell,
    average_precision,
    evaluate,
    iou,
    transfer_matrix,
)
from .numerics import (
    ConvLayer,
    GradientPair,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    leaky_relu,
    sigmoid,
)

__version__ = "0.1.0"
