"""boxmend: inject, correct, interpolate and evaluate bounding-box noise."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Box,
    ImageDims,
    Mask,
    Point,
    Rle,
    box_center,
    clip_box,
    interpolate_boxes,
    iou,
    mask_iou,
    mask_to_box,
    rle_decode,
    rle_encode,
)
from .dataset import (  # noqa: F401
    Annotation,
    Category,
    Dataset,
    ImageRecord,
    load_coco,
    save_coco,
    validate,
)
from .noise import NoiseConfig, NoiseSample, Pcg32, inject, perturb_box, sample_noise  # noqa: F401
from .fmc import FmcConfig, CorrectionRecord, correct_dataset  # noqa: F401
from .evaluation import (  # noqa: F401
    Detection,
    average_precision,
    correction_report,
    match_detections,
    mean_ap,
    robustness_mae,
)
from .interpolation import (  # noqa: F401
    ConstantPolicy,
    HeuristicPolicy,
    LearnedPolicy,
    MlpParams,
    apply_interpolation,
    gamma_oracle,
    mlp_forward,
    mlp_grad,
    mlp_train,
)
from .synth import (  # noqa: F401
    OracleFidelity,
    OracleProvider,
    SceneSpec,
    generate_scene,
    generate_scenes,
    oracle_label_score,
    oracle_segment,
    scenes_to_dataset,
)
