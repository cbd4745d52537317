from .benign import (
    BENIGN_KINDS,
    BenignConfig,
    TransformSpec,
    apply_benign,
    apply_benign_eval,
    blur_sigma,
    gaussian_blur,
    sample_benign,
)
from .filters import apply_filter, apply_filter_stack
from .jpeg import differentiable_jpeg, quantization_tables, real_jpeg
from .masks import (
    FEATURES,
    FaceMask,
    FixtureLandmarks,
    GeometricLandmarks,
    LandmarkSet,
    apply_malicious_proxy,
    build_face_mask,
    canonical_landmarks,
    rasterize_polygon,
    read_landmark_file,
    write_landmark_file,
)
from .plugins import BUILTIN_PLUGINS, apply_external_manipulation
