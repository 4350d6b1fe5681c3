"""Iterative detection of a known 2D plane inside a 3D scalar volume.

The workflow: generate phantom volumes with a known target-plane pose, train
a small convolutional regressor (or plug in a ground-truth oracle) to predict
the relative transform from a plane image to the target, then iterate
extract-predict-compose until the plane converges, averaging several random
initializations.
"""

from .transforms import (
    EulerAngles,
    RigidTransform,
    anchors_to_transform,
    compose,
    euler_to_quat,
    geodesic_angle,
    inverse_compose,
    matrix_to_quat,
    normalize_quat,
    orthogonalize_matrix,
    quat_to_euler,
    quat_to_matrix,
    transform_to_anchors,
)
from .volume import (
    Volume,
    extract_orthogonal_triplet,
    extract_plane,
    identity_plane,
    plane_pixel_to_world,
    read_volume,
    write_volume,
)
from .phantom import (
    Blob,
    ClassLabels,
    PhantomSpec,
    TrainingSample,
    compute_class_labels,
    generate_phantom,
    make_training_sample,
    sample_random_transform,
)
from .predictor import ExactOracle, NetworkPredictor, NoisyOracle, PredictorOutput
from .nets import RegressorModel
from .losses import batch_loss, loss
from .training import Adam, TrainConfig, TrainingDivergedError, phantom_stream, train
from .inference import (
    InferenceConfig,
    MultiInitResult,
    average_transforms,
    confidence_update,
    infer_plane,
    multi_init_infer,
)
from .metrics import PlaneEvalResult, aggregate, evaluate_plane, psnr, ssim

__version__ = "0.1.0"
