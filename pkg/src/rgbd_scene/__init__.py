"""Depth-specific CNNs, weak patch supervision and CNN+LSTM fusion for RGB-D scenes."""

from .analysis import (
    ActivationProfile,
    EvalReport,
    activation_rate,
    average_predictions,
    export_filter_grid,
    mean_class_accuracy,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LabeledSet,
    SequenceSet,
    blur_score,
    jet_encode,
    load_image,
    sample_patch_grid,
    save_image,
    segment_sequence,
    select_keyframes,
)
from .layers import LstmState, LstmWeights, SppSpec, lstm_step, lstm_unroll, spp_forward
from .models import (
    CnnLstm,
    FusedVideoModel,
    FusionHead,
    FusionSpec,
    Model,
    ModelSpec,
    build_dcnn,
    build_wsp_cnn,
    cnn_lstm_forward,
    fusion_forward,
    transfer_conv_weights,
)
from .synthetic import generate_synthetic_scene
from .training import (
    TrainingConfig,
    compute_class_weights,
    run_three_step,
    run_two_step,
    sgd_step,
    train_weighted_linear,
)

__version__ = "0.1.0"
