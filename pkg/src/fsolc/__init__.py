"""Compression-aware training for CNN receivers with multiplication-free
inference, plus a Gamma-Gamma FSO simulation harness that benchmarks the
compressed detectors against maximum-likelihood baselines."""

from .channel import TurbulenceParams, alpha_beta_from_rytov, gg_pdf, sample_channel
from .compress import (
    LayerCodebook,
    LcConfig,
    Pow2Level,
    compression_rate,
    learn_codebook,
    lc_train,
    penalty_gradient,
    post_train_compress,
    pow2_approx,
    project,
)
from .dataset import LinkSample, make_block, make_dataset
from .harness import BerRecord, ExperimentConfig, cmd_compress, cmd_reproduce, cmd_sweep, cmd_train
from .nncore import AdamState, LayerSpec, Network, adam_step, backward, bce_loss, forward
from .qinfer import OpCounter, ShiftAddOp, count_report, qforward
from .qmodel import QuantizedModel
from .receivers import CsiErrorModel, ReceiverKind, corrupt_csi, detect_cnn, detect_ml_simo, detect_ml_siso

__version__ = "0.1.0"
