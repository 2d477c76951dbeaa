"""Local/global multi-crop self-supervised learning with a learned local affinity."""

from .affinity import (
    AffinityRegressor, PairBatch, affinity_forward, cosine_affinity_loss, local_local_loss,
    make_pairs, omega_objective, sample_negative_partner,
)
from .augment import (
    AugmentationConfig, CropRect, ViewBatch, ViewSet, apply_photometric, make_view_batch,
    make_views, sample_crop_rect,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset, ImageSample, SynthConfig, export_image_folder, generate_synthetic,
    load_cifar_binary, load_image_folder, read_image, split_dataset, write_cifar_binary,
)
from .encoder import Encoder, NegativeQueue, TinyConv, encode, enqueue, momentum_update, predict
from .errors import CheckpointError, ContractError, NonFiniteError
from .evaluate import (
    AffinityReport, FeatureBank, ProbeConfig, affinity_compare, knn_classify, knn_top1,
    linear_probe,
)
from .losses import LossConfig, cosine_loss, global_global_loss, info_nce, local_global_loss
from .trainer import (
    TrainConfig, TrainState, encoder_gradients, fit, init_state, lr_at, total_encoder_loss, train_step,
)

__version__ = "0.1.0"
