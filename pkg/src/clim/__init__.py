"""Desk-scale contrastive pretraining with center-wise local image mixture.

Modules: numerics (deterministic RNG and vector kernels), data (synthetic
datasets and file formats), augment (view generation and mixing), encoder
(manual-backprop MLP with a momentum twin), contrastive (queue and losses),
neighborhood (k-means, kNN, positive selection), trainer (pretraining
loop), evaluate (probes and similarity metrics), report (sweep tables),
cli (the `clim` command).
"""

from .augment import AugConfig, CropSpec, MixMask, MixedView, make_views
from .contrastive import ContrastiveConfig, NegativeQueue, mixed_nce_loss, multi_res_loss, nce_loss
from .data import Dataset, SyntheticSpec, generate_synthetic, load_ppm_dir, load_tensor_file, save_tensor_file
from .encoder import EncoderDims, EncoderParams, KeyEncoder, forward, init_params, momentum_update
from .errors import ClimError, DataFormatError, NumericError, StaleModelError, ValidationError
from .evaluate import ProbeConfig, finetune_fraction, intra_class_similarity, knn_probe, linear_probe
from .neighborhood import ClusterModel, EmbeddingBank, NeighborhoodConfig, kmeans_fit, knn_search, sample_positives, select_positives
from .numerics import Rng, dot, l2_distance, l2_normalize, sample_beta, sample_uniform_int
from .trainer import MetricsLog, TrainConfig, cosine_lr, pretrain, sgd_step
