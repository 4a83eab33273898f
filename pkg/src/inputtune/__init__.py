"""Input tuning for continual learning on frozen backbones.

A learnable frame (or additive perturbation) conditions the input of a frozen
pretrained feature extractor while an incremental head learns each task's
classes. The package also carries the usual baselines (head-only, bias tuning,
partial fine-tuning with LwF / LwM / EWC / Path Integral) and the continual
learning protocol and metrics needed to compare them.
"""

from .assembly import ModelAssembly, TuningStrategy, assemble, make_strategy
from .backbone import ResNetBackbone, build_backbone, resnet18, tiny_resnet
from .errors import *  # noqa: F401,F403
from .head import IncrementalHead, PredictionBundle, masked_train_logits, predict_parallel, predict_standard
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, metrics_report
from .pretrain import load_tiny_pretrained
from .regularizers import (attention_distance, empirical_fisher, ewc_penalty, lwf_penalty, lwm_penalty,
                           make_regularizer, pathint_accumulate, pathint_consolidate)
from .streams import (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL, LabeledDataset, Session, TaskStream,
                      build_class_incremental_stream, build_domain_incremental_stream)
from .synthetic import make_multisource_stream, make_synthetic_domain_stream, make_synthetic_stream
from .trainer import TrainConfig, run_joint, run_sequence, run_session
from .transforms import InputTransform, TransformConfig, apply_add, apply_pad, apply_pad_latent, param_count

__version__ = "0.1.0"
