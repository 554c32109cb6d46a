"""Capsule networks with dense convolutional trunks, on a small numpy autograd core."""
from .capsule import (CapsuleLayerSpec, MarginLossConfig, RoutingState, capsule_logits, margin_loss,
                      predict, predict_class, route, squash)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, batches, load_cifar10_bin, load_idx, synth_shapes
from .decoder import DecoderSpec, decode, reconstruction_loss
from .dense import DenseBlockSpec, dense_block_forward, dense_block_param_count
from .errors import (CapsDenseError, ConfigError, ContractError, DimensionError, FormatError,
                     IntegrityError, NumericalError)
from .gradcheck import finite_diff_check
from .models import (CapsuleModel, LevelSpec, ModelSpec, ParamStore, PrimaryCapsSpec, build,
                     build_preset, build_spec, param_count, perturb_digitcaps)
from .tensor import Tensor, backward, concat_channels, conv2d, no_grad, precision
from .trainer import TrainConfig, adam_step, evaluate, fit, lr_at, train_epoch

__version__ = "0.1.0"
