"""Brain-age regression from MRI volumes treated as sequences of 2D slices."""

from .autodiff import NonFiniteError, Tensor, no_grad, precision, set_default_dtype
from .data import PipelineConfig, Volume, generate_phantom, normalize, read_volume, write_volume
from .metrics import cs, cs_curve, evaluate, group_mae, mae
from .models import ResNetConfig, SliceSeqAgeNet, Volumetric3DNet, load_weights, param_count, save_weights
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"
