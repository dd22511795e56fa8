"""3D vessel segmentation with attention-guided feature fusion on a small numpy autodiff engine."""
from .data import LabelMask, PhantomSpec, Sample, Volume, generate_phantom, kfold_split, load_volume, save_volume
from .losses import combined_loss, dice_loss, weighted_ce_loss
from .metrics import MetricsReport, compute_report, hausdorff_distance, postprocess
from .model import ModelConfig, build_network, forward_full, named_config, table2_configs
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainRun, checkpoint_load, checkpoint_save, evaluate, predict, train

__version__ = "0.1.0"
