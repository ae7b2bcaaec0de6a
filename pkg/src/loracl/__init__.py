"""Continual learning by merging per-task LoRA task vectors on a small ViT,
built on a numpy reverse-mode autodiff engine."""

from .arithmetic import MergeConfig, TaskVector, apply, compute_task_vector, scale_and_sum
from .checkpoint import load_checkpoint, save_checkpoint, scan_checkpoint
from .data import Dataset, SyntheticSpec, generate_pools, load_dataset, save_dataset
from .harness import ProtocolConfig, SplitPlan, TrainConfig, evaluate, run_protocol
from .losses import LossWeights
from .model import LoRAParams, ParamStore, ViTConfig, attach_lora, forward, init_model, merge_lora
from .tensor import ContractError, ShapeError, Tensor, backward, count_flops

__version__ = "0.1.0"
