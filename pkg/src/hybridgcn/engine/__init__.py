"""Full-batch GraphSAGE / GCN training over partitioned graphs."""

from .model import (TrainConfig, cross_entropy, init_params, label_propagate_setup,
                    layer_norm_backward, layer_norm_forward, load_checkpoint, param_names,
                    save_checkpoint, select_label_nodes)
from .train import (METRIC_COLUMNS, TrainResult, compute_logits, loss_and_grads, prepare,
                    read_metrics, run_workers, train, train_rank, write_metrics)
from .worker import TrainingDiverged, Worker

__all__ = [
    "TrainConfig", "cross_entropy", "init_params", "label_propagate_setup",
    "layer_norm_backward", "layer_norm_forward", "load_checkpoint", "param_names",
    "save_checkpoint", "select_label_nodes", "METRIC_COLUMNS", "TrainResult",
    "compute_logits", "loss_and_grads", "prepare", "read_metrics", "run_workers", "train", "train_rank",
    "write_metrics", "TrainingDiverged", "Worker",
]
