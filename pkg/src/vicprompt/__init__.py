"""Learnable border prompts for retrieval-based visual in-context learning.

A frozen toy inpainting backbone fills the bottom-right cell of a 2x2 canvas
(in-context input, in-context label, query, hidden). A single border
perturbation, trained with the backbone frozen, is added to the retrieved
in-context pair before the canvas is built.
"""

from .backbone import BackboneBundle, BackboneConfig, load_backbone, pretrain_backbone, save_backbone
from .data import Dataset, DatasetSpec, TaskPair, generate_dataset, split_folds
from .evaluation import ExperimentReport, PredictionRecord, miou, predict_label
from .prompt import PLACEMENTS, PromptParams, border_mask, enhance, init_prompt, param_count
from .retrieval import build_index, retrieve
from .trainer import TrainConfig, compute_loss, grad_check, train_prompt

__version__ = "0.1.0"

__all__ = [
    "BackboneBundle", "BackboneConfig", "Dataset", "DatasetSpec", "ExperimentReport", "PLACEMENTS",
    "PredictionRecord", "PromptParams", "TaskPair", "TrainConfig", "border_mask", "build_index",
    "compute_loss", "enhance", "generate_dataset", "grad_check", "init_prompt", "load_backbone", "miou",
    "param_count", "predict_label", "pretrain_backbone", "retrieve", "save_backbone", "split_folds",
    "train_prompt",
]
