"""Sequence-level knowledge distillation for small LSTM translation models."""

from .autodiff import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ParallelCorpus, ToyTaskConfig, Vocabulary, generate_toy_corpus
from .decoder import DecodeConfig, Hypothesis, KBestList, beam_search, greedy_decode, mode_mass
from .distill import DistillRecipe, TeacherData, run_recipe, select_seq_inter
from .metrics import corpus_bleu, smoothed_sentence_bleu
from .model import ModelConfig, ModelParams, init_params, sequence_logprob, word_kd_loss, word_nll_loss
from .pruning import apply_mask, compression_report, compute_prune_mask, retrain_pruned
from .training import TrainConfig, fine_tune, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "load_checkpoint", "save_checkpoint", "ParallelCorpus", "ToyTaskConfig",
    "Vocabulary", "generate_toy_corpus", "DecodeConfig", "Hypothesis", "KBestList", "beam_search", "greedy_decode",
    "mode_mass", "DistillRecipe", "TeacherData", "run_recipe", "select_seq_inter", "corpus_bleu",
    "smoothed_sentence_bleu", "ModelConfig", "ModelParams", "init_params", "sequence_logprob", "word_kd_loss",
    "word_nll_loss", "apply_mask", "compression_report", "compute_prune_mask", "retrain_pruned", "TrainConfig",
    "fine_tune", "train",
]
