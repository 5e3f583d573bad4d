"""Retrieval-enhanced prompt learning for few-shot classification."""

from .adapter import AdapterState, interpolate, knn_probability
from .data import DatasetSpec, gen_synthetic, ingest_embeddings, intra_class_variance
from .encoders import TextEncoder, VisionEncoder, predict_clip
from .estimator import RePromptClassifier
from .experiments import run_experiment
from .prompt_learner import PromptLearner, generate_dynamic_prompts, reconv_forward
from .retrieval import (
    RetrievalDatabase,
    assemble_prompt_input,
    build_database,
    fuse_retrieved,
    load_database,
    query_topk,
    save_database,
)
from .training import RePromptModel, TrainConfig, evaluate, train

__all__ = [
    "AdapterState",
    "DatasetSpec",
    "PromptLearner",
    "RePromptClassifier",
    "RePromptModel",
    "RetrievalDatabase",
    "TextEncoder",
    "TrainConfig",
    "VisionEncoder",
    "assemble_prompt_input",
    "build_database",
    "evaluate",
    "fuse_retrieved",
    "gen_synthetic",
    "generate_dynamic_prompts",
    "ingest_embeddings",
    "interpolate",
    "intra_class_variance",
    "knn_probability",
    "load_database",
    "predict_clip",
    "query_topk",
    "reconv_forward",
    "run_experiment",
    "save_database",
    "train",
]
