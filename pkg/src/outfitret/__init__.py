"""Trainable text-to-outfit retrieval head over precomputed token embeddings."""

from .config import Hyperparams, TrainConfig
from .dataio import Dataset, EmbeddingBundle, OutfitSample, load_dataset, load_polyvore, read_bundle, \
    write_bundle
from .evaluation import evaluate, export_interactions, inference_score, recall_at_k
from .params import HeadParams
from .synth import SynthConfig, synth_generate
from .trainer import train

__all__ = [
    "Dataset", "EmbeddingBundle", "HeadParams", "Hyperparams", "OutfitSample", "SynthConfig",
    "TrainConfig", "evaluate", "export_interactions", "inference_score", "load_dataset",
    "load_polyvore", "read_bundle", "recall_at_k", "synth_generate", "train", "write_bundle",
]
