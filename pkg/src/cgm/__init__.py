"""Composable generative model for tabular data."""
from .checkpoint import load_checkpoint, save_checkpoint
from .codecs import CategoricalCodec, FeatureSchema, QuantileNumericalCodec, fit_schema
from .data import SplitSpec, TableDataset, load_csv, split, write_csv
from .model import (ModelParams, TrainConfig, conditional_generate, forward, generate,
                    log_likelihood, train)

__all__ = [
    "CategoricalCodec", "FeatureSchema", "ModelParams", "QuantileNumericalCodec", "SplitSpec",
    "TableDataset", "TrainConfig", "conditional_generate", "fit_schema", "forward", "generate",
    "load_checkpoint", "load_csv", "log_likelihood", "save_checkpoint", "split", "train",
    "write_csv",
]
