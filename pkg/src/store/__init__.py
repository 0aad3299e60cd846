"""Persistence: tensor files, manifests, datasets and checkpoints."""
from .checkpoints import load_checkpoint, save_checkpoint
from .datasets import LoadedDataset, dataset_iter, load_dataset
from .manifest_db import MANIFEST_FILE, ManifestDatabase
from .tensor_io import TensorRecord, decode, encode, load_tensor, read_record, save_tensor

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "LoadedDataset",
    "dataset_iter",
    "load_dataset",
    "MANIFEST_FILE",
    "ManifestDatabase",
    "TensorRecord",
    "decode",
    "encode",
    "load_tensor",
    "read_record",
    "save_tensor",
]
