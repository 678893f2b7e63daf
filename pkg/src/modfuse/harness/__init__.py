"""Configuration, dataset I/O, pipelines and the command-line interface."""

from .config import TaskSpec, load_task
from .dataset import DatasetRecord, read_dataset, write_dataset

__all__ = ["DatasetRecord", "TaskSpec", "load_task", "read_dataset",
           "write_dataset"]
