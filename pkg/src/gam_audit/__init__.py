"""Detect label-defining features in tabular data with spline GAMs."""

from .dataset import Dataset, ScalingParams, CandidateSet, load_csv, write_csv, standardize, split_by_group, pearson_rank
from .gam import FittedGam, fit, optimize_lambdas, predict, deviance, edf, shape
from .detect import DetectionConfig, DetectionReport, detect, step1_search, step2_nullify, nullification_score

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ScalingParams",
    "CandidateSet",
    "load_csv",
    "write_csv",
    "standardize",
    "split_by_group",
    "pearson_rank",
    "FittedGam",
    "fit",
    "optimize_lambdas",
    "predict",
    "deviance",
    "edf",
    "shape",
    "DetectionConfig",
    "DetectionReport",
    "detect",
    "step1_search",
    "step2_nullify",
    "nullification_score",
]
