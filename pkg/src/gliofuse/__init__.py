"""Consensus fusion and lesion-wise scoring for post-treatment glioma segmentations."""
from .channels import subtract, zscore_normalize
from .lesion import (
    CaseMetrics,
    MetricConfig,
    connected_components,
    dice,
    dilate,
    evaluate_case,
    hd95,
    lesionwise_scores,
    surface_voxels,
)
from .nifti import read_labelmap, read_nifti, read_probstack, write_nifti, write_probstack
from .regions import REPORT_REGIONS, binarize
from .report import AggregateReport, aggregate, build_report, render
from .staple import RaterPerformance, StapleConfig, staple_binary, staple_multilabel
from .volume import DEFAULT_ENCODING, LabelMap, ProbStack, Volume3D, check_geometry
from .weighted import FitConfig, WeightMatrix, fit_weights, fuse_weighted, labelmap_to_probstack

__version__ = "0.1.0"
