"""Conformal prediction toolkit and coverage audit harness for APS prediction sets."""

__version__ = "0.1.0"

from .core import (DatasetError, LabeledDataset, PredictionRecord, SplitSpec, load_dataset,
                   resample_weighted, split_dataset, write_dataset)
from .conformal import (CalibrationResult, PredictionSet, ScoreConfig, aps_score, calibrate,
                        calibrate_dataset, mondrian_calibrate, predict_set, predict_sets,
                        weighted_calibrate)
from .audit import (CoverageReport, calibration_curve, coverage_report, efficiency_curve,
                    set_size_coverage, superclass_collapse)
from .shift import ShiftSpec, apply_shift, label_shift_weights, shift_experiment
from .selective import SelectiveConfig, choose_lambda, hoeffding_lcb, selective_curve, size_one_misuse_demo
from .synth import GroupSpec, SynthConfig, generate

__all__ = [
    "DatasetError", "LabeledDataset", "PredictionRecord", "SplitSpec", "load_dataset",
    "resample_weighted", "split_dataset", "write_dataset",
    "CalibrationResult", "PredictionSet", "ScoreConfig", "aps_score", "calibrate",
    "calibrate_dataset", "mondrian_calibrate", "predict_set", "predict_sets", "weighted_calibrate",
    "CoverageReport", "calibration_curve", "coverage_report", "efficiency_curve",
    "set_size_coverage", "superclass_collapse",
    "ShiftSpec", "apply_shift", "label_shift_weights", "shift_experiment",
    "SelectiveConfig", "choose_lambda", "hoeffding_lcb", "selective_curve", "size_one_misuse_demo",
    "GroupSpec", "SynthConfig", "generate",
]
