"""Metrics, harmonization diagnostics, experiment orchestration and the CLI."""
from .diagnostics import (HistReport, binned_ks, hist_report, hist_report_from_slices, ks_distance, maps_from_slices,
                          mean_std_maps, read_pgm, write_pgm, write_report)
from .experiment import ExperimentConfig, ExperimentResult, run_experiment
from .metrics import auc, mae, pearson
