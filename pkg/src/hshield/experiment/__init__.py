from .dataset import load_dataset, generate_demo_dataset
from .spec import ExperimentSpec, load_spec, spec_hash
from .runner import RunRecord, run_cell, sweep
from .report import write_report

__all__ = [
    "load_dataset", "generate_demo_dataset",
    "ExperimentSpec", "load_spec", "spec_hash",
    "RunRecord", "run_cell", "sweep",
    "write_report",
]
