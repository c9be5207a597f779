from .config import PipelineConfig, DatasetConfig, EvalConfig, load_config
from .dataset import CaseEntry, DatasetIndex, generate_dataset, load_dataset
from .pipeline import METHODS, CaseRecord, run_case
from .stats import MethodStats, StatsSummary, aggregate, export_distribution, write_summary
from .gradcheck import GradcheckReport, run_gradcheck
from .train import TrainResult, toy_train

__all__ = [
    "PipelineConfig", "DatasetConfig", "EvalConfig", "load_config",
    "CaseEntry", "DatasetIndex", "generate_dataset", "load_dataset",
    "METHODS", "CaseRecord", "run_case",
    "MethodStats", "StatsSummary", "aggregate", "export_distribution", "write_summary",
    "GradcheckReport", "run_gradcheck",
    "TrainResult", "toy_train",
]
