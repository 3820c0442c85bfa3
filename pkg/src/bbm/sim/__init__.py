from .config import NodeSpec, SimConfig, SimReport, VideoSpec, WorkloadSpec
from .harness import ConfigInvalid, MismatchedConfigs, compare_runs, gen_catalog, run_simulation
from .workload import Request, generate_workload, zipf_weights

__all__ = [
    "ConfigInvalid", "MismatchedConfigs", "NodeSpec", "Request", "SimConfig", "SimReport",
    "VideoSpec", "WorkloadSpec", "compare_runs", "gen_catalog", "generate_workload",
    "run_simulation", "zipf_weights",
]
