"""Joint scheduling and power allocation for user-centric cell-free uplink networks."""

from .channel import ChannelRealization, draw_large_scale, draw_realization, pathloss_db
from .evaluation import (
    FairnessState,
    TimeSlotResult,
    evaluate,
    jains_index,
    pf_update,
    round_robin_baseline,
    true_sinr_centralized,
    true_sinr_distributed,
)
from .fp_centralized import AllocationResult, run_centralized
from .fp_decentralized import run_decentralized_distributed, run_decentralized_semi
from .fp_exchange import run_distributed, run_semi_distributed
from .harness import ExperimentSpec, load_config, run_experiment
from .model import SimConfig
from .topology import NetworkTopology, build_clusters, generate_topology

__version__ = "0.1.0"
