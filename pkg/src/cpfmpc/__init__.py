"""Cooperative path following of vehicles with sampled-data distributed MPC."""

from .aux_control import AuxGains, aux_consensus_signal, aux_input_bounds, k_aux
from .mpc import (AgentModel, DecisionVars, InfeasibleError, MpcWeights, ProblemParams,
                  SolverConfig, predict, solve)
from .net_graph import CommGraph, ConsensusGain, path_graph
from .paths import PathSpec
from .vehicle import Pose

__all__ = [
    "AgentModel", "AuxGains", "CommGraph", "ConsensusGain", "DecisionVars", "InfeasibleError",
    "MpcWeights", "PathSpec", "Pose", "ProblemParams", "SolverConfig", "aux_consensus_signal",
    "aux_input_bounds", "k_aux", "path_graph", "predict", "solve",
]
__version__ = "0.1.0"
