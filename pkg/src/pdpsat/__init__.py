"""Propagation-decimation SAT solvers: classical BP/SP/Reinforce and a learned neural variant."""
from .classical import bp_guided_decimate, bp_marginals, reinforce_solve, sp_guided_decimate
from .engine import RunConfig, RunResult, run, run_with_replication, solve_many
from .formula import CnfFormula, FactorGraph, build_factor_graph, concat_batch, parse_dimacs, read_dimacs, write_dimacs
from .neural import NeuralPdpModel, init_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_stream

__version__ = "0.1.0"
