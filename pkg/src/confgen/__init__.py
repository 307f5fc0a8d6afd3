"""Differentiable distance-geometry conformation generator."""

from .distgeo import (InnerLoopConfig, InnerTrajectory, hypergradient, inner_objective, outer_loss,
                      solve_distance_geometry)
from .evaluation import ConformerSet, MetricConfig, MmdConfig, coverage, matching, mmd
from .geometry import aligned_rmsd, kabsch_align, rmsd
from .model import ModelConfig, ModelParameters, cnf_forward, cnf_inverse, init_params
from .molgraph import (Conformation, MolecularGraph, distances_from_conformation,
                       expand_auxiliary_edges, parse_dataset)
from .training import TrainConfig, sample_conformation, train, training_step

__version__ = "0.1.0"
