"""Neural-PI control of networked systems with monotone stacked-ReLU networks."""

from . import analysis, control, dynamics, graph, monotone, train
from .control import CostFamily, Communication, DenseNN, LinearPI, NeuralPI, Phi, ZeroController
from .dynamics import SystemModel, SystemState, Trajectory, make_power_model, make_vehicle_model, rollout
from .graph import Graph, line_graph, random_regular, ring_graph
from .monotone import MonotoneParams, MonotoneWeights, interpolate_monotone, materialize

__version__ = "0.1.0"
