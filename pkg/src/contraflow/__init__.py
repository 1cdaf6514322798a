"""Contractive dynamical systems learned from demonstrations."""
from .data import TrajectoryDataset, load, save, synth_pose_dataset, synth_shapes
from .jacobian_field import Constant, Eigenvalue, JacobianField, StateDependent, StateIndependent
from .metrics import contraction_maps, dtwd, hull_region, monotonicity_report, steps_in_region
from .modulation import (ClassicalModulator, DistanceFieldGrid, RiemannianModulator, SphereObstacle, XiParams,
                         build_distance_field, modulate, modulate_riemannian)
from .ncds import Ncds, TrainConfig, train

__version__ = "0.1.0"
