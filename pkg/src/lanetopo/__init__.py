"""Lane centrelines, traffic elements and their topology from multi-view images.

A small numpy implementation: a reverse-mode autodiff core, a per-view 2D
lane decoder whose outputs seed a global 3D lane decoder, a front-view
traffic element detector, topology heads, the training losses and the
benchmark metrics, all driven by a synthetic multi-camera scene generator.
"""
from .config import RunConfig
from .errors import (ConfigError, DataError, DegenerateInputError, DomainError, LaneTopoError, MatchingError,
                     ShapeError, TrainingError)
from .scene import Scene, SceneConfig, gen_scene

__version__ = "0.1.0"

__all__ = ["RunConfig", "Scene", "SceneConfig", "gen_scene", "LaneTopoError", "ConfigError", "DataError",
           "DegenerateInputError", "DomainError", "MatchingError", "ShapeError", "TrainingError"]
