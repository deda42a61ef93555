from .catmouse import build_cat_mouse, cat_left_observation
from .predprey import PredatorPreyParams, build_predator_prey, generate_observations

__all__ = [
    "build_cat_mouse",
    "cat_left_observation",
    "PredatorPreyParams",
    "build_predator_prey",
    "generate_observations",
]
