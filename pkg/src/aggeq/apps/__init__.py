"""Concrete game builders: overnight charging and route choice."""

from .ev import (EvParams, build_ev_game, default_demand, ev_condition_check,
                 generate_ev_params, sqrt_price)
from .traffic import (RoadNetwork, TravelTimeCurve, build_route_choice_game,
                      load_network, queue_consistency_check, shortest_path,
                      smoothing_constants, traffic_bounds, travel_time,
                      travel_time_derivative)

__all__ = [
    "EvParams", "build_ev_game", "default_demand", "ev_condition_check",
    "generate_ev_params", "sqrt_price", "RoadNetwork", "TravelTimeCurve",
    "build_route_choice_game", "load_network", "queue_consistency_check",
    "shortest_path", "smoothing_constants", "traffic_bounds", "travel_time",
    "travel_time_derivative",
]
