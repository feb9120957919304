"""Closed-loop RAN control on a seeded, forkable digital twin."""
from .loop import Episode, LoopConfig, run_episode
from .scenario import Scenario, load_scenario, parse_scenario, serialize_scenario

__all__ = ["Episode", "LoopConfig", "Scenario", "load_scenario", "parse_scenario", "run_episode",
           "serialize_scenario"]
__version__ = "0.1.0"
