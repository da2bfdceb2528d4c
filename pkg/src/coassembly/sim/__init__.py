from .world import World, run_scenario
from .metrics import MetricsLog, compute_totals
from .demos import generate_demos
from .disturbance import disturbance_suite, HAZARDS

__all__ = [
    "World", "run_scenario", "MetricsLog", "compute_totals",
    "generate_demos", "disturbance_suite", "HAZARDS",
]
