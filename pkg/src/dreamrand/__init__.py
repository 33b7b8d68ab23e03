"""dreamrand: learned world-model simulators with randomized dropout dream
environments, plus CMA-ES controller training and real-environment
evaluation on analytic reference tasks."""

__version__ = "0.1.0"
