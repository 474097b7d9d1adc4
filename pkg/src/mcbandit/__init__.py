"""Matrix completion bandits: epsilon-greedy online learning with IPW-debiased inference."""

__version__ = "0.1.0"
