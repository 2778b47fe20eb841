"""Signal control with LLM-style agents: simulator, baselines, protocols and training."""

__version__ = "0.1.0"
