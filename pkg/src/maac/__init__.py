"""Multi-actor attention critic for cooperative/competitive multi-agent RL."""

__version__ = "0.1.0"
