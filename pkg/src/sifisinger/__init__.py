"""Singing voice synthesis with a source-filter excitation path and differentiable acoustic reconstruction."""
from .config import Config, desk_config, paper_config, preset, tiny_config
from .model import SiFiSinger

__all__ = ["Config", "SiFiSinger", "desk_config", "paper_config", "preset", "tiny_config"]
__version__ = "0.1.0"
