"""TNT image classifier: word-level attention nested inside sentence-level attention."""
from .complexity import flops_standard_block, flops_tnt_block, model_report, params_standard_block, params_tnt_block
from .model import PRESETS, Model, TntConfig, build, forward, preset
from .tokenizer import ConfigError

__all__ = [
    "PRESETS",
    "ConfigError",
    "Model",
    "TntConfig",
    "build",
    "flops_standard_block",
    "flops_tnt_block",
    "forward",
    "model_report",
    "params_standard_block",
    "params_tnt_block",
    "preset",
]

__version__ = "0.1.0"
