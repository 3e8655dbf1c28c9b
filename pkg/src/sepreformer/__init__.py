"""Time-domain two-speaker separation with an early-split, shared-weight decoder."""
from .config import ConfigError, RunConfig, TrainConfig, DataConfig
from .objectives import LossConfig, multi_loss, pit_loss, si_snr
from .separator import ModelConfig, PRESETS, Separator, build, preset
from .signal_codec import AudioDecoder, AudioEncoder, Waveform, padded_length

__all__ = [
    "AudioDecoder", "AudioEncoder", "ConfigError", "DataConfig", "LossConfig", "ModelConfig", "PRESETS",
    "RunConfig", "Separator", "TrainConfig", "Waveform", "build", "multi_loss", "padded_length", "pit_loss",
    "preset", "si_snr",
]
__version__ = "0.1.0"
