"""Module-wise reconstruction quantization of a toy transformer encoder, in numpy."""

from .model import Bits, Encoder, ModelConfig, QuantizedModel
from .partition import Partition, partition_layers

__version__ = "0.1.0"

__all__ = ["Bits", "Encoder", "ModelConfig", "QuantizedModel", "Partition", "partition_layers"]
