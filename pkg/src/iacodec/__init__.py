"""Instance-adaptive neural image codec.

A small learned codec whose receiver-side parameters are finetuned per
instance set; the quantized parameter update travels inside the
bitstream, entropy-coded under a spike-and-slab prior, next to the
latents it improves.
"""

from .autodiff import Tensor, Tape, backward, record
from .bitstream import (BitstreamError, CrcMismatchError, DecodeResult,
                        EncodeResult, ModelHashMismatchError, StreamHeader,
                        TruncatedStreamError, decode_instance, encode_instance,
                        write_bitstream)
from .model import (CodecConfig, CodecModel, load_checkpoint,
                    save_checkpoint)
from .prior import PmfTable, SpikeSlabPrior, compute_bin_count
from .quantizer import QuantGrid, quantize, quantize_np
from .training import (Adam, EvalMetrics, FinetuneConfig, FinetuneResult,
                       GlobalTrainConfig, ablate, evaluate_set, finetune,
                       load_update, save_update, select_representative,
                       temporal_ablate, train_global)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BitstreamError", "CodecConfig", "CodecModel",
    "CrcMismatchError", "DecodeResult", "EncodeResult", "EvalMetrics",
    "FinetuneConfig", "FinetuneResult", "GlobalTrainConfig",
    "ModelHashMismatchError", "PmfTable", "QuantGrid", "SpikeSlabPrior",
    "StreamHeader", "Tape", "Tensor", "TruncatedStreamError", "ablate",
    "backward", "compute_bin_count", "decode_instance", "encode_instance",
    "evaluate_set", "finetune", "load_checkpoint", "load_update",
    "quantize", "quantize_np", "record", "save_checkpoint", "save_update",
    "select_representative", "temporal_ablate", "train_global",
    "write_bitstream",
]
