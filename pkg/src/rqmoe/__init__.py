"""Residual quantization with a mixture-of-experts dynamic codebook."""

from .errors import RqMoeError
from .model import (
    RqMoeModel,
    decode_parallel,
    decode_sequential,
    decode_truncated,
    encode,
    encode_batch,
    flops_estimate,
    random_model,
)
from .rq import RqModel, rq_decode, rq_encode, rq_train
from .training import ModelDims, TrainConfig, train, warm_start

__version__ = "0.1.0"
