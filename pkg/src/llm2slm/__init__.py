"""Frozen large-model prompt encodings driving small autoregressive decoders."""
from .autodiff import ContractError, DimensionError, FlopCounter, Tape, Tensor, backward
from .bridge import (AlignmentError, BridgeConfig, FusionMode, HybridBundle, PlainModel, PromptTunedModel,
                     TokenizerMode, build_slm_inputs, encode_prompt, fuse, load_system, project, save_system,
                     system_flops)
from .decoding import GenerationParams, SpecDecParams, beam_score, generate, predict, speculative_generate
from .models import Checkpoint, KvCache, LengthError, ModelConfig, init_checkpoint, param_count, truncate_layers
from .tasks import TaskSpec, generate_task
from .tokenizer import BYTE_VOCAB, SLM_VOCAB, Vocab, decode, encode
from .training import OptimState, TrainConfig, adamw_step, lr_at, train

__all__ = [
    "AlignmentError", "BYTE_VOCAB", "BridgeConfig", "Checkpoint", "ContractError", "DimensionError",
    "FlopCounter", "FusionMode", "GenerationParams", "HybridBundle", "KvCache", "LengthError", "ModelConfig",
    "OptimState", "PlainModel", "PromptTunedModel", "SLM_VOCAB", "SpecDecParams", "Tape", "TaskSpec", "Tensor",
    "TokenizerMode", "TrainConfig", "Vocab", "adamw_step", "backward", "beam_score", "build_slm_inputs",
    "decode", "encode", "encode_prompt", "fuse", "generate", "generate_task", "init_checkpoint", "load_system",
    "lr_at", "param_count", "predict", "project", "save_system", "speculative_generate", "system_flops",
    "train", "truncate_layers",
]
