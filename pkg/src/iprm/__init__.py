"""Iterative-parallel reasoning module, its training harness, and a
synthetic compositional VQA task with a symbolic oracle."""

from .attention import AttentionOutput, attention_with_secondary_values, modulated_attention
from .baselines import BaselineConfig, TransformerBaseline
from .core import (
    IprmConfig,
    IprmModule,
    IprmOutput,
    MemoryState,
    MemoryWindow,
    ReasoningTrace,
)
from .encoders import Batch, EncodedInputs, Vocab, VqaModel, make_batch
from .harness import (
    Adam,
    TrainConfig,
    clip_gradients,
    evaluate,
    load_checkpoint,
    lr_plateau_step,
    save_checkpoint,
    train,
)
from .numerics import (
    Linear,
    NumericsError,
    Parameter,
    ParameterRegistry,
    Tensor,
    finite_difference_check,
)
from .synth import (
    QASample,
    Scene,
    gen_question,
    gen_scene,
    generate_dataset,
    oracle_answer,
    read_dataset,
    write_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
