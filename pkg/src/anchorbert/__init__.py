"""Two-phase encoder training at desk scale.

A small numpy-backed library: a reverse-mode tensor core, exact and
anchored-fast multi-head attention, standard and factorized feed-forward
layers, a BERT-style masked-language model in "relaxed" and "full" modes, a
lossless relaxed-to-full transformation, a two-phase training loop, and
microbenchmarks for the complexity claims.
"""

from .attention import (AnchorSet, AttentionParams, anchor_key_similarity,
                        approx_similarity, fast_attention,
                        fast_multi_head_attention, multi_head_attention,
                        query_anchor_similarity, query_key_similarity,
                        select_anchors, standard_attention)
from .feedforward import (FactorizedFfn, StandardFfn, add_norm, ffn_forward,
                          ffn_param_count)
from .model import (ModelConfig, ModelState, count_parameters, forward,
                    forward_hidden, init_model, mlm_loss, recover_full)
from .tensor import Tensor, no_grad
from .trainer import (AdamHyper, AutoSwitch, PhasePlan, adam_step,
                      detect_plateau, lr_at, run_two_phase)

__version__ = "0.1.0"
