"""Kronecker-factored recurrent networks.

Hidden-to-hidden weights stored as a Kronecker product of small factors
cut the recurrent parameter count from O(N^2) to as little as O(log N),
while a soft unitary penalty on the factors keeps the operator well
conditioned.  The package provides the factored kernels, real and complex
recurrent cells (plain and gated), BPTT training on the standard
long-range benchmarks, and spectral diagnostics.
"""

from .cells import LstmCell, RecurrentCell, make_cell, modrelu
from .diagnostics import (SpectralReport, gradient_flow_trace, spectral_norm,
                          spectral_report, unitarity_residual)
from .kron import (KroneckerMatrix, kron_apply, kron_backward, kron_expand,
                   kron_forward, parameter_count, random_unitary_factors,
                   soft_unitary_grad, soft_unitary_penalty)
from .tasks import (TaskBatch, gen_adding_batch, gen_copy_batch,
                    load_char_corpus, load_mnist_idx)
from .training import (Adam, RmsProp, bptt_loss_and_grads, clip_gradients,
                       cross_entropy, mse, plateau_decay)

__all__ = [
    "Adam", "KroneckerMatrix", "LstmCell", "RecurrentCell", "RmsProp",
    "SpectralReport", "TaskBatch", "bptt_loss_and_grads", "clip_gradients",
    "cross_entropy", "gen_adding_batch", "gen_copy_batch",
    "gradient_flow_trace", "kron_apply", "kron_backward", "kron_expand",
    "kron_forward", "load_char_corpus", "load_mnist_idx", "make_cell",
    "modrelu", "mse", "parameter_count", "plateau_decay",
    "random_unitary_factors", "soft_unitary_grad", "soft_unitary_penalty",
    "spectral_norm", "spectral_report", "unitarity_residual",
]

__version__ = "0.1.0"
