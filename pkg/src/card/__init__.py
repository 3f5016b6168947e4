"""
card: coarse-to-fine autoregressive densities over radix-decomposed
conformations, used as normalised proposals for free energy estimation.
"""

__version__ = "0.1.0"

from .conformer import (AtomOrdering, SystemContext, detect_degeneracy, distance_order,  # noqa: E402
                        expand_inputs, inference_ordering, pca_align, topology_order)
from .free_energy import (FreeEnergyEstimate, ReducedEnergyMatrix, absolute_free_energy,  # noqa: E402
                          bar, ess_overlap, mbar, mfes_reference, zwanzig_fep)
from .model import CardModel, ModelConfig  # noqa: E402
from .pipeline import TrainConfig, batch_logprob, fit, sample  # noqa: E402
from .radix import MixedSequence, RadixConfig, decode, encode  # noqa: E402

__all__ = [
    "AtomOrdering", "CardModel", "FreeEnergyEstimate", "MixedSequence", "ModelConfig",
    "RadixConfig", "ReducedEnergyMatrix", "SystemContext", "TrainConfig", "absolute_free_energy",
    "bar", "batch_logprob", "decode", "detect_degeneracy", "distance_order", "encode",
    "ess_overlap", "expand_inputs", "fit", "inference_ordering", "mbar", "mfes_reference",
    "pca_align", "sample", "topology_order", "zwanzig_fep",
]
