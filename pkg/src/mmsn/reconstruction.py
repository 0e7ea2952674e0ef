"""Histopathology dropout and its reconstruction through the learned restriction maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .fusion import fuse_modalities, mlp


@dataclass
class MaskState:
    """Which patients have their histopathology graph withheld."""

    p: float
    seed: object
    masked: dict = field(default_factory=dict)

    def is_masked(self, patient_id):
        return self.masked.get(patient_id, False)

    @property
    def fraction(self):
        return float(np.mean(list(self.masked.values()))) if self.masked else 0.0

    @classmethod
    def none(cls, patient_ids):
        return cls(0.0, None, {pid: False for pid in patient_ids})


def mask_modality(patient_ids, p, rng, seed=None):
    """Drop histopathology independently with probability ``p``; MRI is always kept."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
    ids = list(patient_ids)
    draws = rng.random(len(ids))
    return MaskState(float(p), seed, {pid: bool(u < p) for pid, u in zip(ids, draws)})


def aggregate_edge_stalks(nodes, operator):
    """e_v = sum over incident edges of rho_{e,v} h_v, shape (..., N, d)."""
    nodes = ad.as_tensor(nodes)
    ps, pd = operator.restrict(nodes)
    n = operator.n
    return ad.index_add(ps, operator.src, n, axis=-2) + ad.index_add(pd, operator.dst, n, axis=-2)


def reconstruct_missing(edge_stalks, layers):
    """MLP_recon applied to each latent node's aggregated edge stalk."""
    return mlp(edge_stalks, layers)


def recon_loss(reconstructed, target):
    """Summed squared error over latent nodes and feature channels."""
    if reconstructed.shape != target.shape:
        raise ContractError(f"reconstruction {reconstructed.shape} and target {target.shape} differ")
    return ad.squared_error(reconstructed, target)


def inject_reconstruction(base, observed, reconstructed, masked=True):
    """Fuse latent features with the reconstruction standing in for the missing modality."""
    if not masked:
        raise ContractError("no modality is masked; nothing to inject")
    return fuse_modalities(base, observed, reconstructed)
