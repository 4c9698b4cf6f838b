"""
Objective Module
Pairwise contrastive loss with intra- and inter-modality negatives
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from backend.core import diffmath as dm
from backend.core.diffmath import Tensor
from backend.utils.errors import ContractViolationError, InvalidBatchError, InvalidShapeError

DEFAULT_TEMPERATURE = 0.1
UNIT_TOLERANCE = 1e-6
PAIRS = (('V', 'S'), ('V', 'W'), ('S', 'W'))


@dataclass
class LossBreakdown:
    """Pairwise terms and their sum; absent pairs are None"""
    total: Tensor
    l_vs: Optional[Tensor] = None
    l_vw: Optional[Tensor] = None
    l_sw: Optional[Tensor] = None
    temperature: float = DEFAULT_TEMPERATURE

    def terms(self) -> Dict[str, Tensor]:
        return {key: value for key, value in
                (('l_vs', self.l_vs), ('l_vw', self.l_vw), ('l_sw', self.l_sw)) if value is not None}

    def to_dict(self) -> Dict[str, float]:
        """Scalar view for the JSON-lines log"""
        record = {key: value.item() for key, value in self.terms().items()}
        record['total'] = self.total.item()
        record['temperature'] = self.temperature
        return record


def _check_embeddings(za: Tensor, zb: Tensor) -> int:
    if za.ndim != 2 or za.shape != zb.shape:
        raise InvalidShapeError(f"embeddings must be matching [N, E] matrices, got {za.shape} and {zb.shape}")
    n = za.shape[0]
    if n < 2:
        raise InvalidBatchError(f"contrastive loss needs N >= 2, got {n}")
    for z in (za, zb):
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise ContractViolationError("embedding rows must have unit norm")
    return n


def _directional_terms(za: Tensor, zb: Tensor, tau: float) -> Tensor:
    """Per-anchor losses L_i^{a->b} for every i, shape [N]"""
    n = za.shape[0]
    intra = (za @ za.T) * (1.0 / tau)
    inter = (za @ zb.T) * (1.0 / tau)
    # drop the self-similarity z_i^a . z_i^a from the intra block
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    intra_off = intra[rows, cols].reshape(n, n - 1)
    logits = dm.concat([intra_off, inter], axis=1)
    diag = np.arange(n)
    return dm.logsumexp(logits, axis=1) - inter[diag, diag]


def directional_loss(za: Tensor, zb: Tensor, i: int, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """
    L_i^{a->b}: -log of the positive term over 2N - 1 terms

    The denominator holds N - 1 intra-modality negatives, N - 1
    inter-modality negatives and the positive pair itself.
    """
    n = _check_embeddings(za, zb)
    if not 0 <= i < n:
        raise IndexError(f"anchor index {i} out of range for batch of {n}")
    return _directional_terms(za, zb, tau)[i]


def pairwise_loss(za: Tensor, zb: Tensor, tau: float = DEFAULT_TEMPERATURE,
                  mean_reduction: bool = False) -> Tensor:
    """
    Sum over the batch of L_i^{a->b} + L_i^{b->a}

    Args:
        za, zb: [N, E] unit-norm rows of two modalities
        tau: Temperature
        mean_reduction: divide by 2N instead of returning the plain sum

    Returns:
        Tensor: scalar loss
    """
    n = _check_embeddings(za, zb)
    total = _directional_terms(za, zb, tau).sum() + _directional_terms(zb, za, tau).sum()
    return total * (1.0 / (2 * n)) if mean_reduction else total


def total_loss(zv: Optional[Tensor], zs: Optional[Tensor], zw: Optional[Tensor],
               tau: float = DEFAULT_TEMPERATURE, mean_reduction: bool = False) -> LossBreakdown:
    """
    L = L^vs + L^vw + L^sw over the modalities that are present

    Args:
        zv, zs, zw: [N, E] embeddings; pass None for an absent modality
        tau: Temperature
        mean_reduction: forwarded to pairwise_loss

    Returns:
        LossBreakdown: pairwise terms and their sum
    """
    embeddings: Mapping[str, Optional[Tensor]] = {'V': zv, 'S': zs, 'W': zw}
    present = {key: z for key, z in embeddings.items() if z is not None}
    if len(present) < 2:
        raise InvalidBatchError("total loss needs at least two modalities")
    sizes = {z.shape[0] for z in present.values()}
    if len(sizes) != 1:
        raise InvalidBatchError(f"modalities disagree on batch size: {sorted(sizes)}")

    terms: Dict[str, Tensor] = {}
    for a, b in PAIRS:
        if a in present and b in present:
            terms[f'l_{a.lower()}{b.lower()}'] = pairwise_loss(present[a], present[b], tau, mean_reduction)
    total = None
    for value in terms.values():
        total = value if total is None else total + value
    return LossBreakdown(total=total, temperature=tau, **terms)
