# utils/losses.py
"""
TriggerTune - Training Losses
Phrase and speaker cross-entropy, metric-learning pairs, similarity and the multi-task total
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, FrozenSet, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from models.config import LossWeights
from utils.errors import ZeroNormEmbeddingError

# Similarity probabilities are clamped into [EPS, 1 - EPS]
EPS = 1e-6

LOSS_TERMS = ("phone", "phrase", "spkr", "metric")

Pair = Tuple[int, int]


def phrase_ce(logit: torch.Tensor, label) -> torch.Tensor:
    """
    Binary cross-entropy with logistic link (log-sum-exp stable form)

    Args:
        logit (torch.Tensor): Scalar or batch of phrase logits
        label: Matching 0/1 target(s)

    Returns:
        torch.Tensor: Mean loss over the given logits

    Example:
        phrase_ce(torch.tensor(0.0), 1)  # ln 2
    """
    logit = torch.as_tensor(logit, dtype=torch.get_default_dtype())
    target = torch.as_tensor(label, dtype=logit.dtype).expand_as(logit)
    return F.binary_cross_entropy_with_logits(logit, target)


def speaker_ce(logits: torch.Tensor, speaker) -> torch.Tensor:
    """
    Softmax cross-entropy over K speaker classes

    Args:
        logits (torch.Tensor): K-vector or B x K matrix
        speaker: Class index or (B,) indices

    Returns:
        torch.Tensor: Mean loss

    Raises:
        IndexError: if a speaker index is outside [0, K)
    """
    if logits.dim() == 1:
        logits = logits[None]
    target = torch.as_tensor(speaker, dtype=torch.long).reshape(-1)
    num_classes = logits.shape[-1]
    if target.numel() != logits.shape[0]:
        raise ValueError(f"{target.numel()} speaker targets for {logits.shape[0]} logit rows")
    if torch.any(target < 0) or torch.any(target >= num_classes):
        raise IndexError(f"speaker index outside [0, {num_classes})")
    return F.cross_entropy(logits, target)


@dataclass(frozen=True)
class PairSets:
    """Positive and negative index pairs within one mini-batch (i < j)"""
    positives: Tuple[Pair, ...] = ()
    negatives: Tuple[Pair, ...] = ()

    @property
    def n_pos(self) -> int:
        return len(self.positives)

    @property
    def n_neg(self) -> int:
        return len(self.negatives)

    def as_sets(self) -> Tuple[FrozenSet[Pair], FrozenSet[Pair]]:
        return frozenset(self.positives), frozenset(self.negatives)


def build_pairs(speakers: Sequence[Optional[Hashable]], phrase_labels: Sequence[int],
                strict: bool = False) -> PairSets:
    """
    Build metric-learning pairs from batch metadata

    Positives are same-speaker pairs where both utterances contain the keyword.
    Negatives are different-speaker pairs plus same-speaker pairs with opposite
    phrase labels. Same-speaker pairs that both lack the keyword belong to neither
    set. A speaker of None is distinct from every other utterance.

    Args:
        speakers (Sequence[Optional[Hashable]]): Per-utterance speaker id
        phrase_labels (Sequence[int]): Per-utterance phrase label (0/1)
        strict (bool): Also drop different-speaker pairs where neither has the keyword

    Returns:
        PairSets: Pair sets with i < j

    Example:
        build_pairs(["a", "a"], [1, 1]).n_pos  # 1
    """
    if len(speakers) != len(phrase_labels):
        raise ValueError("speakers and phrase_labels differ in length")
    positives: List[Pair] = []
    negatives: List[Pair] = []
    for i, j in combinations(range(len(speakers)), 2):
        same = speakers[i] is not None and speakers[i] == speakers[j]
        yi, yj = int(phrase_labels[i]), int(phrase_labels[j])
        if same:
            if yi == 1 and yj == 1:
                positives.append((i, j))
            elif yi != yj:
                negatives.append((i, j))
        elif not (strict and yi == 0 and yj == 0):
            negatives.append((i, j))
    return PairSets(tuple(positives), tuple(negatives))


def subsample_negatives(pairs: PairSets, rng: np.random.Generator) -> PairSets:
    """Uniformly keep min(N_N, N_P) negatives; positives are unchanged"""
    if pairs.n_neg <= pairs.n_pos:
        return pairs
    keep = np.sort(rng.choice(pairs.n_neg, size=pairs.n_pos, replace=False))
    return PairSets(pairs.positives, tuple(pairs.negatives[k] for k in keep))


def cosine(e_i: torch.Tensor, e_j: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity along the last dimension

    Raises:
        ZeroNormEmbeddingError: if either side has zero norm
    """
    norm_i = torch.linalg.vector_norm(e_i, dim=-1)
    norm_j = torch.linalg.vector_norm(e_j, dim=-1)
    if torch.any(norm_i == 0) or torch.any(norm_j == 0):
        raise ZeroNormEmbeddingError("cosine similarity of a zero-norm embedding is undefined")
    return (e_i * e_j).sum(dim=-1) / (norm_i * norm_j)


def similarity(e_i: torch.Tensor, e_j: torch.Tensor, a, b) -> torch.Tensor:
    """
    Pair probability P_ij = (a * cos + b + 1) / 2, clamped into [EPS, 1 - EPS]

    Args:
        e_i (torch.Tensor): Embedding(s)
        e_j (torch.Tensor): Embedding(s) broadcastable against e_i
        a: Metric scale (tensor or float)
        b: Metric offset (tensor or float)

    Returns:
        torch.Tensor: Probabilities with the broadcast batch shape

    Example:
        similarity(e, e, 1.0, 0.0)  # 1 - 1e-6
    """
    raw = (a * cosine(e_i, e_j) + b + 1.0) / 2.0
    return torch.clamp(raw, EPS, 1.0 - EPS)


def _pair_probabilities(embeddings: torch.Tensor, pairs: Sequence[Pair], a, b) -> torch.Tensor:
    idx = torch.tensor(pairs, dtype=torch.long)
    return similarity(embeddings[idx[:, 0]], embeddings[idx[:, 1]], a, b)


def metric_loss(embeddings: torch.Tensor, pairs: PairSets, a, b) -> torch.Tensor:
    """
    Mean -log P over positives plus mean -log(1 - P) over negatives; empty sets add 0

    Args:
        embeddings (torch.Tensor): B x E utterance embeddings
        pairs (PairSets): Pairs indexing rows of `embeddings`
        a: Metric scale
        b: Metric offset

    Returns:
        torch.Tensor: Scalar loss
    """
    loss = embeddings.new_zeros(())
    if pairs.n_pos:
        loss = loss - torch.log(_pair_probabilities(embeddings, pairs.positives, a, b)).mean()
    if pairs.n_neg:
        loss = loss - torch.log1p(-_pair_probabilities(embeddings, pairs.negatives, a, b)).mean()
    return loss


@dataclass
class LossBreakdown:
    """Per-term losses and their weighted total"""
    phone: torch.Tensor
    phrase: torch.Tensor
    spkr: torch.Tensor
    metric: torch.Tensor
    total: torch.Tensor
    active: FrozenSet[str] = field(default_factory=lambda: frozenset(LOSS_TERMS))

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in LOSS_TERMS + ("total",)}


def total_loss(phone, phrase, spkr, metric, weights: LossWeights = LossWeights(),
               active: Optional[Iterable[str]] = None) -> LossBreakdown:
    """
    Combine the four terms as phone + alpha * phrase + beta * spkr + gamma * metric

    Inactive terms are replaced by zero before weighting.

    Example:
        total_loss(1.0, 2.0, 3.0, 4.0).total  # 6.4 with default weights
    """
    active = frozenset(LOSS_TERMS if active is None else active)
    unknown = active - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    dtype = torch.get_default_dtype()
    terms = {}
    for name, value in zip(LOSS_TERMS, (phone, phrase, spkr, metric)):
        value = torch.as_tensor(value, dtype=dtype)
        terms[name] = value if name in active else torch.zeros((), dtype=value.dtype)
    total = (
        terms["phone"]
        + weights.alpha * terms["phrase"]
        + weights.beta * terms["spkr"]
        + weights.gamma * terms["metric"]
    )
    return LossBreakdown(total=total, active=active, **terms)

