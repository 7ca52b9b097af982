# utils/ctc.py
"""
TriggerTune - Connectionist Temporal Classification
Log-space forward recursion, keyword scoring and greedy decoding
"""
import difflib
from typing import List, Optional, Sequence

import torch

from utils.errors import UnalignableLabelsError

# Finite stand-in for log(0): keeps logsumexp gradients finite on unreachable states
LOG_ZERO = -1e30


def required_frames(labels: Sequence[int]) -> int:
    """Minimum frames for a CTC alignment: one per label plus a blank between repeats"""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend_with_blanks(labels: Sequence[int], blank: int, width: int):
    """Blank-interleaved label states (padded to `width`) and the skip-transition mask"""
    ext = [blank] * width
    skip = [False] * width
    for i, label in enumerate(labels):
        s = 2 * i + 1
        ext[s] = int(label)
        skip[s] = i > 0 and labels[i] != labels[i - 1]
    return ext, skip


def ctc_forward(log_probs: torch.Tensor, lengths: torch.Tensor, labels: List[Sequence[int]],
                blank: int) -> torch.Tensor:
    """
    Batched CTC negative log-likelihood by the forward recursion in log-space

    Args:
        log_probs (torch.Tensor): B x T x C log-posteriors (blank included)
        lengths (torch.Tensor): (B,) valid frames per sequence
        labels (List[Sequence[int]]): Target label sequence per batch item
        blank (int): Blank class index

    Returns:
        torch.Tensor: (B,) losses; +inf where the labels cannot be aligned

    Example:
        nll = ctc_forward(lp, torch.tensor([4, 3]), [[0, 1], [2]], blank=3)
    """
    B, T, C = log_probs.shape
    if len(labels) != B or lengths.shape[0] != B:
        raise ValueError("labels, lengths and log_probs disagree on batch size")
    for seq in labels:
        if any(l < 0 or l >= C or l == blank for l in seq):
            raise ValueError(f"label sequence {list(seq)} has indices outside the non-blank classes")

    S = 2 * max((len(seq) for seq in labels), default=0) + 1
    ext_rows, skip_rows = zip(*(_extend_with_blanks(seq, blank, S) for seq in labels))
    ext = torch.tensor(ext_rows, dtype=torch.long)
    skip = torch.tensor(skip_rows, dtype=torch.bool)
    valid_states = torch.arange(S)[None, :] < torch.tensor([2 * len(seq) + 1 for seq in labels])[:, None]

    neg = torch.full((B, S), LOG_ZERO, dtype=log_probs.dtype)
    emit = torch.gather(log_probs, 2, ext[:, None, :].expand(B, T, S))

    start = torch.arange(S)[None, :] < 2
    alpha = torch.where(start & valid_states, emit[:, 0], neg)
    pad1 = torch.full((B, 1), LOG_ZERO, dtype=log_probs.dtype)
    pad2 = torch.full((B, 2), LOG_ZERO, dtype=log_probs.dtype)
    for t in range(1, T):
        stay = alpha
        step = torch.cat([pad1, alpha[:, :-1]], dim=1)
        jump = torch.where(skip, torch.cat([pad2, alpha[:, :-2]], dim=1), neg)
        new = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        new = torch.where(valid_states, new, neg)
        active = (lengths > t)[:, None]
        alpha = torch.where(active, new, alpha)

    last = torch.tensor([2 * len(seq) for seq in labels])
    final_blank = alpha.gather(1, last[:, None]).squeeze(1)
    final_label = alpha.gather(1, (last - 1).clamp(min=0)[:, None]).squeeze(1)
    has_label = torch.tensor([len(seq) > 0 for seq in labels])
    log_lik = torch.where(
        has_label,
        torch.logaddexp(final_blank, final_label),
        final_blank,
    )
    alignable = torch.tensor([required_frames(seq) <= int(n) for seq, n in zip(labels, lengths)])
    return torch.where(alignable, -log_lik, torch.full_like(log_lik, float("inf")))


def ctc_loss(log_posteriors: torch.Tensor, labels: Sequence[int], blank: Optional[int] = None) -> torch.Tensor:
    """
    CTC loss of one T x (V+1) log-posterior matrix; blank defaults to the last class

    Raises:
        UnalignableLabelsError: if T is smaller than the minimum alignment length
    """
    T, C = log_posteriors.shape
    blank = C - 1 if blank is None else blank
    needed = required_frames(labels)
    if needed > T:
        raise UnalignableLabelsError(len(labels), needed, T)
    return ctc_forward(log_posteriors[None], torch.tensor([T]), [labels], blank)[0]


def ctc_keyword_score(log_posteriors: torch.Tensor, keyword_labels: Sequence[int],
                      blank: Optional[int] = None) -> float:
    """
    Per-frame keyword log-likelihood S_ctc = -ctc_loss / T (higher is more keyword-like)

    Returns -inf when the keyword cannot be aligned to the sequence.
    """
    try:
        loss = ctc_loss(log_posteriors, keyword_labels, blank)
    except UnalignableLabelsError:
        return float("-inf")
    return float(-loss.detach() / log_posteriors.shape[0])


def ctc_keyword_scores(log_probs: torch.Tensor, lengths: torch.Tensor, keyword_labels: Sequence[int],
                       blank: int) -> torch.Tensor:
    """Batched S_ctc over padded log-posteriors"""
    with torch.no_grad():
        loss = ctc_forward(log_probs, lengths, [keyword_labels] * log_probs.shape[0], blank)
    return -loss / lengths.to(loss.dtype)


def greedy_decode(log_posteriors: torch.Tensor, blank: Optional[int] = None) -> List[int]:
    """Best-path decoding: argmax per frame, collapse repeats, drop blanks"""
    blank = log_posteriors.shape[-1] - 1 if blank is None else blank
    best = log_posteriors.argmax(dim=-1).tolist()
    decoded = []
    previous = None
    for symbol in best:
        if symbol != previous and symbol != blank:
            decoded.append(symbol)
        previous = symbol
    return decoded


def phoneme_accuracy(hypotheses: List[List[int]], references: List[List[int]]) -> float:
    """Mean sequence match ratio between decoded and reference phoneme strings"""
    if not references:
        return 0.0
    ratios = [
        difflib.SequenceMatcher(None, hyp, ref, autojunk=False).ratio()
        for hyp, ref in zip(hypotheses, references)
    ]
    return sum(ratios) / len(ratios)
