# utils/gradcheck.py
"""
TriggerTune - Gradient Verification
Central finite differences against autograd on sampled coordinates
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from utils.errors import NumericalError

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """Worst relative error per tensor and overall"""
    per_tensor: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    coordinates: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], torch.Tensor], tensors: Dict[str, torch.Tensor],
               tolerance: float = 1e-4, h: float = 1e-5, samples_per_tensor: Optional[int] = 8,
               seed: int = 0, analytic: Optional[Dict[str, torch.Tensor]] = None,
               floor: float = 1e-8) -> GradCheckReport:
    """
    Compare autograd gradients with central differences

    For each tensor the relative error is max|analytic - numeric| over the sampled
    coordinates divided by max(max|analytic|, max|numeric|, floor).

    Args:
        loss_fn (Callable[[], torch.Tensor]): Deterministic scalar loss of the tensors
        tensors (Dict[str, torch.Tensor]): Leaf tensors (requires_grad) to check
        tolerance (float): Pass threshold on the relative error
        h (float): Finite-difference step
        samples_per_tensor (int, optional): Coordinates per tensor; None checks all
        seed (int): Coordinate sampling seed
        analytic (Dict[str, torch.Tensor], optional): Gradients to check instead of autograd's
        floor (float): Denominator floor

    Returns:
        GradCheckReport: Per-tensor relative errors

    Example:
        report = grad_check(lambda: (w * x).sum(), {"w": w})
        assert report.passed
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise NumericalError(f"gradient check needs float64 tensors, {name} is {t.dtype}")

    if analytic is None:
        for t in tensors.values():
            t.grad = None
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
        analytic = {
            name: (g if g is not None else torch.zeros_like(t)).detach()
            for (name, t), g in zip(tensors.items(), grads)
        }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            n = flat.numel()
            if samples_per_tensor is None or samples_per_tensor >= n:
                coords: Sequence[int] = range(n)
            else:
                coords = rng.choice(n, size=samples_per_tensor, replace=False).tolist()
            a_vals, n_vals = [], []
            for k in coords:
                original = flat[k].item()
                flat[k] = original + h
                up = float(loss_fn())
                flat[k] = original - h
                down = float(loss_fn())
                flat[k] = original
                n_vals.append((up - down) / (2.0 * h))
                a_vals.append(float(analytic[name].reshape(-1)[k]))
            a_arr, n_arr = np.asarray(a_vals), np.asarray(n_vals)
            denom = max(np.abs(a_arr).max(), np.abs(n_arr).max(), floor)
            report.per_tensor[name] = float(np.abs(a_arr - n_arr).max() / denom)
            report.coordinates += len(a_vals)

    logger.debug("gradient check: max rel error %.3e over %d coordinates", report.max_rel_error, report.coordinates)
    return report
