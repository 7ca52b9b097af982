# utils/schedule.py
"""
TriggerTune - Learning-Rate Schedule
Linear warmup, linear decay, then floored exponential decay
"""
from models.config import LrSchedule


def lr_at(epoch: float, sched: LrSchedule = LrSchedule()) -> float:
    """
    Learning rate at a (fractional) epoch

    Args:
        epoch (float): Position in [0, last_epoch]
        sched (LrSchedule): Knots and rates

    Returns:
        float: Learning rate, never below sched.min_lr

    Example:
        lr_at(2.0)   # 1e-3
        lr_at(27.0)  # 7e-4
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if epoch <= sched.warmup_end_epoch:
        lr = sched.peak * epoch / sched.warmup_end_epoch
    elif epoch <= sched.linear_end_epoch:
        frac = (epoch - sched.warmup_end_epoch) / (sched.linear_end_epoch - sched.warmup_end_epoch)
        lr = sched.peak + frac * (sched.linear_end_value - sched.peak)
    else:
        lr = sched.linear_end_value * sched.exp_factor ** (epoch - sched.linear_end_epoch)
    return max(lr, sched.min_lr)
