"""Standard depth evaluation metrics and scale/shift alignment."""

from dataclasses import dataclass

import numpy as np

from .camera import DepthMap
from .errors import DegenerateInputError, DomainError

DEPTH_CLAMP = (1e-3, 300.0)


@dataclass(frozen=True)
class DepthMetrics:
    absrel: float
    rms: float
    rms_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def to_dict(self) -> dict:
        return {
            "absrel": self.absrel, "rms": self.rms, "rms_log": self.rms_log,
            "log10": self.log10, "delta1": self.delta1, "delta2": self.delta2,
            "delta3": self.delta3, "n_valid": self.n_valid,
        }


def depth_metrics(pred: np.ndarray, gt: DepthMap,
                  clamp: tuple = DEPTH_CLAMP) -> DepthMetrics:
    """Evaluate pred against gt over gt's valid pixels.

    Ground truth outside ``clamp`` is excluded; predictions are clipped
    into the clamp range (so non-positive predictions are scored as the
    near limit rather than crashing the log metrics, and the pixel
    count is fixed by the ground truth alone). rms_log uses natural
    logs; delta_i is the fraction with max(p/g, g/p) < 1.25**i.
    """
    lo, hi = clamp
    if not (0 < lo < hi):
        raise DomainError("clamp must satisfy 0 < lo < hi")
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != (gt.height, gt.width):
        raise DomainError("prediction shape does not match ground truth")
    valid = gt.mask & (gt.values >= lo) & (gt.values <= hi)
    if not valid.any():
        raise DegenerateInputError("no valid pixels to evaluate")
    if not np.isfinite(p[valid]).all():
        raise DomainError("prediction contains non-finite values")
    g = gt.values[valid]
    pc = np.clip(p[valid], lo, hi)
    diff = pc - g
    log_diff = np.log(pc) - np.log(g)
    ratio = np.maximum(pc / g, g / pc)
    return DepthMetrics(
        absrel=float(np.mean(np.abs(diff) / g)),
        rms=float(np.sqrt(np.mean(diff ** 2))),
        rms_log=float(np.sqrt(np.mean(log_diff ** 2))),
        log10=float(np.mean(np.abs(log_diff)) / np.log(10.0)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(valid.sum()),
    )


@dataclass
class AlignResult:
    scale: float
    shift: float
    values: np.ndarray      # aligned prediction, full map
    mask: np.ndarray        # valid evaluation pixels with positive aligned depth
    n_nonpositive: int      # valid pixels dropped because alignment made them <= 0


def align_scale_shift(pred: np.ndarray, gt: DepthMap,
                      clamp: tuple = DEPTH_CLAMP) -> AlignResult:
    """Least-squares fit aligned = scale * pred + shift to gt.

    Solves the 2x2 normal equations over the clamped-valid pixels.
    Useful for scoring affine-invariant predictions with metric
    metrics. Pixels whose aligned value is non-positive are removed
    from the returned mask and counted, since log metrics cannot score
    them. A constant prediction makes the system singular and raises.
    """
    lo, hi = clamp
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != (gt.height, gt.width):
        raise DomainError("prediction shape does not match ground truth")
    valid = gt.mask & (gt.values >= lo) & (gt.values <= hi) & np.isfinite(p)
    n = int(valid.sum())
    if n < 2:
        raise DegenerateInputError("need at least two valid pixels to align")
    pv = p[valid]
    gv = gt.values[valid]
    sp = pv.sum()
    spp = (pv * pv).sum()
    det = n * spp - sp * sp
    if det <= 1e-12 * max(1.0, spp) * n:
        raise DegenerateInputError("prediction is constant; alignment is singular")
    spg = (pv * gv).sum()
    sg = gv.sum()
    scale = (n * spg - sp * sg) / det
    shift = (sg * spp - sp * spg) / det
    aligned = scale * p + shift
    pos = aligned > 0
    out_mask = valid & pos
    return AlignResult(float(scale), float(shift), aligned, out_mask,
                       int((valid & ~pos).sum()))
