"""Training objectives: referent-token contrastive loss and multi-stage dice + BCE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderState, nearest_resize
from .tensor import ContractError, Tensor

LOSS_MODES = ("as-written", "infonce")


def token_similarities(T4, e_proj, temperature: float = 0.1) -> Tensor:
    """cos(T4^(n), e) / temperature for every token n. (B,N,C),(B,C) -> (B,N)."""
    tn = T.l2_normalize(T4, axis=-1)
    en = T.l2_normalize(e_proj, axis=-1)
    sims = T.matmul(tn, T.expand_dims(en, -1))
    return T.reshape(sims, sims.shape[:-1]) * (1.0 / temperature)


def contrastive_from_similarities(s, mode: str = "as-written") -> Tensor:
    """Token 0 is the referent. ``as-written`` omits it from the denominator."""
    if mode not in LOSS_MODES:
        raise ContractError(f"unknown contrastive mode {mode!r}")
    n = s.shape[-1]
    if n < 2:
        raise ContractError(f"contrastive loss needs at least 2 tokens, got {n}")
    denom = s[..., 1:] if mode == "as-written" else s
    return T.logsumexp(denom, axis=-1) - s[..., 0]


def contrastive_loss(T4, e_proj, mode: str = "as-written", temperature: float = 0.1) -> Tensor:
    if T4.shape[-2] < 2:
        raise ContractError(f"contrastive loss needs at least 2 tokens, got {T4.shape[-2]}")
    return contrastive_from_similarities(token_similarities(T4, e_proj, temperature), mode)


def dice_loss(p, g, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps) over the last two axes."""
    p, g = T.as_tensor(p), T.as_tensor(g)
    if p.shape[-2:] != g.shape[-2:]:
        raise ContractError(f"dice_loss: shapes {p.shape} and {g.shape} differ")
    inter = T.tsum(p * g, axis=(-2, -1))
    total = T.tsum(p, axis=(-2, -1)) + T.tsum(g, axis=(-2, -1))
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def bce_with_logits(logits, g) -> Tensor:
    """Mean binary cross-entropy over the last two axes, from logits."""
    logits, g = T.as_tensor(logits), T.as_tensor(g)
    per_pixel = -(g * T.log_sigmoid(logits) + (1.0 - g) * T.log_sigmoid(-logits))
    return T.mean(per_pixel, axis=(-2, -1))


def bce_loss(p, g) -> Tensor:
    """Mean BCE from probabilities; converted to logits internally."""
    p = T.as_tensor(p)
    return bce_with_logits(T.log(p) - T.log(1.0 - p), g)


def downsample_mask(gt: np.ndarray, h: int, w: int) -> np.ndarray:
    return nearest_resize(np.asarray(gt, dtype=np.float64), h, w)


def segmentation_loss(state: DecoderState, gt, dice_eps: float = 1.0) -> dict[int, Tensor]:
    """dice + BCE on the referent channel at every supervised stage."""
    out = {}
    for i, logits in state.logits.items():
        h, w = logits.shape[-2:]
        g = downsample_mask(gt, h, w)
        ref_logits = logits[..., 0, :, :]
        out[i] = dice_loss(state.Z[i][..., 0, :, :], g, dice_eps) + bce_with_logits(ref_logits, g)
    return out


@dataclass
class LossReport:
    l_cl: Tensor
    l_seg_per_stage: list[Tensor]
    l_total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"l_cl": float(np.mean(self.l_cl.data)),
                "l_seg": float(sum(np.mean(t.data) for t in self.l_seg_per_stage)),
                "l_total": float(np.mean(self.l_total.data))}


def total_loss(l_cl, l_seg) -> LossReport:
    """Unweighted sum of the contrastive term and every segmentation term."""
    l_cl = T.as_tensor(l_cl)
    l_seg = [T.as_tensor(x) for x in l_seg]
    tot = l_cl
    for x in l_seg:
        tot = tot + x
    return LossReport(l_cl, l_seg, tot)
