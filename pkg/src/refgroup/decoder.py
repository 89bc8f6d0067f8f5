"""Coarse-to-fine decoding: fuse maps, update tokens per stage, decode masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import FeaturePyramid
from .grouping import GroupAssignment
from .nn import MLP, ConvNormAct, LayerNorm
from .tensor import ShapeError, Tensor

STAGES = (2, 3, 4)


@dataclass
class DecoderState:
    """Per-stage results, keyed by stage index 1..4."""
    D: dict[int, Tensor] = field(default_factory=dict)
    T: dict[int, Tensor] = field(default_factory=dict)
    logits: dict[int, Tensor] = field(default_factory=dict)
    Z: dict[int, Tensor] = field(default_factory=dict)
    A: dict[int, GroupAssignment] = field(default_factory=dict)

    @property
    def final_stage(self) -> int:
        return max(self.Z)


class Fuse:
    """D_i = ReLU(LN(Conv3x3([V_i ; up2(D_prev)])))."""

    def __init__(self, store, rng, name, c_v: int, c_prev: int):
        self.block = ConvNormAct(store, name, c_v + c_prev, c_v, 3, rng, stride=1, pad=1)

    def __call__(self, V_i, D_prev) -> Tensor:
        if V_i.shape[-3] != 2 * D_prev.shape[-3] or V_i.shape[-2] != 2 * D_prev.shape[-2]:
            raise ShapeError(f"fuse: previous map {D_prev.shape} is not half the size of {V_i.shape}")
        up = T.upsample2x(D_prev)
        lead = np.broadcast_shapes(V_i.shape[:-3], up.shape[:-3])
        V_i = _broadcast_lead(V_i, lead)
        up = _broadcast_lead(up, lead)
        return self.block(T.concat([V_i, up], axis=-1))


def _broadcast_lead(x: Tensor, lead: tuple) -> Tensor:
    if x.shape[:-3] == lead:
        return x
    return x + T.Tensor(np.zeros(lead + x.shape[-3:]))


def dynamic_conv_logits(kernels, D) -> Tensor:
    """1x1 dynamic convolution. ``kernels`` (B,N,Cv+1) with bias last; ``D`` (B,H,W,Cv) -> (B,N,H,W)."""
    h, w, cv = D.shape[-3:]
    if kernels.shape[-1] != cv + 1:
        raise ShapeError(f"dynamic kernels {kernels.shape} do not match map channels {cv}")
    weight = kernels[..., :cv]
    bias = kernels[..., cv:]
    flat = T.reshape(D, D.shape[:-3] + (h * w, cv))
    logits = T.matmul(weight, flat.T) + bias
    return T.reshape(logits, logits.shape[:-1] + (h, w))


class MaskHead:
    """Per-token kernels W^(n) = MLP(LN(T^(n))); Z^(n) = sigmoid(conv_{W^(n)}(D)).

    The LayerNorm closes the pre-norm residual stream; grouped tokens carry
    pixel sums whose scale grows with the map size.
    """

    def __init__(self, store, rng, name, c_in: int, c_v: int):
        self.norm = LayerNorm(store, f"{name}.norm", c_in)
        self.mlp = MLP(store, f"{name}.mlp", c_in, c_in, c_v + 1, rng)

    def kernels(self, tokens) -> Tensor:
        return self.mlp(self.norm(tokens))

    def __call__(self, tokens, D) -> tuple[Tensor, Tensor]:
        logits = dynamic_conv_logits(self.kernels(tokens), D)
        return logits, T.sigmoid(logits)


def mask_head(head: MaskHead, T_i, D_i) -> Tensor:
    return head(T_i, D_i)[1]


def forward_full(model, pyramid: FeaturePyramid, F, T_init, rng=None, train_mode=False,
                 e=None) -> DecoderState:
    """Run the three decoding stages.

    ``model`` supplies ``fuse``/``layers``/``heads`` dicts keyed by stage and the
    mode flags ``decoder_mode`` ('consecutive'|'parallel') and ``stages``.
    With ``T_init`` None the heads take kernels from the sentence embedding ``e``.
    """
    st = DecoderState()
    st.D[1] = pyramid[0]
    st.T[1] = T_init
    for i in STAGES:
        prev = st.D[i - 1] if model.decoder_mode == "consecutive" else pyramid[i - 2]
        st.D[i] = model.fuse[i](pyramid[i - 1], prev)
    for i in model.stages:
        if T_init is None:
            tok = T.expand_dims(e, -2)
        else:
            src = st.T[i - 1] if (model.decoder_mode == "consecutive" and (i - 1) in st.T) else st.T[1]
            sub = rng.child(f"stage{i}") if rng is not None else None
            tok, st.A[i] = model.layers[i](src, st.D[i], F, sub, train_mode)
        st.T[i] = tok
        st.logits[i], st.Z[i] = model.heads[i](tok, st.D[i])
    return st


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize over the last two axes."""
    h, w = x.shape[-2:]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return x[..., rows[:, None], cols[None, :]]


def predict_mask(state: DecoderState, out_h: int, out_w: int, threshold: float = 0.5) -> np.ndarray:
    """Binary mask from the referent token's final-stage probabilities (strict > threshold)."""
    z = state.Z[state.final_stage].data[..., 0, :, :]
    return nearest_resize(z, out_h, out_w) > threshold
