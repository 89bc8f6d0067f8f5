"""Query tokens updated by loading word features and grouping pixel features.

Shapes below use B for optional leading batch axes, N tokens, L words,
P = H*W pixels, Ct token channels, Cl word channels, Cv visual channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm
from .params import kaiming_uniform
from .tensor import ContractError, Tensor

GROUPING_MODES = ("hard", "soft", "none")
AFFINITIES = ("cosine", "dot")
POOLINGS = ("mean", "sum")


@dataclass
class GroupAssignment:
    S_pixel: Tensor      # (B, N, P) affinities
    S_gumbel: Tensor     # (B, N, P) softmax over tokens
    S_onehot: np.ndarray  # (B, P, N) hard one-hot per pixel
    S_mask: Tensor       # (B, N, P) what actually pools the pixels
    tau: Tensor
    G: np.ndarray        # (B, N, P) Gumbel noise used (zeros at eval)

    def labels(self) -> np.ndarray:
        """Token index owning each pixel, shape (B, P)."""
        return self.S_onehot.argmax(axis=-1)


def load_block(T_prev, F, W_q, W_k, W_v, W_c) -> Tensor:
    """Single-head cross-attention from tokens (B,N,Ct) to words (B,L,Cl)."""
    c_l = F.shape[-1]
    q = T.matmul(T_prev, W_q)
    k = T.matmul(F, W_k)
    v = T.matmul(F, W_v)
    att = T.softmax(T.matmul(q, k.T) * (1.0 / math.sqrt(c_l)), axis=-1)
    return T.matmul(T.matmul(att, v), W_c)


def onehot_argmax(scores: np.ndarray) -> np.ndarray:
    """(B, N, P) scores -> (B, P, N) one-hot of the argmax over N.

    ``np.argmax`` returns the first maximum, so ties go to the lowest token index.
    """
    idx = scores.argmax(axis=-2)
    n = scores.shape[-2]
    return (idx[..., None] == np.arange(n)).astype(np.float64)


def hard_assign(S_gumbel: Tensor) -> tuple[np.ndarray, Tensor]:
    """Straight-through hard assignment.

    Forward value is exactly the transposed one-hot; the backward pass sees
    ``S_gumbel``. Written as onehot + (S_gumbel - sg(S_gumbel)) so the inner
    difference is exactly zero and the forward stays bit-exact 0/1.
    """
    onehot = T.nondiff(onehot_argmax(S_gumbel.data))
    S_onehot_T = T.swapaxes(onehot, -1, -2)
    return onehot.data, S_onehot_T + (S_gumbel - T.stop_gradient(S_gumbel))


def pool_groups(S_mask, D_p, pooling: str = "sum") -> Tensor:
    """S_mask @ D', optionally divided by (pixels per token + 1).

    The ``mean`` form keeps token updates at feature scale whatever the map size.
    """
    pooled = T.matmul(S_mask, D_p)
    if pooling == "sum":
        return pooled
    if pooling != "mean":
        raise ContractError(f"unknown pooling {pooling!r}")
    return pooled / (T.tsum(S_mask, axis=-1, keepdims=True) + 1.0)


def group_block(T_lang, D, W_t, W_d, mlp, tau, G=None, mode: str = "hard",
                affinity: str = "cosine", pooling: str = "sum") -> tuple[Tensor, GroupAssignment]:
    """Group pixel features of ``D`` (B,H,W,Cv) into tokens ``T_lang`` (B,N,Ct).

    Returns the updated tokens MLP(S_mask @ D') + T' and the assignment bundle.
    ``mode='none'`` swaps grouping for plain cross-attention pooling over pixels.
    """
    if mode not in GROUPING_MODES:
        raise ContractError(f"unknown grouping mode {mode!r}")
    if affinity not in AFFINITIES:
        raise ContractError(f"unknown affinity {affinity!r}")
    h, w, cv = D.shape[-3:]
    flat = T.reshape(D, D.shape[:-3] + (h * w, cv))
    T_p = T.matmul(T_lang, W_t)
    D_p = T.matmul(flat, W_d)
    if mode == "none":
        scores = T.matmul(T_p, D_p.T) * (1.0 / math.sqrt(T_p.shape[-1]))
        att = T.softmax(scores, axis=-1)
        noise = np.zeros(scores.shape)
        assign = GroupAssignment(scores, att, onehot_argmax(att.data), att, T.as_tensor(tau), noise)
        return mlp(T.matmul(att, D_p)) + T_p, assign

    if affinity == "cosine":
        S_pixel = T.matmul(T.l2_normalize(T_p, axis=-1), T.l2_normalize(D_p, axis=-1).T)
    else:
        S_pixel = T.matmul(T_p, D_p.T)
    noise = np.zeros(S_pixel.shape) if G is None else np.asarray(G.data if isinstance(G, Tensor) else G)
    logits = S_pixel + T.nondiff(noise) if G is not None else S_pixel
    S_gumbel = T.softmax(logits / tau, axis=-2)
    if mode == "hard":
        S_onehot, S_mask = hard_assign(S_gumbel)
    else:
        S_onehot, S_mask = onehot_argmax(S_gumbel.data), S_gumbel
    assign = GroupAssignment(S_pixel, S_gumbel, S_onehot, S_mask, T.as_tensor(tau), noise)
    return mlp(pool_groups(S_mask, D_p, pooling)) + T_p, assign


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class GroupTransformerLayer:
    """Pre-norm layer: load words, group pixels, feed-forward; all residual."""

    def __init__(self, store, rng, name: str, c_t: int, c_l: int, c_v: int, mode: str = "hard",
                 affinity: str = "cosine", tau_mode: str = "learnable", tau_init: float = 1.0,
                 pooling: str = "sum"):
        self.mode, self.affinity, self.pooling = mode, affinity, pooling
        self.ln_load = LayerNorm(store, f"{name}.ln_load", c_t)
        self.W_q = store.add(f"{name}.load.W_q", kaiming_uniform(rng, (c_t, c_t), c_t))
        self.W_k = store.add(f"{name}.load.W_k", kaiming_uniform(rng, (c_l, c_t), c_l))
        self.W_v = store.add(f"{name}.load.W_v", kaiming_uniform(rng, (c_l, c_t), c_l))
        self.W_c = store.add(f"{name}.load.W_c", kaiming_uniform(rng, (c_t, c_t), c_t))
        self.ln_group = LayerNorm(store, f"{name}.ln_group", c_t)
        self.W_t = store.add(f"{name}.group.W_t", kaiming_uniform(rng, (c_t, c_t), c_t))
        self.W_d = store.add(f"{name}.group.W_d", kaiming_uniform(rng, (c_v, c_t), c_v))
        self.group_mlp = MLP(store, f"{name}.group.mlp", c_t, c_t, c_t, rng)
        if tau_mode == "learnable":
            self.tau_param = store.add(f"{name}.group.tau_raw", np.array([_softplus_inv(tau_init)]))
            self._fixed_tau = None
        elif tau_mode.startswith("fixed:"):
            self.tau_param = None
            self._fixed_tau = float(tau_mode.split(":", 1)[1])
            if self._fixed_tau <= 0:
                raise ContractError("fixed temperature must be positive")
        else:
            raise ContractError(f"unknown tau mode {tau_mode!r}")
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", c_t)
        self.ffn = MLP(store, f"{name}.ffn", c_t, 2 * c_t, c_t, rng)

    def tau(self) -> Tensor:
        if self.tau_param is None:
            return T.Tensor(np.array([self._fixed_tau]))
        return T.softplus(self.tau_param)

    def load(self, T_prev, F) -> Tensor:
        return load_block(T_prev, F, self.W_q, self.W_k, self.W_v, self.W_c)

    def group(self, T_lang, D, G=None):
        return group_block(T_lang, D, self.W_t, self.W_d, self.group_mlp, self.tau(), G,
                           mode=self.mode, affinity=self.affinity, pooling=self.pooling)

    def __call__(self, T_prev, D, F, rng=None, train_mode: bool = False):
        """Returns (tokens, assignment). Gumbel noise is drawn only when training."""
        tok = T_prev + self.load(self.ln_load(T_prev), F)
        G = None
        if train_mode and self.mode != "none":
            n = tok.shape[-2]
            lead = np.broadcast_shapes(tok.shape[:-2], D.shape[:-3])
            G = T.gumbel_sample(rng, lead + (n, D.shape[-3] * D.shape[-2])).data
        upd, assign = self.group(self.ln_group(tok), D, G)
        tok = tok + upd
        tok = tok + self.ffn(self.ln_ffn(tok))
        return tok, assign
