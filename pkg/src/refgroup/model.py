"""Full referring-segmentation network assembled from the building blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import STAGES, DecoderState, Fuse, MaskHead, forward_full, predict_mask
from .encoders import FeaturePyramid, ImageEncoder, TextEncoder
from .grouping import GroupTransformerLayer
from .nn import Linear
from .objectives import LossReport, contrastive_loss, segmentation_loss, token_similarities, total_loss
from .params import ParamStore
from .rng import Rng
from .synth import EXPR_LEN, vocabulary


@dataclass
class Output:
    pyramid: FeaturePyramid
    F: T.Tensor
    e: T.Tensor
    state: DecoderState
    e_proj: T.Tensor | None


class RefSegModel:
    def __init__(self, config: RunConfig, vocab_size: int | None = None, max_len: int = EXPR_LEN):
        self.config = config
        mc = config.model
        self.store = ParamStore()
        init = Rng(config.train.seed, "init")
        cv = {i + 1: c for i, c in enumerate(mc.visual_dims)}
        self.vocab_size = vocab_size or len(vocabulary())
        self.image_encoder = ImageEncoder(self.store, init.child("image"), mc.visual_dims,
                                          coords=mc.coords == "on")
        self.text_encoder = TextEncoder(self.store, init.child("text"), self.vocab_size, max_len, mc.text_dim)
        self.n_tokens = config.effective_tokens()
        self.decoder_mode = config.decoder.mode
        self.stages = STAGES if mc.stages == "multi" else (4,)
        self.tokens = None
        if self.n_tokens:
            self.tokens = self.store.add("tokens", init.child("tokens").normal((self.n_tokens, mc.token_dim)))
        self.fuse = {i: Fuse(self.store, init.child(f"fuse{i}"), f"decoder.fuse{i}", cv[i], cv[i - 1])
                     for i in STAGES}
        self.layers, self.heads = {}, {}
        head_in = mc.token_dim if self.n_tokens else mc.text_dim
        for i in self.stages:
            if self.n_tokens:
                self.layers[i] = GroupTransformerLayer(
                    self.store, init.child(f"layer{i}"), f"decoder.layer{i}", mc.token_dim, mc.text_dim, cv[i],
                    mode=mc.grouping, affinity=mc.affinity, pooling=mc.pooling,
                    tau_mode=config.tau.mode, tau_init=config.tau.init)
            self.heads[i] = MaskHead(self.store, init.child(f"head{i}"), f"decoder.head{i}", head_in, cv[i])
        self.use_contrastive = config.loss.contrastive == "on" and self.n_tokens >= 2
        self.e_proj = None
        if self.n_tokens:
            # kept even when the contrastive term is off, so referent accuracy stays defined
            self.e_proj = Linear(self.store, "contrastive.proj", mc.text_dim, mc.token_dim, init.child("proj"))

    def forward(self, images, expressions, rng: Rng | None = None, train_mode: bool = False) -> Output:
        pyr = self.image_encoder(images)
        F, e = self.text_encoder(expressions)
        state = forward_full(self, pyr, F, self.tokens, rng, train_mode, e=e)
        e_proj = self.e_proj(e) if self.e_proj is not None else None
        return Output(pyr, F, e, state, e_proj)

    def losses(self, out: Output, gt) -> LossReport:
        seg = segmentation_loss(out.state, gt, self.config.loss.dice_eps)
        per_stage = [seg[i] for i in sorted(seg)]
        if self.use_contrastive:
            l_cl = contrastive_loss(out.state.T[out.state.final_stage], out.e_proj,
                                    self.config.loss.mode, self.config.loss.temperature)
        else:
            l_cl = T.Tensor(np.zeros(per_stage[0].shape))
        return total_loss(l_cl, per_stage)

    def referent_scores(self, out: Output) -> np.ndarray | None:
        if self.n_tokens < 2:
            return None
        return token_similarities(out.state.T[out.state.final_stage], out.e_proj,
                                  self.config.loss.temperature).data

    def predict(self, out: Output, h: int, w: int) -> np.ndarray:
        return predict_mask(out.state, h, w, self.config.train.threshold)
