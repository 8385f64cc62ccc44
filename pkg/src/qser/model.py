"""Full model assembly: quartet standardization, the quaternion encoder,
both pooling/alignment branches, adapters, fusion and the classifier.

The model exposes the two training objectives directly.  Stage 1
(``stage1_loss``/``stage1_backward``) aligns the vocal and latent branch
projections with the bidirectional InfoNCE loss.  Stage 2
(``stage2_loss``/``stage2_backward``) runs both branches through the
adapters, the 2-token fusion encoder and the classifier head under
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import AttentionPool, InfoNCE, ProjectionHead
from .dsp import CHANNEL_NAMES
from .errors import ShapeMismatch
from .fusion import ClassifierHead, FusionEncoder, cross_entropy
from .latent import STUB_DIM, LatentTransform
from .nnbase import Linear, Param
from .qnn import QseConfig, QseEncoder

# accepted --zero-channel spellings -> plane index
CHANNEL_ALIASES = {"M": 0, "rho": 1, "finst": 2, "f_inst": 2,
                   "taug": 3, "tau_g": 3}


@dataclass
class ModelConfig:
    num_classes: int = 4
    num_bins: int = 257
    latent_dim: int = STUB_DIM
    qse: QseConfig = field(default_factory=QseConfig)
    d_align: int = 256
    head_hidden: int = 512
    temperature: float = 0.25
    fusion_dim: int = 256
    fusion_heads: int = 4
    fusion_depth: int = 1
    classifier_hidden: int = 128
    zero_channel: str | None = None   # M | rho | finst | taug

    def __post_init__(self):
        if self.zero_channel is not None \
                and self.zero_channel not in CHANNEL_ALIASES:
            raise ValueError(f"unknown channel {self.zero_channel!r}; "
                             f"expected one of {sorted(CHANNEL_ALIASES)}")


class SerModel:
    """Owns every trainable parameter plus the persisted statistics."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.qse = QseEncoder(cfg.qse, cfg.num_bins, rng, dtype=dtype)
        d_vocal = self.qse.out_dim
        self.pool_vocal = AttentionPool(d_vocal, rng, dtype=dtype)
        self.pool_latent = AttentionPool(cfg.latent_dim, rng, dtype=dtype)
        self.latent_transform = LatentTransform(cfg.latent_dim, rng,
                                                dtype=dtype)
        self.head_vocal = ProjectionHead(d_vocal, cfg.head_hidden,
                                         cfg.d_align, rng, dtype=dtype)
        self.head_latent = ProjectionHead(cfg.latent_dim, cfg.head_hidden,
                                          cfg.d_align, rng, dtype=dtype)
        self.infonce = InfoNCE(cfg.temperature)
        self.adapter_vocal = Linear(d_vocal, cfg.fusion_dim, rng)
        self.adapter_latent = Linear(cfg.latent_dim, cfg.fusion_dim, rng)
        self.fusion = FusionEncoder(cfg.fusion_dim, cfg.fusion_heads,
                                    cfg.fusion_depth, rng=rng, dtype=dtype)
        self.classifier = ClassifierHead(cfg.fusion_dim,
                                         cfg.classifier_hidden,
                                         cfg.num_classes, rng, dtype=dtype)
        # per-channel input standardization, fitted on the training split;
        # statistics are kept per frequency bin so that structural
        # per-bin offsets (f_inst bin centres, tau_g clip plateaus) do
        # not swamp the informative within-bin variation
        self.stand_mean = np.zeros((4, cfg.num_bins), dtype=np.float64)
        self.stand_std = np.ones((4, cfg.num_bins), dtype=np.float64)
        self.cast(dtype)

    # -- parameter bookkeeping ---------------------------------------------

    def _components(self):
        return {
            "qse": self.qse,
            "pool_vocal": self.pool_vocal,
            "pool_latent": self.pool_latent,
            "latent_transform": self.latent_transform,
            "head_vocal": self.head_vocal,
            "head_latent": self.head_latent,
            "adapter_vocal": self.adapter_vocal,
            "adapter_latent": self.adapter_latent,
            "fusion": self.fusion,
            "head": self.classifier,
        }

    def params(self) -> dict[str, Param]:
        out = {}
        for cname, comp in self._components().items():
            for pname, p in comp.params().items():
                out[f"{cname}.{pname}"] = p
        return out

    def stage1_params(self):
        names = ("qse", "pool_vocal", "pool_latent", "latent_transform",
                 "head_vocal", "head_latent")
        return self._subset(names)

    def stage2_params(self, freeze_vocal=False):
        names = ("adapter_vocal", "adapter_latent", "fusion", "head",
                 "latent_transform", "pool_latent")
        if not freeze_vocal:
            names += ("qse", "pool_vocal")
        return self._subset(names)

    def _subset(self, component_names):
        out = {}
        for cname in component_names:
            for pname, p in self._components()[cname].params().items():
                out[f"{cname}.{pname}"] = p
        return out

    def zero_grad(self):
        for comp in self._components().values():
            comp.zero_grad()

    def cast(self, dtype):
        """Cast all parameters and running statistics in place."""
        self.dtype = np.dtype(dtype)
        for p in self.params().values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for blk in self.qse.blocks:
            blk.bn.running_mean = blk.bn.running_mean.astype(dtype)
            blk.bn.running_var = blk.bn.running_var.astype(dtype)
        return self

    # -- persisted arrays beyond trainable parameters ----------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.params().items()}
        for l, blk in enumerate(self.qse.blocks):
            out[f"qse.block{l}.bn.running_mean"] = blk.bn.running_mean
            out[f"qse.block{l}.bn.running_var"] = blk.bn.running_var
        out["standardize.mean"] = self.stand_mean
        out["standardize.std"] = self.stand_std
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        for name, p in params.items():
            if name not in arrays:
                raise ShapeMismatch(f"checkpoint missing array {name!r}")
            val = np.asarray(arrays[name])
            if val.shape != p.value.shape:
                raise ShapeMismatch(
                    f"{name}: checkpoint shape {val.shape}, "
                    f"model shape {p.value.shape}")
            p.value = val.astype(self.dtype)
        for l, blk in enumerate(self.qse.blocks):
            blk.bn.running_mean = np.asarray(
                arrays[f"qse.block{l}.bn.running_mean"]).astype(self.dtype)
            blk.bn.running_var = np.asarray(
                arrays[f"qse.block{l}.bn.running_var"]).astype(self.dtype)
        self.stand_mean = np.asarray(arrays["standardize.mean"],
                                     dtype=np.float64)
        self.stand_std = np.asarray(arrays["standardize.std"],
                                    dtype=np.float64)
        return self

    # -- input standardization ---------------------------------------------

    def fit_standardization(self, batches):
        """Per-channel, per-bin mean/std over the valid frames of
        (planes, mask) pairs; bins with no spread fall back to unit
        scale."""
        nb = self.cfg.num_bins
        s = np.zeros((4, nb))
        ss = np.zeros((4, nb))
        n = 0.0
        for planes, mask in batches:
            bi, ti = (np.asarray(mask) > 0).nonzero()
            sel = np.asarray(planes, dtype=np.float64)[bi, :, ti, :]
            # sel: (N_valid, 4, F)
            s += sel.sum(axis=0)
            ss += (sel * sel).sum(axis=0)
            n += sel.shape[0]
        mean = s / n
        var = np.maximum(ss / n - mean * mean, 0.0)
        std = np.sqrt(var)
        std[std < 1e-8] = 1.0
        self.stand_mean = mean
        self.stand_std = std
        return mean, std

    def standardize(self, planes, mask):
        """(x - mu) / sigma per channel and bin; padded frames stay
        exactly zero; the ablated channel (if any) is zeroed."""
        x = (np.asarray(planes, dtype=self.dtype)
             - self.stand_mean.astype(self.dtype)[None, :, None, :]) \
            / self.stand_std.astype(self.dtype)[None, :, None, :]
        if self.cfg.zero_channel is not None:
            x[:, CHANNEL_ALIASES[self.cfg.zero_channel]] = 0.0
        return x * np.asarray(mask, dtype=self.dtype)[:, None, :, None]

    # -- branch forwards ----------------------------------------------------

    def _vocal_branch(self, planes, mask, training):
        x = self.standardize(planes, mask)
        seq = self.qse.forward(x, mask, training)
        z, _ = self.pool_vocal.forward(seq, mask)
        return z

    def _latent_branch(self, latents, latent_mask):
        e = self.latent_transform.forward(
            np.asarray(latents, dtype=self.dtype), latent_mask)
        z, _ = self.pool_latent.forward(e, latent_mask)
        return z

    # -- stage 1: contrastive alignment ------------------------------------

    def stage1_loss(self, planes, mask, latents, latent_mask, training=True):
        z_v = self._vocal_branch(planes, mask, training)
        z_l = self._latent_branch(latents, latent_mask)
        U = self.head_vocal.forward(z_v)
        V = self.head_latent.forward(z_l)
        return self.infonce.forward(U, V)

    def stage1_backward(self):
        gU, gV = self.infonce.backward()
        g_seq = self.pool_vocal.backward(self.head_vocal.backward(gU))
        self.qse.backward(g_seq)
        g_e = self.pool_latent.backward(self.head_latent.backward(gV))
        self.latent_transform.backward(g_e)

    # -- stage 2: supervised classification --------------------------------

    def logits(self, planes, mask, latents, latent_mask, training=False):
        z_v = self._vocal_branch(planes, mask, training)
        z_l = self._latent_branch(latents, latent_mask)
        a_v = self.adapter_vocal.forward(z_v)
        a_l = self.adapter_latent.forward(z_l)
        z_fuse = self.fusion.fuse(a_l, a_v)
        return self.classifier.forward(z_fuse)

    def stage2_loss(self, planes, mask, latents, latent_mask, labels,
                    training=True):
        lg = self.logits(planes, mask, latents, latent_mask, training)
        loss, grad_logits = cross_entropy(lg, labels)
        self._stage2_grad = grad_logits.astype(self.dtype)
        return loss, lg

    def stage2_backward(self, freeze_vocal=False):
        g_fuse = self.classifier.backward(self._stage2_grad)
        g_al, g_av = self.fusion.backward(g_fuse)
        g_zl = self.adapter_latent.backward(g_al)
        g_zv = self.adapter_vocal.backward(g_av)
        g_e = self.pool_latent.backward(g_zl)
        self.latent_transform.backward(g_e)
        g_seq = self.pool_vocal.backward(g_zv)
        if not freeze_vocal:
            self.qse.backward(g_seq)

    # -- inference ----------------------------------------------------------

    def predict(self, planes, mask, latents, latent_mask):
        lg = self.logits(planes, mask, latents, latent_mask, training=False)
        return np.argmax(lg, axis=1)

    def fused_embeddings(self, planes, mask, latents, latent_mask):
        z_v = self._vocal_branch(planes, mask, training=False)
        z_l = self._latent_branch(latents, latent_mask)
        a_v = self.adapter_vocal.forward(z_v)
        a_l = self.adapter_latent.forward(z_l)
        return self.fusion.fuse(a_l, a_v)
