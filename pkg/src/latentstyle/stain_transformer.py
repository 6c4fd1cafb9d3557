"""Feature-space stain transfer network.

``ST(F, s_j, s_k)`` maps a slide's patch features ``F`` (``[N, C]``),
extracted under style ``s_j``, to the features the same patches would have
under style ``s_k``. The style pair is z-scored against the style prior,
embedded by one linear layer, and used to route a dense mixture of FFN
experts inside each pre-norm transformer block::

    e = Linear(concat(z(s_j), z(s_k)))
    x = x + Attn(LN(x))
    x = x + GELU(sum_i softmax(Router(e))_i * Expert_i(LN(x)))

followed by a linear head initialised to the identity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bags import FeatureBag
from .nn import GELU, Adam, LayerNorm, Linear, Module, SelfAttention, l1_loss, softmax
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import softmax_backward
from .nn.optim import step_decay
from .style import StyleDescriptor
from .wsaug import StylePrior

log = logging.getLogger(__name__)


@dataclass
class STConfig:
    dim: int = 32
    n_layers: int = 2
    n_experts: int = 4
    hidden_mult: int = 2
    # init gain of the residual-branch output projections
    residual_gain: float = 0.1
    seed: int = 0


@dataclass
class STTrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    gamma: float = 0.98
    pairs_per_group: int = 1
    seed: int = 0


class StainEmbedder(Module):
    def __init__(self, dim: int, rng=None):
        self.proj = Linear(12, dim, rng)

    def forward(self, pair: np.ndarray) -> np.ndarray:
        if pair.shape[-1] != 12:
            raise ValueError(f"stain embedder takes 12 style inputs, got {pair.shape[-1]}")
        return self.proj.forward(pair)

    def backward(self, g):
        return self.proj.backward(g)


class Expert(Module):
    def __init__(self, dim: int, hidden: int, rng=None, out_gain: float = 1.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, rng, gain=out_gain)

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, g):
        return self.fc1.backward(self.act.backward(self.fc2.backward(g)))


class MoEFFN(Module):
    """Dense softmax mixture of FFN experts routed by the stain embedding."""

    def __init__(self, dim: int, n_experts: int, hidden: int, rng=None, out_gain: float = 1.0):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.experts = [Expert(dim, hidden, rng, out_gain) for _ in range(n_experts)]
        self.router = Linear(dim, n_experts, rng)
        self.act = GELU()

    def routing(self, e: np.ndarray) -> np.ndarray:
        return softmax(self.router.forward(e))

    def forward(self, h: np.ndarray, e: np.ndarray) -> np.ndarray:
        """``h``: ``[B, N, C]``; ``e``: ``[B, C]``."""
        w = self.routing(e)
        outs = np.stack([ex.forward(h) for ex in self.experts])  # [n, B, N, C]
        mixed = np.einsum("bi,ibnc->bnc", w, outs)
        self._w, self._outs = w, outs
        return self.act.forward(mixed)

    def backward(self, gy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        w, outs = self._w, self._outs
        gm = self.act.backward(gy)
        gw = np.einsum("bnc,ibnc->bi", gm, outs)
        ge = self.router.backward(softmax_backward(w, gw))
        gh = sum(ex.backward(w[:, i, None, None] * gm) for i, ex in enumerate(self.experts))
        return gh, ge


class Block(Module):
    def __init__(self, dim: int, n_experts: int, hidden: int, rng=None, residual_gain: float = 1.0):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, rng, out_gain=residual_gain)
        self.ln2 = LayerNorm(dim)
        self.moe = MoEFFN(dim, n_experts, hidden, rng, out_gain=residual_gain)

    def forward(self, x, e):
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.moe.forward(self.ln2.forward(x), e)

    def backward(self, g):
        gh, ge = self.moe.backward(g)
        g = g + self.ln2.backward(gh)
        g = g + self.ln1.backward(self.attn.backward(g))
        return g, ge


def _style_array(s) -> np.ndarray:
    if isinstance(s, StyleDescriptor):
        return s.to_array()
    if isinstance(s, (list, tuple)) and s and isinstance(s[0], StyleDescriptor):
        return np.stack([x.to_array() for x in s])
    return np.asarray(s, dtype=np.float64)


class StainTransformer(Module):
    def __init__(self, config: STConfig = None, prior: Optional[StylePrior] = None):
        self.config = config = config or STConfig()
        rng = np.random.default_rng(config.seed)
        c = config.dim
        self.embedder = StainEmbedder(c, rng)
        self.blocks = [
            Block(c, config.n_experts, config.hidden_mult * c, rng, config.residual_gain)
            for _ in range(config.n_layers)
        ]
        self.head = Linear(c, c, rng)
        self.head.W.value[...] = np.eye(c)
        self.set_prior(prior)

    def set_prior(self, prior: Optional[StylePrior]) -> None:
        if prior is None:
            self.style_mu, self.style_sd = np.zeros(6), np.ones(6)
        else:
            self.style_mu = prior.mu_array.copy()
            self.style_sd = np.where(prior.sigma_array > 0, prior.sigma_array, 1.0)

    def normalize_style(self, s) -> np.ndarray:
        return (_style_array(s) - self.style_mu) / self.style_sd

    def embed(self, s_j, s_k) -> np.ndarray:
        zj = np.atleast_2d(self.normalize_style(s_j))
        zk = np.atleast_2d(self.normalize_style(s_k))
        return self.embedder.forward(np.concatenate([zj, zk], axis=-1))

    def forward(self, F: np.ndarray, s_j, s_k) -> np.ndarray:
        """Transfer ``F`` (``[N, C]`` or ``[B, N, C]``) from ``s_j`` to ``s_k``."""
        F = np.asarray(F, dtype=np.float64)
        single = F.ndim == 2
        x = F[None] if single else F
        if x.shape[-1] != self.config.dim:
            raise ValueError(f"feature dim {x.shape[-1]} does not match model dim {self.config.dim}")
        if x.shape[-2] < 1:
            raise ValueError("need at least one patch")
        e = self.embed(s_j, s_k)
        if e.shape[0] != x.shape[0]:
            raise ValueError(f"{e.shape[0]} style pairs for a batch of {x.shape[0]} bags")
        for blk in self.blocks:
            x = blk.forward(x, e)
        y = self.head.forward(x)
        self._single = single
        return y[0] if single else y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        g = gy[None] if self._single else gy
        g = self.head.backward(g)
        ge = 0.0
        for blk in reversed(self.blocks):
            g, ge_b = blk.backward(g)
            ge = ge + ge_b
        self.embedder.backward(ge)
        return g[0] if self._single else g

    def routing_weights(self, s_j, s_k) -> List[np.ndarray]:
        e = self.embed(s_j, s_k)
        return [blk.moe.routing(e) for blk in self.blocks]

    def __call__(self, F, s_j, s_k):
        return self.forward(F, s_j, s_k)


def stain_embed(model: StainTransformer, s_j, s_k) -> np.ndarray:
    return model.embed(s_j, s_k)


def moe_forward(moe: MoEFFN, F: np.ndarray, e: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    out = moe.forward(F[None] if single else F, np.atleast_2d(e))
    return out[0] if single else out


def st_forward(model: StainTransformer, F, s_j, s_k) -> np.ndarray:
    return model.forward(F, s_j, s_k)


# --- training -----------------------------------------------------------------


@dataclass
class SlideGroup:
    """Aligned bags of one source slide: original plus restained copies.

    Row ``r`` of every bag derives from tile ``r`` of the source slide.
    """

    features: np.ndarray  # [M+1, N, C]
    styles: np.ndarray  # [M+1, 6]
    slide_id: str = ""

    @classmethod
    def from_bags(cls, bags: Sequence[FeatureBag]) -> "SlideGroup":
        shapes = {b.features.shape for b in bags}
        if len(shapes) != 1:
            raise ValueError(f"misaligned bag shapes within a group: {sorted(shapes)}")
        return cls(
            np.stack([b.features for b in bags]),
            np.stack([b.style.to_array() for b in bags]),
            bags[0].group_id,
        )

    def __post_init__(self):
        if self.features.ndim != 3 or self.styles.shape != (self.features.shape[0], 6):
            raise ValueError("group needs features [M+1, N, C] and styles [M+1, 6]")


def _batches_by_shape(items: List[Tuple[np.ndarray, ...]]):
    by_n = {}
    for it in items:
        by_n.setdefault(it[0].shape, []).append(it)
    for shape in sorted(by_n):
        yield [np.stack(col) for col in zip(*by_n[shape])]


def st_train(model: StainTransformer, groups: Sequence[SlideGroup], config: STTrainConfig = None,
             callback=None) -> List[float]:
    """Fit ``model`` with mean L1 between ``ST(F_j, s_j, s_k)`` and ``F_k``.

    Ordered pairs ``(j, k)`` are drawn uniformly from each group, ``j == k``
    included. Returns the per-epoch mean training loss.
    """
    cfg = config or STTrainConfig()
    if not groups:
        raise ValueError("no training groups")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    opt = Adam(model, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = step_decay(cfg.lr, epoch, cfg.gamma)
        order = rng.permutation(len(groups))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            items = []
            for gi in order[start:start + cfg.batch_size]:
                g = groups[gi]
                for _ in range(cfg.pairs_per_group):
                    j, k = rng.integers(0, g.features.shape[0], size=2)
                    items.append((g.features[j], g.features[k], g.styles[j], g.styles[k]))
            total = len(items)
            batch_loss = 0.0
            for src, tgt, sj, sk in _batches_by_shape(items):
                pred = model.forward(src, sj, sk)
                loss, grad = l1_loss(pred, tgt)
                share = src.shape[0] / total
                model.backward(grad * share)
                batch_loss += loss * share
            opt.step()
            losses.append(batch_loss)
            weights.append(total)
        history.append(float(np.average(losses, weights=weights)))
        if callback is not None:
            callback(epoch, history[-1])
        log.debug("st epoch %d lr %.3g loss %.5f", epoch, opt.lr, history[-1])
    return history


def st_evaluate_mae(model: StainTransformer, groups: Sequence[SlideGroup]) -> dict:
    """MAE before/after transfer over every ordered pair ``j != k``."""
    before, after = [], []
    for g in groups:
        m1 = g.features.shape[0]
        pairs = [(j, k) for j in range(m1) for k in range(m1) if j != k]
        if not pairs:
            continue
        js = np.array([p[0] for p in pairs])
        ks = np.array([p[1] for p in pairs])
        src, tgt = g.features[js], g.features[ks]
        pred = model.forward(src, g.styles[js], g.styles[ks])
        before.append(np.abs(src - tgt).mean(axis=(1, 2)))
        after.append(np.abs(pred - tgt).mean(axis=(1, 2)))
    if not before:
        raise ValueError("no (j, k) pairs with j != k to evaluate")
    return {
        "mae_before": float(np.concatenate(before).mean()),
        "mae_after": float(np.concatenate(after).mean()),
        "n_pairs": int(sum(len(b) for b in before)),
    }


# --- persistence --------------------------------------------------------------


def save_st(model: StainTransformer, path) -> None:
    meta = {
        "kind": "stain_transformer",
        "config": asdict(model.config),
        "style_mu": model.style_mu.tolist(),
        "style_sd": model.style_sd.tolist(),
    }
    save_checkpoint(path, model.state_dict(), meta)


def load_st(path) -> StainTransformer:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stain_transformer":
        raise ValueError(f"{path}: not a stain transformer checkpoint")
    model = StainTransformer(STConfig(**meta["config"]))
    model.style_mu = np.asarray(meta["style_mu"], dtype=np.float64)
    model.style_sd = np.asarray(meta["style_sd"], dtype=np.float64)
    model.load_state_dict(tensors)
    return model
