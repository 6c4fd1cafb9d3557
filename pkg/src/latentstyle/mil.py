"""Gated-attention MIL classifier trained with latent style augmentation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .bags import FeatureBag
from .nn import Adam, Linear, Module, Sigmoid, Tanh, cross_entropy, softmax
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import softmax_backward
from .nn.optim import cosine_decay
from .stain_transformer import StainTransformer
from .wsaug import StylePrior, sample_style

log = logging.getLogger(__name__)


class UndefinedAUCError(ValueError):
    pass


@dataclass
class MilConfig:
    dim: int = 32
    attn_dim: int = 16
    n_classes: int = 2
    seed: int = 0


@dataclass
class MilTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0


@dataclass
class LsaConfig:
    p: float = 0.5
    prior: Optional[StylePrior] = None
    st: Optional[StainTransformer] = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augmentation probability must be in [0, 1], got {self.p}")
        if self.p > 0 and (self.st is None or self.prior is None):
            raise ValueError("p > 0 needs a trained stain transformer and a style prior")


class GatedAttentionMIL(Module):
    """ABMIL: gated attention pooling followed by a linear head.

    Attention scores are ``w^T (tanh(V h) * sigmoid(U h))``, normalised with
    a softmax over the instances of each bag.
    """

    def __init__(self, config: MilConfig = None):
        self.config = cfg = config or MilConfig()
        rng = np.random.default_rng(cfg.seed)
        self.V = Linear(cfg.dim, cfg.attn_dim, rng)
        self.U = Linear(cfg.dim, cfg.attn_dim, rng)
        self.w = Linear(cfg.attn_dim, 1, rng)
        self.head = Linear(cfg.dim, cfg.n_classes, rng)
        self._tanh, self._sig = Tanh(), Sigmoid()

    def forward(self, F: np.ndarray):
        """``F``: ``[N, C]`` or ``[B, N, C]`` -> (logits ``[B, K]``, attention ``[B, N]``)."""
        x = np.asarray(F, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] < 1:
            raise ValueError("a bag needs at least one instance")
        t = self._tanh.forward(self.V.forward(x))
        s = self._sig.forward(self.U.forward(x))
        scores = self.w.forward(t * s)[..., 0]
        a = softmax(scores, axis=-1)
        pooled = np.einsum("bn,bnc->bc", a, x)
        logits = self.head.forward(pooled)
        self._x, self._t, self._s, self._a = x, t, s, a
        return logits, a

    def backward(self, glogits: np.ndarray) -> np.ndarray:
        x, t, s, a = self._x, self._t, self._s, self._a
        gpooled = self.head.backward(glogits)
        gx = a[..., None] * gpooled[:, None, :]
        ga = np.einsum("bc,bnc->bn", gpooled, x)
        gscores = softmax_backward(a, ga)
        gts = self.w.backward(gscores[..., None])
        gx += self.V.backward(self._tanh.backward(gts * s))
        gx += self.U.backward(self._sig.backward(gts * t))
        return gx

    def predict_proba(self, F: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(F)
        return softmax(logits)[:, 1]


def mil_forward(model: GatedAttentionMIL, F: np.ndarray):
    logits, a = model.forward(F)
    return logits, a[0] if np.ndim(F) == 2 else a


def lsa_augment(cfg: LsaConfig, bag: FeatureBag, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p`` restyle the bag's features towards a sampled style.

    One uniform draw decides; a style is drawn from the prior only when the
    augmentation fires. The stain transformer is used read-only.
    """
    if rng.random() >= cfg.p:
        return bag.features
    target = sample_style(cfg.prior, rng)
    return cfg.st.forward(bag.features, bag.style, target)


def _lsa_batch(cfg: LsaConfig, bags: Sequence[FeatureBag], rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`lsa_augment` with identical RNG consumption per bag."""
    feats = np.stack([b.features for b in bags])
    if cfg.p <= 0:
        return feats
    fired, targets = [], []
    for i in range(len(bags)):
        if rng.random() < cfg.p:
            fired.append(i)
            targets.append(sample_style(cfg.prior, rng).to_array())
    if fired:
        src_styles = np.stack([bags[i].style.to_array() for i in fired])
        feats = feats.copy()
        feats[fired] = cfg.st.forward(feats[fired], src_styles, np.stack(targets))
    return feats


def train_mil(model: GatedAttentionMIL, bags: Sequence[FeatureBag], lsa: LsaConfig = None,
              config: MilTrainConfig = None) -> List[float]:
    """Minimise cross-entropy with per-step latent style augmentation.

    Batch shuffling and augmentation draw from separate RNG streams, so
    changing ``p`` never changes the batch order. The learning rate follows
    a per-epoch cosine decay. Returns the per-epoch mean loss.
    """
    cfg = config or MilTrainConfig()
    lsa = lsa or LsaConfig(p=0.0)
    for b in bags:
        if b.label is None:
            raise ValueError(f"bag {b.slide_id!r} has no label")
    labels = np.array([int(b.label) for b in bags])
    shuffle_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    opt = Adam(model, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_decay(cfg.lr, epoch, cfg.epochs)
        order = shuffle_rng.permutation(len(bags))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            by_n = {}
            for i in idx:
                by_n.setdefault(bags[i].features.shape[0], []).append(i)
            batch_loss = 0.0
            for n in sorted(by_n):
                sub = by_n[n]
                x = _lsa_batch(lsa, [bags[i] for i in sub], aug_rng)
                logits, _ = model.forward(x)
                loss, grad = cross_entropy(logits, labels[sub])
                share = len(sub) / len(idx)
                model.backward(grad * share)
                batch_loss += loss * share
            opt.step()
            losses.append(batch_loss)
        history.append(float(np.mean(losses)))
        log.debug("mil epoch %d lr %.3g loss %.5f", epoch, opt.lr, history[-1])
    return history


# --- metrics ------------------------------------------------------------------


def mann_whitney_auc(scores, labels) -> float:
    """ROC AUC from the Mann-Whitney U statistic; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average 1-based ranks over tie blocks, kept as doubled integers to stay exact
    ranks2 = np.empty(len(scores), dtype=np.int64)
    start = 0
    n = len(scores)
    while start < n:
        end = start
        while end + 1 < n and sorted_scores[end + 1] == sorted_scores[start]:
            end += 1
        ranks2[order[start:end + 1]] = (start + 1) + (end + 1)
        start = end + 1
    u2 = int(ranks2[labels == 1].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def evaluate(model: GatedAttentionMIL, bags: Sequence[FeatureBag], batch_size: int = 64) -> dict:
    """AUC (Mann-Whitney) and accuracy at probability 0.5 on labelled bags.

    ``auc`` is ``None`` when only one class is present.
    """
    labels = np.array([int(b.label) for b in bags])
    probs = predict(model, bags, batch_size)
    acc = float(((probs >= 0.5).astype(int) == labels).mean())
    try:
        auc = mann_whitney_auc(probs, labels)
    except UndefinedAUCError:
        auc = None
    return {"auc": auc, "acc": acc, "n_pos": int(labels.sum()), "n_neg": int((labels == 0).sum())}


def predict(model: GatedAttentionMIL, bags: Sequence[FeatureBag], batch_size: int = 64) -> np.ndarray:
    probs = np.empty(len(bags))
    by_n = {}
    for i, b in enumerate(bags):
        by_n.setdefault(b.features.shape[0], []).append(i)
    for idx in by_n.values():
        for s in range(0, len(idx), batch_size):
            sub = idx[s:s + batch_size]
            probs[sub] = model.predict_proba(np.stack([bags[i].features for i in sub]))
    return probs


def save_mil(model: GatedAttentionMIL, path) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "mil", "config": asdict(model.config)})


def load_mil(path) -> GatedAttentionMIL:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "mil":
        raise ValueError(f"{path}: not a MIL checkpoint")
    model = GatedAttentionMIL(MilConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model
