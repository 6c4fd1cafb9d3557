"""End-to-end protocols on the synthetic benchmark.

Protocols
---------
``baseline``            classifier on original training bags (p = 0)
``wsaug-offline``       classifier on original + M pre-extracted WSAug bags per slide
``lsa``                 classifier with latent style augmentation at ``lsa_p``
``p-sweep``             LSA at every probability in ``sweep_ps``
``patch-inconsistent``  offline augmentation with an independent style per tile
``all``                 every arm above, sharing data, prior and transformer

Every protocol also trains the baseline arm as its reference. Reports are
JSON (see ``README.md``); checkpoints use :mod:`latentstyle.nn.checkpoint`.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .bags import FeatureBag
from .mil import GatedAttentionMIL, LsaConfig, MilConfig, MilTrainConfig, evaluate, save_mil, train_mil
from .stain_transformer import SlideGroup, STConfig, StainTransformer, STTrainConfig, save_st, st_evaluate_mae, st_train
from .synth import (
    SynthConfig,
    derive_seed,
    encode_augmented,
    encode_manifests,
    gen_dataset,
    make_encoder,
    patch_inconsistent_bags,
)
from .wsaug import StylePrior, fit_style_prior

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
PROTOCOLS = ("baseline", "wsaug-offline", "lsa", "p-sweep", "patch-inconsistent", "all")

# sub-stream tags for the benchmark's own randomness
_TRAIN_AUG, _HOLDOUT_AUG, _PATCH_AUG = 1, 2, 3


@dataclass
class BenchConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    st: STConfig = field(default_factory=STConfig)
    # 200 training slides give far fewer optimiser steps per epoch than a
    # clinical cohort, so the benchmark trains with larger learning rates
    st_train: STTrainConfig = field(default_factory=lambda: STTrainConfig(lr=1e-3))
    mil: MilConfig = field(default_factory=MilConfig)
    mil_train: MilTrainConfig = field(default_factory=lambda: MilTrainConfig(lr=1e-2))
    copies: int = 3
    lsa_p: float = 0.5
    sweep_ps: tuple = (0.0, 0.2, 0.5, 0.8)
    threads: int = 1

    def __post_init__(self):
        if self.copies < 1:
            raise ValueError("copies must be >= 1")
        self.sweep_ps = tuple(float(p) for p in self.sweep_ps)
        for p in (self.lsa_p, *self.sweep_ps):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"augmentation probability must be in [0, 1], got {p}")
        if self.st.dim != self.synth.feature_dim or self.mil.dim != self.synth.feature_dim:
            raise ValueError("stain transformer and classifier dims must equal synth.feature_dim")

    @property
    def seed(self) -> int:
        return self.synth.seed

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "synth":
                out[f.name] = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                out[f.name] = asdict(v)
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def _p_key(p: float) -> str:
    return f"p={p:g}"


def _metrics(model: GatedAttentionMIL, bags: List[FeatureBag]) -> dict:
    return evaluate(model, bags)


class _Session:
    """Lazily built, shared stages of one benchmark run."""

    def __init__(self, cfg: BenchConfig, work_dir: Path, out_dir: Optional[Path]):
        self.cfg = cfg
        self.work_dir = work_dir
        self.out_dir = out_dir
        self.enc = make_encoder(cfg.synth)
        self._cache: Dict[str, object] = {}

    def _once(self, key, build):
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = build()
            log.info("stage %s: %.1fs", key, time.perf_counter() - t0)
        return self._cache[key]

    @property
    def manifests(self):
        return self._once("data", lambda: gen_dataset(self.cfg.synth, self.work_dir / "data", self.cfg.threads))

    @property
    def bags(self) -> Dict[str, List[FeatureBag]]:
        return self._once("bags", lambda: {
            split: encode_manifests(self.enc, ms, self.cfg.threads) for split, ms in self.manifests.items()
        })

    @property
    def prior(self) -> StylePrior:
        return self._once("prior", lambda: fit_style_prior([b.style for b in self.bags["train"]]))

    @property
    def train_groups(self) -> List[List[FeatureBag]]:
        seed = derive_seed(self.cfg.seed, _TRAIN_AUG)
        return self._once("train_aug", lambda: encode_augmented(
            self.manifests["train"], self.prior, self.cfg.copies, self.enc, seed, self.cfg.threads))

    @property
    def holdout_groups(self) -> List[List[FeatureBag]]:
        seed = derive_seed(self.cfg.seed, _HOLDOUT_AUG)
        return self._once("holdout_aug", lambda: encode_augmented(
            self.manifests["id_test"], self.prior, self.cfg.copies, self.enc, seed, self.cfg.threads))

    @property
    def patch_bags(self) -> List[FeatureBag]:
        seed = derive_seed(self.cfg.seed, _PATCH_AUG)
        return self._once("patch_aug", lambda: patch_inconsistent_bags(
            self.manifests["train"], self.prior, self.cfg.copies, self.enc, seed, self.cfg.threads))

    def _build_st(self):
        model = StainTransformer(self.cfg.st, self.prior)
        groups = [SlideGroup.from_bags(g) for g in self.train_groups]
        history = st_train(model, groups, self.cfg.st_train)
        mae = st_evaluate_mae(model, [SlideGroup.from_bags(g) for g in self.holdout_groups])
        mae["ratio"] = mae["mae_after"] / mae["mae_before"] if mae["mae_before"] > 0 else None
        mae["final_train_loss"] = history[-1] if history else None
        if self.out_dir is not None:
            save_st(model, self.out_dir / "st.ckpt")
        return model, mae

    @property
    def st(self):
        return self._once("st", self._build_st)

    def arm(self, name: str, train_bags: List[FeatureBag], p: float = 0.0) -> dict:
        def build():
            lsa = LsaConfig(p=p, prior=self.prior, st=self.st[0]) if p > 0 else LsaConfig(p=0.0)
            model = GatedAttentionMIL(self.cfg.mil)
            history = train_mil(model, train_bags, lsa, self.cfg.mil_train)
            if self.out_dir is not None:
                save_mil(model, self.out_dir / f"mil_{name}.ckpt")
            return {
                "id": _metrics(model, self.bags["id_test"]),
                "ood": _metrics(model, self.bags["ood_test"]),
                "final_train_loss": history[-1] if history else None,
            }

        return self._once(f"arm:{name}", build)

    def lsa_arm(self, p: float) -> dict:
        if p == 0.0:
            return self.arm("baseline", self.bags["train"])
        return self.arm(f"lsa_{p:g}", self.bags["train"], p)


def run_benchmark(cfg: BenchConfig, protocol: str, out_dir=None, work_dir=None) -> dict:
    """Run ``protocol`` and return its report; write report and checkpoints to ``out_dir``.

    Generated slides go to ``work_dir`` (a temporary directory when omitted).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tmp = None
    if work_dir is None:
        tmp = tempfile.mkdtemp(prefix="latentstyle-bench-")
        work_dir = tmp
    try:
        s = _Session(cfg, Path(work_dir), out)
        arms = {"baseline": s.lsa_arm(0.0)}
        want = {protocol} if protocol != "all" else set(PROTOCOLS)
        if "wsaug-offline" in want:
            train = [b for g in s.train_groups for b in g]
            arms["wsaug-offline"] = s.arm("wsaug-offline", train)
        if "patch-inconsistent" in want:
            arms["patch-inconsistent"] = s.arm("patch-inconsistent", s.bags["train"] + s.patch_bags)
        if "lsa" in want:
            arms["lsa"] = s.lsa_arm(cfg.lsa_p)
        if "p-sweep" in want:
            arms["p-sweep"] = {_p_key(p): s.lsa_arm(p) for p in cfg.sweep_ps}
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "protocol": protocol,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "prior": s.prior.to_dict(),
            "arms": arms,
        }
        if "st" in s._cache:
            report["stain_transformer"] = s.st[1]
        if out is not None:
            write_report(report, out / "report.json")
        return report
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path


def ood_auc(report: dict, arm: str, p: Optional[float] = None) -> float:
    """OOD AUC of one arm; ``p`` selects an entry of the p-sweep."""
    entry = report["arms"][arm] if p is None else report["arms"]["p-sweep"][_p_key(p)]
    return entry["ood"]["auc"]
