"""Command-line entry point: ``latentstyle <command> [options]``.

Hyperparameters come from an INI file (``--config`` or the
``LATENTSTYLE_CONFIG`` environment variable), then ``--set section.key=value``
overrides, then command-line flags. Sections map onto the library's config
dataclasses:

``[synth]`` SynthConfig, ``[stain_transformer]`` STConfig, ``[st_train]``
STTrainConfig, ``[mil]`` MilConfig, ``[mil_train]`` MilTrainConfig,
``[wsaug]`` copies / seed, ``[lsa]`` p / sweep_ps, ``[run]`` threads.

Every command prints one JSON line on success. Usage errors exit with 2,
invalid configuration or inputs with 1 and a JSON error on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

from . import __version__
from .bags import group_bags, load_bag_dir, save_bag
from .bench import PROTOCOLS, BenchConfig, run_benchmark
from .mil import GatedAttentionMIL, LsaConfig, MilConfig, MilTrainConfig, evaluate, load_mil, save_mil, train_mil
from .slide_io import find_manifests, load_manifest, load_manifests
from .stain_stats import compute_slide_style
from .stain_transformer import SlideGroup, STConfig, STTrainConfig, StainTransformer, load_st, save_st, st_train
from .synth import FrozenEncoder, SynthConfig, encode_manifests
from .wsaug import StylePrior, augment_dataset, fit_style_prior

CONFIG_ENV = "LATENTSTYLE_CONFIG"


class ConfigError(ValueError):
    def __init__(self, errors: Dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))
        self.errors = errors


@dataclass
class WsaugSection:
    copies: int = 3
    seed: int = 0


@dataclass
class LsaSection:
    p: float = 0.5
    sweep_ps: tuple = (0.0, 0.2, 0.5, 0.8)


@dataclass
class RunSection:
    threads: int = 1


SECTIONS = {
    "synth": SynthConfig,
    "stain_transformer": STConfig,
    "st_train": STTrainConfig,
    "mil": MilConfig,
    "mil_train": MilTrainConfig,
    "wsaug": WsaugSection,
    "lsa": LsaSection,
    "run": RunSection,
}


# --- configuration ------------------------------------------------------------


def _parse_value(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
    return raw


class RunConfig:
    """Raw overrides per section, resolved against command-specific defaults."""

    def __init__(self, values: Dict[str, Dict[str, str]]):
        errors = {}
        for section, keys in values.items():
            if section not in SECTIONS:
                errors[section] = f"unknown section (expected one of {', '.join(SECTIONS)})"
                continue
            names = {f.name for f in fields(SECTIONS[section])}
            for key in keys:
                if key not in names:
                    errors[f"{section}.{key}"] = "unknown key"
        if errors:
            raise ConfigError(errors)
        self.values = values

    @classmethod
    def load(cls, path: Optional[str], sets: List[str]) -> "RunConfig":
        values: Dict[str, Dict[str, str]] = {}
        if path:
            if not Path(path).is_file():
                raise ConfigError({"config": f"file not found: {path}"})
            parser = configparser.ConfigParser()
            try:
                parser.read(path)
            except configparser.Error as exc:
                raise ConfigError({"config": str(exc)}) from exc
            for section in parser.sections():
                values[section] = dict(parser.items(section))
        errors = {}
        for item in sets:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                errors[item] = "expected section.key=value"
                continue
            values.setdefault(section, {})[name] = raw
        if errors:
            raise ConfigError(errors)
        return cls(values)

    def build(self, section: str, base=None, **flags):
        """Dataclass for ``section``: ``base`` defaults, then file/--set values, then flags."""
        cls = SECTIONS[section]
        obj = base if base is not None else cls()
        current = asdict(obj)
        changes, errors = {}, {}
        for key, raw in self.values.get(section, {}).items():
            try:
                changes[key] = _parse_value(raw, current[key])
            except ValueError as exc:
                errors[f"{section}.{key}"] = str(exc)
        changes.update({k: v for k, v in flags.items() if v is not None})
        if errors:
            raise ConfigError(errors)
        try:
            return replace(obj, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError({section: str(exc)}) from exc


def _require(path, name: str, kind: str = "exists") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file() if kind == "file" else p.exists()
    if not ok:
        raise ConfigError({name: f"not found: {path}"})
    return p


def _manifests(path, name: str = "manifests"):
    p = _require(path, name)
    paths = [p] if p.is_file() else find_manifests(p)
    if not paths:
        raise ConfigError({name: f"no manifest.json under {path}"})
    return load_manifests(paths)


def _bags(path, name: str = "bags"):
    bags = load_bag_dir(_require(path, name, "dir"))
    if not bags:
        raise ConfigError({name: f"no .bag files under {path}"})
    return bags


# --- commands -----------------------------------------------------------------


def cmd_stats(args, rc: RunConfig, threads: int) -> dict:
    m = load_manifest(_require(args.manifest, "manifest", "file"))
    return compute_slide_style(m, threads=threads, partitions=max(threads, 1)).to_dict()


def cmd_fit_prior(args, rc, threads) -> dict:
    ms = _manifests(args.manifests)
    prior = fit_style_prior([compute_slide_style(m) for m in ms])
    prior.save(args.out)
    return {"out": str(args.out), "n_slides": len(ms), **prior.to_dict()}


def cmd_augment(args, rc, threads) -> dict:
    ws = rc.build("wsaug", copies=args.copies, seed=args.seed)
    ms = _manifests(args.manifests)
    prior = StylePrior.load(_require(args.prior, "prior", "file"))
    out = augment_dataset(ms, prior, ws.copies, ws.seed, args.out, threads=threads)
    clamp = max((m.provenance.clamp_fraction or 0.0) for m in out)
    return {"out": str(args.out), "n_slides": len(out), "max_clamp_fraction": clamp}


def cmd_extract(args, rc, threads) -> dict:
    sc = rc.build("synth", encoder_seed=args.encoder_seed, feature_dim=args.feature_dim)
    ms = _manifests(args.manifests)
    enc = FrozenEncoder(dim=sc.feature_dim, seed=sc.encoder_seed)
    out = Path(args.out)
    for bag in encode_manifests(enc, ms, threads):
        save_bag(bag, out / bag.slide_id)
    return {"out": str(out), "n_bags": len(ms), "dim": sc.feature_dim}


def cmd_train_st(args, rc, threads) -> dict:
    bags = _bags(args.bags)
    prior = StylePrior.load(_require(args.prior, "prior", "file"))
    groups = []
    for members in group_bags(bags).values():
        try:
            groups.append(SlideGroup.from_bags(members))
        except ValueError as exc:
            raise ConfigError({"bags": str(exc)}) from exc
    dim = groups[0].features.shape[-1]
    cfg = rc.build("stain_transformer", dim=dim)
    tcfg = rc.build("st_train", epochs=args.epochs, lr=args.lr, seed=args.seed)
    model = StainTransformer(cfg, prior)
    history = st_train(model, groups, tcfg)
    save_st(model, args.out)
    return {"out": str(args.out), "n_groups": len(groups), "final_loss": history[-1] if history else None}


def cmd_train_mil(args, rc, threads) -> dict:
    bags = _bags(args.bags)
    ls = rc.build("lsa", p=args.p)
    lsa = LsaConfig(p=0.0)
    if ls.p > 0:
        if not args.st or not args.prior:
            raise ConfigError({"lsa.p": "p > 0 needs --st and --prior"})
        st = load_st(_require(args.st, "st", "file"))
        prior = StylePrior.load(_require(args.prior, "prior", "file"))
        lsa = LsaConfig(p=ls.p, prior=prior, st=st)
    cfg = rc.build("mil", dim=bags[0].features.shape[1])
    tcfg = rc.build("mil_train", epochs=args.epochs, lr=args.lr, seed=args.seed)
    model = GatedAttentionMIL(cfg)
    history = train_mil(model, bags, lsa, tcfg)
    save_mil(model, args.out)
    return {"out": str(args.out), "n_bags": len(bags), "p": ls.p, "final_loss": history[-1] if history else None}


def cmd_eval(args, rc, threads) -> dict:
    model = load_mil(_require(args.model, "model", "file"))
    res = evaluate(model, _bags(args.bags))
    if args.out:
        Path(args.out).write_text(json.dumps({"schema_version": 1, **res}, indent=1, sort_keys=True) + "\n")
    return res


def bench_config(rc: RunConfig, seed: Optional[int], threads: int) -> BenchConfig:
    base = BenchConfig()
    synth = rc.build("synth", seed=seed)
    dim = synth.feature_dim
    st = rc.build("stain_transformer", base=replace(base.st, dim=dim))
    mil = rc.build("mil", base=replace(base.mil, dim=dim))
    ws = rc.build("wsaug")
    ls = rc.build("lsa")
    st_train_cfg = rc.build("st_train", base=base.st_train)
    mil_train_cfg = rc.build("mil_train", base=base.mil_train)
    try:
        return BenchConfig(
            synth=synth,
            st=st,
            st_train=st_train_cfg,
            mil=mil,
            mil_train=mil_train_cfg,
            copies=ws.copies,
            lsa_p=ls.p,
            sweep_ps=ls.sweep_ps,
            threads=threads,
        )
    except ValueError as exc:
        raise ConfigError({"bench": str(exc)}) from exc


def cmd_bench(args, rc, threads) -> dict:
    cfg = bench_config(rc, args.seed, threads)
    report = run_benchmark(cfg, args.protocol, out_dir=args.out, work_dir=args.work_dir)
    arms = report["arms"]
    summary = {k: {"id_auc": v["id"]["auc"], "ood_auc": v["ood"]["auc"]} for k, v in arms.items() if k != "p-sweep"}
    if "p-sweep" in arms:
        summary["p-sweep"] = {k: v["ood"]["auc"] for k, v in arms["p-sweep"].items()}
    out = {"out": str(args.out), "protocol": args.protocol, "seed": cfg.seed, "arms": summary}
    if "stain_transformer" in report:
        out["st_mae_ratio"] = report["stain_transformer"]["ratio"]
    return out


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--threads", type=int, default=None, help="worker and BLAS thread bound")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="latentstyle", description="Slide-level stain augmentation toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("stats", parents=[common], help="stain style of one slide")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("fit-prior", parents=[common], help="fit the style prior on a set of slides")
    s.add_argument("--manifests", required=True, help="manifest.json or a directory searched recursively")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_prior)

    s = sub.add_parser("augment", parents=[common], help="write WSAug copies of every slide")
    s.add_argument("--manifests", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--copies", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("extract", parents=[common], help="encode slides into feature bags")
    s.add_argument("--manifests", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--encoder-seed", type=int)
    s.add_argument("--feature-dim", type=int)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-st", parents=[common], help="train the stain transformer on grouped bags")
    s.add_argument("--bags", required=True, help="directory with original and augmented bags")
    s.add_argument("--prior", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_st)

    s = sub.add_parser("train-mil", parents=[common], help="train the MIL classifier, optionally with LSA")
    s.add_argument("--bags", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--p", type=float, help="LSA probability (0 disables)")
    s.add_argument("--st", help="stain transformer checkpoint")
    s.add_argument("--prior")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_mil)

    s = sub.add_parser("eval", parents=[common], help="AUC and accuracy of a classifier on bags")
    s.add_argument("--model", required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="run a synthetic benchmark protocol")
    s.add_argument("--protocol", required=True, choices=PROTOCOLS)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="bench_out")
    s.add_argument("--work-dir", help="keep generated slides here instead of a temp dir")
    s.set_defaults(func=cmd_bench)
    return p


def _error(kind: str, exc: Exception, fields_: Optional[dict] = None) -> int:
    err = {"ok": False, "error": kind, "message": str(exc)}
    if fields_:
        err["fields"] = fields_
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = RunConfig.load(args.config or os.environ.get(CONFIG_ENV), args.set)
        threads = rc.build("run", threads=args.threads).threads
        if threads < 1:
            raise ConfigError({"run.threads": "must be >= 1"})
        with threadpool_limits(limits=threads):
            result = args.func(args, rc, threads)
    except ConfigError as exc:
        return _error("config", exc, exc.errors)
    except (ValueError, OSError, RuntimeError) as exc:
        return _error(type(exc).__name__, exc)
    print(json.dumps({"ok": True, "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
