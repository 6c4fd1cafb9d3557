import json

import pytest

from latentstyle.bench import PROTOCOLS, BenchConfig, run_benchmark
from latentstyle.mil import MilTrainConfig, load_mil
from latentstyle.nn import load_checkpoint
from latentstyle.stain_transformer import STTrainConfig, load_st
from latentstyle.synth import SynthConfig


def small_config(**synth):
    kw = dict(n_train=8, n_id_test=6, n_ood_test=6, tiles_per_slide=4, tile_size=32)
    kw.update(synth)
    return BenchConfig(
        synth=SynthConfig(**kw),
        st_train=STTrainConfig(epochs=2, lr=1e-3),
        mil_train=MilTrainConfig(epochs=3, lr=1e-2),
        copies=2,
        sweep_ps=(0.0, 0.5, 1.0),
    )


def test_unknown_protocol():
    with pytest.raises(ValueError, match="unknown protocol"):
        run_benchmark(small_config(), "fancy")


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(lsa_p=1.5)
    with pytest.raises(ValueError):
        BenchConfig(copies=0)


def test_all_protocol_report_and_artifacts(tmp_path):
    report = run_benchmark(small_config(), "all", out_dir=tmp_path / "out")
    assert report["schema_version"] == 1 and report["protocol"] == "all"
    arms = report["arms"]
    assert set(arms) == {"baseline", "wsaug-offline", "patch-inconsistent", "lsa", "p-sweep"}
    assert set(arms["p-sweep"]) == {"p=0", "p=0.5", "p=1"}
    # shared arms are trained once
    assert arms["p-sweep"]["p=0"] == arms["baseline"] and arms["p-sweep"]["p=0.5"] == arms["lsa"]
    for split in ("id", "ood"):
        r = arms["lsa"][split]
        assert set(r) >= {"auc", "acc", "n_pos", "n_neg"}
        assert r["n_pos"] + r["n_neg"] == 6
    mae = report["stain_transformer"]
    assert mae["n_pairs"] == 6 * 3 * 2 and mae["mae_before"] > 0
    out = tmp_path / "out"
    assert json.loads((out / "report.json").read_text()) == json.loads(json.dumps(report))
    load_st(out / "st.ckpt")
    for name in ("baseline", "wsaug-offline", "patch-inconsistent", "lsa_0.5", "lsa_1"):
        _, meta = load_checkpoint(out / f"mil_{name}.ckpt")
        assert meta["kind"] == "mil"
    load_mil(out / "mil_baseline.ckpt")


def test_protocol_runs_only_what_it_needs(tmp_path):
    report = run_benchmark(small_config(), "wsaug-offline", out_dir=tmp_path)
    assert set(report["arms"]) == {"baseline", "wsaug-offline"}
    assert "stain_transformer" not in report
    assert not (tmp_path / "st.ckpt").exists()


def test_rerun_is_identical(tmp_path):
    run_benchmark(small_config(seed=3), "lsa", out_dir=tmp_path / "a")
    run_benchmark(small_config(seed=3), "lsa", out_dir=tmp_path / "b")
    for name in ("report.json", "st.ckpt", "mil_lsa_0.5.ckpt", "mil_baseline.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_shift_zero_baseline_has_no_gap():
    """Mean over three seeds; a single 50-slide ID split has AUC noise of about 0.02."""
    gaps = []
    for seed in (0, 1, 2):
        cfg = BenchConfig(synth=SynthConfig(seed=seed, ood_mean_shift=(0, 0, 0), ood_std_scale=(1, 1, 1)))
        base = run_benchmark(cfg, "baseline")["arms"]["baseline"]
        gaps.append(base["id"]["auc"] - base["ood"]["auc"])
    assert abs(sum(gaps) / 3) <= 0.03


def test_default_shift_hurts_baseline():
    arms = run_benchmark(BenchConfig(), "baseline")["arms"]
    assert arms["baseline"]["id"]["auc"] - arms["baseline"]["ood"]["auc"] >= 0.08


def test_protocol_names():
    assert PROTOCOLS == ("baseline", "wsaug-offline", "lsa", "p-sweep", "patch-inconsistent", "all")
