import pytest

from m2s.ablate import AblationReport, ablate, check_variants
from m2s.config import ConfigError, ModelConfig, RunConfig, with_variant
from m2s.drm import DRM
from m2s.model import M2SDetector
from conftest import tiny_config


def _report():
    runs = {
        "base": {0: dict(AP=0.10, AP50=0.20, AP75=0.05), 1: dict(AP=0.12, AP50=0.30, AP75=0.07),
                 2: dict(AP=0.11, AP50=0.10, AP75=0.06)},
        "cam+drm": {0: dict(AP=0.15, AP50=0.40, AP75=0.09), 1: dict(AP=0.13, AP50=0.35, AP75=0.08),
                    2: dict(AP=0.14, AP50=0.20, AP75=0.10)},
    }
    return AblationReport(["base", "cam+drm"], [0, 1, 2], runs)


def test_median_and_delta():
    r = _report()
    assert r.median("base", "AP50") == pytest.approx(0.20)
    assert r.median("cam+drm", "AP50") == pytest.approx(0.35)
    assert r.delta("cam+drm", "AP50") == pytest.approx(0.15)
    assert r.delta("base", "AP") == 0.0


def test_markdown_style():
    lines = _report().markdown().splitlines()
    assert lines[0] == "| variant | AP | AP50 | AP75 |"
    assert lines[2] == "| base | 11.00 | 20.00 | 6.00 |"
    assert lines[3] == "| cam+drm | 14.00 (+3.00) | 35.00 (+15.00) | 9.00 (+3.00) |"


def test_no_base_means_no_deltas():
    r = _report()
    r.variants = ["cam+drm"]
    del r.runs["base"]
    assert "(+" not in r.markdown()
    assert "delta_AP" not in r.to_dict()["summary"]["cam+drm"]


def test_check_variants():
    assert check_variants(["base", "cam"]) == ["base", "cam"]
    with pytest.raises(ConfigError):
        check_variants(["base", "nope"])
    with pytest.raises(ConfigError):
        check_variants([])


def test_drm_without_cam_uses_backbone_levels():
    cfg = with_variant(RunConfig(), "drm").model
    m = M2SDetector(cfg)
    assert m.cam is None and isinstance(m.refine["low"], DRM)
    assert m.tri_channels == tuple(cfg.backbone_channels[1:4])


def test_per_level_drm_switch():
    m = M2SDetector(ModelConfig(drm_per_level=True))
    assert sorted(m.refine) == ["high", "low", "mid"]


def test_ablate_runs_matrix(tmp_path):
    cfg = tiny_config(tmp_path, phase2_epochs=0)
    report = ablate(cfg, ["base", "cam+drm"], [0, 1], tmp_path / "runs")
    assert set(report.runs) == {"base", "cam+drm"}
    assert sorted(p.name for p in (tmp_path / "runs").glob("*.ckpt")) == [
        "base_seed0.ckpt", "base_seed1.ckpt", "cam+drm_seed0.ckpt", "cam+drm_seed1.ckpt"]
    for per in report.runs.values():
        for m in per.values():
            assert 0.0 <= m["AP50"] <= 1.0
