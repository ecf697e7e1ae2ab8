"""Tests for config files, overrides and grid files."""

from pathlib import Path

import pytest

from tf4ctr.config import (
    build_config,
    canonical_key,
    config_as_strings,
    default_run_root,
    dump_config,
    load_config,
    parse_overrides,
    read_flat_file,
    read_config_values,
    read_grid,
)
from tf4ctr.errors import ConfigError, ConfigKeyError
from tf4ctr.models import DfmVariant, LossKind, SsemVariant


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_canonical_key():
    assert canonical_key("ssem") == "ssem_variant"
    assert canonical_key("lr") == "learning_rate"
    assert canonical_key(" tau ") == "vf_temperature"
    assert canonical_key("seeds") == "seed"
    assert canonical_key("batch_size") == "batch_size"
    with pytest.raises(ConfigKeyError) as excinfo:
        canonical_key("learning_rat")
    assert excinfo.value.key == "learning_rat"
    assert "learning_rat" in str(excinfo.value)


def test_flat_file_comments_and_spacing(tmp_path):
    path = _write(tmp_path / "a.cfg", "# comment\nssem = GM\n\nlr=0.01\ndfm = CF  # inline\n")
    assert read_flat_file(path) == {"ssem": "GM", "lr": "0.01", "dfm": "CF"}
    with pytest.raises(ConfigError):
        read_flat_file(tmp_path / "missing.cfg")


def test_load_config_with_overrides_and_seed(tmp_path):
    path = _write(tmp_path / "run.cfg", "ssem = MMoE\ndfm = VF\nd = 8\nseed = 1\n")
    config = load_config(path, overrides=["dfm=MoEF", "gamma = 3"], seed=9)
    assert config.ssem_variant == SsemVariant.MMOE
    assert config.dfm_variant == DfmVariant.MOEF
    assert config.embedding_dim == 8
    assert config.tf_gamma == 3.0
    assert config.seed == 9


def test_relative_data_paths_resolve_against_the_config_file(tmp_path):
    (tmp_path / "data").mkdir()
    path = _write(tmp_path / "run.cfg", "data_path = data/frappe.csv\n")
    config = load_config(path)
    assert config.data_path == (tmp_path / "data" / "frappe.csv").resolve()


def test_unknown_key_in_file_or_override(tmp_path):
    path = _write(tmp_path / "bad.cfg", "ssem = SER\nembeding_dim = 8\n")
    with pytest.raises(ConfigKeyError, match="embeding_dim"):
        load_config(path)
    with pytest.raises(ConfigKeyError):
        load_config(overrides=["warmup=3"])


def test_invalid_values_raise_config_errors():
    with pytest.raises(ConfigError, match="Invalid configuration"):
        build_config({"d": "seven"})
    with pytest.raises(ConfigError):
        build_config({"ssem": "SER", "d": "15"})
    with pytest.raises(ConfigError):
        parse_overrides(["lr0.1"])


def test_dump_config_roundtrip(tmp_path):
    config = build_config(
        {"ssem": "GM", "dfm": "CF", "loss": "focal", "complex_hidden": "32,16", "d": "6"}
    )
    text = dump_config(config)
    assert "ssem_variant = GM" in text
    assert "complex_hidden = 32,16" in text
    restored = load_config(_write(tmp_path / "dump.cfg", text))
    assert restored == config
    assert restored.loss == LossKind.FOCAL
    assert config_as_strings(config)["head_bias"] == "false"


def test_run_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("TF4CTR_RUN_ROOT", str(tmp_path))
    assert default_run_root() == tmp_path
    monkeypatch.delenv("TF4CTR_RUN_ROOT")
    assert default_run_root() == Path("runs")


def test_ssem_dfm_grid(tmp_path):
    """Four SSEM by five DFM values give twenty cells."""
    path = _write(
        tmp_path / "grid.cfg",
        "base_config = base.cfg\n"
        "ssem = SER | GM | MMoE | Share\n"
        "dfm = WSF | VF | CF | MoEF | Sum\n"
        "max_epochs = 1\n",
    )
    spec = read_grid(path)
    assert spec.base_config == (tmp_path / "base.cfg").resolve()
    assert spec.axes == {
        "ssem_variant": ["SER", "GM", "MMoE", "Share"],
        "dfm_variant": ["WSF", "VF", "CF", "MoEF", "Sum"],
    }
    assert spec.fixed == {"max_epochs": "1"}
    cells = list(spec.cells())
    assert spec.size == len(cells) == 20
    assert cells[0] == {"max_epochs": "1", "ssem_variant": "SER", "dfm_variant": "WSF"}
    assert cells[-1]["ssem_variant"] == "Share" and cells[-1]["dfm_variant"] == "Sum"


@pytest.mark.parametrize(
    "line, key, count",
    [
        ("alpha = 0.15 | 0.25 | 0.35 | 0.45 | 0.55 | 0.65", "tf_alpha", 6),
        ("gamma = 1 | 2 | 3 | 4 | 5", "tf_gamma", 5),
        ("seeds = 1,2,3", "seed", 3),
    ],
)
def test_sweep_grids(line, key, count, tmp_path):
    spec = read_grid(_write(tmp_path / "sweep.cfg", line + "\n"))
    assert list(spec.axes) == [key]
    assert spec.size == count
    assert spec.base_config is None


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize(
    "name", ["frappe_tf4ctr.cfg", "frappe_dualmlp.cfg", "synthetic.cfg", "synthetic_dualmlp.cfg"]
)
def test_shipped_configs_load(name):
    config = load_config(CONFIG_DIR / name)
    assert config.embedding_dim in (8, 16)
    assert config.is_baseline == name.endswith("dualmlp.cfg")


def test_synthetic_pair_differs_only_in_the_model():
    twin = load_config(CONFIG_DIR / "synthetic.cfg")
    dual = load_config(CONFIG_DIR / "synthetic_dualmlp.cfg")
    for key in ("data_path", "split_ratios", "batch_size", "learning_rate", "max_epochs", "seed"):
        assert getattr(twin, key) == getattr(dual, key), key
    assert twin.patience == twin.max_epochs


@pytest.mark.parametrize(
    "name, size",
    [
        ("grid_ssem_dfm.cfg", 60),
        ("grid_alpha.cfg", 6),
        ("grid_gamma.cfg", 5),
        ("grid_c.cfg", 5),
        ("grid_frappe_baseline.cfg", 24),
    ],
)
def test_shipped_grids_load(name, size):
    spec = read_grid(CONFIG_DIR / name)
    assert spec.size == size
    assert spec.base_config is not None and spec.base_config.exists()
    base = read_config_values(spec.base_config)
    for cell in spec.cells():
        build_config({**base, **cell})


def test_baseline_grid_has_no_duplicate_log_loss_cells():
    spec = read_grid(CONFIG_DIR / "grid_frappe_baseline.cfg")
    cells = [tuple(sorted(cell.items())) for cell in spec.cells()]
    assert len(set(cells)) == len(cells)
    assert "tf_gamma" not in spec.axes
