import pytest

from RIConv.core.config.run_config import CONFIG_ENV_VAR, ConfigError, RunConfig


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_match_reference_architecture():
    config = RunConfig.from_parameters()

    assert config.channels == [16, 32, 64, 128, 256]
    assert config.lrf_scales == [20, 40, 80, 160]
    assert config.num_alignments == 4
    assert config.omega == 0.5
    assert config.momentum == 0.98
    assert config.train_rotation == "none"
    assert config.audit_rotations == 32
    assert config.network_audit_rotations == 32


def test_none_overrides_are_ignored():
    config = RunConfig.from_parameters(lr=None, epochs=3)

    assert config.lr == 0.01
    assert config.epochs == 3


def test_from_file_reads_key_value_lines(tmp_path):
    path = write_config(
        tmp_path,
        "# tiny run\n"
        "LR=0.005\n"
        "channels=8,16\n"
        "lrf_scales=[8, 16]\n"
        "num_alignments=2\n"
        "project_lrfs=true\n"
        "train_rotation=A\n",
    )

    config = RunConfig.from_file(path)

    assert config.lr == 0.005
    assert config.channels == [8, 16]
    assert config.lrf_scales == [8, 16]
    assert config.project_lrfs is True
    assert config.train_rotation == "so3"


def test_flags_override_file_values(tmp_path):
    path = write_config(tmp_path, "lr=0.005\nepochs=4\n")

    config = RunConfig.from_file(path, lr="0.2", epochs=None)

    assert config.lr == 0.2
    assert config.epochs == 4


def test_unknown_key_is_rejected(tmp_path):
    path = write_config(tmp_path, "learning_rate=0.1\n")

    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_file(path)


def test_key_without_value_is_rejected(tmp_path):
    path = write_config(tmp_path, "lr=\n")

    with pytest.raises(ConfigError, match="without values"):
        RunConfig.from_file(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_environment_names_the_config_file(tmp_path, monkeypatch):
    path = write_config(tmp_path, "epochs=7\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))

    assert RunConfig.from_environment().epochs == 7
    assert RunConfig.from_environment(epochs="2").epochs == 2


def test_environment_without_config_file(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)

    assert RunConfig.from_environment() == RunConfig()


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"variant": "deformable"}, "variant must be one of"),
        ({"num_alignments": 3}, "num_alignments"),
        ({"train_rotation": "x"}, "Unknown rotation mode"),
        ({"scale_min": 1.2, "scale_max": 1.1}, "scale_min"),
        ({"momentum": 1.0}, "momentum"),
        ({"channels": ""}, "nonempty list"),
        ({"batch": 0}, "must be positive"),
    ],
)
def test_invalid_values(overrides, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_parameters(**overrides)


def test_single_alignment_variants_skip_scale_check():
    config = RunConfig.from_parameters(variant="one_global", num_alignments=1)

    spec = config.architecture(8)

    assert spec.num_alignments == 1
    assert spec.variant == "one_global"


def test_text_round_trip(tmp_path):
    config = RunConfig.from_parameters(
        lr=0.0125, channels="8,16", lrf_scales="8,16", num_alignments=2,
        omega_sweep="0.0,0.25", project_lrfs=True, test_rotation="z",
    )

    path = config.save(tmp_path / "nested" / "config.txt")
    text = path.read_text()

    assert text.splitlines() == sorted(text.splitlines())
    assert "omega_sweep=0.0,0.25" in text
    assert "project_lrfs=true" in text
    assert RunConfig.from_file(path) == config


def test_architecture_from_config():
    config = RunConfig.from_parameters(
        channels="8,16", lrf_scales="8,16", num_alignments=2, input_feature="height",
        task="segment",
    )

    spec = config.architecture(16)

    assert spec.input_dim == 2
    assert spec.num_classes == 16
    assert spec.task == "segment"
    assert [b.out_channels for b in spec.blocks] == [8, 8, 16, 16]
    assert spec.blocks[0].num_alignments == 2
