import pytest

from fedclassavg import config as C
from fedclassavg.config import ConfigError, parse_config


MIN = "version = 1\nK = 2\nT = 2\n"


def test_minimal_config_uses_defaults():
    cfg = parse_config(MIN)
    assert (cfg.K, cfg.T, cfg.rho, cfg.temperature, cfg.batch_size) == (2, 2, 0.1, 0.07, 64)


@pytest.mark.parametrize(
    "text,line,needle",
    [
        ("version = 1\nK = 2\nsampling_rate = 0\n", 3, "sampling_rate"),
        ("version = 1\n\n# note\nlr = fast\n", 4, "lr"),
        ("version = 1\nbogus = 3\n", 2, "unknown key 'bogus'"),
        ("version = 1\nK = 2\nK = 3\n", 3, "duplicate key 'K'"),
        ("version = 1\njust words\n", 2, "key = value"),
        ("version = 2\n", 1, "version"),
        ("version = 1\nenable_CL = maybe\n", 2, "enable_CL"),
        ("version = 1\nnum_classes = 3\nclasses_per_client = 5\n", 3, "classes_per_client"),
        ("version = 1\naggregate_mode = full_weights\narchs = linear, mlp_small\n", 3, "archs"),
        ("version = 1\narchs = resnet\n", 2, "archs"),
        ("version = 1\nlr = nan\n", 2, "lr"),
    ],
)
def test_errors_name_the_line_and_field(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "exp.conf")
    msg = str(info.value)
    assert msg.startswith(f"exp.conf:{line}: ") and needle in msg
    assert info.value.line == line


def test_version_is_required():
    with pytest.raises(ConfigError, match="version"):
        parse_config("K = 2\n", "exp.conf")


def test_idx_needs_paths():
    with pytest.raises(ConfigError, match="train_images"):
        parse_config("version = 1\ndataset = idx\n")


def test_canonical_text_round_trips():
    cfg = parse_config(MIN + "archs = linear, mlp_deep\nenable_PR = off\nalpha = 0.25\nseed = 0x10\n")
    assert cfg.archs == ("linear", "mlp_deep") and cfg.enable_PR is False and cfg.seed == 16
    again = parse_config(C.to_text(cfg))
    assert again == cfg and C.to_text(again) == C.to_text(cfg)
    assert C.to_text(cfg).splitlines()[0] == "version = 1"


def test_overrides_are_validated():
    cfg = parse_config(MIN)
    assert C.with_overrides(cfg, seed=5).seed == 5
    with pytest.raises(ConfigError):
        C.with_overrides(cfg, K=0)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        C.load_config(tmp_path / "nope.conf")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    confs = sorted(root.glob("*.conf"))
    assert len(confs) >= 3
    for p in confs:
        C.load_config(p)


def test_derived_objects_follow_the_config():
    cfg = parse_config(MIN + "num_classes = 4\ninput_dim = 5\nsamples_per_class = 20\nclasses_per_client = 2\n")
    fc = C.federation_config(cfg)
    assert fc.K == 2 and fc.aug.seed == cfg.seed and fc.loss.temperature == 0.07
    train, test = C.load_data(cfg)
    assert train.num_classes == 4 and train.input_dim == 5
    plan = C.make_partition(cfg, train)
    assert len(plan.client_indices) == 2
    train2, _ = C.load_data(cfg)
    assert (train2.features == train.features).all()
