import numpy as np
import pytest

from interprobust.exceptions import ConfigError
from interprobust.models import Arch, TrainMethod
from interprobust.utils.formats import (
    export_pair,
    format_cell,
    normalise_pair,
    parse_pairs,
    parse_run_config,
    upsample,
    write_csv,
    write_pgm,
)


# === RUN CONFIG ===

def test_parse_pairs_skips_comments_and_blanks():
    text = "# run\narch = Tiny\n\nmethod=Int   # regularised\n"
    assert parse_pairs(text) == {"arch": "Tiny", "method": "Int"}


def test_duplicate_key():
    with pytest.raises(ConfigError) as excinfo:
        parse_pairs("eps = 0.1\neps = 0.2\n")
    assert excinfo.value.key == "eps"


def test_malformed_line():
    with pytest.raises(ConfigError):
        parse_pairs("just words\n")


def test_run_config_types_and_lists():
    cfg = parse_run_config("arch = Tiny\nmethod = Int2Adv\neps_list = 0, 0.1, 0.3\nsweeps = ata, aai\nrand_init = true\n")
    assert cfg.arch == Arch.TINY
    assert cfg.method == TrainMethod.INT2_ADV
    assert cfg.eps_list == [0.0, 0.1, 0.3]
    assert cfg.sweeps == ["ata", "aai"]
    assert cfg.rand_init is True


def test_overrides_win_and_blank_values_are_unset():
    cfg = parse_run_config("seed = 1\ncheckpoint =\n", {"seed": 5, "out_dir": None})
    assert cfg.seed == 5
    assert cfg.checkpoint is None
    assert cfg.out_dir is None


def test_unknown_key():
    with pytest.raises(ConfigError) as excinfo:
        parse_run_config("colour = blue\n")
    assert excinfo.value.key == "colour"
    assert excinfo.value.exit_code == 1


@pytest.mark.parametrize("text,key", [("eps = -1\n", "eps"), ("spec = CAM:L1\n", "spec"), ("sweeps = ata, plots\n", "sweeps")])
def test_invalid_values_name_their_key(text, key):
    with pytest.raises(ConfigError) as excinfo:
        parse_run_config(text)
    assert excinfo.value.key == key


def test_run_config_builds_train_and_attack_configs():
    cfg = parse_run_config("method = Int\ngamma = 0.02\nlr_decay_steps = 10, 20\neps = 0.2\ntarget = 3\n")
    train = cfg.train_config()
    assert train.method == TrainMethod.INT
    assert train.gamma == 0.02
    assert train.lr_decay_steps == [10, 20]
    attack = cfg.attack_config()
    assert (attack.eps, attack.target) == (0.2, 3)


# === CSV ===

def test_format_cell():
    assert format_cell(True) == "true"
    assert format_cell(0.123456789) == "0.123457"
    assert format_cell(float("nan")) == "nan"
    assert format_cell(None) == ""
    assert format_cell(7) == "7"


def test_write_csv(tmp_path):
    path = write_csv(tmp_path / "sub" / "out.csv", ["eps", "accuracy"], [[0.0, 1.0], [0.1, 0.5]])
    assert path.read_text() == "eps,accuracy\n0,1\n0.1,0.5\n"


# === PGM ===

def test_constant_maps_are_mid_grey():
    a, b = normalise_pair(np.zeros((3, 3)), np.zeros((3, 3)))
    assert (a == 128).all() and (b == 128).all()


def test_pair_shares_one_scale():
    a, b = normalise_pair(np.array([[1.0, -1.0]]), np.array([[0.5, 0.0]]))
    assert a.tolist() == [[255, 0]]
    assert b.tolist() == [[191, 128]]


def test_upsample_nearest():
    grid = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(upsample(grid, (4, 4))[:, 0], [1, 1, 3, 3])
    assert upsample(grid, (28, 28)).shape == (28, 28)


def test_write_pgm_header(tmp_path):
    path = write_pgm(tmp_path / "x.pgm", np.full((2, 3), 7, dtype=np.uint8))
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes([7] * 6)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "y.pgm", np.zeros((2, 3)))


def test_export_pair(tmp_path):
    paths = export_pair(tmp_path / "example_0001", np.ones((7, 7)), -np.ones((7, 7)), (28, 28))
    assert [p.name for p in paths] == ["example_0001_benign.pgm", "example_0001_adv.pgm"]
    assert paths[0].read_bytes().startswith(b"P5\n28 28\n255\n")
