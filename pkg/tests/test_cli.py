import csv
import struct

import pytest

from interprobust.cli import ATTACK_HEADER, main
from interprobust.services import network_service

BASE = """
synth_n = 40
synth_size = 8
arch = Tiny
epochs = 1
batch_size = 10
warmup_steps = 0
eps_final = 0.1
inner_steps = 1
n_samples = 10
steps = 3
step_size = 0.05
threads = 1
"""


def write_config(tmp_path, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(BASE + extra)
    return str(path)


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "train"
    assert main(["train", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    return out / "model.irc"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_checkpoint_and_metrics(trained, capsys):
    assert trained.exists()
    assert network_service.load(trained).arch.value == "Tiny"
    rows = read_rows(trained.parent / "metrics.csv")
    assert rows[0] == ["step", "epoch", "eps", "loss", "clean_acc"]
    assert len(rows) == 1 + 3


def test_train_summary_on_stdout(tmp_path, capsys):
    main(["train", "--config", write_config(tmp_path, "method = Int\n"), "--out", str(tmp_path / "o")])
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    assert out[0].startswith("✅ train: method=Int steps=3")


def test_training_twice_gives_identical_checkpoints(tmp_path):
    config = write_config(tmp_path, "method = Int\ngamma = 0.05\n")
    assert main(["train", "--config", config, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", config, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.irc").read_bytes() == (tmp_path / "b" / "model.irc").read_bytes()


def test_eval_csvs_are_deterministic(tmp_path, trained):
    extra = f"checkpoint = {trained}\nsweeps = ata, multistep, aai\neps_list = 0, 0.1\nstep_list = 1, 2\n"
    config = write_config(tmp_path, extra, "eval.cfg")
    assert main(["eval", "--config", config, "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", "--config", config, "--out", str(tmp_path / "e2"), "--threads", "3"]) == 0
    for name in ("sweep_ata.csv", "sweep_multistep.csv", "sweep_aai.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    assert read_rows(tmp_path / "e1" / "sweep_ata.csv")[0] == ["eps", "accuracy"]


def test_isa_sweep_csv(tmp_path, trained):
    extra = f"checkpoint = {trained}\nsweeps = isa\neps_list = 0, 0.2\nspecs = CAM:L1:TwoClass, GradCAM:L1:OneClass\n"
    out = tmp_path / "isa"
    assert main(["eval", "--config", write_config(tmp_path, extra, "i.cfg"), "--out", str(out)]) == 0
    rows = read_rows(out / "sweep_isa.csv")
    assert rows[0] == ["eps", "CAM:L1:TwoClass", "GradCAM:L1:OneClass"]
    assert len(rows) == 1 + 2


def test_aai_attack_at_zero_eps(tmp_path, trained):
    extra = f"checkpoint = {trained}\nattack = aai\neps = 0\nexport_maps = true\n"
    out = tmp_path / "att"
    assert main(["attack", "--config", write_config(tmp_path, extra, "a.cfg"), "--out", str(out)]) == 0
    rows = read_rows(out / "attack_aai.csv")
    assert rows[0] == ATTACK_HEADER
    taus = [row[ATTACK_HEADER.index("tau")] for row in rows[1:]]
    assert taus and all(t in ("1", "") for t in taus)
    assert "1" in taus
    assert any(p.name.endswith("_benign.pgm") for p in (out / "maps").iterdir())


def test_pgd_attack_rows(tmp_path, trained):
    extra = f"checkpoint = {trained}\nattack = pgd\neps = 0.2\n"
    out = tmp_path / "pgd"
    assert main(["attack", "--config", write_config(tmp_path, extra, "p.cfg"), "--out", str(out)]) == 0
    rows = read_rows(out / "attack_pgd.csv")
    assert len(rows) == 1 + 10
    assert [r[0] for r in rows[1:]] == [str(i) for i in range(10)]


def test_visualize(tmp_path, trained):
    extra = f"checkpoint = {trained}\nneuron_index = 2\nvis_steps = 3\n"
    out = tmp_path / "vis"
    assert main(["visualize", "--config", write_config(tmp_path, extra, "v.cfg"), "--out", str(out)]) == 0
    assert (out / "neuron_002_seed.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")
    assert (out / "neuron_002_features.pgm").exists()


# === EXIT CODES ===

def test_missing_mnist_path_is_a_config_error(tmp_path, caplog):
    config = write_config(tmp_path, "dataset = mnist\n")
    assert main(["train", "--config", config, "--out", str(tmp_path / "o")]) == 1
    assert "train_images" in caplog.text


def test_unknown_key_is_a_config_error(tmp_path):
    assert main(["train", "--config", write_config(tmp_path, "colour = blue\n")]) == 1


def test_missing_checkpoint_is_a_config_error(tmp_path):
    assert main(["eval", "--config", write_config(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_odd_synthetic_count_is_a_config_error(tmp_path):
    config = tmp_path / "odd.cfg"
    config.write_text(BASE.replace("synth_n = 40", "synth_n = 41"))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "o")]) == 1


def test_corrupt_idx_is_an_io_error(tmp_path):
    images, labels = tmp_path / "img.idx", tmp_path / "lbl.idx"
    images.write_bytes(struct.pack(">IIII", 0x0999, 1, 8, 8) + bytes(64))
    labels.write_bytes(struct.pack(">II", 0x0801, 1) + bytes(1))
    extra = f"dataset = mnist\ntrain_images = {images}\ntrain_labels = {labels}\n"
    assert main(["train", "--config", write_config(tmp_path, extra), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file_is_an_io_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_prop1_without_enough_successes_is_a_numeric_error(tmp_path, trained):
    extra = f"checkpoint = {trained}\nsweeps = prop1\neps = 0\n"
    config = write_config(tmp_path, extra, "p1.cfg")
    assert main(["eval", "--config", config, "--out", str(tmp_path / "o")]) == 3
