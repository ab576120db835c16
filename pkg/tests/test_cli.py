import csv

import numpy as np
import pytest

from fogfusion import pipeline as P
from fogfusion import tensor as T
from fogfusion.cli import main
from fogfusion.config import ConfigError, RunConfig, load_config, parse_config

TINY = """\
seed = 5
[data]
plane_h = 32
plane_w = 64
train_frames = 6
test_frames = 2
[model]
widths = 4, 4, 4, 4, 4, 4
stem_width = 4
[train]
epochs = {epochs}
batch_size = 4
optimizer = adam
learning_rate = 0.001
"""


def _cfg(tmp_path, epochs=1, name="c.cfg", extra=""):
    p = tmp_path / name
    p.write_text(TINY.format(epochs=epochs) + extra)
    return str(p)


def test_parse_round_trip_and_digest():
    cfg = RunConfig()
    again = parse_config(cfg.dumps())
    assert again == cfg and again.digest() == cfg.digest()
    moved = cfg.with_overrides(run={"out": "elsewhere"})
    assert moved.digest() == cfg.digest()
    assert cfg.with_overrides(train={"epochs": 9}).digest() != cfg.digest()


def test_config_errors_carry_line_numbers(tmp_path):
    cases = {
        "seed = 1\n[train]\nepochs = many\n": 3,
        "[data]\nplane_h = 32\n[nowhere]\n": 3,
        "[model]\nwidth = 4\n": 2,
        "seed = 1\n\njust words\n": 3,
    }
    for text, line in cases.items():
        with pytest.raises(ConfigError) as e:
            parse_config(text, "x.cfg")
        assert e.value.line == line and f"x.cfg:{line}:" in str(e.value)
    with pytest.raises(ConfigError, match="widths"):
        parse_config("[model]\nwidths = 4, 4\n")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nepochs = -\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad.cfg:2:" in capsys.readouterr().err
    cfg = _cfg(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert "generate" in capsys.readouterr().err
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"]) == 3


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    out = root / "run"
    cfg = _cfg(root)
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    return root, cfg, out


def test_generate_layout(generated):
    _, cfg, out = generated
    d = out / "dataset"
    assert (d / "frames.fgd").exists() and (d / "index.txt").exists() and (d / "split.json").exists()
    digest = load_config(cfg).digest()
    assert (out / "config.txt").read_text().startswith(f"# config_digest={digest}")
    lines = (d / "index.txt").read_text().splitlines()
    assert len(lines) == 1 + 6 + 2 * 4


def test_zero_epochs_checkpoint_is_init(generated, tmp_path):
    root, _, out = generated
    cfg0 = _cfg(tmp_path, epochs=0, extra=f"[data]\ndataset = {out / 'dataset'}\n")
    assert main(["train", "--config", cfg0, "--out", str(tmp_path / "t0")]) == 0
    _, params = T.load_checkpoint(tmp_path / "t0" / "entropy_deep" / "entropy_deep_epoch0.ckpt")
    init = P.make_model("entropy_deep", load_config(cfg0)).state_dict()
    assert params.keys() == init.keys()
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])


def test_train_twice_identical_and_eval(generated, tmp_path):
    _, _, out = generated
    cfg = _cfg(tmp_path, extra=f"[data]\ndataset = {out / 'dataset'}\n")
    logs, ckpts = [], []
    for k in range(2):
        o = tmp_path / f"r{k}"
        assert main(["train", "--config", cfg, "--out", str(o)]) == 0
        logs.append((o / "entropy_deep" / "loss_log.csv").read_text())
        ckpts.append((o / "entropy_deep" / "entropy_deep_epoch1.ckpt").read_bytes())
    assert logs[0] == logs[1] and ckpts[0] == ckpts[1]
    rows = list(csv.reader(logs[0].splitlines()[1:]))
    assert rows[0] == list(P.LOSS_LOG_COLUMNS) and len(rows) == 1 + 2
    assert rows[1][4].count(":") == 4
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "r0")]) == 0
    report = (tmp_path / "r0" / "eval_entropy_deep.csv").read_text().splitlines()
    assert report[1].startswith("mode,clear_easy") and report[2].startswith("entropy_deep,")


def test_entropy_command(tmp_path):
    cfg = tmp_path / "e.cfg"
    cfg.write_text("[entropy]\nscenes = 8\nwrite_maps = true\n")
    assert main(["entropy", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
    rows = list(csv.reader((tmp_path / "e" / "entropy.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["condition", "stream", "mean_entropy", "normalized_entropy"]
    table = {(r[0], r[1]): float(r[3]) for r in rows[1:]}
    conds = ["clear", "fog_50m", "fog_40m", "fog_30m"]
    assert len(rows) - 1 == 4 * 5
    cam = [table[(c, "camera")] for c in conds]
    assert all(b < a for a, b in zip(cam, cam[1:]))
    radar = [table[(c, "radar")] for c in conds]
    assert max(radar) - min(radar) < 0.1
    assert any((tmp_path / "e" / "entropy_maps").glob("fog_40m_*_camera.pgm"))
