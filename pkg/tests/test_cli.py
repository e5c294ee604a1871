import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prospect import cli
from prospect import dataset as D
from prospect.model import ProspectModel
from prospect.observation import Observation

TINY_FLAGS = ["--steps", "3", "--batch", "4", "--enc-widths", "4,4,4,4", "--dec-widths", "4,4,4,4",
              "--keypoints", "8", "--transform-hidden", "8", "--value-hidden", "4", "--noise-dim", "4",
              "--log-every", "1"]


def independent_ppm(blob):
    """Whitespace-token PPM reader written from the format description."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    assert tokens[0] == b"P6" and tokens[3] == b"255"
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(blob[pos + 1 :], np.uint8).reshape(h, w, 3)


def test_red_pixel_bytes():
    assert cli.ppm_bytes(np.array([[[1.0, 0.0, 0.0]]])) == b"P6\n1 1\n255\n\xff\x00\x00"


def test_zero_image_payload():
    blob = cli.ppm_bytes(np.zeros((64, 64, 3)))
    assert blob.startswith(b"P6\n64 64\n255\n") and blob[13:] == bytes(64 * 64 * 3)


def test_rounding_half_up():
    assert cli.ppm_bytes(np.array([[[0.5, 1 / 255, 0.5 / 255]]]))[-3:] == bytes([128, 1, 1])


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6), h=st.integers(1, 9), w=st.integers(1, 9))
def test_ppm_round_trip(seed, h, w):
    img = np.random.default_rng(seed).uniform(size=(h, w, 3))
    blob = cli.ppm_bytes(img)
    pix = independent_ppm(blob)
    assert np.array_equal(pix, np.floor(img * 255 + 0.5).astype(np.uint8))
    assert np.all(np.abs(pix / 255 - img) <= 0.5 / 255 + 1e-12)


def test_ppm_readable_by_pillow(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    img = np.random.default_rng(0).uniform(size=(64, 64, 3))
    cli.export_ppm(img, tmp_path / "a.ppm")
    with Image.open(tmp_path / "a.ppm") as im:
        assert im.size == (64, 64)
        assert np.array_equal(np.asarray(im), cli.read_ppm(tmp_path / "a.ppm"))


def test_ppm_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        cli.ppm_bytes(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        cli.ppm_bytes(np.zeros((2, 2)))


class FakeHyp:
    def __init__(self, j, rng):
        self.index = j
        self.predicted = Observation(rng.uniform(size=(64, 64, 3)), rng.uniform(-1, 1, 3), 0.5)
        self.action_dist = np.eye(10)[j]
        self.value = 0.25 * j


@pytest.mark.parametrize("with_target, width", [(False, 262), (True, 328)])
def test_grid_layout(tmp_path, with_target, width):
    rng = np.random.default_rng(1)
    hyps = [FakeHyp(j, rng) for j in range(4)]
    target = Observation(rng.uniform(size=(64, 64, 3)), np.zeros(3), 0.05) if with_target else None
    text = cli.render_hypothesis_grid(hyps, target, tmp_path / "g.ppm", [f"a{i}" for i in range(10)])
    grid = independent_ppm((tmp_path / "g.ppm").read_bytes())
    assert grid.shape == (64, width, 3)
    panels = [h.predicted.image for h in hyps] + ([target.image] if with_target else [])
    for i, img in enumerate(panels):
        left = i * 66
        assert np.array_equal(grid[:, left : left + 64], independent_ppm(cli.ppm_bytes(img)))
        if i:
            assert not grid[:, left - 2 : left].any()
    lines = text.splitlines()
    assert lines[2].startswith("panel 2:") and "action=a2" in lines[2] and "value=0.5000" in lines[2]
    assert (tmp_path / "g.txt").read_text() == text
    assert lines[-1].startswith("panel target") == with_target


# -- configuration ---------------------------------------------------------------------------------


def test_config_keys():
    assert cli.resolve_key("lambda") == ("train", "lam")
    assert cli.resolve_key("noise-dim") == ("model", "noise_dim")
    assert cli.resolve_key("batch") == ("train", "batch_size")
    with pytest.raises(cli.UsageError, match="lamda"):
        cli.resolve_key("lamda")


def test_config_file_and_flags_overlay(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nlambda = 0.2\nnh=2\nskips=off\n")
    overrides = cli.read_config_file(f)
    overrides.update(cli._config_flags(["--nh", "3", "--lr=0.01"]))
    mcfg, tcfg = cli.build_configs(overrides)
    assert (mcfg.n_heads, mcfg.use_skips, tcfg.lam, tcfg.learning_rate) == (3, False, 0.2, 0.01)
    f.write_text("lamdba=0.2\n")
    with pytest.raises(cli.UsageError):
        cli.read_config_file(f)
    with pytest.raises(cli.UsageError):
        cli.build_configs({"nh": "0"})
    with pytest.raises(cli.UsageError):
        cli.build_configs({"steps": "many"})


# -- commands ----------------------------------------------------------------------------------------


def test_usage_errors(capsys):
    assert cli.run([]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.run(["fly"]) == 1
    assert cli.run(["gen-data", "--domain", "stack"]) == 1
    assert cli.run(["eval", "--data", "x", "--model", "y", "--report", "z", "--bogus", "1"]) == 1
    assert cli.run(["train", "--data", "x", "--out", "y", "--lamda", "0.1"]) == 1


def test_runtime_error_names_path(tmp_path, capsys):
    assert cli.run(["eval", "--data", str(tmp_path), "--model", str(tmp_path / "nomodel"), "--report",
                    str(tmp_path / "r.txt")]) == 2
    assert "nomodel" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["gen-data", "--domain", "stack", "--episodes", "10", "--seed", "7", "--out",
                    str(root / "data")]) == 0
    assert cli.run(["train", "--data", str(root / "data"), "--out", str(root / "m"), *TINY_FLAGS]) == 0
    return root


def test_gen_data_manifest(pipeline):
    entries, vocab = D.read_manifest(pipeline / "data")
    assert len(entries) == 10 and len(vocab) == 10


def test_train_outputs(pipeline):
    m = ProspectModel.load(pipeline / "m")
    assert m.config.enc_widths == (4, 4, 4, 4) and m.config.noise_dim == 4
    assert (pipeline / "m" / "loss.csv").read_text().splitlines()[0] == "step,loss"
    assert "steps=3" in (pipeline / "m" / "train.cfg").read_text()


def test_eval_predict_plan(pipeline, tmp_path, capsys):
    data, model = str(pipeline / "data"), str(pipeline / "m")
    assert cli.run(["eval", "--data", data, "--model", model, "--report", str(tmp_path / "r.txt")]) == 2
    assert "val split is empty" in capsys.readouterr().err  # 10 episodes leave no val episode at seed 0
    assert cli.run(["eval", "--data", data, "--model", model, "--report", str(tmp_path / "r.txt"),
                    "--split", "all"]) == 0
    assert "value_auc=" in (tmp_path / "r.txt").read_text()
    assert cli.run(["predict", "--model", model, "--data", data, "--episode", "0", "--frame", "0",
                    "--action", "grasp(red)", "--seed", "1", "--out", str(tmp_path / "p")]) == 0
    assert independent_ppm((tmp_path / "p.ppm").read_bytes()).shape == (64, 328, 3)
    assert len((tmp_path / "p.txt").read_text().splitlines()) == 5
    assert cli.run(["plan", "--model", model, "--data", data, "--episode", "0", "--frame", "0", "--depth", "2",
                    "--beam", "2", "--topk", "2", "--seed", "1", "--out", str(tmp_path / "q")]) == 0
    lines = (tmp_path / "q.txt").read_text().splitlines()
    assert lines[0].startswith("score=") and len(lines) == 3
    assert (tmp_path / "q_1.ppm").exists()
    assert cli.run(["predict", "--model", model, "--data", data, "--episode", "99", "--frame", "0",
                    "--action", "lift", "--out", str(tmp_path / "x")]) == 2
    assert cli.run(["predict", "--model", model, "--data", data, "--episode", "0", "--frame", "0",
                    "--action", "fly", "--out", str(tmp_path / "x")]) == 2


def test_repeat_runs_are_byte_identical(pipeline, tmp_path):
    assert cli.run(["gen-data", "--domain", "stack", "--episodes", "10", "--seed", "7", "--out",
                    str(tmp_path / "data")]) == 0
    assert cli.run(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "m"), *TINY_FLAGS]) == 0
    for sub in ("data", "m"):
        names = sorted(p.name for p in (pipeline / sub).iterdir())
        assert names == sorted(p.name for p in (tmp_path / sub).iterdir())
        for n in names:
            assert (pipeline / sub / n).read_bytes() == (tmp_path / sub / n).read_bytes(), n


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "prospect"], capture_output=True, text=True)
    assert out.returncode == 1 and "usage" in out.stderr
