import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import smooth_image, stripe_image
from mtransfer import cli, ops
from mtransfer.checkpoint import load_checkpoint
from mtransfer.config import TrainConfig, load_config_file, parse_lines, resolve_config
from mtransfer.errors import ConfigError, ImageDecodeError, NumericError
from mtransfer.export import TORCHVISION_MEAN, TORCHVISION_STD, export_vgg19, torchvision_indices
from mtransfer.imageio import (
    ImageBuffer,
    decode_image,
    decode_ppm,
    encode_image,
    encode_ppm,
    from_tensor,
    image_size,
    save_tensor,
    to_tensor,
)
from mtransfer.lossnet import load_weights
from mtransfer.tensor import Tensor

TWO_PIXELS = b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00"


# -- images ----------------------------------------------------------------------


def test_ppm_two_pixel_example():
    img = decode_ppm(TWO_PIXELS)
    assert (img.width, img.height) == (2, 1)
    assert img.samples.tolist() == [255, 0, 0, 0, 255, 0]
    assert encode_ppm(img) == TWO_PIXELS


def test_ppm_header_comments_and_whitespace():
    img = decode_ppm(b"P6 # made by hand\n2  # width\n1\n255\n\xff\x00\x00\x00\xff\x00")
    assert img.samples.tolist() == [255, 0, 0, 0, 255, 0]


def test_ppm_rejects_bad_input():
    with pytest.raises(ImageDecodeError):
        decode_ppm(TWO_PIXELS[:-1])
    with pytest.raises(ImageDecodeError):
        decode_ppm(b"P6\n2 1\n65535\n" + bytes(12))
    with pytest.raises(ImageDecodeError):
        decode_ppm(b"P3\n2 1\n255\n255 0 0 0 255 0\n")


@pytest.mark.parametrize("suffix", [".ppm", ".png"])
def test_file_round_trip(tmp_path, suffix):
    img = ImageBuffer(np.random.default_rng(0).integers(0, 256, (5, 7, 3)))
    path = tmp_path / f"x{suffix}"
    encode_image(img, path)
    np.testing.assert_array_equal(decode_image(path).pixels, img.pixels)
    assert image_size(path) == (7, 5)


def test_undecodable_file(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not really a png")
    with pytest.raises(ImageDecodeError):
        decode_image(tmp_path / "x.png")


def test_tensor_conversion_endpoints():
    img = ImageBuffer(np.array([[[0, 255, 128]]]))
    t = to_tensor(img)
    assert t.shape == (1, 3, 1, 1)
    assert t.data.ravel().tolist()[:2] == [0.0, 1.0]
    out = from_tensor(np.array([1.2, -0.3, 0.5]).reshape(1, 3, 1, 1))
    assert out.samples.tolist() == [255, 0, 128]


@given(st.lists(st.integers(0, 255), min_size=3, max_size=48).filter(lambda v: len(v) % 3 == 0))
@settings(max_examples=100, deadline=None)
def test_tensor_round_trip_is_identity(values):
    img = ImageBuffer(np.array(values, dtype=np.uint8).reshape(1, -1, 3))
    np.testing.assert_array_equal(from_tensor(to_tensor(img)).pixels, img.pixels)


# -- config ----------------------------------------------------------------------


def test_config_text_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\niterations = 50  # trailing\nlambdas=1, 0.5,0\nbeta=2.5\n", encoding="utf-8")
    cfg = resolve_config(load_config_file(path))
    assert cfg.iterations == 50 and cfg.lambdas == (1.0, 0.5, 0.0) and cfg.beta == 2.5


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_lines("itterations=5\n")
    with pytest.raises(ConfigError):
        parse_lines("no equals sign\n")
    with pytest.raises(ConfigError):
        resolve_config({"lambdas": "1,2"})
    with pytest.raises(ConfigError):
        resolve_config({"lambdas": "0,0,0"})
    with pytest.raises(ConfigError):
        resolve_config({"iterations": "many"})
    (tmp_path / "latin.cfg").write_bytes(b"crop=c\xe9nter\n")
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "latin.cfg")


def test_tiny_preset():
    cfg = resolve_config({"tiny": "8"})
    assert cfg.train_scales == (32, 64, 64) and cfg.style_scales == (32, 64, 64)
    assert cfg.width_divisor == 8 and cfg.min_dim == 60
    assert cfg.content_layer == "relu4_1"
    assert resolve_config({"tiny": 8, "train_scales": "16,32,32"}).train_scales == (16, 32, 32)


def test_content_layer_default_with_weights():
    assert resolve_config({"loss_weights": "vgg.mtwt"}).content_layer == "relu4_2"


def test_config_text_round_trip():
    cfg = resolve_config({"tiny": 4, "lambdas": "1,0,0.25", "style_assignment": "0,1,1", "lr": "3e-4"})
    assert TrainConfig.from_text(cfg.to_text()) == cfg


# -- export-weights ------------------------------------------------------------------


def torchvision_npz(path, seed=0):
    rng = np.random.default_rng(seed)
    idx = torchvision_indices()
    arrays = {
        f"features.{idx['conv1_1']}.weight": rng.standard_normal((64, 3, 3, 3)).astype(np.float32) * 0.1,
        f"features.{idx['conv1_1']}.bias": rng.standard_normal(64).astype(np.float32) * 0.1,
        f"features.{idx['conv1_2']}.weight": rng.standard_normal((64, 64, 3, 3)).astype(np.float32) * 0.05,
        f"features.{idx['conv1_2']}.bias": np.zeros(64, np.float32),
    }
    np.savez(path, **arrays)
    return arrays


def test_torchvision_indices():
    idx = torchvision_indices()
    assert idx["conv1_1"] == 0 and idx["conv1_2"] == 2 and idx["conv2_1"] == 5 and idx["conv5_4"] == 34


def test_export_folds_normalization(tmp_path):
    arrays = torchvision_npz(tmp_path / "vgg.npz")
    assert cli.main(["export-weights", "--input", str(tmp_path / "vgg.npz"), "--output", str(tmp_path / "vgg.mtwt")]) == 0
    net = load_weights(tmp_path / "vgg.mtwt")
    x = Tensor(smooth_image(8).astype(np.float64), dtype=np.float64)
    ours = net.extract_features(x, ["conv1_1"])["conv1_1"].data
    mean = np.asarray(TORCHVISION_MEAN)[None, :, None, None]
    std = np.asarray(TORCHVISION_STD)[None, :, None, None]
    normalized = Tensor((x.data - mean) / std, dtype=np.float64)
    ref = ops.conv2d(
        normalized,
        Tensor(arrays["features.0.weight"].astype(np.float64), dtype=np.float64),
        Tensor(arrays["features.0.bias"].astype(np.float64), dtype=np.float64),
    ).data
    # folded kernel is stored as float32
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-5 * np.abs(ref).max())


def test_export_plain_keys_keep_caffe_mean(tmp_path):
    rng = np.random.default_rng(1)
    np.savez(
        tmp_path / "plain.npz",
        **{"conv1_1.weight": rng.standard_normal((64, 3, 3, 3)).astype(np.float32), "conv1_1.bias": np.zeros(64, np.float32)},
    )
    assert export_vgg19(tmp_path / "plain.npz", tmp_path / "p.mtwt") == 1
    net = load_weights(tmp_path / "p.mtwt")
    np.testing.assert_allclose(net.weights["conv1_1"][0], np.load(tmp_path / "plain.npz")["conv1_1.weight"])


def test_export_bad_input(tmp_path):
    (tmp_path / "w.txt").write_text("x")
    out = str(tmp_path / "o.mtwt")
    assert cli.main(["export-weights", "--input", str(tmp_path / "w.txt"), "--output", out]) == 2
    np.savez(tmp_path / "empty.npz", other=np.zeros(1))
    assert cli.main(["export-weights", "--input", str(tmp_path / "empty.npz"), "--output", out]) == 3


# -- CLI -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    content = root / "content"
    content.mkdir()
    for i in range(3):
        save_tensor(Tensor(smooth_image(64, seed=i)), content / f"c{i}.png")
    save_tensor(Tensor(stripe_image(64)), root / "style.png")
    save_tensor(Tensor(smooth_image(96, seed=9)), root / "photo.png")
    model = root / "model.mtck"
    code = cli.main(
        ["train", "--tiny", "8", "--iters", "3", "--style", str(root / "style.png"), "--content-dir", str(content), "--output", str(model)]
    )
    assert code == 0
    return root


def test_train_outputs(workspace):
    ck = load_checkpoint(workspace / "model.mtck")
    assert ck.iteration == 3 and ck.config.tiny == 8
    lines = (workspace / "model.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,ls1,ls2,ls3,lh" and len(lines) == 4
    manifest = json.loads((workspace / "model.mtck.manifest.json").read_text())
    for key in ("command", "config", "seed", "version", "python", "numpy", "timings", "dataset_size"):
        assert key in manifest
    assert manifest["config"]["iterations"] == 3 and manifest["dataset_size"] == 3


def test_train_missing_style_writes_nothing(workspace, tmp_path):
    out = tmp_path / "m.mtck"
    code = cli.main(["train", "--tiny", "8", "--iters", "1", "--style", str(tmp_path / "nope.png"), "--content-dir", str(workspace / "content"), "--output", str(out)])
    assert code == 3 and not out.exists()


def test_train_bad_config_key(workspace, tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate=1\n")
    code = cli.main(["train", "--config", str(tmp_path / "bad.cfg"), "--style", str(workspace / "style.png"), "--content-dir", str(workspace / "content"), "--output", str(tmp_path / "m.mtck")])
    assert code == 2


def test_train_resume_extends(workspace, tmp_path):
    out = tmp_path / "m.mtck"
    base = ["train", "--tiny", "8", "--style", str(workspace / "style.png"), "--content-dir", str(workspace / "content"), "--output", str(out)]
    assert cli.main(base + ["--iters", "1"]) == 0
    assert cli.main(base + ["--iters", "2", "--resume", str(out)]) == 0
    assert load_checkpoint(out).iteration == 2
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["stylize", "--model", "m"])
    assert exc.value.code == 2


def stylize(workspace, out, *extra):
    return cli.main(["stylize", "--model", str(workspace / "model.mtck"), "--input", str(workspace / "photo.png"), "--output", str(out), *extra])


def test_stylize_is_deterministic(workspace, tmp_path):
    assert stylize(workspace, tmp_path / "a.png") == 0
    assert stylize(workspace, tmp_path / "b.png") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert image_size(tmp_path / "a.png") == (128, 128)
    manifest = json.loads((tmp_path / "a.png.manifest.json").read_text())
    assert manifest["sizes"] == [32, 64, 128] and manifest["levels"] == 3


def test_stylize_levels_and_intermediates(workspace, tmp_path):
    assert stylize(workspace, tmp_path / "one.png", "--levels", "1") == 0
    assert image_size(tmp_path / "one.png") == (32, 32)
    assert stylize(workspace, tmp_path / "all.ppm", "--emit-intermediate", "--size", "64") == 0
    assert image_size(tmp_path / "all_level1.ppm") == (16, 16)
    assert image_size(tmp_path / "all_level2.ppm") == (32, 32)
    assert image_size(tmp_path / "all.ppm") == (64, 64)


def test_stylize_errors(workspace, tmp_path):
    assert stylize(workspace, tmp_path / "x.png", "--levels", "4") == 2
    assert stylize(workspace, tmp_path / "x.png", "--size", "30") == 2
    assert cli.main(["stylize", "--model", str(tmp_path / "none.mtck"), "--input", str(workspace / "photo.png"), "--output", str(tmp_path / "x.png")]) == 3
    (tmp_path / "junk.mtck").write_bytes(b"junk")
    assert cli.main(["stylize", "--model", str(tmp_path / "junk.mtck"), "--input", str(workspace / "photo.png"), "--output", str(tmp_path / "x.png")]) == 3


def test_numeric_failure_exit_4(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite output")

    monkeypatch.setattr(cli, "mt_forward", boom)
    assert stylize(workspace, tmp_path / "x.png") == 4


def test_bench_report(workspace, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--model", str(workspace / "model.mtck"), "--reps", "3", "--size", "32", "--output", str(out)]) == 0
    text = capsys.readouterr().out
    assert "excluded" in text
    report = json.loads(out.read_text())["report"]
    assert report["reps"] == 3 and report["size"] == 32
    assert report["total_s"] >= report["mean_s"] and report["mean_s"] > 0
    assert cli.main(["bench", "--model", str(workspace / "model.mtck"), "--reps", "0"]) == 2
