import subprocess
import sys

import numpy as np
import pytest

from iplnet.cli import main
from iplnet.fileio import (
    ImageFormatError,
    WeightsFormatError,
    WeightsMismatchError,
    decode_ppm,
    encode_ppm,
    load_image,
    load_weights,
    parse_weights,
    save_image,
    save_weights,
    weights_bytes,
)
from iplnet.model import ModelConfig, init_weights

SMALL = ModelConfig(num_fibs=1, channels=8, chunk_c=8, chunk_w=16, chunk_h=16, drtm_size=(8, 8))


def listing(path):
    return sorted(p.name for p in path.iterdir())


# ---------------------------------------------------------------------------
# images


@pytest.mark.parametrize("ext", ["ppm", "png"])
def test_image_round_trip(tmp_path, rng, ext):
    img = rng.uniform(0, 1, (3, 13, 7)).astype(np.float32)
    save_image(tmp_path / f"x.{ext}", img)
    back = load_image(tmp_path / f"x.{ext}")
    assert back.shape == (3, 13, 7)
    assert np.max(np.abs(back - img)) <= 1 / 255 / 2 + 1e-6
    save_image(tmp_path / f"y.{ext}", back)
    np.testing.assert_array_equal(load_image(tmp_path / f"y.{ext}"), back)


def test_hand_built_ppm():
    # 2x2 image, rows top to bottom: red, green / blue, white
    blob = b"P6\n# two by two\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 51])
    img = decode_ppm(blob)
    assert img.shape == (3, 2, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])  # x=0, y=0
    np.testing.assert_array_equal(img[:, 1, 0], [0, 1, 0])
    np.testing.assert_array_equal(img[:, 0, 1], [0, 0, 1])
    np.testing.assert_array_equal(img[:, 1, 1], np.float32([1, 1, 0.2]))
    assert encode_ppm(img) == b"P6\n2 2\n255\n" + blob[-12:]


@pytest.mark.parametrize(
    "blob",
    [b"", b"P6\n2 2", b"P6\n2 2\n255", b"P5\n2 2\n255\n" + bytes(4), b"P6\n2 2\n255\n" + bytes(11), b"P6\n2 x\n255\n", b"P6\n2 2\n65535\n" + bytes(24)],
)
def test_bad_ppm_is_rejected(blob):
    with pytest.raises(ImageFormatError):
        decode_ppm(blob)


def test_image_errors(tmp_path):
    with pytest.raises(OSError, match="missing.ppm"):
        load_image(tmp_path / "missing.ppm")
    with pytest.raises(ImageFormatError):
        save_image(tmp_path / "x.bmp", np.zeros((3, 2, 2)))
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "bad.png")
    assert listing(tmp_path) == ["bad.png"]


# ---------------------------------------------------------------------------
# weights


def test_weights_round_trip_is_bit_exact(tmp_path):
    w = init_weights(SMALL, 3, zero_residual=False)
    save_weights(tmp_path / "w.bin", w, SMALL)
    back, config = load_weights(tmp_path / "w.bin")
    assert config == SMALL
    assert list(back) == list(w)
    assert all(np.array_equal(back[k], w[k]) for k in w)
    assert back.digest == w.digest


def test_weights_header_layout():
    blob = weights_bytes(init_weights(SMALL, 0), SMALL)
    assert blob[:4] == b"IPLW" and blob[4:8] == (1).to_bytes(4, "little")
    assert np.frombuffer(blob[8:44], "<u4").tolist() == [1, 8, 2, 8, 16, 16, 4, 8, 8]


def test_flipped_payload_byte_is_detected():
    w = init_weights(SMALL, 0, zero_residual=False)
    blob = bytearray(weights_bytes(w, SMALL))
    blob[-3] ^= 0x01
    try:
        back, _ = parse_weights(bytes(blob))
    except (WeightsFormatError, WeightsMismatchError):
        return
    assert back.digest != w.digest


def test_corrupted_weights_files():
    good = weights_bytes(init_weights(SMALL, 0), SMALL)
    with pytest.raises(WeightsFormatError):
        parse_weights(b"")
    with pytest.raises(WeightsFormatError):
        parse_weights(b"XXXX" + good[4:])
    with pytest.raises(WeightsFormatError):
        parse_weights(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(WeightsFormatError):
        parse_weights(good[:-1])
    # drop the final record entirely
    with pytest.raises(WeightsMismatchError, match="up.bias"):
        parse_weights(good[: good.rindex(b"up.bias") - 4])


def test_manifest_mismatch_names_first_offending_record():
    blob = weights_bytes(init_weights(SMALL, 0), SMALL)
    # embed a config the records do not satisfy
    head = blob[:8] + np.array([1, 16, 2, 16, 16, 16, 4, 8, 8], "<u4").tobytes()
    with pytest.raises(WeightsMismatchError, match="down.weight"):
        parse_weights(head + blob[44:])


def test_non_finite_weights_rejected():
    w = init_weights(SMALL, 0)
    w.tensors["up.bias"][0] = np.inf
    with pytest.raises(WeightsMismatchError, match="non-finite"):
        parse_weights(weights_bytes(w, SMALL))


# ---------------------------------------------------------------------------
# command line


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    assert main(["synth", "--out-dir", str(d), "--count", "2", "--size", "32x32", "--seed", "7"]) == 0
    return d


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "w.bin"
    save_weights(path, init_weights(SMALL, 0), SMALL)
    return path


def test_synth_layout_and_determinism(tmp_path, scene_dir, capsys):
    assert listing(scene_dir) == [f"scene_{n}_{k}.ppm" for n in range(2) for k in ("gt", "high", "low", "mid")]
    again = tmp_path / "again"
    assert main(["synth", "--out-dir", str(again), "--count", "2", "--size", "32x32", "--seed", "7"]) == 0
    for name in listing(scene_dir):
        assert (again / name).read_bytes() == (scene_dir / name).read_bytes()
    assert "scenes=2" in capsys.readouterr().out


def test_synth_png_and_invalid_scene(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path / "p"), "--count", "1", "--size", "16x24", "--seed", "1", "--format", "png"]) == 0
    assert load_image(tmp_path / "p" / "scene_0_mid.png").shape == (3, 16, 24)
    assert main(["synth", "--out-dir", str(tmp_path / "q"), "--count", "1", "--size", "8x8", "--seed", "1"]) == 2
    assert not (tmp_path / "q").exists()


def test_metrics_identical(scene_dir, capsys):
    x = str(scene_dir / "scene_0_gt.ppm")
    assert main(["metrics", "--ref", x, "--test", x]) == 0
    assert capsys.readouterr().out == "psnr=100.0000 ssim=1.000000\n"


def test_fuse_writes_image_and_stats(tmp_path, scene_dir, weights_file, capsys):
    out = tmp_path / "fused.ppm"
    args = ["fuse", *(f"--{k}={scene_dir / f'scene_0_{k}.ppm'}" for k in ("low", "mid", "high"))]
    assert main([*args, "--weights", str(weights_file), "--out", str(out), "--stats", "--repeats", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("run=0 seconds=") and lines[1].startswith("run=1 seconds=")
    stats = dict(kv.split("=") for kv in lines[2].split())
    assert list(stats) == ["hits", "misses", "evictions", "bytes_used", "lfe_evals_saved"]
    assert int(stats["hits"]) == int(stats["misses"]) == int(stats["lfe_evals_saved"]) > 0
    assert load_image(out).shape == (3, 32, 32)
    no_cache = tmp_path / "plain.ppm"
    assert main([*args, "--weights", str(weights_file), "--out", str(no_cache), "--no-cache", "--chunk-w", "8"]) == 0
    assert load_image(no_cache).shape == (3, 32, 32)


def test_fuse_size_mismatch(tmp_path, scene_dir, weights_file, capsys):
    save_image(tmp_path / "small.ppm", np.zeros((3, 16, 32)))
    code = main([
        "fuse", "--low", str(tmp_path / "small.ppm"), "--mid", str(scene_dir / "scene_0_mid.ppm"),
        "--high", str(scene_dir / "scene_0_high.ppm"), "--weights", str(weights_file), "--out", str(tmp_path / "o.ppm"),
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert "16x32" in err and "32x32" in err
    assert not (tmp_path / "o.ppm").exists()


def test_fuse_missing_weights(tmp_path, scene_dir, capsys):
    args = [f"--{k}={scene_dir / f'scene_0_{k}.ppm'}" for k in ("low", "mid", "high")]
    assert main(["fuse", *args, "--weights", str(tmp_path / "none.bin"), "--out", str(tmp_path / "o.ppm")]) == 2
    assert "none.bin" in capsys.readouterr().err
    assert listing(tmp_path) == []


def test_usage_errors_exit_one(capsys):
    for argv in (["fuse", "--bogus"], [], ["synth", "--out-dir", "x", "--count", "1", "--size", "64", "--seed", "1"], ["nope"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "iplnet", "metrics", "--ref"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr


def test_train_then_bench(tmp_path, scene_dir, capsys):
    weights = tmp_path / "trained.bin"
    csv_path = tmp_path / "loss.csv"
    plot = tmp_path / "loss.png"
    assert main([
        "train", "--data-dir", str(scene_dir), "--out-weights", str(weights), "--steps", "3",
        "--fibs", "1", "--channels", "8", "--loss-csv", str(csv_path), "--plot", str(plot), "--seed", "3",
    ]) == 0
    out = capsys.readouterr().out
    assert out.startswith("steps=3 initial_loss=")
    assert csv_path.read_text().splitlines()[0] == "step,loss" and len(csv_path.read_text().splitlines()) == 4
    assert plot.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    _, config = load_weights(weights)
    assert (config.num_fibs, config.channels, config.chunk_c) == (1, 8, 8)

    bench_csv, bench_plot = tmp_path / "bench.csv", tmp_path / "bench.svg"
    assert main([
        "bench", "--data-dir", str(scene_dir), "--weights", str(weights), "--repeats", "2",
        "--csv", str(bench_csv), "--plot", str(bench_plot),
    ]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "images=2 repeats=2" and lines[-1].startswith("warm_reduction=")
    assert len(bench_csv.read_text().splitlines()) == 5
    assert b"<svg" in bench_plot.read_bytes()


def test_train_empty_dir_fails_cleanly(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = main(["train", "--data-dir", str(tmp_path / "empty"), "--out-weights", str(tmp_path / "w.bin")])
    assert code == 2
    assert not (tmp_path / "w.bin").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("max_rel_error=") and line.endswith("tolerance=1e-03")
    assert float(line.split()[0].split("=")[1]) <= 1e-3
