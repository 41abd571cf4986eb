import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advit.augment import canonical_policy, light_policy
from advit.cli import run_cli
from advit.data import Dataset, make_blobs, make_margin_blobs
from advit.io import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    ConfigSyntaxError,
    FormatError,
    TruncatedError,
    VersionError,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    dataset_from_bytes,
    dataset_to_bytes,
    format_config,
    load_checkpoint,
    load_dataset,
    parse_config,
    preset,
    read_metrics,
    read_pnm,
    save_checkpoint,
    save_dataset,
    tile_images,
    write_metrics,
    write_pnm,
)
from advit.train import EpochRecord, OptimizerState, TrainRecipe, adapt_low_res
from advit.vit import Model, ModelConfig, init_params, tiny_config


def f32(params):
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def sample_checkpoint(with_optimizer=True):
    cfg = tiny_config("xcit")
    params = f32(init_params(cfg, seed=1))
    opt = None
    if with_optimizer:
        opt = OptimizerState({k: np.full_like(v, 0.25) for k, v in params.items()}, {k: np.full_like(v, 0.5) for k, v in params.items()}, 7)
    hist = [EpochRecord(0, 0.7, 0.5, 0.4, 1 / 255, 5e-6), EpochRecord(1, 0.6, 0.6, 0.5, 2 / 255, 1e-4)]
    return Checkpoint(cfg, params, hist, TrainRecipe(), opt, seed=3, extra={"note": "x"})


# ---------------------------------------------------------------- datasets


def test_dataset_round_trip(tmp_path):
    ds = make_margin_blobs(40, seed=2)
    save_dataset(tmp_path / "d.bin", ds)
    back = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 2


def test_dataset_payload_length():
    ds = make_blobs(5, shape=(3, 4, 2), num_classes=3)
    buf = dataset_to_bytes(ds)
    assert len(buf) == 8 + 24 + 5 * 3 * 4 * 2 + 5


def test_empty_dataset(tmp_path):
    ds = Dataset(np.zeros((0, 4, 4, 3)), np.zeros(0, dtype=int), 2)
    save_dataset(tmp_path / "e.bin", ds)
    back = load_dataset(tmp_path / "e.bin")
    assert len(back) == 0 and back.num_classes == 2


def test_dataset_errors(tmp_path):
    buf = dataset_to_bytes(make_blobs(4))
    with pytest.raises(FormatError, match="magic"):
        dataset_from_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(TruncatedError):
        dataset_from_bytes(buf[:-3])
    with pytest.raises(VersionError):
        dataset_from_bytes(buf[:8] + struct.pack("<I", 9) + buf[12:])
    bad = bytearray(buf)
    bad[-1] = 7
    with pytest.raises(FormatError, match="label"):
        dataset_from_bytes(bytes(bad))
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + b"\0" * 100)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "bad.bin")


# ------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ck = sample_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ck.config and back.recipe == ck.recipe and back.seed == 3
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert back.optimizer.step == 7 and all(np.array_equal(back.optimizer.v[k], ck.optimizer.v[k]) for k in ck.params)
    assert back.history == ck.history and back.extra == {"note": "x"}


def test_save_load_save_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", sample_checkpoint())
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_forward_identical_after_reload(tmp_path):
    ck = sample_checkpoint(with_optimizer=False)
    x = np.random.default_rng(0).uniform(size=(2, 8, 8, 3))
    before = Model(ck.config, ck.params)(x).data
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(Model(back.config, back.params)(x).data, before)


def test_low_res_config_loads_unadapted_weights(tmp_path):
    cfg = ModelConfig(image_size=(32, 32, 3), conv_strides=(2, 2, 2, 2), depth=1, class_attention_depth=1, d_model=16, heads=2)
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint(cfg, f32(init_params(cfg))))
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert Model(adapt_low_res(back.config), back.params)(np.zeros((1, 32, 32, 3))).shape == (1, 2)


def test_checkpoint_errors(tmp_path):
    buf = checkpoint_to_bytes(sample_checkpoint(with_optimizer=False))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"BADMAGIC" + buf[8:])
    with pytest.raises(VersionError):
        checkpoint_from_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 2) + buf[12:])
    with pytest.raises(TruncatedError):
        checkpoint_from_bytes(buf[: len(buf) // 2])
    # first tensor's dtype tag sits right after the header, count and name
    (hlen,) = struct.unpack("<I", buf[12:16])
    pos = 16 + hlen + 4
    (nlen,) = struct.unpack("<H", buf[pos : pos + 2])
    bad = bytearray(buf)
    bad[pos + 2 + nlen] = 9
    with pytest.raises(FormatError, match="dtype"):
        checkpoint_from_bytes(bytes(bad))
    # version is checked from the file before any tensor bytes are read
    (tmp_path / "v.ckpt").write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 5))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v.ckpt")


def test_failed_write_leaves_no_partial_file(tmp_path):
    ck = sample_checkpoint()
    ck.params["bad"] = object()
    with pytest.raises(Exception):
        save_checkpoint(tmp_path / "x.ckpt", ck)
    assert list(tmp_path.iterdir()) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(1, 4), min_size=0, max_size=3))
def test_arbitrary_tensors_round_trip(seed, shape):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32).astype(np.float64)
    ck = Checkpoint(tiny_config("vit"), {"t": arr})
    assert np.array_equal(checkpoint_from_bytes(checkpoint_to_bytes(ck)).params["t"], arr)


# ----------------------------------------------------------------- configs


def test_empty_config_is_light_recipe():
    cfg = parse_config("", is_text=True)
    r = cfg.recipe
    assert r.policy == light_policy() and r.weight_decay == 0.5 and r.eps_warmup_epochs == 10
    assert cfg.model == ModelConfig()


def test_canonical_via_keys():
    text = """
    # canonical recipe spelled out
    train.weight_decay = 0.05
    augment.mixup = true
    augment.cutmix = true
    augment.randaugment = true
    augment.random_erasing = true
    """
    cfg = parse_config(text, is_text=True)
    assert cfg.recipe == preset("canonical").recipe
    assert cfg.recipe.policy == canonical_policy()


def test_preset_key_and_overrides():
    cfg = parse_config("preset = canonical\ntrain.epochs = 40\nmodel.depth = 3\naugment.basic.flip_prob = 0.0", is_text=True)
    assert cfg.recipe.weight_decay == 0.05 and cfg.recipe.epochs == 40 and cfg.model.depth == 3
    assert cfg.recipe.policy.basic.flip_prob == 0.0


def test_range_error_names_line():
    with pytest.raises(ConfigSyntaxError) as err:
        parse_config("train.epochs = 30\ntrain.eps_warmup_epochs = -1\n", is_text=True)
    assert err.value.line == 2


@pytest.mark.parametrize(
    "text, line",
    [("train.learning_rate = 1", 1), ("# c\nmodel.depth = two", 2), ("just words", 1), ("augment.basic = 1", 1), ("train.policy = light", 1), ("preset = heavy", 1)],
)
def test_config_errors(text, line):
    with pytest.raises(ConfigSyntaxError) as err:
        parse_config(text, is_text=True)
    assert err.value.line == line


def test_config_file_and_format_round_trip(tmp_path):
    cfg = parse_config("preset = canonical\ntrain.eps_max = 0.1\nmodel.conv_strides = 2, 2\n", is_text=True)
    p = tmp_path / "exp.cfg"
    p.write_text(format_config(cfg))
    back = parse_config(p)
    assert back.model == cfg.model and back.recipe == cfg.recipe


# ----------------------------------------------------------------- metrics


def test_empty_metrics_is_header_only(tmp_path):
    write_metrics(tmp_path / "m.csv", [], columns=["a", "b"])
    assert (tmp_path / "m.csv").read_text() == "a,b\n"


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_reals_round_trip_exactly(v):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        write_metrics(Path(d) / "m.csv", [{"x": v}])
        assert float(read_metrics(Path(d) / "m.csv")[0]["x"]) == v


def test_metrics_column_order_and_json(tmp_path):
    recs = [{"b": 1, "a": 0.1}, {"a": 0.2, "b": 2}]
    write_metrics(tmp_path / "m.csv", recs, columns=["a", "b"], json_path=tmp_path / "m.json")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "a,b"
    assert json.loads((tmp_path / "m.json").read_text()) == [{"a": 0.1, "b": 1}, {"a": 0.2, "b": 2}]
    with pytest.raises(ValueError):
        write_metrics(tmp_path / "bad.csv", [{"a": 1}, {"c": 2}])


# ----------------------------------------------------------------- rasters


@pytest.mark.parametrize("shape", [(5, 7), (5, 7, 3)])
def test_pnm_round_trip(tmp_path, shape):
    img = np.random.default_rng(0).integers(0, 256, size=shape) / 255.0
    write_pnm(tmp_path / "i.pnm", img)
    back = read_pnm(tmp_path / "i.pnm")
    assert np.array_equal(back.reshape(shape), img)


def test_tile_layout():
    grid = tile_images(np.zeros((5, 2, 2, 1)), cols=3)
    assert grid.shape == (5, 8, 1)
    assert grid[2, 0, 0] == 1.0 and grid[0, 0, 0] == 0.0


# --------------------------------------------------------------------- cli


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["gen-data", "--n", "48", "--seed", "1", "--out", str(root / "data.bin")]) == 0
    cfg = root / "exp.cfg"
    cfg.write_text("model.depth = 1\nmodel.class_attention_depth = 1\nmodel.d_model = 16\nmodel.heads = 2\ntrain.batch_size = 16\ntrain.eps_max = 0.1\n")
    code = run_cli(["train", str(root / "data.bin"), "--config", str(cfg), "--epochs", "2", "--out", str(root / "run")])
    assert code == 0
    return root


def test_cli_train_outputs(trained_run):
    run = trained_run / "run"
    assert {"last.ckpt", "best.ckpt", "history.csv"} <= {p.name for p in run.iterdir()}
    assert [r["epoch"] for r in read_metrics(run / "history.csv")] == ["0", "1"]
    assert len(load_checkpoint(run / "last.ckpt").history) == 2


def test_cli_attack_accuracy_in_unit_interval(trained_run, capsys):
    out = trained_run / "attack.csv"
    code = run_cli(["attack", str(trained_run / "run" / "best.ckpt"), str(trained_run / "data.bin"), "--eps", "0.1", "--steps", "5", "--out", str(out)])
    assert code == 0
    acc = float(read_metrics(out)[0]["robust_accuracy"])
    assert 0.0 <= acc <= 1.0


def test_cli_sweep_is_non_increasing(trained_run):
    out = trained_run / "sweep.csv"
    code = run_cli(["sweep-eps", str(trained_run / "run" / "best.ckpt"), str(trained_run / "data.bin"), "--eps-list", "0,0.1,0.4,0.8", "--steps", "5", "--out", str(out)])
    assert code == 0
    acc = [float(r["robust_accuracy"]) for r in read_metrics(out)]
    assert len(acc) == 4 and all(b <= a for a, b in zip(acc, acc[1:]))


def test_cli_is_reproducible(trained_run):
    args = ["sweep-eps", str(trained_run / "run" / "best.ckpt"), str(trained_run / "data.bin"), "--eps-list", "0,0.2", "--steps", "3"]
    run_cli(args + ["--out", str(trained_run / "s1.csv")])
    run_cli(args + ["--out", str(trained_run / "s2.csv")])
    assert (trained_run / "s1.csv").read_bytes() == (trained_run / "s2.csv").read_bytes()


def test_cli_effectiveness_visualize_inspect(trained_run, capsys):
    ck, data = str(trained_run / "run" / "best.ckpt"), str(trained_run / "data.bin")
    eff = trained_run / "eff.csv"
    assert run_cli(["effectiveness", ck, data, "--k-list", "1,2", "--oracle-steps", "6", "--samples", "8", "--seeds", "2", "--out", str(eff)]) == 0
    assert all(float(r["d_mean"]) <= 0 for r in read_metrics(eff))
    viz = trained_run / "viz"
    assert run_cli(["visualize", ck, data, "--n", "4", "--steps", "3", "--out", str(viz)]) == 0
    assert read_pnm(viz / "perturbation.ppm").min() >= 0
    assert run_cli(["visualize", ck, "--mode", "features", "--eps", "2", "--steps", "3", "--n", "2", "--out", str(viz)]) == 0
    capsys.readouterr()
    assert run_cli(["inspect", ck]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["epochs"] == 2 and "best_epoch" in info["extra"]


def test_cli_finetune(trained_run):
    out = trained_run / "ft"
    code = run_cli(["finetune", str(trained_run / "run" / "best.ckpt"), str(trained_run / "data.bin"), "--epochs", "1", "--trades", "--out", str(out)])
    assert code == 0
    assert load_checkpoint(out / "last.ckpt").recipe.loss_mode == "trades"


def test_cli_usage_errors(tmp_path, capsys):
    assert run_cli(["frobnicate"]) != 0
    assert run_cli([]) != 0
    assert run_cli(["attack", str(tmp_path / "missing.ckpt"), str(tmp_path / "missing.bin")]) != 0
    assert run_cli(["visualize", str(tmp_path / "missing.ckpt")]) != 0
    assert "usage" in capsys.readouterr().err


def test_cli_rejects_bad_config(tmp_path, capsys):
    save_dataset(tmp_path / "d.bin", make_margin_blobs(8))
    (tmp_path / "bad.cfg").write_text("train.eps_warmup_epochs = -1\n")
    assert run_cli(["train", str(tmp_path / "d.bin"), "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "r")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_nan_metrics_survive(tmp_path):
    write_metrics(tmp_path / "n.csv", [{"x": float("nan")}])
    assert math.isnan(float(read_metrics(tmp_path / "n.csv")[0]["x"]))
