import json
import statistics

import numpy as np
import pytest

from muxformer.data import default_mnist_path, load_dataset, write_idx
from muxformer.harness import (
    METRIC_FIELDS,
    DataSpec,
    TrainConfig,
    TrainingError,
    bench_throughput,
    evaluate,
    fit_state,
    load_train_config,
    matched_vit,
    train,
)
from muxformer.losses import LossConfig
from muxformer.models import ModelConfig, build_model, load_checkpoint
from muxformer.nn import ConfigError
from muxformer.optim import AdamW, OptimizerConfig

from conftest import synthetic_dataset, tiny_config


def write_band_idx(tmp_path, count=48, size=8, classes=3, seed=0):
    """Row-band images as an IDX pair, so training runs read real files."""
    ds = synthetic_dataset(count, size, classes, seed)
    pixels = np.clip(ds.images[:, 0] * 200 + 20, 0, 255).astype(np.uint8)
    images_path = tmp_path / "band-images-idx3-ubyte"
    write_idx(pixels, ds.labels, images_path, tmp_path / "band-labels-idx1-ubyte")
    return images_path


def small_train_config(tmp_path, **overrides) -> TrainConfig:
    images = write_band_idx(tmp_path)
    base = dict(
        model=tiny_config(),
        optimizer=OptimizerConfig(lr=3e-3),
        epochs=2,
        batch_size=8,
        seed=5,
        train_data=DataSpec(str(images), num_classes=3, limit=32),
        val_data=DataSpec(str(images), num_classes=3, offset=32),
        output_dir=str(tmp_path / "runs"),
    )
    base.update(overrides)
    return TrainConfig(**base)


# optimizer

def test_adamw_first_step_moves_against_gradient_on_bowl():
    x = {"w": np.array([1.0, -2.0, 0.5], dtype=np.float32)}
    start = x["w"].copy()
    opt = AdamW(OptimizerConfig(lr=1e-2, weight_decay=0.0))
    opt.step(x, {"w": 2 * x["w"]})  # grad of |w|^2
    # the first Adam step has magnitude lr along -sign(grad)
    np.testing.assert_allclose(x["w"], start - 1e-2 * np.sign(start), rtol=1e-5)


def test_adamw_descends_quadratic_bowl():
    x = {"w": np.array([3.0, -1.5], dtype=np.float32)}
    opt = AdamW(OptimizerConfig(lr=0.05, weight_decay=0.0))
    for _ in range(400):
        opt.step(x, {"w": 2 * x["w"]})
    assert np.abs(x["w"]).max() < 0.05


def test_decoupled_decay_shrinks_zero_gradient_param_by_lr_wd():
    p = {"w": np.full(4, 2.0, dtype=np.float32)}
    opt = AdamW(OptimizerConfig(lr=0.1, weight_decay=0.03))
    for k in range(1, 4):
        opt.step(p, {"w": np.zeros(4, dtype=np.float32)})
        np.testing.assert_allclose(p["w"], 2.0 * (1 - 0.1 * 0.03) ** k, rtol=1e-6)


def test_cosine_schedule_ends_at_zero():
    opt = AdamW(OptimizerConfig(lr=1.0, schedule="cosine"), total_steps=10)
    assert opt.lr_at(0) == 1.0
    assert opt.lr_at(5) == pytest.approx(0.5)
    assert opt.lr_at(10) == pytest.approx(0.0, abs=1e-12)


def test_optimizer_rejects_bad_settings():
    with pytest.raises(ValueError, match="learning rate"):
        AdamW(OptimizerConfig(lr=0.0))
    with pytest.raises(ValueError, match="schedule"):
        AdamW(OptimizerConfig(schedule="step"))


# train

def test_train_writes_csv_and_checkpoint(tmp_path):
    cfg = small_train_config(tmp_path)
    rec = train(cfg)
    lines = open(rec.metrics_path).read().splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS)
    assert len(lines) == 1 + 2 * (32 // 8)
    assert rec.metrics_path.endswith(f"{cfg.run_name()}.csv")
    restored = load_checkpoint(rec.checkpoint_path)
    for k, v in rec.state.params.items():
        np.testing.assert_array_equal(restored.params[k], v)
    assert [e["epoch"] for e in rec.epochs] == [0, 1]
    assert all("val_accuracy" in e for e in rec.epochs)


def test_training_reduces_loss_on_learnable_data(tmp_path):
    rec = train(small_train_config(tmp_path, epochs=6))
    totals = [s["total"] for s in rec.steps]
    assert np.mean(totals[-4:]) < np.mean(totals[:4])


def test_same_seed_gives_bitwise_identical_artifacts(tmp_path):
    a = train(small_train_config(tmp_path, output_dir=str(tmp_path / "a")))
    b = train(small_train_config(tmp_path, output_dir=str(tmp_path / "b")))
    assert open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()
    assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()


def test_different_seed_changes_metrics(tmp_path):
    a = train(small_train_config(tmp_path, output_dir=str(tmp_path / "a")))
    b = train(small_train_config(tmp_path, seed=6, output_dir=str(tmp_path / "b")))
    assert open(a.metrics_path).read() != open(b.metrics_path).read()


def test_zero_auxiliary_weights_match_ce_only_run(tmp_path):
    ce_only = train(small_train_config(tmp_path, output_dir=str(tmp_path / "ce")))
    zeroed = train(small_train_config(
        tmp_path, output_dir=str(tmp_path / "z"),
        loss=LossConfig(alpha=0.7, temperature=0.2, lambda_smooth=0.0, lambda_clip=0.0, lambda_retrieval=0.0)))
    assert [s["total"] for s in ce_only.steps] == [s["total"] for s in zeroed.steps]
    assert [s["ce"] for s in ce_only.steps] == [s["ce"] for s in zeroed.steps]


def test_run_name_ignores_output_dir(tmp_path):
    a = small_train_config(tmp_path, output_dir="x")
    b = small_train_config(tmp_path, output_dir="y")
    assert a.run_name() == b.run_name()
    assert a.run_name() != small_train_config(tmp_path, batch_size=16).run_name()
    assert a.run_name().endswith("-seed5")


def test_nan_aborts_with_tensor_path():
    ds = synthetic_dataset(16)
    ds.images[3, 0, 0, 0] = np.nan
    state = build_model(tiny_config(), 0)
    with pytest.raises(TrainingError, match=r"non-finite value in loss\.total at optimizer step 1"):
        fit_state(state, ds, LossConfig(), OptimizerConfig(), 1, 16, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_parameter_is_named():
    state = build_model(tiny_config(), 0)
    state.params["head.weight"][0, 0] = np.inf
    with pytest.raises(TrainingError, match="non-finite value in"):
        fit_state(state, synthetic_dataset(16), LossConfig(), OptimizerConfig(), 1, 16, 0)


def test_orthogonal_projections_are_not_updated():
    cfg = tiny_config(variant="image-multiplexer", concat_point=0, tokenizer="cnn")
    state = build_model(cfg, 0)
    before = state.params["multiplexer.rotations"].copy()
    head = state.params["head.weight"].copy()
    fit_state(state, synthetic_dataset(16), LossConfig(), OptimizerConfig(lr=1e-2), 2, 8, 0)
    np.testing.assert_array_equal(state.params["multiplexer.rotations"], before)
    assert not np.array_equal(state.params["head.weight"], head)


def test_class_mismatch_is_rejected_before_training(tmp_path):
    cfg = small_train_config(tmp_path, model=tiny_config(num_classes=5))
    with pytest.raises(ConfigError, match="classes"):
        train(cfg)


def test_batch_size_must_divide_by_n_mux(tmp_path):
    with pytest.raises(ConfigError, match="divisible by n_mux"):
        small_train_config(tmp_path, batch_size=7).validate()


def test_config_round_trip_and_relative_paths(tmp_path):
    cfg = small_train_config(tmp_path)
    body = cfg.to_dict()
    body["train_data"]["path"] = "band-images-idx3-ubyte"
    (tmp_path / "c.json").write_text(json.dumps(body))
    loaded = load_train_config(tmp_path / "c.json")
    assert loaded.train_data.path == str(tmp_path / "band-images-idx3-ubyte")
    assert loaded.model == cfg.model and loaded.optimizer == cfg.optimizer


def test_unknown_config_field_is_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epochz": 2})


# evaluate

@pytest.fixture(scope="module")
def mnist_val():
    path = default_mnist_path()
    if path is None:
        pytest.skip("no MNIST data")
    return load_dataset(path, pad_to=32, mean=[0.1307], std=[0.3081], offset=3000, limit=2000)


def test_fresh_model_is_at_chance(mnist_val):
    cfg = ModelConfig(dim=32, heads=2, total_layers=2, concat_point=1, demux_hidden=32)
    res = evaluate(build_model(cfg, 0), mnist_val, 200)
    assert abs(res["top1"] - 0.1) <= 0.03
    assert res["count"] == 2000


def test_per_slot_accuracies_average_to_top1(mnist_val):
    cfg = ModelConfig(dim=32, heads=2, total_layers=2, concat_point=1, n_mux=4, demux_hidden=32)
    res = evaluate(build_model(cfg, 1), mnist_val, 200)
    assert len(res["per_slot"]) == 4
    assert statistics.fmean(res["per_slot"]) == pytest.approx(res["top1"], abs=1e-12)


def test_evaluate_is_repeatable_from_checkpoint(tmp_path):
    rec = train(small_train_config(tmp_path, epochs=1))
    ds = load_dataset(tmp_path / "band-images-idx3-ubyte", num_classes=3)
    first = evaluate(rec.checkpoint_path, ds, 16)
    assert first == evaluate(rec.checkpoint_path, ds, 16)
    assert first["count"] == 48


def test_evaluate_rejects_class_mismatch():
    with pytest.raises(ConfigError, match="classes"):
        evaluate(build_model(tiny_config(num_classes=4), 0), synthetic_dataset(8, classes=3))


# bench

def test_matched_vit_keeps_width_and_depth():
    cfg = ModelConfig(concat_point=1)
    vit = matched_vit(cfg)
    assert (vit.variant, vit.n_mux, vit.concat_point) == ("vit", 1, 0)
    assert (vit.dim, vit.total_layers, vit.heads) == (cfg.dim, cfg.total_layers, cfg.heads)


def test_bench_reports_median_of_repeats():
    res = bench_throughput(tiny_config(), batch_sizes=(4, 8), repeats=5, warmup=1)
    assert set(res) == {4, 8}
    for bs, r in res.items():
        assert len(r["times"]) == 5 and len(r["vit_times"]) == 5
        assert r["images_per_sec"] == pytest.approx(bs / statistics.median(r["times"]))
        assert r["speedup"] == pytest.approx(r["images_per_sec"] / r["vit_images_per_sec"])


def test_bench_rejects_indivisible_batch():
    with pytest.raises(ConfigError, match="not divisible"):
        bench_throughput(tiny_config(n_mux=2), batch_sizes=(5,), repeats=1)


@pytest.mark.slow
def test_single_slot_concatplexer_runs_near_vit_speed():
    cfg = ModelConfig(concat_point=1, n_mux=1)
    speedups = [bench_throughput(cfg, (32,), repeats=5)[32]["speedup"] for _ in range(3)]
    assert 0.9 <= statistics.median(speedups) <= 1.1
