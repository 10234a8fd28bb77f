import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muxformer.autodiff import ContractError, Tape, backward
from muxformer.gradcheck import grad_check_params
from muxformer.losses import cross_entropy
from muxformer.models import (
    CheckpointError,
    ModelConfig,
    MuxBatch,
    build_model,
    demux_params,
    forward,
    load_checkpoint,
    param_specs,
    predict_logits,
    reduced_no_concat_forward,
    save_checkpoint,
)
from muxformer.nn import ConfigError, classifier_head
from muxformer.plexing import demultiplex

from conftest import random_batch, tiny_config

BASE_CP3 = dict(image_size=224, channels=3, patch_size=16, dim=768, heads=12, total_layers=12,
                 concat_point=6, n_mux=2, num_classes=1000, demux_hidden=768)


def test_base_scale_config_validates():
    cfg = ModelConfig(**BASE_CP3).validate()
    assert cfg.tokens_per_image == 196
    specs = param_specs(cfg)
    assert specs["reducer.weight"].shape == (2, 768, 768)
    assert sum(k.startswith("proj_layers.") and k.endswith("qkv_weight") for k in specs) == 6


def test_desk_config_builds():
    cfg = ModelConfig().validate()
    assert cfg.tokens_per_image == 64 and cfg.backbone_length == 65
    m = build_model(cfg, 0)
    assert m.num_parameters() > 0


@pytest.mark.parametrize("change,match", [
    (dict(**BASE_CP3 | {"n_mux": 3}), "divisible by n_mux"),
    (dict(dim=130), "divisible by heads"),
    (dict(concat_point=7), "concat_point"),
    (dict(variant="swin"), "variant"),
    (dict(tokenizer="toy-discrete"), "toy-discrete"),
])
def test_config_errors_name_the_constraint(change, match):
    with pytest.raises(ConfigError, match=match):
        ModelConfig(**change).validate()


def test_vit_forces_single_slot():
    assert ModelConfig(variant="vit", n_mux=4).n_mux == 1


def test_param_keys_are_a_function_of_config():
    cfg = tiny_config()
    assert list(build_model(cfg, 0).params) == list(build_model(cfg, 9).params) == list(param_specs(cfg))


def test_build_is_deterministic():
    a, b = build_model(tiny_config(), 3), build_model(tiny_config(), 3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


VARIANTS = [
    dict(variant="concatplexer"),
    dict(variant="concatplexer", n_mux=4, concat_point=0),
    dict(variant="image-multiplexer", tokenizer="cnn"),
    dict(variant="image-multiplexer", tokenizer="toy-discrete"),
    dict(variant="vit", tokenizer="cnn"),
    dict(variant="reduced-no-concat"),
]


@pytest.mark.parametrize("kw", VARIANTS)
def test_forward_shapes(kw):
    cfg = tiny_config(**kw)
    m = build_model(cfg, 0)
    out = forward(m, random_batch(cfg, 3))
    b = 3 * cfg.n_mux
    assert out.logits.shape == (b, cfg.num_classes)
    assert out.cls_embeddings.shape == (b, cfg.dim)
    assert len(out.pre_concat_tokens) == cfg.n_mux
    assert np.all(np.isfinite(out.logits.data))


@settings(max_examples=12, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(0, 3))
def test_logit_shape_law(n, group, cp):
    cfg = tiny_config(n_mux=n, concat_point=cp)
    assert forward(build_model(cfg, 0), random_batch(cfg, group)).logits.shape[0] == n * group


def test_concatplexer_backbone_sees_half_as_many_sequences():
    cfg = ModelConfig()
    m = build_model(cfg, 0)
    out = forward(m, random_batch(cfg, 8))
    assert out.logits.shape[0] == 16
    assert out.backbone_tokens.shape == (8, 65, 128)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_backbone_length_is_concat_invariant(n):
    cfg = tiny_config(n_mux=n)
    assert forward(build_model(cfg, 0), random_batch(cfg, 2)).backbone_tokens.shape[1] == cfg.tokens_per_image + 1


def test_reduced_no_concat_wiring():
    cfg = tiny_config(variant="reduced-no-concat", n_mux=2)
    m = build_model(cfg, 0)
    batch = random_batch(cfg, 3)
    out = forward(m, batch)
    assert out.backbone_tokens.shape == (6, cfg.tokens_per_image // 2 + 1, cfg.dim)
    logits = reduced_no_concat_forward(m, batch)
    assert logits.data.tobytes() == forward(m, batch).logits.data.tobytes()
    with pytest.raises(ConfigError):
        reduced_no_concat_forward(build_model(tiny_config(), 0), random_batch(tiny_config(), 1))


def test_group_count_mismatch():
    cfg = tiny_config(n_mux=2)
    batch = random_batch(tiny_config(n_mux=4), 1)
    with pytest.raises(ContractError):
        forward(build_model(cfg, 0), batch)


def test_forward_is_bitwise_stable():
    cfg = tiny_config()
    m = build_model(cfg, 0)
    b = random_batch(cfg, 2)
    assert forward(m, b).logits.data.tobytes() == forward(m, b).logits.data.tobytes()


def test_swapping_slots_with_tied_slot_parameters():
    cfg = tiny_config(n_mux=2)
    m = build_model(cfg, 4)
    p = m.params
    p["reducer.slot_embed"][1] = p["reducer.slot_embed"][0]
    for k in [k for k in p if k.startswith("demux.1.")]:
        p[k] = p[k.replace("demux.1.", "demux.0.")].copy()
    half = cfg.tokens_per_image // 2
    p["backbone.pos_embed"][1 + half:] = p["backbone.pos_embed"][1:1 + half]
    b = random_batch(cfg, 3)
    swapped = MuxBatch(b.groups[::-1], b.labels[::-1], b.ids[::-1])
    original = forward(m, b).logits.data
    np.testing.assert_allclose(forward(m, swapped).logits.data, np.concatenate([original[3:], original[:3]]),
                               rtol=1e-5, atol=1e-6)


def test_image_multiplexer_single_slot_equals_vit():
    im_cfg = tiny_config(variant="image-multiplexer", tokenizer="cnn", n_mux=1, concat_point=0)
    vit_cfg = tiny_config(variant="vit", tokenizer="cnn")
    im, vit = build_model(im_cfg, 0), build_model(vit_cfg, 0)
    for k in vit.params:
        im.params[k] = vit.params[k].copy()
    im.params["multiplexer.rotations"] = np.eye(im_cfg.dim, dtype=np.float32)[None]
    for k in [k for k in im.params if k.startswith("multiplexer.mlp.")]:
        im.params[k] = np.zeros_like(im.params[k])
    batch = random_batch(im_cfg, 4)
    im_logits = forward(im, batch).logits.data
    vit_out = forward(vit, batch)
    p = im.leaves(requires_grad=False)
    expected = classifier_head(demultiplex(vit_out.cls_embeddings, 0, demux_params(p, 1)),
                               p["head.weight"], p["head.bias"]).data
    np.testing.assert_allclose(im_logits, expected, atol=1e-5)


def test_rotations_excluded_from_trainable():
    m = build_model(tiny_config(variant="image-multiplexer", tokenizer="cnn"), 0)
    assert "multiplexer.rotations" not in m.trainable
    assert not m.leaves()["multiplexer.rotations"].requires_grad


def test_end_to_end_gradients_desk_config():
    cfg = ModelConfig()
    m = build_model(cfg, 0)
    batch = random_batch(cfg, 1)

    def loss(params):
        return cross_entropy(forward(m, batch, params).logits, batch.flat_labels())

    names = ["patchify.weight", "proj_layers.0.qkv_weight", "reducer.weight", "reducer.slot_embed",
             "backbone.pos_embed", "backbone.3.fc2_weight", "demux.1.fc1_weight", "head.weight"]
    errs = grad_check_params(loss, m.params, epsilon=1e-3, probes=10, names=names)
    assert max(errs.values()) < 1e-2, errs


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config(variant="image-multiplexer", tokenizer="toy-discrete")
    m = build_model(cfg, 5)
    save_checkpoint(m, tmp_path / "m.muxf")
    back = load_checkpoint(tmp_path / "m.muxf")
    assert back.config == cfg and back.seed == 5
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    b = random_batch(cfg, 2)
    assert forward(back, b).logits.data.tobytes() == forward(m, b).logits.data.tobytes()


def test_checkpoint_errors(tmp_path):
    m = build_model(tiny_config(), 0)
    path = tmp_path / "m.muxf"
    save_checkpoint(m, path)
    with pytest.raises(CheckpointError, match="match"):
        load_checkpoint(path, expected=tiny_config(dim=12))
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_predict_logits_handles_ragged_tail(rng):
    cfg = tiny_config(n_mux=2)
    m = build_model(cfg, 0)
    images = rng.standard_normal((5, 1, 8, 8)).astype(np.float32)
    out = predict_logits(m, images, batch_size=4)
    assert out.shape == (5, cfg.num_classes)
    np.testing.assert_allclose(out[:4], forward(m, MuxBatch([images[:2], images[2:4]])).logits.data, rtol=1e-6)


def test_training_step_moves_loss(rng):
    cfg = tiny_config()
    m = build_model(cfg, 0)
    b = random_batch(cfg, 4)
    with Tape() as tape:
        leaves = m.leaves()
        loss = cross_entropy(forward(m, b, leaves).logits, b.flat_labels())
    g = backward(loss, tape, wrt=[leaves[k] for k in m.trainable])
    for k in m.trainable:
        m.params[k] = m.params[k] - 0.05 * g[leaves[k].node_id]
    assert cross_entropy(forward(m, b).logits, b.flat_labels()).item() < loss.item()
