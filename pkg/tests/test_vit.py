import numpy as np
import pytest

from celldino import tensor as T
from celldino.binio import FormatError
from celldino.tensor import Tensor
from celldino.vit import (
    ViTConfig,
    forward_features,
    grid_interp_matrix,
    init_vit,
    load_vit,
    param_order,
    save_vit,
    vit_forward,
)

from oracles import assert_grads_close, numerical_grad

TINY = ViTConfig(image_size=16, patch_size=8, in_channels=2, embed_dim=8, depth=1, num_heads=2, seed=1)


def test_init_deterministic_per_seed():
    a = init_vit(TINY)
    b = init_vit(TINY)
    for name, _ in param_order(TINY):
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    c = init_vit(ViTConfig(**{**TINY.__dict__, "seed": 2}))
    assert not np.array_equal(a.tensors["patch.w"].data, c.tensors["patch.w"].data)


def test_config_divisibility_errors():
    with pytest.raises(ValueError):
        ViTConfig(image_size=96, patch_size=8, embed_dim=64, num_heads=5)
    with pytest.raises(ValueError):
        ViTConfig(image_size=100, patch_size=8)


def test_grid_arithmetic():
    cfg = ViTConfig(image_size=96, patch_size=8)
    assert cfg.n_patches == 144
    assert init_vit(cfg).tensors["pos"].shape == (1, 145, cfg.embed_dim)


def test_init_weight_statistics():
    params = init_vit(ViTConfig(image_size=96, patch_size=8, embed_dim=64, depth=2))
    w = params.tensors["blocks.0.attn.wqkv"].data
    assert np.abs(w).max() <= 0.04 + 1e-6  # truncation at 2 sigma
    assert abs(w.mean()) < 0.005
    assert np.all(params.tensors["patch.b"].data == 0)
    assert abs(params.tensors["cls"].data.mean()) < 0.01


def test_forward_shape_and_determinism():
    params = init_vit(TINY)
    rng = np.random.default_rng(0)
    batch = rng.random((3, 2, 16, 16)).astype(np.float32)
    out1 = forward_features(params, batch)
    out2 = forward_features(params, batch)
    assert out1.shape == (3, 8)
    assert np.all(np.isfinite(out1))
    np.testing.assert_array_equal(out1, out2)


def test_identical_images_identical_embeddings():
    params = init_vit(TINY)
    img = np.random.default_rng(1).random((1, 2, 16, 16)).astype(np.float32)
    batch = np.concatenate([img, img], axis=0)
    out = forward_features(params, batch)
    np.testing.assert_array_equal(out[0], out[1])


def test_channel_mismatch_raises():
    params = init_vit(ViTConfig(image_size=16, patch_size=8, in_channels=4, embed_dim=8, depth=1, num_heads=2))
    batch = np.zeros((1, 2, 16, 16), dtype=np.float32)
    with pytest.raises(ValueError, match="channel"):
        forward_features(params, batch)


def test_non_divisible_spatial_dims_raise():
    params = init_vit(TINY)
    with pytest.raises(ValueError, match="divisible"):
        forward_features(params, np.zeros((1, 2, 18, 18), dtype=np.float32))


def test_batch_permutation_equivariance():
    params = init_vit(TINY)
    rng = np.random.default_rng(5)
    batch = rng.random((6, 2, 16, 16)).astype(np.float32)
    perm = rng.permutation(6)
    out = forward_features(params, batch)
    out_perm = forward_features(params, batch[perm])
    np.testing.assert_array_equal(out_perm, out[perm])


def test_multi_size_inputs_via_interpolated_pos_emb():
    cfg = ViTConfig(image_size=96, patch_size=8, in_channels=2, embed_dim=16, depth=1, num_heads=2)
    params = init_vit(cfg)
    rng = np.random.default_rng(2)
    big = forward_features(params, rng.random((2, 2, 96, 96)).astype(np.float32))
    small = forward_features(params, rng.random((2, 2, 48, 48)).astype(np.float32))
    assert big.shape == small.shape == (2, 16)
    assert np.all(np.isfinite(small))


def test_interp_matrix_partition_of_unity_and_identity():
    m = grid_interp_matrix((12, 12), (6, 6))
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-5)
    ident = grid_interp_matrix((4, 4), (4, 4))
    np.testing.assert_allclose(ident, np.eye(16), atol=1e-6)


def test_interp_preserves_constant_field():
    # a constant pos-emb grid must stay constant at any resolution
    m = grid_interp_matrix((12, 12), (7, 7))
    const = np.full((144, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(m @ const, 0.37, atol=1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_depth1_block_gradients_match_fd(seed):
    cfg = ViTConfig(image_size=16, patch_size=8, in_channels=1, embed_dim=8, depth=1, num_heads=2, seed=seed)
    params = init_vit(cfg)
    rng = np.random.default_rng(seed)
    batch = Tensor(rng.random((2, 1, 16, 16)).astype(np.float32))
    r = Tensor(rng.choice([-1.0, 1.0], size=(2, 8)).astype(np.float32))

    loss = T.tsum(T.mul(vit_forward(params, batch), r))
    grads = T.backward(loss)

    for name in ["blocks.0.attn.wqkv", "blocks.0.mlp.w1", "blocks.0.ln1.g", "patch.w", "cls", "pos", "norm.b"]:
        target = params.tensors[name]

        def f(data):
            saved = target.data
            target.data = data.astype(np.float32)
            try:
                with T.no_grad(), T.precision(np.float64):
                    return T.tsum(T.mul(vit_forward(params, batch), r)).item()
            finally:
                target.data = saved

        assert_grads_close(grads.get(target), numerical_grad(f, target.data), what=name)


def test_gradient_flows_through_interpolated_pos_emb():
    cfg = ViTConfig(image_size=16, patch_size=8, in_channels=1, embed_dim=8, depth=1, num_heads=2, seed=3)
    params = init_vit(cfg)
    batch = Tensor(np.random.default_rng(0).random((1, 1, 24, 24)).astype(np.float32))
    loss = T.tsum(vit_forward(params, batch))
    grads = T.backward(loss)
    assert params.tensors["pos"] in grads
    assert np.any(grads.get(params.tensors["pos"]) != 0)


def test_checkpoint_roundtrip(tmp_path):
    params = init_vit(TINY)
    path = tmp_path / "backbone.vitw"
    save_vit(path, params)
    loaded = load_vit(path)
    assert loaded.config == TINY
    for name, _ in param_order(TINY):
        np.testing.assert_array_equal(loaded.tensors[name].data, params.tensors[name].data)
    batch = np.random.default_rng(0).random((2, 2, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(forward_features(loaded, batch), forward_features(params, batch))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.vitw"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError, match="magic"):
        load_vit(path)
