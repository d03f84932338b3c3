import dataclasses
import tracemalloc

import numpy as np
import pytest

from edgedoc import model as M
from edgedoc import tensor as T
from edgedoc import training as TR
from edgedoc.layers import ParamBundle
from edgedoc.tensor import Tensor, gradcheck

TOY_PARAM_COUNT = 541469
REDUCED_PARAM_COUNT = 17465


def count_params_by_hand(cfg: M.ModelConfig) -> int:
    """Closed-form parameter count, written independently of the builder."""
    sc = cfg.stage_channels
    conv_block = lambda c: 8 * c * c + 17 * c  # dw 9c+c, norm 2c, pw1 4c^2+4c, pw2 4c^2+c
    attn_block = lambda c: 12 * c * c + 13 * c + 1  # norms 4c, qkv+proj 4(c^2+c), temp, mlp 8c^2+5c
    total = 2 * sc[0] * 16 + sc[0] + 2 * sc[0]  # 4x4 stem conv + norm
    for s in range(4):
        if s:
            total += 2 * sc[s - 1] + 4 * sc[s - 1] * sc[s] + sc[s]
        total += cfg.stage_depths[s] * conv_block(sc[s])
        if s + 1 in cfg.attention_stages:
            total += attn_block(sc[s])
    cin = sc[3]
    for out, skip in zip(cfg.decoder_channels, (sc[2], sc[1], sc[0], 0, 0)):
        c = cin + skip
        total += 10 * c + c * out + out + 2 * out
        cin = out
    h = sc[3] // 4
    total += sc[3] * h + h + h + 1
    total += cfg.decoder_channels[-1] + 1
    return total


def test_param_count_golden():
    assert count_params_by_hand(M.TOY) == TOY_PARAM_COUNT
    assert M.build_model(M.TOY, 0).num_params() == TOY_PARAM_COUNT
    assert count_params_by_hand(M.REDUCED) == REDUCED_PARAM_COUNT
    assert M.build_model(M.REDUCED, 0).num_params() == REDUCED_PARAM_COUNT


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(in_channels=3)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(input_size=(250, 256))
    with pytest.raises(M.ConfigError):
        M.ModelConfig(stage_channels=(8, 8, 8))


def test_build_is_deterministic():
    a = M.build_model(M.REDUCED, 42).checksums()
    b = M.build_model(M.REDUCED, 42).checksums()
    c = M.build_model(M.REDUCED, 43).checksums()
    assert a == b
    assert a != c


def test_forward_shapes_full_size():
    p = M.build_model(M.TOY, 0)
    x = np.random.default_rng(0).standard_normal((1, 2, 256, 256)).astype(np.float32)
    with T.no_grad():
        out = M.forward(p, x, M.TOY, keep_features=True)
    assert out.cls_logit.shape == (1, 1)
    assert out.mask_logit.shape == (1, 1, 256, 256)
    assert [f.shape for f in out.stage_features] == [
        (1, 16, 64, 64), (1, 32, 32, 32), (1, 64, 16, 16), (1, 128, 8, 8)]


def test_forward_rejects_wrong_input(tiny_params, tiny_cfg):
    with pytest.raises(T.ShapeError):
        M.forward(tiny_params, np.zeros((1, 3, 64, 64), np.float32), tiny_cfg)
    with pytest.raises(T.ShapeError):
        M.forward(tiny_params, np.zeros((1, 2, 32, 64), np.float32), tiny_cfg)


def test_batch_independence(tiny_params, tiny_cfg):
    x = np.random.default_rng(1).standard_normal((1, 2, 64, 64)).astype(np.float32)
    with T.no_grad():
        one = M.forward(tiny_params, x, tiny_cfg)
        two = M.forward(tiny_params, np.concatenate([x, x]), tiny_cfg)
    np.testing.assert_allclose(two.cls_logit.data[0], two.cls_logit.data[1], atol=1e-6)
    np.testing.assert_allclose(two.mask_logit.data[0], two.mask_logit.data[1], atol=1e-6)
    np.testing.assert_allclose(two.mask_logit.data[:1], one.mask_logit.data, atol=1e-5)


def test_zero_input_is_finite(tiny_params, tiny_cfg):
    with T.no_grad(), T.debug_mode():
        out = M.forward(tiny_params, np.zeros((1, 2, 64, 64), np.float32), tiny_cfg)
    assert np.isfinite(out.cls_logit.data).all() and np.isfinite(out.mask_logit.data).all()


def test_predict_ranges_and_determinism(tiny_params, tiny_cfg):
    x = np.random.default_rng(2).standard_normal((1, 2, 64, 64)).astype(np.float32)
    s1, m1 = M.predict(tiny_params, x, tiny_cfg)
    s2, m2 = M.predict(tiny_params, x, tiny_cfg)
    assert m1.shape == (1, 64, 64)
    assert 0 <= s1[0] <= 1 and m1.min() >= 0 and m1.max() <= 1
    assert s1.tobytes() == s2.tobytes() and m1.tobytes() == m2.tobytes()


def test_predict_zero_logit_gives_half(tiny_cfg):
    p = M.build_model(tiny_cfg, 0)
    p["cls_head.fc2.weight"].data[...] = 0
    s, _ = M.predict(p, np.ones((1, 2, 64, 64), np.float32), tiny_cfg)
    assert s[0] == 0.5


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_params, tiny_cfg):
    M.save_checkpoint(tmp_path / "ck", tiny_params, tiny_cfg, {"epoch": 3})
    params, cfg, meta = M.load_checkpoint(tmp_path / "ck")
    assert cfg == tiny_cfg and meta == {"epoch": "3"}
    assert params.checksums() == tiny_params.checksums()
    M.save_checkpoint(tmp_path / "ck2", params, cfg, {"epoch": 3})
    for f in (tmp_path / "ck").iterdir():
        assert f.read_bytes() == (tmp_path / "ck2" / f.name).read_bytes()


def test_checkpoint_shape_mismatch(tmp_path, tiny_params, tiny_cfg):
    M.save_checkpoint(tmp_path / "ck", tiny_params, tiny_cfg)
    from edgedoc.fileio import save_btf

    save_btf(tmp_path / "ck" / "mask_head.conv.bias.btf", np.zeros(2, np.float32))
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(tmp_path / "ck")
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(tmp_path / "missing")


def _loss_fn(params, cfg, y_mask, label):
    def f(x):
        out = M.forward(params, x, cfg)
        return TR.total_loss(out.cls_logit, out.mask_logit, np.full((1, 1), label, np.float32), y_mask)[0]
    return f


def test_end_to_end_gradcheck_input(tiny_cfg):
    params = M.build_model(tiny_cfg, 5)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 64, 64)).astype(np.float32)
    y = np.zeros((1, 1, 64, 64), np.float32)
    y[..., 20:40, 10:30] = 1
    idx = rng.choice(x.size, 300, replace=False)
    err = gradcheck(_loss_fn(params, tiny_cfg, y, 1.0), x, eps=1e-3, indices=idx)
    assert err < 1e-2


def test_end_to_end_gradcheck_every_parameter_tensor(tiny_cfg):
    """Loss gradient w.r.t. sampled entries of every parameter tensor."""
    params = M.build_model(tiny_cfg, 6)
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 2, 64, 64)).astype(np.float32))
    y = np.zeros((1, 1, 64, 64), np.float32)
    y[..., 5:25, 30:60] = 1
    worst = 0.0
    for name, t in params.items():
        idx = rng.choice(t.size, min(3, t.size), replace=False)

        def f(v, name=name):
            q = dict(params.items())
            q[name] = v
            out = M.forward(ParamBundle(q), x, tiny_cfg)
            return TR.total_loss(out.cls_logit, out.mask_logit, np.ones((1, 1), np.float32), y)[0]

        # shared weights touch every pixel, so a narrow step keeps ReLU kinks out of the stencil
        worst = max(worst, gradcheck(f, t.data, eps=1e-4, indices=idx))
    assert worst < 1e-2


def _symmetrize_kernels(params):
    for name, t in params.items():
        if name.endswith(".weight") and t.ndim == 4 and t.shape[-1] > 1:
            t.data[...] = 0.5 * (t.data + t.data[..., ::-1])


def _flip_gap(params, cfg, x):
    _, m = M.predict(params, x, cfg)
    _, mf = M.predict(params, x[..., ::-1].copy(), cfg)
    h, w = m.shape[1:]
    bh, bw = int(0.05 * h), int(0.05 * w)
    diff = np.abs(m - mf[..., ::-1])[:, bh : h - bh, bw : w - bw]
    return float(diff.max())


def test_horizontal_flip_equivariance():
    cfg = dataclasses.replace(M.REDUCED, attn_temperature=0.0)
    params = M.build_model(cfg, 8)
    x = np.random.default_rng(8).standard_normal((1, 2, 64, 64)).astype(np.float32)
    raw_gap = _flip_gap(params, cfg, x)
    print(f"flip equivariance gap with asymmetric kernels: {raw_gap:.3e}")
    _symmetrize_kernels(params)
    assert _flip_gap(params, cfg, x) < 1e-3


def test_memory_of_one_training_step_at_full_size():
    p = M.build_model(M.TOY, 0)
    x = np.random.default_rng(0).standard_normal((1, 2, 256, 256)).astype(np.float32)
    y = np.zeros((1, 1, 256, 256), np.float32)
    tracemalloc.start()
    with T.new_graph():
        out = M.forward(p, x)
        loss = TR.total_loss(out.cls_logit, out.mask_logit, np.ones((1, 1), np.float32), y)[0]
        T.backward(loss)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    print(f"peak traced memory: {peak / 2**20:.1f} MiB")
    assert peak < 2 * 2**30
