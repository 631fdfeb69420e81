import numpy as np
import pytest

from cvpatch import autograd as ag
from cvpatch import models as M
from cvpatch import objectives as obj
from cvpatch.autograd import Tape
from cvpatch.ctensor import ShapeError
from cvpatch.models import CCN, CTN, ConfigError, ModelConfig


def small(arch="ctn", **kw):
    base = dict(architecture=arch, stem_channels=4, block_channels=(4, 6, 8), fc_width=16,
                descriptor_dim=8, patch_size=16, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def _block(k, cin, cout):
    pre = f"feature.block{k}"
    out = {}
    for bn, ch in (("bn1", cin), ("bn2", cout)):
        for part in ("gamma_r", "beta_r", "gamma_i", "beta_i"):
            out[f"{pre}.{bn}.{part}"] = (ch,)
    out[f"{pre}.conv1.A"] = out[f"{pre}.conv1.B"] = (cout, cin, 3, 3)
    out[f"{pre}.conv1.bias"] = (cout,)
    out[f"{pre}.conv2.A"] = out[f"{pre}.conv2.B"] = (cout, cout, 3, 3)
    out[f"{pre}.conv2.bias"] = (cout,)
    if cin != cout:
        out[f"{pre}.proj.A"] = out[f"{pre}.proj.B"] = (cout, cin, 1, 1)
        out[f"{pre}.proj.bias"] = (cout,)
    return out


def golden_feature(in_ch):
    g = {"feature.stem.W": (32, in_ch, 3, 3), "feature.stem.b": (32,)}
    g.update(_block(1, 32, 32))
    g.update(_block(2, 32, 64))
    g.update(_block(3, 64, 128))
    return g


GOLDEN_CCN = {
    **golden_feature(2),
    "decision.trunk.fc1.W": (4096, 128 * 4 * 4), "decision.trunk.fc1.b": (4096,),
    "decision.trunk.fc2.W": (4096, 4096), "decision.trunk.fc2.b": (4096,),
    "decision.trunk.fc3.W": (4096, 4096), "decision.trunk.fc3.b": (4096,),
    "decision.head.W": (1, 2 * 4096), "decision.head.b": (1,),
}

GOLDEN_CTN = {
    **golden_feature(1),
    "metric.fc.A": (128, 2048), "metric.fc.B": (128, 2048), "metric.fc.bias": (128,),
}


def real_scalar_count(manifest):
    # complex biases hold a real and an imaginary part; A and B are already separate
    return sum(int(np.prod(s)) * (2 if k.endswith(".bias") else 1) for k, s in manifest.items())


def test_ccn_full_size_matches_golden_manifest():
    model = CCN(ModelConfig(architecture="ccn"))
    assert model.shape_manifest() == GOLDEN_CCN
    assert model.num_parameters() == real_scalar_count(GOLDEN_CCN) == 42_577_121


def test_ctn_full_size_matches_golden_manifest():
    model = CTN(ModelConfig())
    assert model.shape_manifest() == GOLDEN_CTN
    assert model.num_parameters() == real_scalar_count(GOLDEN_CTN) == 1_137_856


def test_feature_output_shape():
    cfg = ModelConfig(stem_channels=4, block_channels=(4, 4, 128))
    model = CTN(cfg)
    x = np.random.default_rng(0).random((2, 1, 32, 32))
    assert model.feature.forward(Tape(), x, True).shape == (2, 128, 4, 4)


def test_siamese_trunk_is_shared_and_pseudo_is_not():
    m = CCN(small("ccn"))
    assert m.decision.trunk_r is m.decision.trunk_i
    p = CCN(small("ccn", decision_mode="pseudo_siamese"))
    assert p.decision.trunk_r is not p.decision.trunk_i
    assert p.num_parameters() > m.num_parameters()


def test_ccn_scores_in_unit_interval_and_deterministic():
    rng = np.random.default_rng(1)
    pairs = rng.random((128, 2, 16, 16))
    m = CCN(small("ccn"))
    s = m.score(pairs)
    assert s.shape == (128,) and np.all((s > 0) & (s < 1))
    assert np.array_equal(s, CCN(small("ccn")).score(pairs))
    assert abs(s.mean() - 0.5) <= 0.2


def test_ccn_wrong_channel_count():
    with pytest.raises(ShapeError):
        CCN(small("ccn")).score(np.zeros((2, 1, 16, 16)))


def test_siamese_symmetric_head_is_swap_invariant():
    m = CCN(small("ccn"))
    w = m.decision.head.W.value
    half = w.shape[1] // 2
    w[:, half:] = w[:, :half]
    rng = np.random.default_rng(2)
    din = int(np.prod(m.config.feature_shape))
    real, imag = rng.normal(size=(5, din)), rng.normal(size=(5, din))

    def head(a, b):
        t = Tape()
        hr, hi = m.decision.branches(t, t.constant(a), t.constant(b))
        return m.decision.head.forward(t, ag.concat([hr, hi], axis=1)).value

    np.testing.assert_allclose(head(real, imag), head(imag, real), rtol=1e-12)


def test_ctn_branch_permutation_and_norms():
    m = CTN(small())
    rng = np.random.default_rng(4)
    p1, p2, pn = (rng.random((4, 1, 16, 16)) for _ in range(3))
    f = m.forward_train(Tape(), p1, p2, pn)
    g = m.forward_train(Tape(), p2, p1, pn)
    # same batch, reordered: only the BN reduction order differs
    for a, b in ((g[0], f[1]), (g[1], f[0])):
        assert np.abs(a.value.real - b.value.real).max() <= 1e-12
        assert np.abs(a.value.imag - b.value.imag).max() <= 1e-12
    for d in f:
        np.testing.assert_allclose(np.linalg.norm(d.value.real, axis=1), 1, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(d.value.imag, axis=1), 1, atol=1e-9)
        assert d.shape == (4, 8)


def test_ctn_same_patch_in_all_slots():
    m = CTN(small())
    p = np.random.default_rng(5).random((3, 1, 16, 16))
    f1, f2, fn = m.forward_train(Tape(), p, p, p)
    assert f1.value == f2.value == fn.value


def test_describe_dimension_and_batching_invariance():
    m = CTN(ModelConfig(stem_channels=4, block_channels=(4, 4, 4), seed=1))
    x = np.random.default_rng(6).random((5, 1, 32, 32))
    d = m.describe(x)
    assert d.shape == (5, 128)
    for i in range(5):
        one = m.describe(x[i:i + 1])
        assert np.abs(one.real - d.real[i]).max() <= 1e-9
        assert np.abs(one.imag - d.imag[i]).max() <= 1e-9
    chunked = m.describe(x, batch=2)
    assert np.abs(chunked.real - d.real).max() <= 1e-9


@pytest.mark.parametrize("bn_mode", ["per_component", "covariance"])
def test_describe_matches_training_branch_after_calibration(bn_mode):
    m = CTN(small(bn_mode=bn_mode))
    x = np.random.default_rng(7).random((64, 1, 16, 16))
    with M.bn_calibration(m):
        train = m.forward(Tape(), x, training=True).value
    d = m.describe(x)
    assert np.abs(d.real - train.real).max() <= 1e-5
    assert np.abs(d.imag - train.imag).max() <= 1e-5


def _any_nonzero(g):
    parts = (g,) if isinstance(g, np.ndarray) else (g.real, g.imag)
    return any(np.any(part != 0) for part in parts)


def test_ctn_has_no_dead_parameters():
    m = CTN(small())
    rng = np.random.default_rng(8)
    t = Tape()
    f = m.forward_train(t, *(rng.random((6, 1, 16, 16)) for _ in range(3)))
    ag.zero_grad(m.parameters())
    t.backward(obj.softpn_loss(*f))
    dead = [name for name, p in m.named_parameters() if not _any_nonzero(p.grad)]
    assert dead == []


def test_zero_imag_with_zero_b_kernels_keeps_imag_path_zero():
    m = CTN(small(input_conversion="zero_imag"))
    for _, p in m.named_parameters():
        if p.name.endswith(".B"):
            p.value = np.zeros_like(p.value)
    x = np.random.default_rng(9).random((4, 1, 16, 16))
    t = Tape()
    h = ag.from_real(ag.relu(m.feature.stem.forward(t, t.constant(x))))
    assert not h.value.imag.any()
    for block in m.feature.blocks:
        h = block.forward(t, h, True)
        assert not h.value.imag.any()
        h = M.complex_max_pool(h, 2)
        assert not h.value.imag.any()


def test_config_round_trip_and_validation():
    cfg = small("ccn", bn_mode="covariance", grad_clip=1.0)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig(bn_mode="batch")
    with pytest.raises(ConfigError):
        CCN(small("ctn"))


@pytest.mark.parametrize("arch", ["ctn", "ccn"])
def test_model_checkpoint_round_trip(tmp_path, arch):
    cfg = small(arch)
    m = M.build_model(cfg)
    rng = np.random.default_rng(10)
    x = rng.random((4, 2 if arch == "ccn" else 1, 16, 16))
    with M.bn_calibration(m):
        m.forward(Tape(), x, training=True)
    path = tmp_path / "m.cxck"
    M.save_model(path, m, step=7)
    back, meta = M.load_model(path)
    assert meta["step"] == 7 and back.config == cfg
    if arch == "ccn":
        assert np.array_equal(back.score(x), m.score(x))
    else:
        assert back.describe(x) == m.describe(x)
    M.save_model(tmp_path / "again.cxck", back, step=7)
    assert path.read_bytes() == (tmp_path / "again.cxck").read_bytes()
