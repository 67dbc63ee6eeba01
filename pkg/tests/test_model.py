import numpy as np
import pytest
import torch

from scenemae.masking import PatchState
from scenemae.model import PROFILES, ContractError, EncoderOnly, ModelConfig, ProjectionHead, SceneMAE, apply_head

V, MSK, DRP = PatchState.VISIBLE, PatchState.MASKED, PatchState.DROPPED


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = SceneMAE(PROFILES["tiny"]).double()
    m.eval()
    return m


def inputs(cfg, batch=1, seed=0, m=None):
    g = torch.Generator().manual_seed(seed)
    m = m or cfg.patch_count
    local = torch.randn(batch, m, cfg.patch_size, 3, generator=g, dtype=torch.float64) * 0.1
    centers = torch.randn(batch, m, 3, generator=g, dtype=torch.float64)
    return local, centers


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(encoder_depth=0)
    cfg = PROFILES["desk"]
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_base_profile():
    cfg = PROFILES["base"]
    assert (cfg.encoder_depth, cfg.decoder_depth, cfg.drop_path) == (6, 3, 0.1)


def test_embed_patches_shape_and_invariances(model):
    cfg = model.config
    local, _ = inputs(cfg)
    tok = model.embed_patches(local[0])
    assert tok.shape == (cfg.patch_count, cfg.embed_dim)
    perm = torch.randperm(cfg.patch_size)
    assert torch.equal(model.embed_patches(local[0][:, perm]), tok)
    dup = torch.cat([local[0], local[0][:, :1]], dim=1)
    assert torch.equal(model.embed_patches(dup), tok)
    assert model.embed_patches(local[0, :3, :5]).shape == (3, cfg.embed_dim)


def test_pos_embed(model):
    c = torch.tensor([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [1.0, -1.0, 0.5]], dtype=torch.float64)
    p = model.pos_embed(c)
    assert p.shape == (3, model.config.embed_dim)
    assert torch.equal(p[0], p[1])
    assert not torch.allclose(p[0], p[2])


def test_encode_permutation_equivariance(model):
    cfg = model.config
    x = torch.randn(1, 10, cfg.embed_dim, dtype=torch.float64)
    pos = torch.randn(1, 10, cfg.embed_dim, dtype=torch.float64)
    perm = torch.randperm(10)
    out = model.encode(x, pos)
    assert out.shape == x.shape
    assert torch.allclose(model.encode(x[:, perm], pos[:, perm]), out[:, perm], atol=1e-6)


def test_batch_independence(model):
    cfg = model.config
    local, centers = inputs(cfg, batch=2, seed=1)
    state = np.array([[V] * 10 + [MSK] * 12 + [DRP] * 10, [V] * 6 + [MSK] * 26])
    both = model(local, centers, state)
    for i in range(2):
        one = model(local[i:i + 1], centers[i:i + 1], state[i:i + 1])
        nv, nm = both.n_visible[i], both.n_masked[i]
        assert torch.allclose(both.encoded[i, :nv], one.encoded[0], atol=1e-6)
        assert torch.allclose(both.decoded[i, :nv + nm], one.decoded[0], atol=1e-6)
        assert torch.allclose(both.pred[i], one.pred[0], atol=1e-6)


def test_decode_contract_and_shapes(model):
    cfg = model.config
    local, centers = inputs(cfg)
    state = np.array([V] * 8 + [MSK] * 20 + [DRP] * 4)
    out = model(local, centers, state)
    assert out.decoded.shape == (1, 28, cfg.embed_dim)
    assert out.pred[0].shape == (20, cfg.patch_size, 3)
    assert out.token_patch[0].tolist() == list(range(28))
    with pytest.raises(ContractError):
        model.decode(out.encoded, out.enc_pad, [centers[0, 8:27]], [20], [8], [centers[0, :8]])


def test_decode_permutation_equivariance(model):
    cfg = model.config
    enc = torch.randn(1, 6, cfg.embed_dim, dtype=torch.float64)
    pad = torch.zeros(1, 6, dtype=torch.bool)
    vc = torch.randn(6, 3, dtype=torch.float64)
    mc = torch.randn(4, 3, dtype=torch.float64)
    h, _ = model.decode(enc, pad, [mc], [4], [6], [vc])
    pv, pm = torch.randperm(6), torch.randperm(4)
    h2, _ = model.decode(enc[:, pv], pad, [mc[pm]], [4], [6], [vc[pv]])
    assert torch.allclose(h2[0, :6], h[0, pv], atol=1e-6)
    assert torch.allclose(h2[0, 6:], h[0, 6 + pm], atol=1e-6)


def test_zero_masked_still_decodes(model):
    local, centers = inputs(model.config)
    out = model(local, centers, np.array([V] * 20 + [DRP] * 12))
    assert out.decoded.shape[1] == 20 and out.pred[0].shape[0] == 0


def test_scene_pool(model):
    cfg = model.config
    local, centers = inputs(cfg)
    one = model(local, centers, np.array([V] + [MSK] * 31))
    assert torch.equal(one.scene_feat[0], one.encoded[0, 0])

    enc = torch.randn(1, 5, cfg.embed_dim, dtype=torch.float64)
    pad = torch.tensor([[False, False, False, True, True]])
    brute = [sum(float(enc[0, t, j]) for t in range(3)) / 3 for j in range(cfg.embed_dim)]
    assert np.allclose(model.scene_pool(enc, pad)[0].numpy(), brute, rtol=1e-12)
    perm = torch.tensor([2, 0, 1, 3, 4])
    assert torch.allclose(model.scene_pool(enc[:, perm], pad), model.scene_pool(enc, pad), atol=1e-12)


def test_reconstruct_head_deterministic(model):
    h = torch.randn(5, model.config.embed_dim, dtype=torch.float64)
    a = model.reconstruct_head(h)
    assert a.shape == (5, model.config.patch_size, 3)
    assert torch.equal(a, model.reconstruct_head(h))


def test_apply_head():
    torch.manual_seed(1)
    head = ProjectionHead(6, 4).double()
    x = torch.randn(3, 6, dtype=torch.float64)
    assert apply_head(head, x).shape == (3, 4)
    with pytest.raises(ContractError):
        apply_head(head, torch.randn(3, 5, dtype=torch.float64))
    last = head.net[-1]
    with torch.no_grad():
        saved = last.weight.clone(), last.bias.clone()
        last.weight.zero_()
        last.bias.zero_()
    assert torch.count_nonzero(apply_head(head, x)) == 0
    with torch.no_grad():
        last.weight.copy_(saved[0])
        last.bias.copy_(saved[1])


def test_head_jacobian_matches_finite_differences():
    torch.manual_seed(2)
    head = ProjectionHead(5, 3).double()
    x = torch.randn(5, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda v: apply_head(head, v), x)
    eps = 1e-6
    num = torch.zeros_like(jac)
    with torch.no_grad():
        for i in range(5):
            e = torch.zeros(5, dtype=torch.float64)
            e[i] = eps
            num[:, i] = (apply_head(head, x + e) - apply_head(head, x - e)) / (2 * eps)
    rel = (jac - num).abs().max() / jac.abs().max()
    assert rel < 1e-4


def _outputs(out):
    return [out.encoded, out.decoded, out.scene_feat, *out.pred]


def test_dropped_patch_has_no_influence(model):
    cfg = model.config
    local, centers = inputs(cfg, seed=3)
    state = np.array([V] * 9 + [MSK] * 15 + [DRP] * 8)
    base = model(local, centers, state)
    local2, centers2 = local.clone(), centers.clone()
    local2[0, 25] += 5.0
    centers2[0, 25] -= 3.0
    pert = model(local2, centers2, state)
    assert all(torch.equal(a, b) for a, b in zip(_outputs(base), _outputs(pert)))


def test_masked_patch_never_reaches_encoder(model):
    cfg = model.config
    local, centers = inputs(cfg, seed=4)
    state = np.array([V] * 9 + [MSK] * 15 + [DRP] * 8)
    base = model(local, centers, state)

    local2 = local.clone()
    local2[0, 12] += 5.0
    pert = model(local2, centers, state)
    assert all(torch.equal(a, b) for a, b in zip(_outputs(base), _outputs(pert)))

    centers2 = centers.clone()
    centers2[0, 12] += 1.0
    moved = model(local, centers2, state)
    assert torch.equal(moved.encoded, base.encoded)
    assert not torch.equal(moved.decoded, base.decoded)


def test_forward_is_deterministic(model):
    local, centers = inputs(model.config, seed=5)
    state = np.array([V] * 12 + [MSK] * 20)
    a, b = model(local, centers, state), model(local, centers, state)
    assert all(torch.equal(x, y) for x, y in zip(_outputs(a), _outputs(b)))


def test_encoder_only_matches_full_model(model):
    enc = EncoderOnly(model.config).double()
    enc.load_state_dict(model.encoder_state_dict())
    local, centers = inputs(model.config, seed=6)
    assert torch.equal(enc.encode_all(local, centers), model.encode_all(local, centers))
