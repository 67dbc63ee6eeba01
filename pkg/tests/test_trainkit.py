import json
import math

import numpy as np
import pytest
import torch

from scenemae.checkpoint import export_encoder, load_model, read_checkpoint
from scenemae.synthgen import SynthConfig, generate_scene
from scenemae.trainkit import (
    ABLATION_ROWS,
    NumericAbortError,
    OracleFeatures,
    StratificationError,
    TrainConfig,
    ablate,
    build_optimizer,
    linear_probe,
    lr_at,
    pretrain,
    tiny_config,
)

SMALL = SynthConfig(n_objects=(3, 4), points_per_surface_unit=30, foreground_density=60)


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(SMALL, s) for s in range(6)]


def test_defaults():
    c = TrainConfig()
    assert (c.base_lr, c.weight_decay, c.batch_size, c.warmup_epochs, c.drop_path, c.epochs) == \
        (5e-4, 5e-2, 64, 10, 0.1, 300)
    assert (c.r_w, c.r_f, c.r_d) == (0.7, 0.8, 0.4)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule():
    base, total, warm = 1e-3, 200, 20
    lrs = [lr_at(s, total, warm, base) for s in range(total)]
    assert lrs[0] == pytest.approx(base / warm)
    assert lrs[warm - 1] == pytest.approx(base)
    assert lrs[-1] < 1e-6 * base
    assert all(a < b for a, b in zip(lrs[:warm - 1], lrs[1:warm]))
    assert all(a >= b for a, b in zip(lrs[warm - 1:-1], lrs[warm:]))
    assert lr_at(0, 1, 0, base) == base


def test_adamw_matches_hand_reference():
    torch.manual_seed(0)
    w = torch.nn.Parameter(torch.tensor([[1.5, -0.7]], dtype=torch.float64))
    opt = torch.optim.AdamW([w], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-2)
    ref = np.array([1.5, -0.7])
    m = np.zeros(2)
    v = np.zeros(2)
    target = np.array([0.3, 0.2])
    for t in range(1, 101):
        opt.zero_grad()
        loss = ((w[0] - torch.as_tensor(target)) ** 4).sum() + (w[0, 0] * w[0, 1]) ** 2
        loss.backward()
        opt.step()

        g = 4 * (ref - target) ** 3 + 2 * ref[::-1] ** 2 * ref
        ref = ref * (1 - 1e-2 * 5e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        ref = ref - 1e-2 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(w.detach().numpy()[0], ref, atol=1e-7, rtol=0), t


def test_weight_decay_groups():
    from scenemae.model import PROFILES, SceneMAE

    model = SceneMAE(PROFILES["gradcheck"])
    opt = build_optimizer(model, TrainConfig())
    names = {id(p): n for n, p in model.named_parameters()}
    no_decay = {names[id(p)] for p in opt.param_groups[1]["params"]}
    assert "mask_token" in no_decay
    assert all(n.endswith("bias") or "norm" in n or n == "mask_token" for n in no_decay)
    assert opt.param_groups[1]["weight_decay"] == 0.0


def test_zero_epochs(tmp_path, scenes):
    res = pretrain(tiny_config(epochs=0), scenes, tmp_path)
    assert res.metrics == []
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert ckpts == ["step_0000000"]


def test_metrics_log(tmp_path, scenes):
    cfg = tiny_config(epochs=2, batch_size=4)
    res = pretrain(cfg, scenes, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == res.steps == 4
    recs = [json.loads(x) for x in lines]
    keys = {"step", "epoch", "l_mae", "l_scene", "l_object", "l_total", "lr", "seconds"}
    assert all(keys <= r.keys() for r in recs)
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    for r in recs:
        assert r["l_total"] == float(np.float32(np.float32(r["l_mae"]) + np.float32(r["l_scene"]))
                                     + np.float32(r["l_object"]))


def test_resume_continues_trajectory(tmp_path, scenes):
    cfg = tiny_config(epochs=4, batch_size=3, checkpoint_every=2, drop_path=0.1)
    straight = pretrain(cfg, scenes, tmp_path / "a")
    ck = tmp_path / "a" / "checkpoints" / "step_0000004"
    assert ck.exists()
    resumed = pretrain(cfg, scenes, tmp_path / "b", resume=ck)
    assert [m["step"] for m in resumed.metrics] == [5, 6, 7, 8]
    for a, b in zip(straight.metrics[4:], resumed.metrics):
        for k in ("l_mae", "l_scene", "l_object", "l_total"):
            assert b[k] == pytest.approx(a[k], rel=1e-5)
    sa, sb = straight.model.state_dict(), resumed.model.state_dict()
    assert all(torch.allclose(sa[k], sb[k], rtol=1e-5, atol=1e-7) for k in sa)


def test_pretrain_is_reproducible(scenes):
    cfg = tiny_config(epochs=1, batch_size=3, drop_path=0.1)
    a, b = pretrain(cfg, scenes), pretrain(cfg, scenes)
    strip = lambda ms: [{k: v for k, v in m.items() if k != "seconds"} for m in ms]  # noqa: E731
    assert strip(a.metrics) == strip(b.metrics)


def test_numeric_abort(tmp_path, scenes):
    from scenemae.model import SceneMAE

    cfg = tiny_config(epochs=1, batch_size=3)
    model = SceneMAE(cfg.model_config())
    with torch.no_grad():
        model.reconstruct.bias.fill_(float("nan"))
    with pytest.raises(NumericAbortError) as err:
        pretrain(cfg, scenes, tmp_path, model=model)
    snap = json.loads(err.value.snapshot_path.read_text())
    assert snap["step"] == 0 and len(snap["scene_ids"]) == 3
    assert math.isnan(snap["losses"]["l_total"])


def test_checkpoint_round_trip_and_export(tmp_path, scenes):
    res = pretrain(tiny_config(epochs=1, batch_size=6), scenes, tmp_path)
    model, _ = load_model(res.checkpoint)
    for k, v in res.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)
    enc_dir = export_encoder(res.checkpoint, tmp_path / "encoder")
    ck = read_checkpoint(enc_dir)
    assert ck["manifest"]["kind"] == "encoder"
    assert not any("decoder" in k or "mask_token" in k or "head" in k for k in ck["tensors"])
    enc, _ = load_model(enc_dir)
    from scenemae.pipeline import scene_tensors
    from scenemae.trainkit import prepare_all

    local, centers = scene_tensors(prepare_all(scenes[:2], res.model.config))
    assert torch.equal(enc.encode_all(local, centers), res.model.encode_all(local, centers))


def test_oracle_probe_is_perfect(scenes):
    for task in ("patch-label", "patch-foreground"):
        n = len(SMALL.label_vocab)
        probe = linear_probe(OracleFeatures(task, n), scenes, task, n)
        assert probe.accuracy == 1.0


def test_probe_determinism_and_checkpoint_path(tmp_path, scenes):
    res = pretrain(tiny_config(epochs=1, batch_size=6), scenes, tmp_path)
    a = linear_probe(res.model, scenes, "patch-foreground", 7, seed=3, steps=50)
    b = linear_probe(res.checkpoint, scenes, "patch-foreground", 7, seed=3, steps=50)
    assert a == b


def test_stratification_error(scenes):
    from scenemae.trainkit import prepare_all

    cfg = tiny_config()
    prepared = prepare_all(scenes[:3], cfg.model_config())
    for s in prepared[:2]:
        s.patch_label[:] = -1
    prepared[2].patch_label[0] = 5
    with pytest.raises(StratificationError):
        linear_probe(OracleFeatures("patch-label", 7), prepared, "patch-label", 7, train_fraction=0.67)


def test_ablate_is_deterministic(scenes, tmp_path):
    cfg = tiny_config(epochs=1, batch_size=3)
    rows = [ABLATION_ROWS[0], ABLATION_ROWS[-1]]
    a = ablate(cfg, scenes[:3], scenes[3:], rows=rows, seeds=(0,), task="patch-foreground", n_labels=7,
               out_dir=tmp_path)
    b = ablate(cfg, scenes[:3], scenes[3:], rows=rows, seeds=(0,), task="patch-foreground", n_labels=7)
    assert a == b
    assert [r["row"] for r in a] == ["point_mae", "full"]
    assert json.loads((tmp_path / "ablation.json").read_text()) == a


def test_fixed_masks_repeat_the_batch(scenes):
    # a vanishing learning rate leaves the model put, so only the masks can move the loss
    fixed = pretrain(tiny_config(epochs=3, batch_size=6, base_lr=1e-12, resample_masks=False), scenes)
    l_mae = [m["l_mae"] for m in fixed.metrics]
    assert l_mae[1] == pytest.approx(l_mae[0], rel=1e-6) and l_mae[2] == pytest.approx(l_mae[0], rel=1e-6)
    fresh = pretrain(tiny_config(epochs=3, batch_size=6, base_lr=1e-12), scenes)
    assert len({round(m["l_mae"], 9) for m in fresh.metrics}) > 1


def test_patch_label_skips_background(scenes):
    from scenemae.trainkit import prepare_all, split_scenes

    prepared = prepare_all(scenes, tiny_config().model_config())
    _, test = split_scenes(prepared)
    labeled = sum(int((s.patch_label >= 0).sum()) for s in test)
    n = len(SMALL.label_vocab)
    assert linear_probe(OracleFeatures("patch-label", n), prepared, "patch-label", n).n_test == labeled
    every = linear_probe(OracleFeatures("patch-label-all", n), prepared, "patch-label-all", n)
    assert every.n_test == sum(s.n_patches for s in test) and every.accuracy == 1.0
