import numpy as np
import pytest

from factories import records_equal
from scenemae.correspondence import project_points
from scenemae.synthgen import SynthConfig, SynthConfigError, generate_scene

SEEDS = range(100)


@pytest.fixture(scope="module")
def scenes():
    cfg = SynthConfig()
    return [generate_scene(cfg, s) for s in SEEDS]


def test_deterministic():
    cfg = SynthConfig()
    assert records_equal(generate_scene(cfg, 11), generate_scene(cfg, 11))
    assert not records_equal(generate_scene(cfg, 11), generate_scene(cfg, 12))


def test_zero_foreground_density():
    rec = generate_scene(SynthConfig(foreground_density=0), 4)
    assert np.all(rec.cloud.instance_id == -1)
    assert len(rec.masks.foreground_ids()) == 0
    rec.validate()


def test_records_are_valid(scenes):
    for rec in scenes[:10]:
        rec.validate()
        assert rec.cloud.points.dtype == np.float32


def test_visible_instances_own_pixels(scenes):
    for rec in scenes:
        proj = project_points(rec.cloud.points, rec.camera)
        owned = set(np.unique(rec.masks.pixel_mask).tolist())
        ids, counts = np.unique(rec.cloud.instance_id[proj.valid], return_counts=True)
        for inst, c in zip(ids, counts):
            if inst >= 0 and c >= 30:
                assert inst in owned, (rec.scene_id, inst)


def test_foreground_fraction(scenes):
    frac = [float(np.mean(r.cloud.instance_id >= 0)) for r in scenes]
    assert 0.15 <= min(frac) and max(frac) <= 0.6


def test_mask_agreement(scenes):
    for rec in scenes:
        proj = project_points(rec.cloud.points, rec.camera)
        u, v = proj.pixels[proj.valid].T
        seen = rec.masks.pixel_mask[v, u]
        assert np.mean(seen != rec.cloud.instance_id[proj.valid]) < 0.05


def test_masks_match_labels(scenes):
    for rec in scenes[:20]:
        labels = {m.mask_id: m.label_id for m in rec.masks.masks}
        for inst, lab in labels.items():
            assert set(np.unique(rec.cloud.label_id[rec.cloud.instance_id == inst]).tolist()) == {lab}


@pytest.mark.parametrize("kw", [dict(n_objects=(0, 2)), dict(n_objects=(3, 2)), dict(points_per_surface_unit=0),
                                dict(room_extent=-1)])
def test_invalid_config(kw):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kw).validate()
