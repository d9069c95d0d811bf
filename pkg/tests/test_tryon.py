import numpy as np
import pytest

from tpd.diffusion import make_schedule
from tpd.metrics import preservation_check
from tpd.synthdata import GeneratorConfig, gen_sample
from tpd.tryon import (
    COND_CHANNELS,
    InpaintingMask,
    SamplerConfig,
    assemble_channel_concat,
    assemble_satt,
    augment_mask,
    bbox_to_mask,
    build_state,
    normalize,
    parse_to_mask,
    signed_distance,
    stage1_predict_mask,
    two_stage_tryon,
    union_mask,
)

CFG = GeneratorConfig()


@pytest.fixture(scope="module")
def sample():
    return gen_sample(3, CFG)


# ---- assembly -------------------------------------------------------------

def test_satt_layout(sample):
    c_m = parse_to_mask(sample.parse_mask)
    b = assemble_satt(sample, c_m)
    H, W = CFG.height, CFG.width
    assert b.state0.shape == (4, 2 * H, W) and b.cond.shape == (10, 2 * H, W)
    assert b.split == H
    assert np.all(b.cond[3, H:] == 1)
    assert np.array_equal(b.cond[3:4, :H], c_m.keep)
    assert not b.cond[4:, H:].any()
    np.testing.assert_array_equal(b.cond[0:3, H:], normalize(sample.garment))
    assert set(np.unique(b.state0[3])) <= {-1.0, 1.0}
    np.testing.assert_array_equal(b.state0[3, :H], normalize(sample.parse_mask)[0])
    np.testing.assert_array_equal(b.state0[3, H:], normalize(sample.garment_silhouette)[0])


def test_satt_masked_person_round_trip(sample):
    c_m = bbox_to_mask(sample.bbox)
    b = assemble_satt(sample, c_m)
    H = CFG.height
    kept = c_m.keep[0] == 1
    masked = b.cond[0:3, :H]
    recovered = (masked[:, kept] / c_m.keep[0][kept] + 1.0) / 2.0
    np.testing.assert_array_equal(recovered, sample.person[:, kept])
    assert not masked[:, ~kept].any()


def test_channel_concat_layout_matches_satt_person_rows(sample):
    c_m = parse_to_mask(sample.parse_mask)
    satt = assemble_satt(sample, c_m)
    chan = assemble_channel_concat(sample, c_m)
    H, W = CFG.height, CFG.width
    assert chan.state0.shape == (4, H, W) and chan.cond.shape == (COND_CHANNELS["channel"], H, W) == (13, H, W)
    np.testing.assert_array_equal(chan.cond[:10], satt.cond[:, :H])
    np.testing.assert_array_equal(chan.state0, satt.state0[:, :H])
    np.testing.assert_array_equal(chan.cond[10:], normalize(sample.garment))


def test_assembly_rejects_width_mismatch(sample):
    import dataclasses

    bad = dataclasses.replace(sample, garment=sample.garment[:, :, :-2])
    with pytest.raises(ValueError, match="width"):
        assemble_satt(bad, parse_to_mask(sample.parse_mask))
    with pytest.raises(ValueError):
        build_state("sideways", sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette)


def test_inpainting_mask_must_be_binary():
    with pytest.raises(ValueError):
        InpaintingMask(np.full((1, 4, 4), 0.5))
    m = InpaintingMask.from_region(np.eye(4, dtype=bool), "parse")
    assert m.area == 4 and m.keep.shape == (1, 4, 4)


# ---- mask augmentation ----------------------------------------------------

def sdf_oracle(region):
    ins = np.argwhere(region)
    out = np.argwhere(~region)
    d = np.zeros(region.shape)
    for i, j in np.ndindex(region.shape):
        other = out if region[i, j] else ins
        dist = np.sqrt(((other - [i, j]) ** 2).sum(axis=1)).min()
        d[i, j] = -dist if region[i, j] else dist
    return d


def random_nested(rng, h=20, w=16):
    r0, c0 = rng.integers(0, 5, 2)
    r1, c1 = rng.integers(h - 5, h + 1), rng.integers(w - 5, w + 1)
    box = np.zeros((h, w), bool)
    box[r0:r1, c0:c1] = True
    yy, xx = np.mgrid[:h, :w]
    cy, cx = rng.uniform(r0 + 2, r1 - 2), rng.uniform(c0 + 2, c1 - 2)
    blob = ((yy - cy) / rng.uniform(1.5, 6)) ** 2 + ((xx - cx) / rng.uniform(1.5, 6)) ** 2 <= 1
    blob |= rng.uniform(size=(h, w)) < 0.05
    return InpaintingMask.from_region(blob & box, "parse"), InpaintingMask.from_region(box, "bbox")


def test_augment_endpoints_are_exact_for_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(100):
        M, b = random_nested(rng)
        assert np.array_equal(augment_mask(M, b, 0.0).keep, M.keep)
        assert np.array_equal(augment_mask(M, b, 1.0).keep, b.keep)


def test_augment_matches_brute_force_sdf_blend():
    h, w = 18, 14
    yy, xx = np.mgrid[:h, :w]
    disk = (yy - 9) ** 2 + (xx - 7) ** 2 <= 9
    box = np.zeros((h, w), bool)
    box[2:16, 2:12] = True
    M, b = InpaintingMask.from_region(disk, "parse"), InpaintingMask.from_region(box, "bbox")
    np.testing.assert_array_equal(signed_distance(disk), sdf_oracle(disk))
    for lam in (0.25, 0.5, 0.8):
        out = augment_mask(M, b, lam).inpaint
        want = (((1 - lam) * sdf_oracle(disk) + lam * sdf_oracle(box) < 0) & box) | disk
        np.testing.assert_array_equal(out, want)
    mid = augment_mask(M, b, 0.5)
    assert disk.sum() <= mid.area <= box.sum()


def test_augment_is_monotone_in_lambda():
    rng = np.random.default_rng(1)
    for _ in range(20):
        M, b = random_nested(rng)
        prev = M.inpaint
        for lam in np.linspace(0, 1, 11):
            cur = augment_mask(M, b, float(lam)).inpaint
            assert np.all(prev <= cur)
            prev = cur


def test_augment_errors():
    rng = np.random.default_rng(2)
    M, b = random_nested(rng)
    with pytest.raises(ValueError):
        augment_mask(M, b, 1.5)
    assert b.area > M.area
    with pytest.raises(ValueError, match="contained"):
        augment_mask(b, M, 0.5)


# ---- union ----------------------------------------------------------------

def test_union_mask_properties():
    rng = np.random.default_rng(3)
    M, _ = random_nested(rng)
    assert np.array_equal(union_mask(M, M).keep, M.keep)
    a = np.zeros((6, 6), bool)
    a[:2] = True
    c = np.zeros((6, 6), bool)
    c[4:, :3] = True
    u = union_mask(InpaintingMask.from_region(a, "x"), InpaintingMask.from_region(c, "y"))
    assert u.area == a.sum() + c.sum() and u.provenance == "union"
    for _ in range(10):
        r1, r2 = rng.uniform(size=(2, 7, 5)) < 0.4
        u = union_mask(InpaintingMask.from_region(r1, "a"), InpaintingMask.from_region(r2, "b"))
        assert np.array_equal(u.inpaint, np.logical_or(r1, r2))
    with pytest.raises(ValueError):
        union_mask(M, InpaintingMask(np.ones((1, 3, 3))))


# ---- inference with a perfect predictor -----------------------------------

def oracle_for(state0, sched):
    def predict(x_t, cond, t):
        ab = sched.alpha_bar[np.asarray(t)].reshape(-1, 1, 1, 1)
        return (x_t - np.sqrt(ab) * state0) / np.sqrt(1.0 - ab)

    return predict


@pytest.mark.parametrize("mode", ["satt", "channel"])
def test_stage1_oracle_recovers_parse(sample, mode):
    sched = make_schedule(200, 5e-4, 0.1)
    state0 = build_state(mode, sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette)[None]
    m = stage1_predict_mask(oracle_for(state0, sched), sample.person, sample.garment, sample.bbox, sample.pose,
                            sample.dense, sched, SamplerConfig(num_steps=10), mode)
    assert m.keep.shape == (1, CFG.height, CFG.width)
    assert np.array_equal(m.inpaint, sample.parse_mask[0] == 1)
    assert m.provenance == "predicted_stage1"


def test_stage1_dilation_grows_mask(sample):
    sched = make_schedule(200, 5e-4, 0.1)
    state0 = build_state("satt", sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette)[None]
    m = stage1_predict_mask(oracle_for(state0, sched), sample.person, sample.garment, sample.bbox, sample.pose,
                            sample.dense, sched, SamplerConfig(num_steps=5, dilate_radius=1), "satt")
    parse = sample.parse_mask[0] == 1
    assert np.all(m.inpaint >= parse) and m.area > parse.sum()


def test_two_stage_oracle_reconstructs_and_preserves(sample):
    sched = make_schedule(200, 5e-4, 0.1)
    state0 = build_state("satt", sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette)[None]
    r = two_stage_tryon(oracle_for(state0, sched), sample.person, sample.garment, sample.parse_mask, sample.bbox,
                        sample.pose, sample.dense, sched, SamplerConfig(num_steps=10))
    assert r.image.shape == sample.person.shape
    keep = r.final_mask.keep[0] == 1
    assert np.array_equal(r.image[:, keep], sample.person[:, keep])
    np.testing.assert_allclose(r.image, sample.person, atol=1e-6)
    assert preservation_check(r.image, sample.person, r.final_mask.keep) == 0
    assert np.array_equal(r.final_mask.inpaint, r.stage1_mask.inpaint | (sample.parse_mask[0] == 1))


def test_two_stage_never_touches_kept_pixels_with_garbage_model(sample):
    sched = make_schedule(50)
    rng = np.random.default_rng(4)

    def garbage(x_t, cond, t):
        return rng.standard_normal(x_t.shape) * 3

    r = two_stage_tryon(garbage, sample.person, sample.garment, sample.parse_mask, sample.bbox, sample.pose,
                        sample.dense, sched, SamplerConfig(num_steps=4))
    keep = r.final_mask.keep[0] == 1
    assert r.image[:, keep].tobytes() == sample.person[:, keep].tobytes()
