import numpy as np
import pytest

from stmixer import diffcore as dc
from stmixer.encoder import (EncoderConfig, encode, encode_pair, init_encoder_params, normalize_intensity,
                             patchify, unpatchify)
from stmixer.volume import Volume3D

SMALL = EncoderConfig(roi_size=16, patch_size=8, embed_dim=16, depth=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_patchify_single_patch_row_major():
    v = np.arange(512, dtype=np.float32).reshape(8, 8, 8)
    p = patchify(Volume3D(v), 8)
    assert p.shape == (1, 512)
    np.testing.assert_array_equal(p[0], np.arange(512))


def test_patchify_partition_reassembles(rng):
    v = rng.normal(size=(16, 16, 16)).astype(np.float32)
    p = patchify(v, 8)
    assert p.shape == (8, 512)
    np.testing.assert_array_equal(unpatchify(p, v.shape, 8), v)
    # every voxel appears exactly once
    np.testing.assert_array_equal(np.sort(p.ravel()), np.sort(v.ravel()))


def test_patchify_index_arithmetic(rng):
    v = rng.normal(size=(32, 32, 32)).astype(np.float32)
    p = patchify(v, 8)
    assert p.shape == (64, 512)
    for pz in range(4):
        for py in range(4):
            for px in range(4):
                block = v[pz * 8:(pz + 1) * 8, py * 8:(py + 1) * 8, px * 8:(px + 1) * 8]
                np.testing.assert_array_equal(p[pz * 16 + py * 4 + px], block.ravel())
    # patch (0,0,1) covers x in [8, 16)
    np.testing.assert_array_equal(p[1], v[0:8, 0:8, 8:16].ravel())


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match=r"\(10, 16, 16\)"):
        patchify(np.zeros((10, 16, 16)), 8)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(roi_size=30, patch_size=8)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=64, heads=3)


def test_normalize_maps_window_to_unit_range():
    np.testing.assert_allclose(normalize_intensity(np.array([-5.0, 0.0, 0.5, 1.0, 7.0])),
                               [-1, -1, 0, 1, 1])


def test_encode_deterministic_and_shapes(rng):
    params = init_encoder_params(SMALL, rng)
    v = rng.random((16, 16, 16)).astype(np.float32)
    g1, l1 = encode(Volume3D(v), params, SMALL)
    g2, l2 = encode(Volume3D(v.copy()), params, SMALL)
    assert g1.shape == (16,) and l1.shape == (16,)
    assert g1.data.tobytes() == g2.data.tobytes()
    assert l1.data.tobytes() == l2.data.tobytes()


def test_encode_depth_zero_returns_raw_global_token(rng):
    cfg = EncoderConfig(roi_size=16, patch_size=8, embed_dim=16, depth=0)
    params = init_encoder_params(cfg, rng)
    g, _ = encode(rng.random((16, 16, 16)), params, cfg)
    np.testing.assert_array_equal(g.data, params["enc.global_token"].data)


def test_encode_breaks_patch_permutation(rng):
    params = init_encoder_params(SMALL, rng)
    v = rng.random((16, 16, 16)).astype(np.float32)
    swapped = v.copy()
    swapped[:8, :8, :8], swapped[:8, :8, 8:] = v[:8, :8, 8:], v[:8, :8, :8]
    _, a = encode(v, params, SMALL)
    _, b = encode(swapped, params, SMALL)
    assert np.abs(a.data - b.data).max() > 1e-6


def test_encode_rejects_wrong_roi_size(rng):
    params = init_encoder_params(SMALL, rng)
    with pytest.raises(ValueError, match="roi_size"):
        encode(np.zeros((8, 8, 8)), params, SMALL)


def test_encode_pair_siamese_identity(rng):
    params = init_encoder_params(SMALL, rng)
    v = rng.random((16, 16, 16)).astype(np.float32)
    emb = encode_pair(v, v, params, SMALL)
    assert emb.t0_present.all()
    assert emb.F_L0.data.tobytes() == emb.F_L1.data.tobytes()


def test_encode_pair_missing_t0_uses_placeholder(rng):
    params = init_encoder_params(SMALL, rng)
    emb = encode_pair(rng.random((16, 16, 16)), None, params, SMALL)
    assert not emb.t0_present.any()
    np.testing.assert_array_equal(emb.F_L0.data, params["enc.t0_placeholder"].data)


def test_encode_pair_distinct_volumes_differ(rng):
    params = init_encoder_params(SMALL, rng)
    emb = encode_pair(rng.random((16, 16, 16)), rng.random((16, 16, 16)), params, SMALL)
    assert np.abs(emb.F_L0.data - emb.F_L1.data).max() > 1e-6


def test_batch_local_embedding_same_via_t1_and_t0_paths(rng):
    """Siamese sharing inside a mixed batch: case i's T0 equals case j's T1."""
    params = init_encoder_params(SMALL, rng)
    vols = rng.random((4, 16, 16, 16)).astype(np.float32)
    present = np.array([True, False, True, True])
    t0 = vols[[3, 0, 1]]  # cases 0, 2, 3 get T0 = T1 of cases 3, 0, 1
    emb = encode_pair(vols, t0, params, SMALL, present)
    for case, src in ((0, 3), (2, 0), (3, 1)):
        assert emb.F_L0.data[case].tobytes() == emb.F_L1.data[src].tobytes()
    np.testing.assert_array_equal(emb.F_L0.data[1], params["enc.t0_placeholder"].data)


def test_t0_count_must_match_flags(rng):
    params = init_encoder_params(SMALL, rng)
    with pytest.raises(ValueError):
        encode_pair(rng.random((2, 16, 16, 16)), rng.random((2, 16, 16, 16)), params, SMALL,
                    np.array([True, False]))


def test_placeholder_grad_only_when_t0_missing(rng):
    params = init_encoder_params(SMALL, rng)
    vols = rng.random((3, 16, 16, 16)).astype(np.float32)

    def run(present, t0):
        for p in params.values():
            p.zero_grad()
        with dc.Tape() as tape:
            emb = encode_pair(vols, t0, params, SMALL, present)
            loss = dc.sum(dc.mul(emb.F_L0, emb.F_L1))
        tape.backward(loss)
        return params["enc.t0_placeholder"].grad.copy()

    all_present = run(np.array([True, True, True]), vols[::-1].copy())
    assert not all_present.any()
    some_missing = run(np.array([True, False, True]), vols[:2].copy())
    assert np.abs(some_missing).max() > 0


def test_encoder_gradients(rng):
    cfg = EncoderConfig(roi_size=16, patch_size=8, embed_dim=8, depth=1)
    params = init_encoder_params(cfg, rng)
    vols = rng.random((2, 16, 16, 16)).astype(np.float32)
    w = dc.constant(rng.normal(size=(2, 8)))

    def f():
        emb = encode_pair(vols, vols[:1], params, cfg, np.array([False, True]))
        return dc.sum(dc.mul(dc.add(dc.add(emb.F_G1, emb.F_L1), emb.F_L0), w))

    assert dc.grad_check(f, params.values(), max_per_param=15) < 1e-3
