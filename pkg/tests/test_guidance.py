import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from guidedgan.guidance import (MissingSidecarError, SidecarManifest, SidecarStore, ToyLandmarkDetector,
                                embed_identity, extract_features, load_sidecars, nearest_indices,
                                pooled_descriptor, retrieve_pseudo_pairs, toy_identity_encoder,
                                toy_perceptual_backbone, write_sidecars)


@pytest.fixture(scope="module")
def enc():
    return toy_identity_encoder()


@pytest.fixture(scope="module")
def phi():
    return toy_perceptual_backbone()


def brute_force_nn(q, b):
    """Exhaustive cosine scan with lowest-index tie breaking, in float64 numpy."""
    q, b = q.double().numpy(), b.double().numpy()
    out = []
    for row in q:
        best, best_i = -np.inf, -1
        for j, cand in enumerate(b):
            s = row @ cand / (np.linalg.norm(row) * np.linalg.norm(cand))
            if s > best:
                best, best_i = s, j
        out.append(best_i)
    return out


def test_embeddings_unit_norm(enc):
    e = embed_identity(torch.rand(5, 3, 64, 64) * 2 - 1, enc)
    torch.testing.assert_close(e.norm(dim=1), torch.ones(5), atol=1e-6, rtol=0)


def test_duplicate_image_identical_embedding(enc):
    x = torch.rand(1, 3, 64, 64).repeat(2, 1, 1, 1)
    e = embed_identity(x, enc)
    assert torch.equal(e[0], e[1])


def test_small_perturbation_keeps_embedding(enc):
    torch.manual_seed(0)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    d = torch.randn_like(x)
    d = d / d.norm()
    e0 = embed_identity(x, enc)[0].double()
    for eps in (1e-2, 1e-3):
        e1 = embed_identity(x + eps * d, enc)[0].double()
        # forward-difference slope bounds the drop in cosine
        slope = ((e1 - e0).norm() / eps).item()
        cos = float(e0 @ e1)
        assert cos >= 1 - slope * eps - 1e-6


def test_encoder_gradients_reach_input_not_weights(enc):
    x = (torch.rand(2, 3, 64, 64) * 2 - 1).requires_grad_(True)
    embed_identity(x, enc).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in enc.parameters())


def test_encoder_stays_in_eval(enc):
    enc.train()
    assert not enc.net.training


def test_feature_taps_sizes(phi):
    feats = extract_features(torch.zeros(2, 3, 64, 64), phi)
    assert [f.shape[-1] for f in feats] == [32, 16]
    assert all(torch.isfinite(f).all() for f in feats)


def test_features_deterministic(phi):
    x = torch.rand(2, 3, 64, 64)
    a, b = extract_features(x, phi), extract_features(x.clone(), phi)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_tap_out_of_range():
    phi = toy_perceptual_backbone()
    phi.tap_layers = (1, 9)
    with pytest.raises(IndexError):
        extract_features(torch.zeros(1, 3, 64, 64), phi)


def test_wrong_encoder_kind(enc, phi):
    with pytest.raises(ValueError):
        extract_features(torch.zeros(1, 3, 64, 64), enc)
    with pytest.raises(ValueError):
        embed_identity(torch.zeros(1, 3, 64, 64), phi)


def test_retrieval_exact_copy(phi):
    torch.manual_seed(1)
    bx = torch.rand(4, 3, 64, 64) * 2 - 1
    by = torch.rand(5, 3, 64, 64) * 2 - 1
    by[3] = bx[2]
    ix, _ = retrieve_pseudo_pairs(bx, by, phi)
    assert int(ix[2]) == 3


def test_retrieval_single_candidate(phi):
    ix, iy = retrieve_pseudo_pairs(torch.rand(6, 3, 64, 64), torch.rand(1, 3, 64, 64), phi)
    assert ix.tolist() == [0] * 6 and iy.tolist() == [int(iy[0])]


def test_retrieval_matches_brute_force_16(phi):
    torch.manual_seed(2)
    bx, by = torch.rand(16, 3, 64, 64) * 2 - 1, torch.rand(16, 3, 64, 64) * 2 - 1
    ix, iy = retrieve_pseudo_pairs(bx, by, phi)
    dx = pooled_descriptor(extract_features(bx, phi))
    dy = pooled_descriptor(extract_features(by, phi))
    assert ix.tolist() == brute_force_nn(dx, dy)
    assert iy.tolist() == brute_force_nn(dy, dx)


def test_retrieval_no_grad(phi):
    bx = torch.rand(3, 3, 64, 64).requires_grad_(True)
    ix, iy = retrieve_pseudo_pairs(bx, torch.rand(3, 3, 64, 64), phi)
    assert not ix.requires_grad and ix.dtype == torch.long


def test_ties_break_to_lowest_index():
    q = torch.tensor([[1.0, 0.0]])
    bank = torch.tensor([[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]])
    assert nearest_indices(q, bank).tolist() == [1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_retrieval_order_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    q, b = torch.randn(7, 5, generator=g), torch.randn(9, 5, generator=g)
    perm = torch.randperm(9, generator=g)
    base = nearest_indices(q, b)
    permuted = nearest_indices(q, b[perm])
    assert torch.equal(perm[permuted], base)


def test_l2_metric_option():
    q = torch.tensor([[1.0, 0.0]])
    bank = torch.tensor([[10.0, 0.0], [0.9, 0.1]])
    assert nearest_indices(q, bank, "cosine").tolist() == [0]
    assert nearest_indices(q, bank, "l2").tolist() == [1]


# --- sidecars ------------------------------------------------------------------

def _store(tmp_path, res=256, with_files=True):
    SidecarManifest(res, 3).save(tmp_path)
    if with_files:
        mask = np.zeros((res, res))
        mask[res // 4:3 * res // 4, res // 4:3 * res // 4] = 1.0
        write_sidecars(tmp_path, "a_001", mask, np.array([[10.0, 20.0], [100.5, 30.25], [60.0, 200.0]]))
    return tmp_path


def test_sidecar_downscale_halves_landmarks(tmp_path):
    store = SidecarStore(_store(tmp_path))
    mask, lm = load_sidecars("a_001", store, 128)
    assert mask.weights.shape == (128, 128)
    np.testing.assert_allclose(lm.points.numpy(), [[5.0, 10.0], [50.25, 15.125], [30.0, 100.0]])


def test_all_ones_mask_stays_ones(tmp_path):
    SidecarManifest(64, 1).save(tmp_path)
    write_sidecars(tmp_path, "b_000", np.ones((64, 64)), np.array([[3.0, 4.0]]))
    for res in (32, 64, 128):
        mask, _ = load_sidecars("b_000", SidecarStore(tmp_path), res)
        assert torch.all(mask.weights == 1)


def test_missing_sidecar_policies(tmp_path):
    _store(tmp_path, with_files=False)
    with pytest.raises(MissingSidecarError):
        load_sidecars("zzz", SidecarStore(tmp_path, strict=True), 64)
    mask, lm = load_sidecars("zzz", SidecarStore(tmp_path, strict=False), 64)
    assert lm is None and torch.all(mask.weights == 1)


def test_toy_landmarks_equal_generator_parameters(tmp_path):
    from guidedgan.data_pipeline import _frame_params, _identity_params, render_toy_face, toy_landmarks
    rng = np.random.default_rng(4)
    p = _frame_params(_identity_params(rng), rng)
    img, mask, lm = render_toy_face(p, "X", 64, rng)
    SidecarManifest(64, 5).save(tmp_path)
    write_sidecars(tmp_path, "t_000", mask, lm)
    _, loaded = load_sidecars("t_000", SidecarStore(tmp_path), 64)
    np.testing.assert_array_equal(loaded.points.numpy(), toy_landmarks(p, 64))


def test_toy_detector_on_rendered_faces():
    from guidedgan.data_pipeline import _frame_params, _identity_params, render_toy_face
    from guidedgan.metrics import landmark_nme
    rng = np.random.default_rng(0)
    imgs, lms = [], []
    for dom in ("X", "Y"):
        for _ in range(16):
            p = _frame_params(_identity_params(rng), rng)
            img, _, lm = render_toy_face(p, dom, 64, rng)
            imgs.append(torch.from_numpy(img).permute(2, 0, 1).float() / 127.5 - 1)
            lms.append(torch.from_numpy(lm))
    det = ToyLandmarkDetector()
    nme, skipped = landmark_nme(det(torch.stack(imgs)), torch.stack(lms))
    assert skipped == 0 and nme < 0.05
    assert det.calls == 1
