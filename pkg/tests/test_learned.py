import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy.linalg import expm

from conftest import fd_check, patchset, random_params, random_patches
from eventsound.dsp import AudioSignal
from eventsound.learned import (
    MEL_SCALES, extract_patch_features, grad, init_params, load_params, loss_and_grad, loss_sisnr,
    loss_spec, loss_total, model_forward, patch_statistics, save_params, sisnr_t, spatial_aggregate,
    spectral_weight, ssm_discretize, ssm_forward, ssm_states,
)


# ---- features ---------------------------------------------------------------

def test_zero_patch_zero_features():
    p = patchset([np.zeros((6, 2, 5, 5))])
    assert not extract_patch_features(p, np.ones((4, 6))).values.any()


def test_single_event_statistics():
    v = np.zeros((6, 2, 5, 5))
    v[3, 0, 2, 2 + 2] = 1.0  # centre (2, 2), event at column cx + 2
    s = patch_statistics(patchset([v]))
    expected = np.zeros((1, 6, 6))
    expected[0, 3] = [1, 0, 2, 0, 0, 0]
    np.testing.assert_array_equal(s, expected)


def test_statistics_scale_with_mass(rng):
    p = random_patches(rng)
    s1 = patch_statistics(p)
    s2 = patch_statistics(patchset([2 * x for x in p.patches], (p.window_start, p.window_end)))
    np.testing.assert_allclose(s2[..., :2], 2 * s1[..., :2])
    np.testing.assert_allclose(s2[..., 2:], s1[..., 2:], atol=1e-12)


def test_features_are_linear_map(rng):
    p = random_patches(rng)
    w = rng.standard_normal((4, 6))
    np.testing.assert_allclose(extract_patch_features(p, w).values, patch_statistics(p) @ w.T)
    empty = patch_statistics(p)[..., :2].sum(-1) == 0
    assert not extract_patch_features(p, w).values[empty].any()


def test_feature_weight_shape_checked(rng):
    with pytest.raises(ValueError):
        extract_patch_features(random_patches(rng), np.ones((4, 5)))


# ---- attention ------------------------------------------------------------------

def test_single_patch_is_projected_values(rng):
    p = random_params()
    f = rng.standard_normal((1, 7, 4))
    np.testing.assert_allclose(spatial_aggregate(f, p), f @ p.attn_v @ p.attn_o, atol=1e-12)


def test_identical_patches_identical_outputs(rng):
    f = np.repeat(rng.standard_normal((1, 5, 4)), 3, axis=0)
    g = spatial_aggregate(f, random_params())
    np.testing.assert_allclose(g[1], g[0], atol=1e-12)
    np.testing.assert_allclose(g[2], g[0], atol=1e-12)


def test_permutation_equivariance(rng):
    p = random_params()
    f = rng.standard_normal((4, 6, 4))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(spatial_aggregate(f[perm], p), spatial_aggregate(f, p)[perm], atol=1e-12)


def test_attention_matches_direct_formula(rng):
    p = random_params(3)
    f = rng.standard_normal((3, 2, 4))
    out = np.zeros_like(f)
    for t in range(2):
        heads = []
        for h in range(2):
            cols = slice(2 * h, 2 * h + 2)
            q, k, v = (f[:, t] @ w[:, cols] for w in (p.attn_q, p.attn_k, p.attn_v))
            sc = q @ k.T / math.sqrt(2)
            w = np.exp(sc) / np.exp(sc).sum(axis=1, keepdims=True)
            heads.append(w @ v)
        out[:, t] = np.concatenate(heads, axis=1) @ p.attn_o
    np.testing.assert_allclose(spatial_aggregate(f, p), out, atol=1e-12)


def test_outputs_are_convex_combinations(rng):
    p = random_params().with_tensors({"attn_v": np.eye(4), "attn_o": np.eye(4)})
    f = rng.standard_normal((5, 3, 4)) * 10
    g = spatial_aggregate(f, p)
    assert np.all(g <= f.max(axis=0) + 1e-9) and np.all(g >= f.min(axis=0) - 1e-9)


def test_large_scores_stay_finite(rng):
    p = random_params().with_tensors({"attn_q": 100 * np.eye(4), "attn_k": 100 * np.eye(4)})
    assert np.all(np.isfinite(spatial_aggregate(1e3 * rng.standard_normal((3, 4, 4)), p)))


def test_no_patches_error():
    with pytest.raises(ValueError):
        spatial_aggregate(np.zeros((0, 3, 4)), random_params())


# ---- discretization -------------------------------------------------------------

def test_scalar_discretization():
    a, b = ssm_discretize([[-1.0]], [[1.0]], 0.1)
    assert abs(a[0, 0] - math.exp(-0.1)) <= 1e-12
    assert abs(b[0, 0] - (1 - math.exp(-0.1))) <= 1e-12
    assert abs(a[0, 0] - 0.904837) < 5e-7 and abs(b[0, 0] - 0.095163) < 5e-7


def test_zero_a_is_series_limit(rng):
    bm = rng.standard_normal((3, 2))
    a, b = ssm_discretize(np.zeros((3, 3)), bm, 0.7)
    np.testing.assert_array_equal(a, np.eye(3))
    np.testing.assert_allclose(b, 0.7 * bm, rtol=0, atol=1e-15)


@pytest.mark.parametrize("scale", [0.1, 1.0, 30.0])
def test_matches_expm_and_inverse_formula(rng, scale):
    a = scale * rng.standard_normal((4, 4))
    bm = rng.standard_normal((4, 3))
    ab, bb = ssm_discretize(a, bm, 0.3)
    e = expm(0.3 * a)
    np.testing.assert_allclose(ab, e, rtol=1e-10, atol=1e-12 * np.abs(e).max())
    want = np.linalg.solve(0.3 * a, (e - np.eye(4)) @ (0.3 * bm))
    np.testing.assert_allclose(bb, want, rtol=1e-8, atol=1e-10 * np.abs(want).max())


def test_singular_a_handled():
    a = np.array([[0.0, 1.0], [0.0, 0.0]])  # nilpotent
    ab, bb = ssm_discretize(a, np.eye(2), 0.5)
    np.testing.assert_allclose(ab, [[1, 0.5], [0, 1]], atol=1e-15)
    np.testing.assert_allclose(bb, [[0.5, 0.125], [0, 0.5]], atol=1e-15)


def test_small_step_second_order(rng):
    a = rng.standard_normal((3, 3))
    errs = [np.linalg.norm(ssm_discretize(a, np.eye(3), d)[0] - np.eye(3) - d * a) for d in (1e-2, 5e-3)]
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.05)


def test_semigroup(rng):
    a = rng.standard_normal((4, 4))
    b = np.eye(4)
    a1, _ = ssm_discretize(a, b, 0.13)
    a2, _ = ssm_discretize(a, b, 0.29)
    a12, _ = ssm_discretize(a, b, 0.42)
    np.testing.assert_allclose(a1 @ a2, a12, atol=1e-9)


@pytest.mark.parametrize("args", [([[np.nan]], [[1.0]], 0.1), ([[1.0]], [[1.0]], np.inf), ([[1.0]], [[1.0]], 0.0)])
def test_discretize_errors(args):
    with pytest.raises(ValueError):
        ssm_discretize(*args)


# ---- recurrence -----------------------------------------------------------------

def sequential_ssm(g, params, gated=False):
    """Per-step numpy reference of h_t = Abar h_{t-1} + Bbar g_t with expm."""
    n, t, _ = g.shape
    s = params.state_size
    out = np.zeros((n, t))
    for i in range(n):
        h = np.zeros(s)
        for k in range(t):
            d = (math.log1p(math.exp(g[i, k] @ params.gate_w + params.gate_b)) if gated else params.delta)
            ab = expm(d * params.ssm_a)
            bb = np.linalg.solve(d * params.ssm_a, (ab - np.eye(s)) @ (d * params.ssm_b))
            h = ab @ h + bb @ g[i, k]
            out[i, k] = (params.ssm_c @ h)[0]
    return out


@pytest.mark.parametrize("t", [1, 2, 7, 33])
def test_scan_matches_sequential(rng, t):
    p = random_params(4)
    g = rng.standard_normal((3, t, 4))
    o, pooled = ssm_forward(g, p, 4000)
    np.testing.assert_allclose(o, sequential_ssm(g, p), atol=1e-10)
    np.testing.assert_allclose(pooled.samples, o.mean(axis=0))
    assert pooled.sample_rate == 4000


def test_gated_scan_matches_sequential(rng):
    p = random_params(5, use_gate=True)
    g = rng.standard_normal((2, 19, 4))
    o, _ = ssm_forward(g, p)
    np.testing.assert_allclose(o, sequential_ssm(g, p, gated=True), atol=1e-10)


def test_zero_input_matrix_gives_zero_output(rng):
    p = random_params().with_tensors({"ssm_b": np.zeros((4, 4))})
    o, _ = ssm_forward(rng.standard_normal((2, 9, 4)), p)
    assert not o.any()


def test_hand_unrolled_integrator():
    p = init_params(1, 1, 1, delta=1.0, seed=0).with_tensors(
        {"ssm_a": [[0.0]], "ssm_b": [[1.0]], "ssm_c": [[1.0]], "log_delta": np.array(0.0)})
    o, _ = ssm_forward(np.ones((1, 3, 1)), p)
    np.testing.assert_allclose(o[0], [1, 2, 3], atol=1e-15)


def test_rate_adaptability(rng):
    p = random_params(6)
    g = rng.standard_normal((2, 25, 4))
    coarse = ssm_states(g, p)
    fine = ssm_states(np.repeat(g, 2, axis=1), p.with_tensors({"log_delta": p.log_delta - math.log(2)}))
    np.testing.assert_allclose(fine[:, 1::2], coarse, atol=1e-6)


def test_ssm_shape_errors(rng):
    with pytest.raises(ValueError):
        ssm_forward(rng.standard_normal((2, 5, 3)), random_params())


# ---- full model -------------------------------------------------------------------

def test_empty_patches_zero_audio():
    p = random_params()
    out = model_forward(patchset([np.zeros((16, 2, 4, 4))] * 2, (0, 4000)), p)
    assert len(out) == 16 and not out.samples.any()
    assert out.sample_rate == 4000


def test_sab_off_equals_identity_attention(rng):
    patches = random_patches(rng)
    p = random_params(use_sab=False)
    f = extract_patch_features(patches, p.feat_w).values
    _, want = ssm_forward(f, p)
    np.testing.assert_allclose(model_forward(patches, p).samples, want.samples, atol=1e-12)


def test_sab_on_uses_attention(rng):
    patches = random_patches(rng)
    p = random_params(use_sab=True)
    f = extract_patch_features(patches, p.feat_w).values
    _, want = ssm_forward(spatial_aggregate(f, p), p)
    np.testing.assert_allclose(model_forward(patches, p).samples, want.samples, atol=1e-12)


def test_stat_scale_divides_statistics(rng):
    patches = random_patches(rng)
    scale = np.array([2.0, 3.0, 1.0, 1.0, 0.5, 4.0])
    p = replace(random_params(use_sab=False), stat_scale=scale)
    f = extract_patch_features(patches, p.feat_w, scale).values
    np.testing.assert_allclose(f, (patch_statistics(patches) / scale) @ p.feat_w.T)
    np.testing.assert_allclose(model_forward(patches, p).samples, ssm_forward(f, p)[1].samples, atol=1e-12)


def test_initialisation_is_stable():
    p = init_params(seed=3)
    assert np.all(np.linalg.eigvals(p.ssm_a).real <= 0)
    assert p.delta == pytest.approx(0.05)
    for name, fan_in in (("feat_w", 6), ("attn_q", 8)):
        assert np.abs(getattr(p, name)).max() <= 1 / math.sqrt(fan_in)


def test_inconsistent_shapes_rejected():
    p = init_params(4, 4, 2)
    with pytest.raises(ValueError):
        p.with_tensors({"ssm_b": np.zeros((4, 5))})
    with pytest.raises(ValueError):
        init_params(6, 4, 4)


# ---- losses -----------------------------------------------------------------------

def test_sisnr_hand_example():
    assert loss_sisnr(np.array([1.0, 0.1]), np.array([1.0, 0.0]), zero_mean=False) == pytest.approx(-20.0, abs=1e-9)


@pytest.mark.parametrize("k", [0.1, 1.0, 10.0])
def test_sisnr_scale_invariance(rng, k):
    ref = rng.standard_normal(300)
    est = ref + 0.3 * rng.standard_normal(300)
    assert abs(loss_sisnr(k * est, ref) - loss_sisnr(est, ref)) <= 1e-9


def test_sisnr_offset_invariance(rng):
    ref = rng.standard_normal(300)
    est = ref + 0.3 * rng.standard_normal(300)
    assert loss_sisnr(est + 5.0, ref) == pytest.approx(loss_sisnr(est, ref), abs=1e-9)


def test_sisnr_orthogonal_is_large_and_finite():
    t = np.arange(400)
    ref = np.sin(2 * np.pi * t / 40)
    est = np.cos(2 * np.pi * t / 40)
    val = loss_sisnr(est, ref)
    assert np.isfinite(val) and val > 100


def test_sisnr_errors():
    with pytest.raises(ValueError):
        loss_sisnr(np.ones(4), np.zeros(4), zero_mean=False)
    with pytest.raises(ValueError):
        loss_sisnr(np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        loss_sisnr(np.ones(1), np.ones(1))


def test_sisnr_gradient_orthogonal_to_scaling(rng):
    ref = torch.tensor(rng.standard_normal(200))
    est = (0.7 * ref + 0.2 * torch.tensor(rng.standard_normal(200))).requires_grad_(True)
    sisnr_t(est, ref).backward()
    # d/dk loss(k est) at k = 1 is <grad, est>
    assert abs(float(est.grad @ est.detach())) <= 1e-9 * float(est.grad.norm() * est.detach().norm())


def test_spec_loss_properties(rng):
    x = rng.standard_normal(1024)
    y = x + 0.1 * rng.standard_normal(1024)
    assert loss_spec(x, x, 4000) == 0.0
    assert loss_spec(y, x, 4000) > 0
    assert MEL_SCALES == (64, 128, 256, 512)
    assert spectral_weight(64) == pytest.approx(math.sqrt(32))


def test_spec_loss_needs_largest_window():
    with pytest.raises(ValueError):
        loss_spec(np.ones(511), np.ones(511), 4000)


def test_spec_loss_sample_rate_checks():
    with pytest.raises(ValueError):
        loss_spec(AudioSignal(4000, np.ones(600)), AudioSignal(8000, np.ones(600)))


def test_total_with_zero_beta_is_sisnr_exactly(rng):
    ref = rng.standard_normal(600)
    est = ref + rng.standard_normal(600)
    assert loss_total(est, ref, beta=0.0, sample_rate=4000) == loss_sisnr(est, ref)


def test_total_is_weighted_sum(rng):
    ref = rng.standard_normal(600)
    est = ref + rng.standard_normal(600)
    want = loss_sisnr(est, ref) + 1e-4 * loss_spec(est, ref, 4000)
    assert loss_total(est, ref, 1e-4, 4000) == pytest.approx(want, rel=1e-12)


def test_total_near_match_dominated_by_sisnr(rng):
    ref = rng.standard_normal(1024)
    est = ref + 1e-6 * rng.standard_normal(1024)
    tot, si = loss_total(est, ref, 1e-4, 4000), loss_sisnr(est, ref)
    assert abs(tot - si) < 1e-2 * abs(si)


# ---- gradients --------------------------------------------------------------------

@pytest.mark.parametrize("use_sab,use_gate", [(True, False), (False, True)])
def test_gradient_matches_finite_differences_tiny(rng, use_sab, use_gate):
    stats = patch_statistics(random_patches(rng, n=2, t=32))
    ref = np.sin(np.arange(32) / 3.0) + 0.1 * rng.standard_normal(32)
    p = random_params(7, use_sab=use_sab, use_gate=use_gate)
    assert fd_check(p, stats, ref, beta=0.0) <= 1e-4


def test_gradient_with_spectral_term(rng):
    stats = patch_statistics(random_patches(rng, n=2, t=512, ph=3, pw=3))
    ref = np.sin(np.arange(512) / 3.0) + 0.1 * rng.standard_normal(512)
    p = random_params(8)
    assert fd_check(p, stats, ref, beta=1e-2) <= 1e-4


def test_disabled_paths_have_zero_gradient(rng):
    stats = patch_statistics(random_patches(rng))
    ref = rng.standard_normal(32)
    _, g = loss_and_grad(random_params(use_sab=False), stats, ref, 4000.0, 0.0)
    for name in ("attn_q", "attn_k", "attn_v", "attn_o", "gate_w", "gate_b"):
        assert not g.tensors()[name].any()
    assert g.log_delta != 0


def test_grad_wrapper(rng):
    patches = random_patches(rng)
    ref = AudioSignal(4000, rng.standard_normal(32))
    p = random_params()
    g = grad(p, (patches, ref), beta=0.0)
    _, want = loss_and_grad(p, patch_statistics(patches), ref.samples, 4000.0, 0.0)
    for k in p.TENSORS:
        np.testing.assert_array_equal(g.tensors()[k], want.tensors()[k])


def test_non_finite_loss_raises(rng):
    stats = patch_statistics(random_patches(rng))
    p = random_params().with_tensors({"feat_w": np.full((4, 6), np.inf)})
    with pytest.raises(FloatingPointError):
        loss_and_grad(p, stats, rng.standard_normal(32), 4000.0, 0.0)


# ---- serialization ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_model_roundtrip(tmp_path, seed):
    rng = np.random.default_rng(seed)
    c, s = int(rng.choice([2, 4, 6])), int(rng.integers(1, 6))
    p = init_params(c, s, 2, seed=seed, use_sab=bool(seed % 2), use_gate=bool(seed % 3 == 0),
                    stat_scale=rng.uniform(0.1, 100, 6))
    p = p.with_tensors({k: rng.standard_normal(v.shape) for k, v in p.tensors().items()})
    save_params(p, tmp_path / "m")
    q = load_params(tmp_path / "m")
    assert (q.heads, q.use_sab, q.use_gate) == (p.heads, p.use_sab, p.use_gate)
    for k in p.TENSORS + ("stat_scale",):
        np.testing.assert_array_equal(getattr(q, k), getattr(p, k))


def test_model_file_header(tmp_path):
    save_params(init_params(4, 3, 2), tmp_path / "m")
    raw = (tmp_path / "m").read_bytes()
    assert raw[:4] == b"EVM1"
    n_floats = 4 * 6 + 4 * 16 + 9 + 12 + 3 + 1 + 4 + 1 + 6
    assert len(raw) == 4 + 2 + 16 + 8 * n_floats


@pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-5], lambda b: b + b"\0"])
def test_corrupt_model_rejected(tmp_path, mangle):
    save_params(init_params(4, 3, 2), tmp_path / "m")
    (tmp_path / "m").write_bytes(mangle((tmp_path / "m").read_bytes()))
    with pytest.raises(ValueError):
        load_params(tmp_path / "m")
