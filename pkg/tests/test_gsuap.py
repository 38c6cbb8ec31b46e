import numpy as np
import pytest

from lymphnode import gsuap
from lymphnode import tensor as T
from lymphnode.errors import UsageError

F32 = np.float32


# ---------------------------------------------------------------------------
# channel scoring


def test_weight_norm_zero_slice_scores_zero(tiny_backbone):
    bb = tiny_backbone.clone()
    bb.conv2_k.data[3] = 0
    scores = gsuap.score_channels(bb, None, "weight-norm")
    assert scores.scores[3] == 0.0
    assert (scores.scores[np.arange(16) != 3] > 0).all()


def test_random_scores_reproducible(tiny_backbone):
    a = gsuap.score_channels(tiny_backbone, None, "random", seed=9)
    b = gsuap.score_channels(tiny_backbone, None, "random", seed=9)
    assert np.array_equal(a.scores, b.scores)


def test_unknown_criterion_rejected(tiny_backbone):
    with pytest.raises(UsageError, match="criterion"):
        gsuap.score_channels(tiny_backbone, None, "entropy")


def test_weight_grad_matches_finite_difference_ranking(tiny_backbone, calibration):
    """Kendall-tau agreement between analytic per-channel gradient norms and
    a perturb-reevaluate oracle on the conv2 kernel slices."""
    bb = tiny_backbone
    batch = calibration.take(64)
    scores = gsuap.score_channels(bb, batch, "weight-grad").scores

    def loss_at(kernel_data):
        saved = bb.conv2_k.data
        bb.conv2_k.data = kernel_data
        logits = bb.forward(T.tensor(batch.images))
        bb.conv2_k.data = saved
        return T.softmax_crossentropy(logits, batch.labels).item()

    # loss sensitivity to scaling each channel slice, a crude but
    # independent importance probe
    fd = np.zeros(16)
    step = 1e-2
    for j in range(16):
        up = bb.conv2_k.data.copy()
        up[j] *= 1 + step
        down = bb.conv2_k.data.copy()
        down[j] *= 1 - step
        fd[j] = abs(loss_at(up.astype(F32)) - loss_at(down.astype(F32)))

    def kendall_tau(a, b):
        n = len(a)
        concordant = discordant = 0
        for i in range(n):
            for j in range(i + 1, n):
                s = np.sign(a[i] - a[j]) * np.sign(b[i] - b[j])
                if s > 0:
                    concordant += 1
                elif s < 0:
                    discordant += 1
        return (concordant - discordant) / (n * (n - 1) / 2)

    # compare rankings on the top half where the signal is meaningful
    top = np.argsort(-scores)[:8]
    tau = kendall_tau(scores[top], fd[top])
    assert tau >= 0.5, f"tau {tau}"


def test_taylor_scores_finite(tiny_backbone, calibration):
    scores = gsuap.score_channels(tiny_backbone, calibration, "taylor")
    assert np.all(np.isfinite(scores.scores))
    assert scores.scores.shape == (16,)


# ---------------------------------------------------------------------------
# mask construction


def test_build_mask_example():
    scores = gsuap.ChannelScore(
        np.array([0.9, 0.1, 0.5, 0.3] + [0.0] * 12), "weight-grad", "x"
    )
    mask = gsuap.build_mask(scores, 2 / 16)
    assert mask.mask[:4].tolist() == [1, 0, 1, 0]


def test_build_mask_full_ratio():
    scores = gsuap.ChannelScore(np.arange(16.0), "weight-grad", "x")
    assert gsuap.build_mask(scores, 1.0).mask.tolist() == [1.0] * 16


def test_build_mask_tie_break_low_index():
    scores = gsuap.ChannelScore(np.ones(16), "weight-grad", "x")
    mask = gsuap.build_mask(scores, 0.25)
    assert mask.channels() == [0, 1, 2, 3]


def test_build_mask_rejects_zero_k():
    scores = gsuap.ChannelScore(np.ones(16), "weight-grad", "x")
    with pytest.raises(UsageError):
        gsuap.build_mask(scores, 0.01)
    with pytest.raises(UsageError):
        gsuap.build_mask(scores, 1.5)


def test_mask_determinism(wg_scores):
    a = gsuap.build_mask(wg_scores, 0.6)
    b = gsuap.build_mask(wg_scores, 0.6)
    assert np.array_equal(a.mask, b.mask)


# ---------------------------------------------------------------------------
# injection


def test_inject_lambda_zero_is_bitwise_identity():
    rng = np.random.default_rng(1)
    fmap = rng.standard_normal((4, 16, 14, 14)).astype(F32)
    noise = rng.standard_normal((16, 14, 14)).astype(F32)
    mask = gsuap.ChannelMask(np.ones(16, dtype=F32), 1.0)
    out = gsuap.inject(fmap, noise, mask, 0.0)
    assert np.array_equal(out, fmap)


def test_inject_single_channel_shift():
    fmap = np.zeros((1, 16, 14, 14), dtype=F32)
    noise = np.ones((16, 14, 14), dtype=F32)
    mask_arr = np.zeros(16, dtype=F32)
    mask_arr[0] = 1
    mask = gsuap.ChannelMask(mask_arr, 1 / 16)
    out = gsuap.inject(fmap, noise, mask, 2.0)
    assert np.all(out[0, 0] == 2.0)
    assert np.all(out[0, 1:] == 0.0)


def test_inject_linearity():
    rng = np.random.default_rng(2)
    fmap = rng.standard_normal((2, 16, 14, 14)).astype(F32)
    noise = rng.standard_normal((16, 14, 14)).astype(F32)
    mask_arr = (rng.random(16) > 0.5).astype(F32)
    mask = gsuap.ChannelMask(mask_arr, float(mask_arr.mean()))
    lam = 0.7
    diff = gsuap.inject(fmap, noise, mask, lam) - gsuap.inject(fmap, noise, mask, 0.0)
    expected = F32(lam) * (noise * mask_arr[:, None, None])
    assert np.abs(diff - expected[None]).max() < 1e-6


# ---------------------------------------------------------------------------
# noise optimization


def test_optimize_all_zero_mask_keeps_zero(tiny_backbone, calibration):
    mask = gsuap.ChannelMask(np.zeros(16, dtype=F32), 1.0)
    cfg = gsuap.PgaConfig(steps=10, seed=0)
    noise = gsuap.optimize_noise(tiny_backbone, mask, calibration, cfg)
    assert np.all(noise.values == 0)
    assert abs(noise.final_loss - noise.initial_loss) < 1e-3


def test_optimize_projection_and_support_invariants(gsuap_noise, mask06):
    assert np.abs(gsuap_noise.values).max() <= 2.0 + 1e-6
    off = gsuap_noise.values[mask06.mask == 0]
    assert np.all(off == 0)


def test_optimize_loss_ascends(gsuap_noise):
    assert gsuap_noise.final_loss >= gsuap_noise.initial_loss - 1e-4


def test_single_step_does_not_decrease_loss(tiny_backbone, calibration, mask06):
    cfg = gsuap.PgaConfig(steps=1, seed=7, batch_size=len(calibration))
    noise = gsuap.optimize_noise(tiny_backbone, mask06, calibration, cfg)
    assert noise.final_loss >= noise.initial_loss - 1e-4


def test_optimize_determinism(tiny_backbone, calibration, mask06):
    cfg = gsuap.PgaConfig(steps=20, seed=5)
    a = gsuap.optimize_noise(tiny_backbone, mask06, calibration, cfg)
    b = gsuap.optimize_noise(tiny_backbone, mask06, calibration, cfg)
    assert np.array_equal(a.values, b.values)


def test_optimize_nan_loss_reports_step(calibration, mask06):
    from lymphnode import nn
    from lymphnode.errors import NumericalError

    poisoned = nn.Backbone(seed=0)
    poisoned.fc_w.data[:] = np.nan
    cfg = gsuap.PgaConfig(steps=5, seed=0)
    with pytest.raises(NumericalError, match="step"):
        gsuap.optimize_noise(poisoned, mask06, calibration, cfg)


def test_clamp_idempotent():
    rng = np.random.default_rng(3)
    vals = rng.normal(0, 3, (16, 14, 14)).astype(F32)
    once = gsuap._clamp(vals, 2.0)
    assert np.array_equal(once, gsuap._clamp(once, 2.0))


def test_fooling_rate_after_optimization(backbone, bundle, test_ds):
    from lymphnode import plugin

    images = test_ds.images[:1000]
    labels = test_ds.labels[:1000]
    clean_preds = backbone.predict(images)
    preds, _ = plugin.protected_predict(bundle, images)
    clean_correct = clean_preds == labels
    fooled = clean_correct & (preds != clean_preds)
    rate = fooled.sum() / clean_correct.sum()
    assert rate >= 0.8


# ---------------------------------------------------------------------------
# baselines


def test_gaussian_baseline_reproducible_and_masked(mask06, pga_config):
    a = gsuap.make_baseline("gaussian", mask06, 2.0, config=pga_config)
    b = gsuap.make_baseline("gaussian", mask06, 2.0, config=pga_config)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.values[mask06.mask == 0] == 0)
    assert np.abs(a.values).max() <= 2.0


def test_suap_support_within_mask(tiny_backbone, calibration, mask06):
    cfg = gsuap.PgaConfig(steps=30, seed=2)
    noise = gsuap.make_baseline(
        "suap", mask06, 2.0, backbone=tiny_backbone, calibration=calibration, config=cfg
    )
    assert np.all(noise.values[mask06.mask == 0] == 0)
    assert noise.method == "suap"


def test_gsuap_beats_gaussian(backbone, bundle, mask06, pga_config, test_ds):
    from lymphnode import plugin

    gnoise = gsuap.make_baseline("gaussian", mask06, 2.0, config=pga_config)
    gbundle = plugin.protect(backbone, bundle.spec, mask06, gnoise, lam=1.0)
    images = test_ds.images[:1000]
    labels = test_ds.labels[:1000]
    acc_gsuap = float(
        (plugin.protected_predict(bundle, images)[0] == labels).mean()
    )
    acc_gauss = float(
        (plugin.protected_predict(gbundle, images)[0] == labels).mean()
    )
    assert acc_gsuap <= acc_gauss - 0.05


def test_baseline_requires_inputs(mask06):
    with pytest.raises(UsageError):
        gsuap.make_baseline("suap", mask06, 2.0)
    with pytest.raises(UsageError):
        gsuap.make_baseline("uniform", mask06, 2.0)


# ---------------------------------------------------------------------------
# gradient of the injected noise (finite differences through the tail)


def test_noise_gradient_matches_finite_differences(tiny_backbone, calibration):
    bb = tiny_backbone
    images = calibration.images[:8]
    labels = calibration.labels[:8]
    mask_arr = np.ones(16, dtype=F32)
    values = np.random.default_rng(11).normal(0, 0.3, gsuap.NOISE_SHAPE).astype(F32)

    delta = T.tensor(values, requires_grad=True)
    tape = T.GradTape()
    with tape:
        loss = gsuap._injection_loss(bb, images, labels, delta, mask_arr)
    tape.backward(loss)
    analytic = delta.grad

    def loss_at(vals):
        d = T.tensor(vals.astype(F32))
        return gsuap._injection_loss(bb, images, labels, d, mask_arr).item()

    rng = np.random.default_rng(12)
    flat = values.reshape(-1)
    picks = rng.choice(flat.size, size=48, replace=False)
    step = 1e-2
    for idx in picks:
        orig = flat[idx]
        flat[idx] = orig + step
        hi = loss_at(values)
        flat[idx] = orig - step
        lo = loss_at(values)
        flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        an = analytic.reshape(-1)[idx]
        denom = max(abs(fd), 0.1 * np.abs(analytic).mean() + 1e-6)
        assert abs(an - fd) / denom <= 2e-2, f"idx {idx}: {an} vs {fd}"
