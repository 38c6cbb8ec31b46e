import numpy as np
import pytest

from lymphnode import credential as credmod
from lymphnode import gsuap, nn, plugin
from lymphnode import tensor as T
from lymphnode.errors import FormatError, UsageError

F32 = np.float32


@pytest.fixture(scope="module")
def auth_images(bundle, test_ds):
    return np.stack(
        [
            credmod.synthesize_watermark(
                test_ds.images[i], bundle.spec, bundle.backbone, rng=7000 + i
            ).apply(test_ds.images[i])
            for i in range(64)
        ]
    ).reshape(-1, 1, 28, 28)


def test_protect_leaves_original_untouched(backbone, spec, mask06, gsuap_noise):
    before = {k: v.copy() for k, v in backbone.state_tensors().items()}
    plugin.protect(backbone, spec, mask06, gsuap_noise, lam=1.0)
    after = backbone.state_tensors()
    for k in before:
        assert np.array_equal(before[k], after[k])


def test_authorized_path_bitwise_exact(bundle, auth_images):
    out = plugin.protected_forward(bundle, auth_images)
    assert out.authorized.all()
    clean = bundle.backbone.forward(T.tensor(auth_images)).data
    assert np.array_equal(out.logits, clean)


def test_default_deny_injects_exact_offset(bundle, test_ds):
    # protected logits of unauthorized samples must equal a manual forward
    # with exactly lam * (mask ⊙ noise) added at the injection tap
    images = test_ds.images[:16]
    out = plugin.protected_forward(bundle, images)
    assert not out.authorized.any()
    addend = F32(bundle.lam) * bundle.masked_noise()

    def manual(tap):
        return T.Tensor(tap.data + addend[None])

    manual_logits, _ = bundle.backbone._run(
        T.tensor(images), "infer", transforms={nn.INJECT_TAP: manual}
    )
    assert np.array_equal(out.logits, manual_logits.data)


def test_unauthorized_fools_most_correct_samples(backbone, bundle, test_ds):
    images = test_ds.images[:1000]
    clean_preds = backbone.predict(images)
    prot_preds, _ = plugin.protected_predict(bundle, images)
    correct = clean_preds == test_ds.labels[:1000]
    flipped = correct & (prot_preds != clean_preds)
    assert flipped.sum() / correct.sum() >= 0.8


def test_mixed_batch_per_sample_independence(bundle, test_ds, auth_images):
    plain = test_ds.images[:1]
    mixed = np.concatenate([auth_images[:1], plain])
    out_mixed = plugin.protected_forward(bundle, mixed)
    assert out_mixed.authorized.tolist() == [True, False]
    out_auth = plugin.protected_forward(bundle, auth_images[:1])
    out_plain = plugin.protected_forward(bundle, plain)
    assert np.array_equal(out_mixed.logits[0], out_auth.logits[0])
    assert np.array_equal(out_mixed.logits[1], out_plain.logits[0])


def test_statelessness(bundle, test_ds):
    batch = test_ds.images[:8]
    a = plugin.protected_forward(bundle, batch)
    b = plugin.protected_forward(bundle, batch)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(a.authorized, b.authorized)


def test_constant_ops_per_query(bundle):
    rng = np.random.default_rng(1)
    ops = {
        plugin.protected_forward(bundle, rng.random((1, 1, 28, 28), dtype=F32)).ops_added
        for _ in range(100)
    }
    assert len(ops) == 1


def test_lambda_zero_equals_clean_model(bundle, backbone, test_ds):
    silent = plugin.set_lambda(bundle, 0.0)
    images = test_ds.images[:256]
    out = plugin.protected_forward(silent, images)
    clean = backbone.forward(T.tensor(images)).data
    assert np.array_equal(out.logits, clean)


def test_lambda_validation(bundle):
    with pytest.raises(UsageError):
        plugin.set_lambda(bundle, -0.5)


def test_authorized_accuracy_constant_across_lambda(bundle, auth_images):
    reference = None
    for lam in (0.0, 0.5, 1.0, 2.0):
        out = plugin.protected_forward(plugin.set_lambda(bundle, lam), auth_images)
        if reference is None:
            reference = out.logits
        assert np.array_equal(out.logits, reference)


def test_lambda_monotone_damage(bundle, test_ds):
    images = test_ds.images[:500]
    labels = test_ds.labels[:500]
    acc = {}
    for lam in (0.5, 2.0):
        preds, _ = plugin.protected_predict(plugin.set_lambda(bundle, lam), images)
        acc[lam] = float((preds == labels).mean())
    assert acc[2.0] <= acc[0.5] + 0.02


def test_protect_validates_budget(backbone, spec, mask06, gsuap_noise):
    bad = gsuap.GsuapNoise(
        gsuap_noise.values * 10, gsuap_noise.epsilon, mask06, "gsuap"
    )
    with pytest.raises(UsageError, match="budget"):
        plugin.protect(backbone, spec, mask06, bad, lam=1.0)


def test_protect_rejects_channel_mismatch(backbone, spec, gsuap_noise):
    short_mask = gsuap.ChannelMask(np.ones(8, dtype=F32), 0.5)
    with pytest.raises(UsageError, match="channels"):
        plugin.PluginBundle(
            backbone=backbone, spec=spec, mask=short_mask, noise=gsuap_noise
        )


# ---------------------------------------------------------------------------
# bundle serialization


def test_bundle_roundtrip_identical_outcomes(bundle, tmp_path, test_ds):
    path = str(tmp_path / "bundle.lymf")
    plugin.export_bundle(bundle, path)
    loaded = plugin.import_bundle(path)
    rng = np.random.default_rng(2)
    images = rng.random((100, 1, 28, 28), dtype=F32)
    a = plugin.protected_forward(bundle, images)
    b = plugin.protected_forward(loaded, images)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(a.authorized, b.authorized)
    natural = test_ds.images[:64]
    na = plugin.protected_forward(bundle, natural)
    nb = plugin.protected_forward(loaded, natural)
    assert np.array_equal(na.logits, nb.logits)


def test_bundle_size_accounting(bundle, tiny_backbone, tmp_path):
    bpath = str(tmp_path / "bundle.lymf")
    mpath = str(tmp_path / "model.lymf")
    plugin.export_bundle(bundle, bpath)
    nn.save_model(bundle.backbone, mpath)
    import os

    bundle_bytes = os.path.getsize(bpath)
    model_bytes = os.path.getsize(mpath)
    noise_bytes = bundle.noise.values.size * 4
    spec_bytes = len(bundle.spec.to_json())
    overhead = bundle_bytes - model_bytes
    # noise + mask + spec + bookkeeping, with modest header slack
    assert noise_bytes <= overhead <= noise_bytes + spec_bytes + 2048


def test_bundle_missing_spec_section(bundle, tmp_path):
    from lymphnode import serialize

    path = str(tmp_path / "bundle.lymf")
    plugin.export_bundle(bundle, path)
    meta, tensors, sections = serialize.read_container(path)
    del sections["SPEC"]
    serialize.write_container(
        path, meta, tensors, {k: (v, k == "SPEC") for k, v in sections.items()}
    )
    with pytest.raises(FormatError, match="lacks credential spec"):
        plugin.import_bundle(path)


def test_bundle_truncated_noise_section(bundle, tmp_path):
    path = str(tmp_path / "bundle.lymf")
    plugin.export_bundle(bundle, path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-64])
    with pytest.raises(FormatError, match="truncated"):
        plugin.import_bundle(path)


def test_bundle_version_mismatch(bundle, tmp_path):
    from lymphnode import serialize

    path = str(tmp_path / "bundle.lymf")
    plugin.export_bundle(bundle, path)
    meta, tensors, sections = serialize.read_container(path)
    meta["bundle_version"] = 99
    serialize.write_container(
        path, meta, tensors, {k: (v, False) for k, v in sections.items()}
    )
    with pytest.raises(FormatError, match="version"):
        plugin.import_bundle(path)
