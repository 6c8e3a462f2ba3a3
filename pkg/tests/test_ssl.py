import numpy as np
import pytest

from fsml import nn, ssl
from fsml.data import (
    GroupSpec,
    Observation,
    ParcelSample,
    SynthConfig,
    generate_synthetic,
)
from fsml.errors import ContractError, DegenerateInputError
from fsml.seeding import rng_from
from fsml.ssl import (
    MaskPlan,
    MaskedAutoencoder,
    SSLConfig,
    TokenClassifier,
    base_plan,
    build_mask,
    encode_token_batch,
    encoder_backbone,
    mae_step,
    normalization_stats,
    pretrain_ssl,
    reconstruction_loss,
    xts_plan,
)
from fsml.tensor import Tensor
from fsml.tokens import group_spec, xts_regime


SPEC1 = group_spec(("s2", 3, "dynamic"))
SPEC2 = group_spec(("s1", 2, "dynamic"), ("s2", 3, "dynamic"))


def test_mask_plan_validation():
    with pytest.raises(ContractError):
        MaskPlan("diagonal", 0.5, False)
    with pytest.raises(ContractError):
        MaskPlan("random", 1.0, False)
    assert base_plan().target_ratio == 0.75 and not base_plan().strict
    assert xts_plan().target_ratio == 0.70 and xts_plan().strict


def test_base_mixed_masks_exact_fraction_for_all_sizes():
    spec = group_spec(("only", 1, "dynamic"))
    plan = base_plan("mixed")
    for n in range(8, 513):
        rng = rng_from(0, n)
        mask = build_mask(plan, spec, n, rng)
        assert mask.sum() == int(np.floor(0.75 * n)), f"N={n}"


def test_base_mixed_masks_exact_fraction_multi_group():
    spec = group_spec(("location", 3, "static"), ("s1", 2, "dynamic"), ("s2", 4, "dynamic"))
    plan = base_plan("mixed")
    for t in range(4, 40):
        n = spec.token_count(t)
        mask = build_mask(plan, spec, t, rng_from(1, t))
        assert mask.sum() == int(np.floor(0.75 * n))


def test_xts_strict_never_tops_up():
    plan = xts_plan("channel_groups")
    # four equal dynamic groups: structured mask covers exactly two of them
    spec = group_spec(*[(f"g{i}", 2, "dynamic") for i in range(4)])
    for trial in range(30):
        mask = build_mask(plan, spec, 10, rng_from(2, trial))
        assert mask.sum() == 20  # 50% of 40 tokens, untouched by top-up
    for strategy in ("random", "contiguous_timesteps", "random_timesteps", "channel_groups"):
        for trial in range(20):
            mask = build_mask(xts_plan(strategy), SPEC2, 12, rng_from(3, trial))
            assert mask.sum() <= int(np.ceil(0.70 * SPEC2.token_count(12)))


def test_channel_groups_strategy_masks_whole_groups():
    plan = MaskPlan("channel_groups", 0.5, strict=True)
    spec = SPEC2
    t = 8
    mask = build_mask(plan, spec, t, rng_from(4, 0))
    group_index, _ = ssl._token_layout(spec, t)
    for gi in np.unique(group_index):
        cells = mask[group_index == gi]
        assert cells.all() or not cells.any()


def test_contiguous_strategy_masks_one_window():
    plan = MaskPlan("contiguous_timesteps", 0.5, strict=True)
    t = 12
    mask = build_mask(plan, SPEC2, t, rng_from(5, 1))
    _, time_index = ssl._token_layout(SPEC2, t)
    masked_steps = sorted({int(ti) for ti, m in zip(time_index, mask) if m})
    assert masked_steps == list(range(masked_steps[0], masked_steps[-1] + 1))
    for step in masked_steps:  # all dynamic groups masked at each chosen step
        assert mask[time_index == step].all()


def test_padding_tokens_never_masked():
    plan = base_plan("random")
    pad = np.zeros(SPEC1.token_count(10), dtype=bool)
    pad[7:] = True
    mask = build_mask(plan, SPEC1, 10, rng_from(6, 0), padding=pad)
    assert not mask[pad].any()
    assert mask.sum() == int(np.floor(0.75 * 7))


def _tiny_model(variant="self_attention", spec=SPEC1, regime=None):
    config = nn.TransformerConfig(16, 2, 32, 1, 1, 64)
    regime = regime or xts_regime(16, max_timesteps=64)
    return MaskedAutoencoder(config, spec, regime, variant)


def _samples(n, rng, spec=SPEC1, t=(5, 9)):
    out = []
    for i in range(n):
        count = int(rng.integers(t[0], t[1] + 1))
        days = np.sort(rng.choice(np.arange(1, 60), size=count, replace=False))
        obs = [
            Observation(int(d), {g.name: rng.random(g.channels) for g in spec.dynamic_groups})
            for d in days
        ]
        out.append(ParcelSample(f"s{i}", obs, 0.1, 0.2, "R1", "101010", "train"))
    return out


@pytest.mark.parametrize("variant", ["self_attention", "cross_attention"])
def test_loss_ignores_unmasked_reconstruction_cells(variant):
    model = _tiny_model(variant)
    rng = np.random.default_rng(0)
    samples = _samples(3, rng)
    params = model.init_params(rng_from(0, 1))
    batch = encode_token_batch(samples, model.spec, model.regime, params)
    t_max = max(len(s.observations) for s in samples)
    masks = np.stack([
        build_mask(base_plan("random"), model.spec, t_max, rng_from(1, i), padding=batch.pad[i])
        for i in range(3)
    ])
    recon = model.reconstruct(params, batch, masks)
    base = reconstruction_loss(recon, batch, masks).item()
    perturbed = Tensor(recon.values.copy())
    unmasked = ~masks & ~batch.pad
    perturbed.values[unmasked] += 123.0
    shifted = reconstruction_loss(perturbed, batch, masks).item()
    assert shifted == pytest.approx(base, abs=1e-12)


def test_loss_invariant_to_masked_input_values():
    model = _tiny_model("cross_attention")
    rng = np.random.default_rng(1)
    samples = _samples(2, rng, t=(6, 6))
    params = model.init_params(rng_from(2, 1))
    batch = encode_token_batch(samples, model.spec, model.regime, params)
    masks = np.stack([
        build_mask(base_plan("random"), model.spec, 6, rng_from(3, i), padding=batch.pad[i])
        for i in range(2)
    ])
    recon_a = model.reconstruct(params, batch, masks).values
    # poison the network inputs at masked cells, keep targets fixed
    poisoned = Tensor(batch.tokens.values.copy())
    poisoned.values[masks] = 1e6
    batch_poisoned = ssl.TokenBatch(
        tokens=poisoned, context=batch.context, group_index=batch.group_index,
        time_index=batch.time_index, pad=batch.pad, targets=batch.targets,
        target_width=batch.target_width,
    )
    recon_b = model.reconstruct(params, batch_poisoned, masks).values
    np.testing.assert_allclose(recon_b, recon_a, atol=1e-12)
    loss_a = reconstruction_loss(model.reconstruct(params, batch, masks), batch, masks).item()
    loss_b = reconstruction_loss(
        model.reconstruct(params, batch_poisoned, masks), batch_poisoned, masks
    ).item()
    assert loss_a == pytest.approx(loss_b, abs=1e-12)


def test_single_masked_scalar_cell_loss():
    spec = group_spec(("v", 1, "dynamic"))
    model = _tiny_model("self_attention", spec=spec)
    rng = np.random.default_rng(2)
    samples = _samples(1, rng, spec=spec, t=(4, 4))
    params = model.init_params(rng_from(4, 1))
    batch = encode_token_batch(samples, spec, model.regime, params)
    masks = np.zeros((1, 4), dtype=bool)
    masks[0, 2] = True
    recon = model.reconstruct(params, batch, masks)
    r = recon.values[0, 2, 0]
    t = batch.targets[0, 2, 0]
    assert reconstruction_loss(recon, batch, masks).item() == pytest.approx((r - t) ** 2)


def test_zero_masked_cells_warns_and_returns_zero():
    model = _tiny_model()
    rng = np.random.default_rng(3)
    samples = _samples(2, rng)
    params = model.init_params(rng_from(5, 1))
    batch = encode_token_batch(samples, model.spec, model.regime, params)
    masks = np.zeros_like(batch.pad)
    recon = model.reconstruct(params, batch, masks)
    with pytest.warns(UserWarning, match="degenerate"):
        loss = reconstruction_loss(recon, batch, masks)
    assert loss.item() == 0.0


def test_all_tokens_masked_raises():
    model = _tiny_model()
    rng = np.random.default_rng(4)
    samples = _samples(1, rng, t=(5, 5))
    params = model.init_params(rng_from(6, 1))
    batch = encode_token_batch(samples, model.spec, model.regime, params)
    masks = np.ones_like(batch.pad)
    with pytest.raises(DegenerateInputError):
        model.reconstruct(params, batch, masks)


def test_cross_attention_masked_queries_independent():
    model = _tiny_model("cross_attention")
    rng = np.random.default_rng(5)
    samples = _samples(1, rng, t=(8, 8))
    params = model.init_params(rng_from(7, 1))
    batch = encode_token_batch(samples, model.spec, model.regime, params)
    masks = np.zeros((1, 8), dtype=bool)
    masks[0, [1, 4, 6]] = True
    recon = model.reconstruct(params, batch, masks).values
    # zero one masked token's query input (its contextual encoding)
    ctx = Tensor(batch.context.values.copy())
    ctx.values[0, 4, :] = -params["dec/mask_token"].values  # cancels the query
    batch_zeroed = ssl.TokenBatch(
        tokens=batch.tokens, context=ctx, group_index=batch.group_index,
        time_index=batch.time_index, pad=batch.pad, targets=batch.targets,
        target_width=batch.target_width,
    )
    recon_zeroed = model.reconstruct(params, batch_zeroed, masks).values
    np.testing.assert_allclose(recon_zeroed[0, 1], recon[0, 1], atol=1e-12)
    np.testing.assert_allclose(recon_zeroed[0, 6], recon[0, 6], atol=1e-12)
    assert not np.allclose(recon_zeroed[0, 4], recon[0, 4])


def test_encoder_output_shape_is_visible_tokens():
    model = _tiny_model()
    rng = np.random.default_rng(6)
    sample = _samples(1, rng, t=(7, 7))[0]
    params = model.init_params(rng_from(8, 1))
    out = model.encode_visible(params, sample)
    assert out.shape == (SPEC1.token_count(7), 16)


def test_mae_step_produces_gradients_for_all_params():
    model = _tiny_model("cross_attention")
    rng = np.random.default_rng(7)
    samples = _samples(4, rng)
    params = model.init_params(rng_from(9, 1))
    loss, grads = mae_step(params, model, samples, base_plan("mixed"), rng_from(9, 2))
    assert np.isfinite(loss)
    assert set(grads) == set(params)
    assert any(np.abs(g).max() > 0 for g in grads.values())


def _ssl_corpus(seed=0):
    cfg = SynthConfig(
        regions=["R1", "R2"],
        finetune_region="T1",
        n_classes=4,
        n_level4=4,
        samples_per_class=30,
        finetune_samples_per_class=20,
        groups=[GroupSpec("s1", 2, "dynamic"), GroupSpec("s2", 3, "dynamic")],
        obs_count=(6, 10),
        noise_sigma=0.08,
        separability=1.0,
        k_max=5,
    )
    return generate_synthetic(cfg, seed=seed)


def test_pretrain_ssl_improves_and_is_deterministic():
    corpus = _ssl_corpus()
    model = MaskedAutoencoder(
        nn.TransformerConfig(16, 2, 32, 1, 1, 64),
        group_spec(("s1", 2, "dynamic"), ("s2", 3, "dynamic")),
        xts_regime(16, max_timesteps=16),
        "cross_attention",
    )
    config = SSLConfig(
        variant="cross_attention", plan=xts_plan("mixed"), learning_rate=3e-3,
        batch_size=16, validate_every=2, patience=15, max_batches=12,
    )
    params_a, stats_a, info_a = pretrain_ssl(corpus, model, config, seed=1)
    params_b, stats_b, info_b = pretrain_ssl(corpus, model, config, seed=1)
    assert info_a["trace"] == info_b["trace"]
    assert len(info_a["trace"]) >= 5
    losses = [row["val_loss"] for row in info_a["trace"]]
    assert min(losses) <= losses[0]
    assert all(np.isfinite(row["train_loss"]) for row in info_a["trace"])
    for k in params_a:
        np.testing.assert_array_equal(params_a[k].values, params_b[k].values)


def test_encoder_backbone_drops_decoder():
    model = _tiny_model()
    params = model.init_params(rng_from(10, 1))
    backbone = encoder_backbone(params)
    assert not any(k.startswith("dec") or k.startswith("recon/") for k in backbone)
    assert any(k.startswith("enc0/") for k in backbone)
    assert any(k.startswith("proj/") for k in backbone)


def test_token_classifier_forward_shapes():
    corpus = _ssl_corpus()
    spec = group_spec(("s1", 2, "dynamic"), ("s2", 3, "dynamic"))
    clf = TokenClassifier(
        nn.TransformerConfig(16, 2, 32, 1, 0, 64), spec, xts_regime(16, max_timesteps=16),
        stats=normalization_stats(corpus.pretrain_pool(), spec),
    )
    params = clf.init_params(rng_from(11, 1), n_classes=4)
    chunk = corpus.finetune_pool()[:5]
    logits = clf.logits(params.backbone, params.head, chunk)
    assert logits.shape == (5, 4)
