import numpy as np
import pytest

from bargein import dsp, fixtures, mixer
from bargein.dsp import FeatureSequence, Spectrogram
from bargein.errors import DataError, NumericalError
from bargein.nnet import SpecAugmentPolicy, TcnClassifier, TcnConfig, receptive_field
from bargein.training import (Checkpoint, ClipExample, DataBundle, EvalExample,
                              OracleExample, TrainConfig, adam_step,
                              assemble_batch, binary_cross_entropy,
                              crop_or_pad_frames, cross_entropy,
                              evaluate_accuracy, features_from_frames, fit,
                              init_adam_state, load_data_bundle,
                              load_eval_examples, loss_and_grads, score_example,
                              softmax_cross_entropy)

# fit() always builds the 64-band filterbank, so in_features stays 64 and only
# the depth/width shrink. rf = 3 + 2 * 2*(1+2+4) = 31.
TINY_NET = dict(in_features=64, bottleneck_d=6, hidden_h=10, init_kernel=3,
                init_stride=2, blocks_per_repeat=3, repeats=1,
                dilations=(1, 2, 4), dw_kernel=3, n_classes=2)
SEG = 31

WINDOW, HOP = dsp.FEATURE_WINDOW, dsp.FEATURE_HOP
N_BINS = WINDOW // 2 + 1


def tiny_model(seed=0, **overrides):
    cfg = TcnConfig(**{**TINY_NET, **overrides})
    return TcnClassifier(cfg, np.random.default_rng(seed))


def band_spec(band, n_frames, rng, width=40):
    """Complex frames with energy pinned to one spectral band per class."""
    mag = np.full((n_frames, N_BINS), 1e-3)
    lo = 15 + band * 80
    mag[:, lo:lo + width] = 1.0 + rng.random((n_frames, width))
    phase = rng.uniform(-np.pi, np.pi, mag.shape)
    return Spectrogram(mag * np.exp(1j * phase), WINDOW, HOP, "hann")


def toy_bundle(n_per_class=4, n_frames=40, seed=0, oracle=False, dev=True,
               clip_label=None, oracle_label=None):
    """Two linearly separable classes; optional oracle pairs and dev mirror."""
    rng = np.random.default_rng(seed)
    fb = dsp.mel_filterbank(window_len=WINDOW)
    clips, oracles, devex = [], [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            spec = band_spec(label, n_frames, rng)
            clips.append(ClipExample(spec=spec, label=clip_label if clip_label is not None else label))
            if dev:
                feats = features_from_frames(spec.frames, spec, fb).T
                devex.append(EvalExample(feat_y=FeatureSequence(feats), feat_r=None,
                                         label=label, condition="non_playback"))
            if oracle:
                ref = band_spec(1 - label, n_frames, rng)
                mix = Spectrogram(spec.frames + 0.3 * ref.frames, WINDOW, HOP, "hann")
                oracles.append(OracleExample(
                    mix=mix, ref=ref,
                    label=oracle_label if oracle_label is not None else label))
    return DataBundle(train_clips=clips, train_oracle=oracles, dev=devex,
                      class_names=["down", "up"])


# --- losses ----------------------------------------------------------------


def test_softmax_ce_uniform_logits_gives_log_c():
    logits = np.zeros((3, 35))
    labels = np.array([0, 7, 34])
    loss, grad = softmax_cross_entropy(logits, labels)
    assert np.isclose(loss, np.log(35), rtol=1e-12)
    # each row: softmax - onehot, averaged over the batch
    assert np.isclose(grad[1, 7], (1 / 35 - 1) / 3, rtol=1e-12)
    assert np.isclose(grad[1, 6], (1 / 35) / 3, rtol=1e-12)
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_softmax_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(0.0, 2.0, (2, 5))
    labels = np.array([3, 1])
    _, grad = softmax_cross_entropy(logits, labels)
    eps = 1e-6
    for b in range(2):
        for c in range(5):
            up, down = logits.copy(), logits.copy()
            up[b, c] += eps
            down[b, c] -= eps
            num = (softmax_cross_entropy(up, labels)[0]
                   - softmax_cross_entropy(down, labels)[0]) / (2 * eps)
            assert np.isclose(grad[b, c], num, rtol=1e-5, atol=1e-9)


def test_binary_ce_zero_logit_gives_log_2():
    loss, grad = binary_cross_entropy(np.array([0.0]), np.array([1.0]))
    assert np.isclose(loss, np.log(2), rtol=1e-12)
    assert np.isclose(grad[0], -0.5, rtol=1e-12)
    loss0, grad0 = binary_cross_entropy(np.array([0.0]), np.array([0.0]))
    assert np.isclose(loss0, np.log(2), rtol=1e-12)
    assert np.isclose(grad0[0], 0.5, rtol=1e-12)


def test_binary_ce_is_stable_at_extreme_logits():
    z = np.array([1000.0, -1000.0])
    loss_match, _ = binary_cross_entropy(z, np.array([1.0, 0.0]))
    loss_miss, _ = binary_cross_entropy(z, np.array([0.0, 1.0]))
    assert np.isfinite(loss_match) and loss_match < 1e-12
    assert np.isclose(loss_miss, 1000.0, rtol=1e-12)


def test_cross_entropy_dispatches_on_head_width():
    assert np.isclose(cross_entropy(np.zeros(35), 4), np.log(35), rtol=1e-12)
    assert np.isclose(cross_entropy(np.zeros(1), 1), np.log(2), rtol=1e-12)
    with pytest.raises(NumericalError):
        cross_entropy(np.array([1.0, np.nan]), 0)
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), 0)


# --- optimizer ---------------------------------------------------------------


def test_adam_zero_gradient_is_a_noop():
    model = tiny_model(seed=1)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    model.zero_grads()
    state = init_adam_state(model)
    adam_step(model, state, lr=0.1, weight_decay=0.0)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k]), k


def test_adam_first_step_moves_lr_times_sign():
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    model = tiny_model(seed=2)
    rng = np.random.default_rng(3)
    before = {name: p.value.copy() for name, p in model.named_params()}
    grads = {}
    for name, p in model.named_params():
        g = rng.normal(0.0, 1.0, p.value.shape)
        g[np.abs(g) < 1e-3] = 1.0
        p.grad[...] = g
        grads[name] = g
    lr = 1e-3
    adam_step(model, init_adam_state(model), lr=lr, weight_decay=0.0)
    for name, p in model.named_params():
        delta = p.value - before[name]
        assert np.allclose(delta, -lr * np.sign(grads[name]), atol=lr * 1e-5), name


def test_adam_decays_only_flagged_weights():
    model = tiny_model(seed=4)
    before = {name: p.value.copy() for name, p in model.named_params()}
    model.zero_grads()
    lr, wd = 0.01, 0.1
    adam_step(model, init_adam_state(model), lr=lr, weight_decay=wd)
    n_decayed = 0
    for name, p in model.named_params():
        if p.decay:
            assert np.allclose(p.value, before[name] * (1 - lr * wd), rtol=1e-12), name
            n_decayed += 1
        else:
            assert np.array_equal(p.value, before[name]), name
    assert n_decayed > 0


def test_adam_shrinks_a_quadratic_objective():
    model = tiny_model(seed=5)
    rng = np.random.default_rng(6)
    targets = {name: rng.normal(0.0, 1.0, p.value.shape)
               for name, p in model.named_params()}

    def objective():
        return sum(np.sum((p.value - targets[name]) ** 2)
                   for name, p in model.named_params())

    state = init_adam_state(model)
    start = objective()
    for step in range(600):
        lr = 0.05 if step < 300 else 0.005
        for name, p in model.named_params():
            p.grad[...] = 2.0 * (p.value - targets[name])
        adam_step(model, state, lr=lr, weight_decay=0.0)
    assert objective() < 1e-3 * start


# --- batch assembly -----------------------------------------------------------


def test_crop_or_pad_identity_at_exact_length():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(31, 5))
    assert np.array_equal(crop_or_pad_frames(frames, 31, rng), frames)


def test_crop_is_a_contiguous_slice_covering_all_starts():
    rng = np.random.default_rng(1)
    frames = np.arange(50)[:, None] * np.ones((1, 3))
    starts = set()
    for _ in range(300):
        out = crop_or_pad_frames(frames, 31, rng)
        s = int(out[0, 0])
        assert np.array_equal(out, frames[s:s + 31])
        starts.add(s)
    assert starts == set(range(20))


def test_pad_appends_zero_frames():
    rng = np.random.default_rng(2)
    frames = (rng.normal(size=(10, 4)) + 1j * rng.normal(size=(10, 4)))
    out = crop_or_pad_frames(frames, 31, rng)
    assert out.shape == (31, 4) and out.dtype == frames.dtype
    assert np.array_equal(out[:10], frames)
    assert np.all(out[10:] == 0)


def test_features_hit_the_energy_floor_on_silence():
    fb = dsp.mel_filterbank(window_len=WINDOW)
    spec = Spectrogram(np.zeros((7, N_BINS), dtype=complex), WINDOW, HOP, "hann")
    feats = features_from_frames(spec.frames, spec, fb)
    assert feats.shape == (fb.shape[0], 7)
    assert np.all(feats == np.log(dsp.ENERGY_FLOOR))


def test_assemble_non_playback_batch():
    data = toy_bundle(n_per_class=3, dev=False)
    rng = np.random.default_rng(0)
    fb = dsp.mel_filterbank(window_len=WINDOW)
    cfg = TrainConfig(segment_frames=SEG, batch_size=6)
    x_y, x_r, labels = assemble_batch(data, cfg, rng, fb, playback=False,
                                      indices=np.arange(6))
    assert x_y.shape == (6, 64, SEG)
    assert x_r is None
    assert labels.tolist() == [c.label for c in data.train_clips]


def test_assemble_orcl_without_oracle_pool_raises():
    data = toy_bundle(oracle=False, dev=False)
    cfg = TrainConfig(segment_frames=SEG, augmentation="orcl")
    with pytest.raises(DataError):
        assemble_batch(data, cfg, np.random.default_rng(0),
                       dsp.mel_filterbank(window_len=WINDOW), playback=True,
                       indices=np.arange(4))


def test_assemble_orcl_cycles_through_the_pool():
    data = toy_bundle(n_per_class=2, oracle=True, dev=False, oracle_label=1)
    data.train_oracle = data.train_oracle[:3]
    for i, ex in enumerate(data.train_oracle):
        ex.label = 5 + i
    cfg = TrainConfig(segment_frames=SEG, augmentation="orcl")
    x_y, x_r, labels = assemble_batch(data, cfg, np.random.default_rng(1),
                                      dsp.mel_filterbank(window_len=WINDOW),
                                      playback=True, indices=np.arange(5))
    assert labels.tolist() == [5, 6, 7, 5, 6]
    assert x_y.shape == (5, 64, SEG) and x_r.shape == (5, 64, SEG)


def test_assemble_both_flips_a_fair_per_example_coin():
    # sentinel labels: oracle rows all 1, augmentation pool rows all 0
    data = toy_bundle(n_per_class=3, oracle=True, dev=False,
                      clip_label=0, oracle_label=1)
    cfg = TrainConfig(segment_frames=SEG, augmentation="both")
    _, _, labels = assemble_batch(data, cfg, np.random.default_rng(7),
                                  dsp.mel_filterbank(window_len=WINDOW),
                                  playback=True, indices=np.arange(400))
    n_orcl = int(labels.sum())
    assert 150 <= n_orcl <= 250  # 5 sigma around Binomial(400, 1/2)


# --- loss_and_grads -------------------------------------------------------------


def test_loss_and_grads_matches_manual_pooled_cross_entropy():
    model = tiny_model(seed=8)
    data = toy_bundle(n_per_class=2, dev=False)
    fb = dsp.mel_filterbank(window_len=WINDOW)
    cfg = TrainConfig(segment_frames=SEG)
    x_y, _, labels = assemble_batch(data, cfg, np.random.default_rng(0), fb,
                                    playback=False, indices=np.arange(4))

    model.zero_grads()
    loss = loss_and_grads(model, x_y, None, False, labels)
    got = {name: p.grad.copy() for name, p in model.named_params()}

    model.zero_grads()
    logits, cache = model.forward(x_y, None, playback=False, train=True)
    pooled = logits.max(axis=2)
    peak = logits.argmax(axis=2)
    want_loss, dpooled = softmax_cross_entropy(pooled, labels)
    dlogits = np.zeros_like(logits)
    for b in range(4):
        for c in range(2):
            dlogits[b, c, peak[b, c]] = dpooled[b, c]
    model.backward(cache, dlogits)

    assert loss == want_loss
    for name, p in model.named_params():
        assert np.array_equal(got[name], p.grad), name


def test_loss_and_grads_binary_head():
    model = tiny_model(seed=9, n_classes=1)
    data = toy_bundle(n_per_class=2, dev=False)
    fb = dsp.mel_filterbank(window_len=WINDOW)
    cfg = TrainConfig(segment_frames=SEG)
    x_y, _, labels = assemble_batch(data, cfg, np.random.default_rng(3), fb,
                                    playback=False, indices=np.arange(4))
    model.zero_grads()
    loss = loss_and_grads(model, x_y, None, False, labels)
    assert np.isfinite(loss) and loss > 0
    assert any(np.any(p.grad != 0) for _, p in model.named_params())


def test_loss_and_grads_rejects_non_finite_logits():
    model = tiny_model(seed=10)
    next(iter(dict(model.named_params()).values())).value[...] = np.nan
    x_y = np.zeros((2, 64, SEG))
    with pytest.raises(NumericalError):
        loss_and_grads(model, x_y, None, False, np.array([0, 1]))


# --- scoring ------------------------------------------------------------------


def test_score_example_pads_with_the_log_floor_and_pools():
    model = tiny_model(seed=11)
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(10, 64))
    ex = EvalExample(feat_y=FeatureSequence(feats), feat_r=None, label=0,
                     condition="non_playback")
    got = score_example(model, ex, SEG)

    padded = np.vstack([feats, np.full((SEG - 10, 64), np.log(dsp.ENERGY_FLOOR))])
    logits, _ = model.forward(padded.T[None], None, playback=False, train=False)
    assert np.array_equal(got, logits[0].max(axis=1))


def test_score_example_reference_handling_by_fusion():
    rng = np.random.default_rng(13)
    feats = FeatureSequence(rng.normal(size=(SEG, 64)))
    ref = FeatureSequence(rng.normal(size=(SEG, 64)))
    with_ref = EvalExample(feat_y=feats, feat_r=ref, label=0, condition="playback_tts")
    without = EvalExample(feat_y=feats, feat_r=None, label=0, condition="non_playback")

    baseline = tiny_model(seed=14)
    assert np.array_equal(score_example(baseline, with_ref, SEG),
                          score_example(baseline, without, SEG))

    masked = tiny_model(seed=14, fusion="mask_d2")
    assert not np.array_equal(score_example(masked, with_ref, SEG),
                              score_example(masked, without, SEG))


def test_evaluate_accuracy_counts_argmax_hits():
    model = tiny_model(seed=15)
    rng = np.random.default_rng(16)
    examples = []
    for i in range(4):
        feats = FeatureSequence(rng.normal(size=(SEG, 64)))
        ex = EvalExample(feat_y=feats, feat_r=None, label=0, condition="non_playback")
        pred = int(score_example(model, ex, SEG).argmax())
        ex.label = pred if i < 2 else 1 - pred
        examples.append(ex)
    assert evaluate_accuracy(model, examples, SEG) == 0.5


def test_evaluate_accuracy_binary_head_thresholds_at_zero():
    model = tiny_model(seed=17, n_classes=1)
    rng = np.random.default_rng(18)
    examples = []
    for _ in range(4):
        feats = FeatureSequence(rng.normal(size=(SEG, 64)))
        ex = EvalExample(feat_y=feats, feat_r=None, label=0, condition="non_playback")
        ex.label = int(score_example(model, ex, SEG)[0] > 0)
        examples.append(ex)
    assert evaluate_accuracy(model, examples, SEG) == 1.0


def test_evaluate_accuracy_rejects_empty_set():
    with pytest.raises(DataError):
        evaluate_accuracy(tiny_model(), [], SEG)


# --- config -------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(DataError):
        TrainConfig(augmentation="mixup")
    with pytest.raises(DataError):
        TrainConfig(early_stop_patience=200, max_epochs=200)
    with pytest.raises(DataError):
        TrainConfig(early_stop_patience=-1)


def test_train_config_round_trips_through_dict():
    cfg = TrainConfig(lr=3e-4, augmentation="both",
                      spec_augment=dict(n_freq_masks=1, freq_width=4,
                                        n_time_masks=0, time_width=0))
    assert isinstance(cfg.spec_augment, SpecAugmentPolicy)
    assert cfg.spec_augment.n_freq_masks == 1
    assert TrainConfig(**cfg.to_dict()).to_dict() == cfg.to_dict()


# --- fit ------------------------------------------------------------------------


def net_config(**overrides):
    return TcnConfig(**{**TINY_NET, **overrides})


def test_fit_validates_its_inputs():
    data = toy_bundle(dev=False)
    with pytest.raises(DataError, match="receptive field"):
        fit(net_config(), TrainConfig(segment_frames=117), data)
    with pytest.raises(DataError):
        fit(net_config(), TrainConfig(segment_frames=SEG, augmentation="orcl"), data)
    empty = DataBundle(train_clips=[], train_oracle=[], dev=[], class_names=[])
    with pytest.raises(DataError):
        fit(net_config(), TrainConfig(segment_frames=SEG), empty)


def test_fit_loss_strictly_decreases_over_first_five_steps():
    # pinned seed and lr: in this eight-clip regime monotonicity is not an
    # invariant, so this is a regression check at fixed settings; the
    # acceptance gate asserts the same property at full training scale
    data = toy_bundle(n_per_class=4, dev=False)
    cfg = TrainConfig(segment_frames=SEG, augmentation="off", batch_size=8,
                      max_epochs=5, early_stop_patience=4, lr=5e-4, seed=0,
                      spec_augment=None)
    ckpt = fit(net_config(), cfg, data)
    losses = [float(line.split("\t")[1]) for line in ckpt.log]
    assert len(losses) == 5  # batch >= pool, so one step per epoch
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_fit_is_bit_reproducible():
    data = toy_bundle(n_per_class=4, oracle=True, seed=21)
    cfg = TrainConfig(segment_frames=SEG, augmentation="both", batch_size=8,
                      max_epochs=3, early_stop_patience=2, playback_fraction=0.7,
                      seed=3)
    a = fit(net_config(), cfg, data)
    b = fit(net_config(), cfg, data)
    assert a.epoch == b.epoch and a.dev_metric == b.dev_metric
    assert a.state.keys() == b.state.keys()
    for k in a.state:
        assert np.array_equal(a.state[k], b.state[k]), k
    # wall-clock column differs; everything else in the log must not
    for la, lb in zip(a.log, b.log):
        assert la.split("\t")[:3] == lb.split("\t")[:3]


def test_fit_stops_after_one_flat_epoch_at_zero_patience():
    data = toy_bundle(n_per_class=2, seed=22)
    cfg = TrainConfig(segment_frames=SEG, augmentation="off", batch_size=4,
                      max_epochs=50, early_stop_patience=0, lr=0.0, seed=1)
    ckpt = fit(net_config(), cfg, data)
    assert len(ckpt.log) == 2  # epoch 1 fails to beat epoch 0, then stop
    assert ckpt.epoch == 0


def test_fit_overfits_a_tiny_separable_set(tmp_path):
    # dev accuracy sits at chance until the batch-norm running stats converge
    # (EMA, one step per epoch here), so patience must outlast that warm-up
    data = toy_bundle(n_per_class=4, seed=23)
    cfg = TrainConfig(segment_frames=SEG, augmentation="off", batch_size=8,
                      max_epochs=40, early_stop_patience=30, lr=3e-3, seed=0,
                      spec_augment=None)
    log_path = tmp_path / "train.log"
    ckpt = fit(net_config(), cfg, data, log_path=log_path)
    assert ckpt.dev_metric == 1.0
    assert ckpt.class_names == ["down", "up"]

    model = ckpt.build_model()
    assert evaluate_accuracy(model, data.dev, SEG) == 1.0

    text = log_path.read_text()
    assert text == "\n".join(ckpt.log) + "\n"
    for line in ckpt.log:
        epoch, loss, metric, secs = line.split("\t")
        int(epoch), float(loss), float(metric), float(secs)


# --- manifest loading -------------------------------------------------------------


@pytest.fixture(scope="module")
def traindata(tmp_path_factory):
    root = tmp_path_factory.mktemp("traindata")
    dirs = fixtures.make_fixture_corpus(root / "corpus", n_train_per_class=1,
                                        n_dev_per_class=1, n_test_per_class=1,
                                        n_interferers=2, seed=11,
                                        keywords=("go", "stop"))
    return mixer.build_speechcommands_mix(
        dirs["corpus"],
        {"playback_tts": dirs["tts"], "playback_music": dirs["music"]},
        root / "mix", master_seed=5)


def test_load_data_bundle_partitions_by_split_and_condition(traindata):
    bundle = load_data_bundle(traindata)
    assert bundle.class_names == ["go", "stop"]
    assert len(bundle.train_clips) == 2
    assert len(bundle.train_oracle) == 2  # tts only by default
    assert len(bundle.dev) == 6  # 2 clips x 3 conditions

    for clip in bundle.train_clips:
        assert clip.spec.window_len == WINDOW and clip.spec.hop == HOP
        assert clip.label in (0, 1)
    for ex in bundle.train_oracle:
        assert ex.condition == "playback_tts"
        assert ex.mix.same_framing(ex.ref)
    for ex in bundle.dev:
        assert (ex.feat_r is None) == (ex.condition == "non_playback")
        assert ex.feat_y.n_features == 64

    with_music = load_data_bundle(traindata, include_music_oracle=True)
    assert len(with_music.train_oracle) == 4
    npb_only = load_data_bundle(traindata, dev_conditions=("non_playback",))
    assert len(npb_only.dev) == 2


def test_load_data_bundle_rejects_labels_missing_from_classes(traindata, tmp_path):
    header, entries = mixer.read_manifest(traindata)
    header["classes"] = ["go"]
    # keep only mislabeled rows so the check fires before any audio is read
    bad = tmp_path / "bad.jsonl"
    mixer.write_manifest(bad, header, [e for e in entries if e.label == "stop"])
    with pytest.raises(DataError, match="missing from manifest classes"):
        load_data_bundle(bad)


def test_load_eval_examples_filters_split_and_condition(traindata):
    examples, classes = load_eval_examples(traindata, split="test")
    assert classes == ["go", "stop"]
    assert len(examples) == 6
    assert {ex.condition for ex in examples} == set(mixer.CONDITIONS)

    tts_only, _ = load_eval_examples(traindata, split="test",
                                     conditions=("playback_tts",))
    assert len(tts_only) == 2
    assert all(ex.feat_r is not None for ex in tts_only)
    assert sorted(ex.label for ex in tts_only) == [0, 1]


def test_fit_runs_end_to_end_on_a_loaded_bundle(traindata):
    bundle = load_data_bundle(traindata)
    cfg = TrainConfig(segment_frames=SEG, augmentation="both", batch_size=4,
                      max_epochs=2, early_stop_patience=1, seed=0)
    ckpt = fit(net_config(), cfg, bundle)
    assert ckpt.class_names == ["go", "stop"]
    assert len(ckpt.log) == 2
    assert 0.0 <= ckpt.dev_metric <= 1.0
