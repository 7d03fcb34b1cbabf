"""Optimization loop: cross-entropy, Adam with decoupled weight decay, early stopping.

Training segments are 117 STFT frames (the model's receptive field). A batch
is either non-playback (clean clips) or playback; playback examples come from
pre-synthesized oracle triplets ("orcl"), from on-the-fly mixing of two clean
clips ("augm"), or a 50/50 coin flip per example ("both"). All randomness
derives from (seed, epoch, step), so runs are bit-reproducible single-threaded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import dsp, mixer
from .dsp import FeatureSequence, Spectrogram
from .errors import DataError, NumericalError
from .nnet import (SpecAugmentPolicy, TcnClassifier, TcnConfig, max_pool_logits,
                   receptive_field)

AUGMENT_STRATEGIES = ("off", "augm", "orcl", "both")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 200
    early_stop_patience: int = 10
    batch_size: int = 256
    segment_frames: int = 117
    augmentation: str = "orcl"
    playback_fraction: float = 0.5
    seed: int = 0
    spec_augment: SpecAugmentPolicy | None = field(default_factory=SpecAugmentPolicy)

    def __post_init__(self):
        if self.augmentation not in AUGMENT_STRATEGIES:
            raise DataError(f"unknown augmentation strategy {self.augmentation!r}")
        if not 0 <= self.early_stop_patience < self.max_epochs:
            raise DataError("need 0 <= patience < max_epochs")
        if isinstance(self.spec_augment, dict):
            self.spec_augment = SpecAugmentPolicy(**self.spec_augment)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.spec_augment is not None:
            d["spec_augment"] = asdict(self.spec_augment)
        return d


@dataclass
class Checkpoint:
    state: dict
    config: TcnConfig
    epoch: int
    dev_metric: float
    rng_state: dict
    class_names: list
    log: list

    def build_model(self) -> TcnClassifier:
        model = TcnClassifier(self.config)
        model.load_state_dict(self.state)
        return model


@dataclass
class ClipExample:
    """A clean clip: complex STFT plus its class id."""

    spec: Spectrogram
    label: int


@dataclass
class OracleExample:
    """A pre-synthesized playback pair: mixture and reference STFTs."""

    mix: Spectrogram
    ref: Spectrogram
    label: int
    condition: str = "playback_tts"


@dataclass
class EvalExample:
    feat_y: FeatureSequence
    feat_r: FeatureSequence | None
    label: int
    condition: str


@dataclass
class DataBundle:
    train_clips: list
    train_oracle: list
    dev: list
    class_names: list


# --- losses ------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean stable CE over a (B, C) batch; returns (loss, dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    b = logits.shape[0]
    loss = float(-log_probs[np.arange(b), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def binary_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean stable BCE on raw logits (B,); returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    # exponentiate the negative magnitude only; either branch of a plain
    # np.where would overflow for large |z|
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return loss, (sig - t) / z.size


def cross_entropy(logits: np.ndarray, label) -> float:
    """Loss for one utterance: softmax CE for C > 1, sigmoid BCE for C == 1."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    if logits.ndim != 1:
        raise DataError(f"expected a C-vector of logits, got shape {logits.shape}")
    if logits.size == 1:
        loss, _ = binary_cross_entropy(logits, np.array([float(label)]))
    else:
        loss, _ = softmax_cross_entropy(logits[None, :], np.array([int(label)]))
    return loss


# --- optimizer -----------------------------------------------------------------


def init_adam_state(model: TcnClassifier) -> dict:
    return {
        "t": 0,
        "m": {name: np.zeros_like(p.value) for name, p in model.named_params()},
        "v": {name: np.zeros_like(p.value) for name, p in model.named_params()},
    }


def adam_step(model: TcnClassifier, state: dict, lr: float, weight_decay: float = 0.0,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam with decoupled weight decay on weight matrices.

    Decay applies only to params flagged decay=True (conv/dense weights);
    biases, batch-norm affine params and PReLU slopes are never decayed.
    """
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in model.named_params():
        g = p.grad
        m = state["m"][name]
        v = state["v"][name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and p.decay:
            step = step + lr * weight_decay * p.value
        p.value -= step


# --- batch assembly ------------------------------------------------------------


def crop_or_pad_frames(frames: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop to n_frames, or zero-pad at the tail when shorter."""
    t = frames.shape[0]
    if t >= n_frames:
        start = int(rng.integers(0, t - n_frames + 1)) if t > n_frames else 0
        return frames[start : start + n_frames]
    out = np.zeros((n_frames,) + frames.shape[1:], dtype=frames.dtype)
    out[:t] = frames
    return out


def features_from_frames(frames: np.ndarray, spec: Spectrogram,
                         filterbank: np.ndarray) -> np.ndarray:
    """(T, F_bins) complex frames -> (F_mel, T) log energies."""
    power = np.abs(frames) ** 2
    energies = power @ filterbank.T
    return np.log(np.maximum(energies, dsp.ENERGY_FLOOR)).T


def _pair_to_features(mix_frames, ref_frames, spec, seg, rng, filterbank):
    t = mix_frames.shape[0]
    if t > seg:
        start = int(rng.integers(0, t - seg + 1))
        mix_frames = mix_frames[start : start + seg]
        ref_frames = ref_frames[start : start + seg]
    else:
        mix_frames = crop_or_pad_frames(mix_frames, seg, rng)
        ref_frames = crop_or_pad_frames(ref_frames, seg, rng)
    xy = features_from_frames(mix_frames, spec, filterbank)
    xr = features_from_frames(ref_frames, spec, filterbank)
    return xy, xr


def assemble_batch(data: DataBundle, cfg: TrainConfig, rng: np.random.Generator,
                   filterbank: np.ndarray, playback: bool, indices: np.ndarray):
    """Features (B, F, T), reference features or None, labels (B,)."""
    seg = cfg.segment_frames
    xs, rs, labels = [], [], []
    for idx in indices:
        if not playback:
            clip = data.train_clips[idx % len(data.train_clips)]
            frames = crop_or_pad_frames(clip.spec.frames, seg, rng)
            xs.append(features_from_frames(frames, clip.spec, filterbank))
            labels.append(clip.label)
            continue
        strategy = cfg.augmentation
        if strategy == "both":
            strategy = "orcl" if rng.random() < 0.5 else "augm"
        if strategy == "orcl":
            if not data.train_oracle:
                raise DataError("strategy requires pre-synthesized oracle triplets")
            ex = data.train_oracle[idx % len(data.train_oracle)]
            xy, xr = _pair_to_features(ex.mix.frames, ex.ref.frames, ex.mix, seg, rng, filterbank)
            label = ex.label
        else:
            pool = [(c.spec, c.label) for c in data.train_clips]
            trip = mixer.draw_augmented_triplet(pool, rng)
            xy, xr = _pair_to_features(trip.mixture.frames, trip.reference.frames,
                                       trip.mixture, seg, rng, filterbank)
            label = trip.label
        xs.append(xy)
        rs.append(xr)
        labels.append(label)
    x_y = np.stack(xs)
    x_r = np.stack(rs) if playback and rs else None
    return x_y, x_r, np.asarray(labels)


def loss_and_grads(model: TcnClassifier, x_y: np.ndarray, x_r: np.ndarray | None,
                   playback: bool, labels: np.ndarray,
                   aug_rng: np.random.Generator | None = None,
                   aug_policy: SpecAugmentPolicy | None = None) -> float:
    """One train-mode forward/backward with max-pooled logits; grads accumulate."""
    logits, cache = model.forward(x_y, x_r, playback=playback, train=True,
                                  aug_rng=aug_rng, aug_policy=aug_policy)
    b, c, t = logits.shape
    peak = logits.argmax(axis=2)
    pooled = logits.max(axis=2)
    if not np.all(np.isfinite(pooled)):
        raise NumericalError("non-finite logits in training step")
    if c == 1:
        loss, dpooled = binary_cross_entropy(pooled[:, 0], labels.astype(np.float64))
        dpooled = dpooled[:, None]
    else:
        loss, dpooled = softmax_cross_entropy(pooled, labels)
    dlogits = np.zeros_like(logits)
    bi = np.repeat(np.arange(b), c)
    ci = np.tile(np.arange(c), b)
    dlogits[bi, ci, peak.ravel()] = dpooled.ravel()
    model.backward(cache, dlogits)
    return loss


def score_example(model: TcnClassifier, ex: EvalExample, segment_frames: int) -> np.ndarray:
    """Eval-mode pooled logits for one utterance (zero-padded to the segment)."""
    xy = ex.feat_y.values
    if xy.shape[0] < segment_frames:
        pad = np.full((segment_frames - xy.shape[0], xy.shape[1]), np.log(dsp.ENERGY_FLOOR))
        xy = np.vstack([xy, pad])
    xr = None
    playback = ex.feat_r is not None and model.config.fusion != "baseline"
    if playback:
        xr = ex.feat_r.values
        if xr.shape[0] < xy.shape[0]:
            pad = np.full((xy.shape[0] - xr.shape[0], xr.shape[1]), np.log(dsp.ENERGY_FLOOR))
            xr = np.vstack([xr, pad])
        xr = xr[: xy.shape[0]].T[None]
    logits, _ = model.forward(xy.T[None], xr, playback=playback, train=False)
    return max_pool_logits(logits[0].T)


def evaluate_accuracy(model: TcnClassifier, examples: list, segment_frames: int) -> float:
    if not examples:
        raise DataError("empty evaluation set")
    hits = 0
    for ex in examples:
        pooled = score_example(model, ex, segment_frames)
        pred = int(pooled.argmax()) if pooled.size > 1 else int(pooled[0] > 0)
        hits += int(pred == ex.label)
    return hits / len(examples)


# --- fit -----------------------------------------------------------------------


def fit(model_config: TcnConfig, train_config: TrainConfig, data: DataBundle,
        log_path=None, quiet: bool = True) -> Checkpoint:
    """Train with early stopping; returns the best-dev checkpoint.

    The log has one tab-separated line per epoch: epoch, train loss, dev
    metric, wall seconds. Dev metric is classification accuracy.
    """
    if not data.train_clips:
        raise DataError("no training clips")
    if train_config.segment_frames != receptive_field(model_config):
        raise DataError(
            f"segment_frames {train_config.segment_frames} != receptive field "
            f"{receptive_field(model_config)}"
        )
    need_oracle = train_config.augmentation in ("orcl", "both")
    if need_oracle and not data.train_oracle:
        raise DataError(f"strategy {train_config.augmentation!r} needs oracle triplets")

    filterbank = dsp.mel_filterbank(window_len=data.train_clips[0].spec.window_len)
    init_rng = np.random.default_rng(np.random.SeedSequence(train_config.seed))
    model = TcnClassifier(model_config, rng=init_rng)
    opt_state = init_adam_state(model)

    steps_per_epoch = max(1, int(np.ceil(len(data.train_clips) / train_config.batch_size)))
    best_metric = -np.inf
    best_state = None
    best_epoch = -1
    since_best = 0
    log_lines = []

    for epoch in range(train_config.max_epochs):
        t0 = time.monotonic()
        losses = []
        for step in range(steps_per_epoch):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=train_config.seed, spawn_key=(1, epoch, step))
            )
            playback = (
                train_config.augmentation != "off"
                and rng.random() < train_config.playback_fraction
            )
            indices = rng.integers(0, 2 ** 31, size=train_config.batch_size)
            x_y, x_r, labels = assemble_batch(data, train_config, rng, filterbank,
                                              playback, indices)
            model.zero_grads()
            loss = loss_and_grads(model, x_y, x_r, playback, labels,
                                  aug_rng=rng, aug_policy=train_config.spec_augment)
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged at epoch {epoch} step {step}")
            adam_step(model, opt_state, train_config.lr, train_config.weight_decay)
            losses.append(loss)

        dev_metric = (
            evaluate_accuracy(model, data.dev, train_config.segment_frames)
            if data.dev else float(-np.mean(losses))
        )
        line = f"{epoch}\t{np.mean(losses):.6f}\t{dev_metric:.6f}\t{time.monotonic() - t0:.2f}"
        log_lines.append(line)
        if not quiet:
            print(line, flush=True)

        if dev_metric > best_metric:
            best_metric = dev_metric
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > train_config.early_stop_patience:
                break

    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")

    final_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=train_config.seed, spawn_key=(2, best_epoch))
    )
    return Checkpoint(
        state=best_state, config=model_config, epoch=best_epoch,
        dev_metric=float(best_metric), rng_state=final_rng.bit_generator.state,
        class_names=list(data.class_names), log=log_lines,
    )


# --- manifest loading ------------------------------------------------------------


def _stft_features(path, manifest_dir) -> FeatureSequence:
    return dsp.lfbe(dsp.read_wav(Path(manifest_dir) / path))


def load_data_bundle(manifest_path, train_conditions: tuple = ("playback_tts",),
                     dev_conditions: tuple | None = None,
                     include_music_oracle: bool = False) -> DataBundle:
    """Build training/dev pools from a synthesis manifest.

    Train split: non-playback entries become clean-clip STFTs (the
    augmentation pool), playback entries in train_conditions become oracle
    triplets. Dev split: every entry becomes an EvalExample tagged with its
    condition (restricted to dev_conditions when given).
    """
    header, entries = mixer.read_manifest(manifest_path)
    mdir = Path(manifest_path).parent
    classes = header["classes"]
    label_of = {name: i for i, name in enumerate(classes)}
    if include_music_oracle and "playback_music" not in train_conditions:
        train_conditions = tuple(train_conditions) + ("playback_music",)

    train_clips, train_oracle, dev = [], [], []
    for e in entries:
        if e.label not in label_of:
            raise DataError(f"label {e.label!r} missing from manifest classes")
        label = label_of[e.label]
        if e.split == "train":
            if e.condition == "non_playback":
                audio = dsp.read_wav(mdir / e.mixture_path)
                spec = dsp.stft(audio, dsp.FEATURE_WINDOW, dsp.FEATURE_HOP, "hann")
                train_clips.append(ClipExample(spec=spec, label=label))
            elif e.condition in train_conditions:
                mix = dsp.stft(dsp.read_wav(mdir / e.mixture_path),
                               dsp.FEATURE_WINDOW, dsp.FEATURE_HOP, "hann")
                ref = dsp.stft(dsp.read_wav(mdir / e.reference_path),
                               dsp.FEATURE_WINDOW, dsp.FEATURE_HOP, "hann")
                train_oracle.append(OracleExample(mix=mix, ref=ref, label=label,
                                                  condition=e.condition))
        elif e.split == "dev":
            if dev_conditions is not None and e.condition not in dev_conditions:
                continue
            feat_r = (_stft_features(e.reference_path, mdir)
                      if e.reference_path else None)
            dev.append(EvalExample(feat_y=_stft_features(e.mixture_path, mdir),
                                   feat_r=feat_r, label=label, condition=e.condition))
    return DataBundle(train_clips=train_clips, train_oracle=train_oracle,
                      dev=dev, class_names=list(classes))


def load_eval_examples(manifest_path, split: str = "test",
                       conditions: tuple | None = None) -> tuple[list, list]:
    """EvalExamples for one split, plus the manifest class list."""
    header, entries = mixer.read_manifest(manifest_path)
    mdir = Path(manifest_path).parent
    classes = header["classes"]
    label_of = {name: i for i, name in enumerate(classes)}
    out = []
    for e in entries:
        if e.split != split:
            continue
        if conditions is not None and e.condition not in conditions:
            continue
        feat_r = _stft_features(e.reference_path, mdir) if e.reference_path else None
        out.append(EvalExample(feat_y=_stft_features(e.mixture_path, mdir),
                               feat_r=feat_r, label=label_of[e.label],
                               condition=e.condition))
    return out, list(classes)
