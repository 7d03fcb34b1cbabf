"""Playback-conditioned TCN keyword classifier.

One encoder/decoder skeleton serves six reference-fusion modes:

* baseline          - mixture only.
* concat_input      - per-branch input BN, channel concat, widened first conv;
                      without playback the reference half is the reference
                      BN's learned beta vector broadcast over time.
* concat_d1/d2/d3   - shared-weight encoder (first conv + k blocks) on both
                      branches, channel concat to 2D, pointwise projection
                      back to D, remaining blocks; the beta fallback above
                      feeds the reference branch without playback.
* mask_d2           - fully shared encoder (including input BN) to depth 2;
                      playback gates the mixture latent with
                      M = sigmoid(P([Z_y, Z_r])); without playback the
                      reference branch is dropped and the model IS the
                      baseline graph.

Logits are per output frame; `max_pool_logits` reduces an utterance to one
prediction. Head is linear; softmax/sigmoid live in the loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .dsp import FeatureSequence
from .errors import DataError
from .layers import (BatchNorm, Param, PointwiseConv, ResBlock, StridedConv,
                     sigmoid_backward, sigmoid_forward)

FUSIONS = ("baseline", "concat_input", "concat_d1", "concat_d2", "concat_d3", "mask_d2")
CHECKPOINT_VERSION = 1


@dataclass
class TcnConfig:
    in_features: int = 64
    bottleneck_d: int = 64
    hidden_h: int = 128
    init_kernel: int = 5
    init_stride: int = 2
    blocks_per_repeat: int = 3
    repeats: int = 2
    dilations: tuple = (1, 2, 4)
    dw_kernel: int = 5
    n_classes: int = 35
    fusion: str = "baseline"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.fusion not in FUSIONS:
            raise DataError(f"unknown fusion mode {self.fusion!r}; choose from {FUSIONS}")
        if len(self.dilations) != self.blocks_per_repeat:
            raise DataError("dilations must list one value per block in a repeat")
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        if self.fusion_depth > self.n_blocks:
            raise DataError(
                f"fusion {self.fusion} needs {self.fusion_depth} encoder blocks, "
                f"config has {self.n_blocks}"
            )

    @property
    def n_blocks(self) -> int:
        return self.blocks_per_repeat * self.repeats

    @property
    def block_dilations(self) -> tuple:
        return self.dilations * self.repeats

    @property
    def fusion_depth(self) -> int:
        if self.fusion in ("baseline", "concat_input"):
            return 0
        return int(self.fusion[-1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TcnConfig":
        return TcnConfig(**d)


@dataclass
class CostReport:
    fusion: str
    playback_mode: bool
    params: int
    flops_per_output_frame: int


@dataclass
class SpecAugmentPolicy:
    """Zero out random post-BN bands: n masks of width <= the stated maxima."""

    n_freq_masks: int = 2
    freq_width: int = 8
    n_time_masks: int = 2
    time_width: int = 16


def receptive_field(config: TcnConfig) -> int:
    """Input frames one output frame depends on (inclusive count)."""
    span = sum((config.dw_kernel - 1) * d for d in config.block_dilations)
    return config.init_kernel + config.init_stride * span


def encoder_fov(config: TcnConfig, depth: int, convention: str = "inclusive") -> int:
    """Input-frame field of view after the first conv plus `depth` blocks.

    Two conventions circulate: "inclusive" counts the frames themselves,
    "span" counts the distance between first and last (inclusive - 1).
    """
    if not 0 <= depth <= config.n_blocks:
        raise DataError(f"depth must be in [0, {config.n_blocks}], got {depth}")
    span = sum((config.dw_kernel - 1) * d for d in config.block_dilations[:depth])
    inclusive = config.init_kernel + config.init_stride * span
    if convention == "inclusive":
        return inclusive
    if convention == "span":
        return inclusive - 1
    raise DataError(f"unknown convention {convention!r}")


def out_frames(config: TcnConfig, t_in: int) -> int:
    return (t_in - config.init_kernel) // config.init_stride + 1


def count_cost(config: TcnConfig, playback_mode: bool) -> CostReport:
    """Exact learnable parameter count and per-output-frame FLOPs (2x MAC).

    MACs cover convolutions and the dense head at the post-stride frame rate;
    batch norms fold into the adjacent convolution and activations are free.
    """
    f, d, h = config.in_features, config.bottleneck_d, config.hidden_h
    k0, kd, c = config.init_kernel, config.dw_kernel, config.n_classes
    nb, depth = config.n_blocks, config.fusion_depth
    enc_in = 2 * f if config.fusion == "concat_input" else f

    init_macs = k0 * enc_in * d
    block_macs = d * h + kd * h + h * d
    head_macs = d * c
    proj_macs = 2 * d * d

    if config.fusion in ("baseline", "concat_input"):
        macs = init_macs + nb * block_macs + head_macs
    elif config.fusion == "mask_d2":
        if playback_mode:
            macs = 2 * (init_macs + depth * block_macs) + proj_macs \
                + (nb - depth) * block_macs + head_macs
        else:
            macs = init_macs + nb * block_macs + head_macs
    else:  # concat_d1/d2/d3: the beta fallback branch runs either way
        macs = 2 * (init_macs + depth * block_macs) + proj_macs \
            + (nb - depth) * block_macs + head_macs

    bn = 2 * f
    init_params = enc_in * d * k0 + d
    block_params = (d * h + h) + h + 2 * h + (h * kd + h) + h + 2 * h + (h * d + d)
    head_params = d * c + c
    proj_params = 2 * d * d + d

    params = bn + init_params + nb * block_params + head_params
    if config.fusion.startswith("concat"):
        params += bn  # reference-branch BN
    if config.fusion.startswith("concat_d") or config.fusion == "mask_d2":
        params += proj_params

    return CostReport(fusion=config.fusion, playback_mode=playback_mode,
                      params=params, flops_per_output_frame=2 * macs)


def max_pool_logits(frame_logits: np.ndarray) -> np.ndarray:
    """Per-class max over time: (T', C) -> (C,)."""
    frame_logits = np.asarray(frame_logits)
    if frame_logits.ndim != 2 or frame_logits.shape[0] < 1:
        raise DataError(f"expected (T', C) logits with T' >= 1, got {frame_logits.shape}")
    return frame_logits.max(axis=0)


def _draw_mask(n_rows: int, n_cols: int, rng: np.random.Generator,
               policy: SpecAugmentPolicy) -> np.ndarray:
    """Keep-mask over one (F, T) map. Draw order per mask: width, then start."""
    keep = np.ones((n_rows, n_cols))
    for _ in range(policy.n_freq_masks):
        w = int(rng.integers(0, min(policy.freq_width, n_rows) + 1))
        f0 = int(rng.integers(0, n_rows - w + 1))
        keep[f0 : f0 + w, :] = 0.0
    for _ in range(policy.n_time_masks):
        w = int(rng.integers(0, min(policy.time_width, n_cols) + 1))
        t0 = int(rng.integers(0, n_cols - w + 1))
        keep[:, t0 : t0 + w] = 0.0
    return keep


def spec_augment(features: FeatureSequence, rng: np.random.Generator,
                 policy: SpecAugmentPolicy | None = None) -> FeatureSequence:
    """Apply time/frequency masking to a (T, F) feature matrix."""
    if policy is None:
        policy = SpecAugmentPolicy()
    keep = _draw_mask(features.n_features, features.n_frames, rng, policy)
    return FeatureSequence(features.values * keep.T)


def _batch_masks(shape, rng: np.random.Generator, policy: SpecAugmentPolicy) -> np.ndarray:
    b, f, t = shape
    masks = np.empty((b, f, t))
    for i in range(b):
        masks[i] = _draw_mask(f, t, rng, policy)
    return masks


class TcnClassifier:
    """TCN with optional reference branch; see module docstring for fusion modes."""

    def __init__(self, config: TcnConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        c = config
        self.input_bn = BatchNorm(c.in_features)
        self.ref_bn = BatchNorm(c.in_features) if c.fusion.startswith("concat") else None
        enc_in = 2 * c.in_features if c.fusion == "concat_input" else c.in_features
        self.init_conv = StridedConv(enc_in, c.bottleneck_d, c.init_kernel, c.init_stride, rng)
        self.blocks = [
            ResBlock(c.bottleneck_d, c.hidden_h, c.dw_kernel, dil, rng)
            for dil in c.block_dilations
        ]
        self.fuse_proj = (
            PointwiseConv(2 * c.bottleneck_d, c.bottleneck_d, rng)
            if c.fusion.startswith("concat_d") else None
        )
        self.mask_proj = (
            PointwiseConv(2 * c.bottleneck_d, c.bottleneck_d, rng)
            if c.fusion == "mask_d2" else None
        )
        self.head = PointwiseConv(c.bottleneck_d, c.n_classes, rng)

    # --- parameter plumbing -------------------------------------------------

    def named_layers(self):
        out = [("input_bn", self.input_bn)]
        if self.ref_bn is not None:
            out.append(("ref_bn", self.ref_bn))
        out.append(("init_conv", self.init_conv))
        out.extend((f"block{i}", blk) for i, blk in enumerate(self.blocks))
        if self.fuse_proj is not None:
            out.append(("fuse_proj", self.fuse_proj))
        if self.mask_proj is not None:
            out.append(("mask_proj", self.mask_proj))
        out.append(("head", self.head))
        return out

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for lname, layer in self.named_layers():
            for pname, p in layer.params():
                out.append((f"{lname}.{pname}", p))
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.value for name, p in self.named_params()}
        for lname, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                state[f"{lname}.running_mean"] = layer.running_mean
                state[f"{lname}.running_var"] = layer.running_var
            elif isinstance(layer, ResBlock):
                for sname, sub in layer.sublayers():
                    if isinstance(sub, BatchNorm):
                        state[f"{lname}.{sname}.running_mean"] = sub.running_mean
                        state[f"{lname}.{sname}.running_var"] = sub.running_var
        return state

    def load_state_dict(self, state: dict, strict: bool = True):
        own = self.state_dict()
        missing = set(own) - set(state)
        if strict and missing:
            raise DataError(f"state dict missing keys: {sorted(missing)}")
        params = dict(self.named_params())
        for key, arr in state.items():
            if key not in own:
                if strict:
                    raise DataError(f"unexpected state key {key!r}")
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != own[key].shape:
                raise DataError(
                    f"shape mismatch for {key}: checkpoint {arr.shape}, model {own[key].shape}"
                )
            if key in params:
                params[key].value[...] = arr
            else:
                own[key][...] = arr

    def copy_shared_weights_from(self, other: "TcnClassifier"):
        """Copy every state entry whose name and shape both models share."""
        own = self.state_dict()
        for key, arr in other.state_dict().items():
            if key in own and own[key].shape == arr.shape:
                own[key][...] = arr
        self.load_state_dict(own)

    def n_params(self) -> int:
        return sum(p.value.size for _, p in self.named_params())

    # --- forward / backward -------------------------------------------------

    def _beta_broadcast(self, b: int, t: int) -> np.ndarray:
        beta = self.ref_bn.beta.value
        return np.broadcast_to(beta[None, :, None], (b, beta.size, t)).copy()

    def _encode(self, h: np.ndarray, depth: int, train: bool):
        caches = []
        z, c = self.init_conv.forward(h, train)
        caches.append(c)
        for blk in self.blocks[:depth]:
            z, c = blk.forward(z, train)
            caches.append(c)
        return z, caches

    def _decode_backward_encode(self, caches, gz: np.ndarray, depth: int):
        for blk, c in zip(reversed(self.blocks[:depth]), reversed(caches[1:])):
            gz = blk.backward(c, gz)
        return self.init_conv.backward(caches[0], gz)

    def forward(self, x_y: np.ndarray, x_r: np.ndarray | None = None,
                playback: bool = False, train: bool = False,
                aug_rng: np.random.Generator | None = None,
                aug_policy: SpecAugmentPolicy | None = None):
        """Per-frame logits (B, C, T') plus the backward cache.

        x_y, x_r: (B, F, T) feature batches. SpecAugment runs when train is
        true and aug_rng is given, after each input BN, drawing mixture-branch
        masks first; the beta fallback branch is never masked.
        """
        cfg = self.config
        if x_y.ndim != 3 or x_y.shape[1] != cfg.in_features:
            raise DataError(f"x_y must be (B, {cfg.in_features}, T), got {x_y.shape}")
        if playback and cfg.fusion != "baseline":
            if x_r is None:
                raise DataError(f"fusion {cfg.fusion} requires reference features in playback mode")
            if x_r.shape != x_y.shape:
                raise DataError(f"reference shape {x_r.shape} != mixture shape {x_y.shape}")
        b, _, t = x_y.shape
        if aug_policy is None:
            aug_policy = SpecAugmentPolicy()
        augment = train and aug_rng is not None

        def _mask_branch(h):
            if not augment:
                return h, None
            m = _batch_masks(h.shape, aug_rng, aug_policy)
            return h * m, m

        cache = {"playback": playback, "train": train, "b": b, "t": t}

        hy, c_bny = self.input_bn.forward(x_y, train)
        hy, my = _mask_branch(hy)
        cache["c_bny"] = c_bny
        cache["mask_y"] = my

        if cfg.fusion == "baseline":
            z, enc = self._encode(hy, cfg.n_blocks, train)
            cache["enc_y"] = enc
            logits, c_head = self.head.forward(z, train)
            cache["c_head"] = c_head
            return logits, cache

        if cfg.fusion == "concat_input":
            if playback:
                hr, c_bnr = self.ref_bn.forward(x_r, train)
                hr, mr = _mask_branch(hr)
                cache["c_bnr"] = c_bnr
                cache["mask_r"] = mr
            else:
                hr = self._beta_broadcast(b, t)
            h = np.concatenate([hy, hr], axis=1)
            z, enc = self._encode(h, cfg.n_blocks, train)
            cache["enc_y"] = enc
            logits, c_head = self.head.forward(z, train)
            cache["c_head"] = c_head
            return logits, cache

        if cfg.fusion.startswith("concat_d"):
            depth = cfg.fusion_depth
            if playback:
                hr, c_bnr = self.ref_bn.forward(x_r, train)
                hr, mr = _mask_branch(hr)
                cache["c_bnr"] = c_bnr
                cache["mask_r"] = mr
            else:
                hr = self._beta_broadcast(b, t)
            zy, enc_y = self._encode(hy, depth, train)
            zr, enc_r = self._encode(hr, depth, train)
            cache["enc_y"] = enc_y
            cache["enc_r"] = enc_r
            zcat = np.concatenate([zy, zr], axis=1)
            z, c_proj = self.fuse_proj.forward(zcat, train)
            cache["c_proj"] = c_proj
            dec = []
            for blk in self.blocks[depth:]:
                z, c = blk.forward(z, train)
                dec.append(c)
            cache["dec"] = dec
            logits, c_head = self.head.forward(z, train)
            cache["c_head"] = c_head
            return logits, cache

        # mask_d2
        depth = cfg.fusion_depth
        zy, enc_y = self._encode(hy, depth, train)
        cache["enc_y"] = enc_y
        if playback:
            hr, c_bnr = self.input_bn.forward(x_r, train)
            hr, mr = _mask_branch(hr)
            cache["c_bnr"] = c_bnr
            cache["mask_r"] = mr
            zr, enc_r = self._encode(hr, depth, train)
            cache["enc_r"] = enc_r
            zcat = np.concatenate([zy, zr], axis=1)
            s, c_proj = self.mask_proj.forward(zcat, train)
            gate, c_sig = sigmoid_forward(s)
            zg = gate * zy
            cache.update(c_proj=c_proj, c_sig=c_sig, gate=gate, zy=zy)
        else:
            zg = zy
        z = zg
        dec = []
        for blk in self.blocks[depth:]:
            z, c = blk.forward(z, train)
            dec.append(c)
        cache["dec"] = dec
        logits, c_head = self.head.forward(z, train)
        cache["c_head"] = c_head
        return logits, cache

    def backward(self, cache, g_logits: np.ndarray):
        """Accumulate parameter gradients; returns the mixture-feature gradient."""
        cfg = self.config
        playback = cache["playback"]
        g = self.head.backward(cache["c_head"], g_logits)

        def _unmask(gh, key):
            m = cache.get(key)
            return gh if m is None else gh * m

        if cfg.fusion == "baseline":
            gh = self._decode_backward_encode(cache["enc_y"], g, cfg.n_blocks)
            gh = _unmask(gh, "mask_y")
            return self.input_bn.backward(cache["c_bny"], gh)

        if cfg.fusion == "concat_input":
            gh = self._decode_backward_encode(cache["enc_y"], g, cfg.n_blocks)
            f = cfg.in_features
            ghy, ghr = gh[:, :f, :], gh[:, f:, :]
            if playback:
                ghr = _unmask(ghr, "mask_r")
                self.ref_bn.backward(cache["c_bnr"], ghr)
            else:
                self.ref_bn.beta.grad += ghr.sum(axis=(0, 2))
            ghy = _unmask(ghy, "mask_y")
            return self.input_bn.backward(cache["c_bny"], ghy)

        if cfg.fusion.startswith("concat_d"):
            depth = cfg.fusion_depth
            for blk, c in zip(reversed(self.blocks[depth:]), reversed(cache["dec"])):
                g = blk.backward(c, g)
            gcat = self.fuse_proj.backward(cache["c_proj"], g)
            d = cfg.bottleneck_d
            gzy, gzr = gcat[:, :d, :], gcat[:, d:, :]
            ghr = self._decode_backward_encode(cache["enc_r"], gzr, depth)
            if playback:
                ghr = _unmask(ghr, "mask_r")
                self.ref_bn.backward(cache["c_bnr"], ghr)
            else:
                self.ref_bn.beta.grad += ghr.sum(axis=(0, 2))
            ghy = self._decode_backward_encode(cache["enc_y"], gzy, depth)
            ghy = _unmask(ghy, "mask_y")
            return self.input_bn.backward(cache["c_bny"], ghy)

        # mask_d2
        depth = cfg.fusion_depth
        for blk, c in zip(reversed(self.blocks[depth:]), reversed(cache["dec"])):
            g = blk.backward(c, g)
        if playback:
            gate, zy = cache["gate"], cache["zy"]
            gs = sigmoid_backward(cache["c_sig"], g * zy)
            gcat = self.mask_proj.backward(cache["c_proj"], gs)
            d = cfg.bottleneck_d
            gzy = g * gate + gcat[:, :d, :]
            ghr = self._decode_backward_encode(cache["enc_r"], gcat[:, d:, :], depth)
            ghr = _unmask(ghr, "mask_r")
            self.input_bn.backward(cache["c_bnr"], ghr)
        else:
            gzy = g
        ghy = self._decode_backward_encode(cache["enc_y"], gzy, depth)
        ghy = _unmask(ghy, "mask_y")
        return self.input_bn.backward(cache["c_bny"], ghy)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: TcnClassifier, meta: dict | None = None) -> None:
    """Versioned npz container: config + every parameter and BN buffer, little-endian."""
    meta = dict(meta or {})
    meta["checkpoint_version"] = CHECKPOINT_VERSION
    meta["config"] = model.config.to_dict()
    arrays = {
        key: np.ascontiguousarray(val, dtype="<f8")
        for key, val in model.state_dict().items()
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[TcnClassifier, dict]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: not a readable checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise DataError(f"{path}: missing checkpoint metadata")
    meta = json.loads(bytes(arrays.pop("__meta__")).decode("utf-8"))
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    model = TcnClassifier(TcnConfig.from_dict(meta["config"]))
    model.load_state_dict(arrays)
    return model, meta
