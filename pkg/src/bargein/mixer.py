"""SIR-controlled mixing, on-the-fly triplet augmentation, offline dataset synthesis.

A mixture is y = n + u: target u (the clip to classify), interferer n (the
device's own playback after the room), reference r (the clean playback signal
the device knows). Offline synthesis reverberates r through a sampled room;
the on-the-fly variant instead frame-shifts a second training clip and leaves
the unshifted clip as the reference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, roomsim
from .dsp import AudioBuffer, Spectrogram
from .errors import DataError, ManifestError, ZeroEnergyError

SHIFT_RANGE = (15, 20)
AUGMENT_SIR_RANGE = (-20.0, 3.0)
SYNTH_SIR_RANGE = (-12.0, 3.0)
CONDITIONS = ("non_playback", "playback_tts", "playback_music")
SPLITS = ("train", "dev", "test")

MANIFEST_KIND = "speechcommands_mix_manifest"
MANIFEST_VERSION = 1


@dataclass
class MixtureTriplet:
    """Mixture/reference pair with optional oracle parts, in one signal domain."""

    mixture: object
    reference: object
    interferer: object = None
    target: object = None
    label: int = -1
    sir_db: float = 0.0
    shift_frames: int = 0


@dataclass
class DatasetManifestEntry:
    mixture_path: str
    reference_path: str
    target_path: str
    label: str
    sir_db: float | None
    room_seed: int | None
    split: str
    condition: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.condition not in CONDITIONS:
            raise ManifestError(f"unknown condition {self.condition!r}")

    def to_dict(self) -> dict:
        d = {
            "mixture_path": self.mixture_path,
            "reference_path": self.reference_path,
            "target_path": self.target_path,
            "label": self.label,
            "sir_db": self.sir_db,
            "room_seed": self.room_seed,
            "split": self.split,
            "condition": self.condition,
        }
        d.update(self.extras)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifestEntry":
        known = {"mixture_path", "reference_path", "target_path", "label",
                 "sir_db", "room_seed", "split", "condition"}
        extras = {k: v for k, v in d.items() if k not in known}
        try:
            return DatasetManifestEntry(
                mixture_path=d["mixture_path"], reference_path=d["reference_path"],
                target_path=d["target_path"], label=d["label"], sir_db=d["sir_db"],
                room_seed=d["room_seed"], split=d["split"], condition=d["condition"],
                extras=extras,
            )
        except KeyError as exc:
            raise ManifestError(f"manifest entry missing field {exc}") from exc


def _power(x: np.ndarray) -> float:
    x = np.asarray(x)
    return float(np.mean(np.abs(x) ** 2))


def sir_gain(target_power: float, interferer_power: float, sir_db: float) -> float:
    """Scale g for the interferer so 10*log10(P_u / P_gn) equals sir_db."""
    if target_power <= 0.0:
        raise ZeroEnergyError("target has zero energy; SIR undefined")
    if interferer_power <= 0.0:
        raise ZeroEnergyError("interferer has zero energy; SIR undefined")
    return float(np.sqrt(target_power / (interferer_power * 10.0 ** (sir_db / 10.0))))


def measure_sir_db(target: np.ndarray, scaled_interferer: np.ndarray) -> float:
    pu = _power(target)
    pn = _power(scaled_interferer)
    if pu <= 0.0 or pn <= 0.0:
        raise ZeroEnergyError("cannot measure SIR of silent operands")
    return float(10.0 * np.log10(pu / pn))


def mix_at_sir(target: AudioBuffer, interferer: AudioBuffer,
               sir_db: float) -> tuple[AudioBuffer, AudioBuffer]:
    """Mix time-domain signals at an exact SIR; shorter operand is zero-padded.

    Powers are measured over the first min(len) samples (the mutual overlap)
    so tail padding does not bias the ratio.
    """
    lt, li = len(target), len(interferer)
    n = max(lt, li)
    overlap = min(lt, li)
    u = np.zeros(n)
    u[:lt] = target.samples
    v = np.zeros(n)
    v[:li] = interferer.samples
    g = sir_gain(_power(u[:overlap]), _power(v[:overlap]), sir_db)
    scaled = g * v
    return AudioBuffer(u + scaled), AudioBuffer(scaled)


def augment_triplet(example_i: tuple[Spectrogram, int], example_j: tuple[Spectrogram, int],
                    rng: np.random.Generator,
                    shift_range: tuple[int, int] = SHIFT_RANGE,
                    sir_range: tuple[float, float] = AUGMENT_SIR_RANGE) -> MixtureTriplet:
    """Build an on-the-fly playback triplet from two training spectrograms.

    Roles are fixed regardless of labels: u := x_i, r := x_j. The interferer is
    x_j delayed by k ~ integer U{15..20} frames (leading frames zero) and scaled
    to a SIR drawn from U(-20, 3) dB on complex-STFT power over the overlap
    region; the reference stays unshifted. Draw order: shift, then SIR. The
    emitted label is label_i; label_j is discarded.

    The stored target is mixture - interferer, so y - n == u holds bit-exactly.
    """
    spec_i, label_i = example_i
    spec_j, _ = example_j
    if not spec_i.same_framing(spec_j):
        raise DataError("augmentation operands must share STFT framing")
    ti = spec_i.n_frames
    shift = int(rng.integers(shift_range[0], shift_range[1] + 1))
    sir_db = float(rng.uniform(sir_range[0], sir_range[1]))

    interferer = np.zeros_like(spec_i.frames)
    n_copy = max(0, min(ti - shift, spec_j.n_frames))
    if n_copy > 0:
        interferer[shift : shift + n_copy] = spec_j.frames[:n_copy]
    lo, hi = shift, shift + n_copy
    if hi <= lo:
        raise ZeroEnergyError("shift leaves no interferer overlap")
    g = sir_gain(_power(spec_i.frames[lo:hi]), _power(interferer[lo:hi]), sir_db)
    interferer *= g
    mixture = spec_i.frames + interferer

    reference = np.zeros_like(spec_i.frames)
    n_ref = min(ti, spec_j.n_frames)
    reference[:n_ref] = spec_j.frames[:n_ref]

    def _spec(frames):
        return Spectrogram(frames, spec_i.window_len, spec_i.hop, spec_i.window_kind)

    return MixtureTriplet(
        mixture=_spec(mixture), reference=_spec(reference),
        interferer=_spec(interferer), target=_spec(mixture - interferer),
        label=label_i, sir_db=sir_db, shift_frames=shift,
    )


def draw_augmented_triplet(pool: list, rng: np.random.Generator,
                           max_retries: int = 8, **kwargs) -> MixtureTriplet:
    """Sample a pair from the pool and augment, resampling on zero energy."""
    if len(pool) < 2:
        raise DataError("augmentation pool needs at least two examples")
    last = None
    for _ in range(max_retries):
        i = int(rng.integers(len(pool)))
        j = int(rng.integers(len(pool)))
        if j == i:
            continue
        try:
            return augment_triplet(pool[i], pool[j], rng, **kwargs)
        except ZeroEnergyError as exc:
            last = exc
    raise ZeroEnergyError(f"no usable pair after {max_retries} retries: {last}")


# --- offline SpeechCommandsMix synthesis -----------------------------------


def _read_split_lists(gscv2_dir: Path) -> tuple[set, set]:
    val_path = gscv2_dir / "validation_list.txt"
    test_path = gscv2_dir / "testing_list.txt"
    if not val_path.is_file() or not test_path.is_file():
        raise DataError(
            f"{gscv2_dir}: missing validation_list.txt / testing_list.txt "
            "(official split definition)"
        )
    val = {line.strip() for line in val_path.read_text().splitlines() if line.strip()}
    test = {line.strip() for line in test_path.read_text().splitlines() if line.strip()}
    return val, test


def discover_gscv2(gscv2_dir) -> list[tuple[str, str, str]]:
    """List (relative_path, keyword, split) for every keyword clip."""
    gscv2_dir = Path(gscv2_dir)
    if not gscv2_dir.is_dir():
        raise DataError(f"GSCv2 directory not found: {gscv2_dir}")
    val, test = _read_split_lists(gscv2_dir)
    clips = []
    for sub in sorted(p for p in gscv2_dir.iterdir() if p.is_dir()):
        if sub.name.startswith("_"):
            continue
        for wav in sorted(sub.glob("*.wav")):
            rel = f"{sub.name}/{wav.name}"
            split = "dev" if rel in val else "test" if rel in test else "train"
            clips.append((rel, sub.name, split))
    if not clips:
        raise DataError(f"no keyword clips found under {gscv2_dir}")
    return clips


def _list_corpus(corpus_dir) -> list[Path]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DataError(f"interferer corpus not found: {corpus_dir}")
    files = sorted(corpus_dir.glob("*.wav"))
    if not files:
        raise DataError(f"no WAV files in interferer corpus {corpus_dir}")
    return files


def _crop_or_pad(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) > n:
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start : start + n]
    out = np.zeros(n)
    out[: len(x)] = x
    return out


def _synth_playback_pair(target_q: np.ndarray, interferer_files: list[Path],
                         room_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
    """Build one playback mixture in the int16 sample domain.

    Everything random comes from default_rng(room_seed): room config, the
    interferer pick, its crop offset, and the SIR draw, in that order. Target
    and scaled interferer share a headroom factor before quantization and the
    mixture is the integer sum, so mixture - interferer == target exactly.
    Returns (mixture_q, reference_q, target_out_q, measured_sir_db, ifile_idx).
    """
    rng = np.random.default_rng(room_seed)
    config = roomsim.sample_room_config(rng)
    rir = roomsim.image_source_rir(config)
    ifile_idx = int(rng.integers(len(interferer_files)))
    ref_full = dsp.read_wav(interferer_files[ifile_idx])

    n_samp = len(target_q)
    ref = _crop_or_pad(ref_full.samples, n_samp, rng)
    sir_db = float(rng.uniform(*SYNTH_SIR_RANGE))

    target = target_q.astype(np.float64) / dsp.INT16_FULL_SCALE
    echo = roomsim.apply_playback_path(AudioBuffer(ref), rir, tail_seconds=0.0).samples
    g = sir_gain(_power(target), _power(echo), sir_db)
    scaled = g * echo

    peak = np.max(np.abs(target)) + np.max(np.abs(scaled))
    headroom = min(1.0, 0.99 / peak) if peak > 0 else 1.0
    target_out = dsp.quantize_int16(target * headroom)
    interferer_q = dsp.quantize_int16(scaled * headroom)
    mixture_q = (target_out.astype(np.int32) + interferer_q.astype(np.int32)).astype(np.int16)
    reference_q = dsp.quantize_int16(ref)
    measured = measure_sir_db(target_out.astype(np.float64), interferer_q.astype(np.float64))
    return mixture_q, reference_q, target_out, measured, ifile_idx


def write_manifest(path, header: dict, entries: list[DatasetManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> tuple[dict, list[DatasetManifestEntry]]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [(i, line) for i, line in enumerate(fh.read().splitlines(), start=1)
                 if line.strip()]
    if not lines:
        raise ManifestError(f"manifest {path} is empty")

    def parse(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} line {lineno}: invalid JSON") from exc

    header = parse(*lines[0])
    entries = [DatasetManifestEntry.from_dict(parse(i, line)) for i, line in lines[1:]]
    if header.get("kind") != MANIFEST_KIND:
        raise ManifestError(f"manifest {path}: unexpected header kind {header.get('kind')!r}")
    return header, entries


def build_speechcommands_mix(gscv2_dir, interferer_corpora: dict, out_dir,
                             master_seed: int, variants: int = 1,
                             keywords: list[str] | None = None) -> Path:
    """Synthesize the playback dataset and write its manifest.

    interferer_corpora maps condition name ("playback_tts", "playback_music")
    to a directory of pre-segmented WAV clips. Every clip of every keyword gets
    one non-playback entry pointing at the original file plus `variants`
    playback entries per condition. All per-entry randomness derives from a
    room_seed recorded in the manifest, so any entry is regenerable in
    isolation. Paths in the manifest are relative to the manifest directory.
    """
    gscv2_dir = Path(gscv2_dir)
    out_dir = Path(out_dir)
    for cond in interferer_corpora:
        if cond not in ("playback_tts", "playback_music"):
            raise DataError(f"unknown playback condition {cond!r}")
    clips = discover_gscv2(gscv2_dir)
    if keywords is not None:
        wanted = set(keywords)
        clips = [c for c in clips if c[1] in wanted]
        if not clips:
            raise DataError(f"no clips left after keyword filter {sorted(wanted)}")
    corpora_files = {cond: _list_corpus(d) for cond, d in interferer_corpora.items()}

    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[DatasetManifestEntry] = []

    for clip_idx, (rel, keyword, split) in enumerate(clips):
        src = gscv2_dir / rel
        target_q = dsp.read_wav_int16(src)
        rel_src = os.path.relpath(src, out_dir)
        entries.append(DatasetManifestEntry(
            mixture_path=rel_src, reference_path="", target_path=rel_src,
            label=keyword, sir_db=None, room_seed=None,
            split=split, condition="non_playback",
        ))
        for cond_idx, cond in enumerate(sorted(corpora_files)):
            for variant in range(variants):
                child = np.random.SeedSequence(
                    entropy=master_seed, spawn_key=(cond_idx, clip_idx, variant)
                )
                room_seed = int(child.generate_state(1, np.uint64)[0] >> 1)
                mix_q, ref_q, tgt_q, sir_meas, ifile = _synth_playback_pair(
                    target_q, corpora_files[cond], room_seed
                )
                stem = f"{keyword}_{Path(rel).stem}_{cond.split('_')[1]}_{variant}"
                sub = out_dir / cond / keyword
                sub.mkdir(parents=True, exist_ok=True)
                paths = {}
                for tag, data in (("mix", mix_q), ("ref", ref_q), ("tgt", tgt_q)):
                    p = sub / f"{stem}_{tag}.wav"
                    dsp.write_wav_int16(p, data)
                    paths[tag] = os.path.relpath(p, out_dir)
                entries.append(DatasetManifestEntry(
                    mixture_path=paths["mix"], reference_path=paths["ref"],
                    target_path=paths["tgt"], label=keyword,
                    sir_db=round(sir_meas, 9), room_seed=room_seed,
                    split=split, condition=cond,
                    extras={"interferer_path": os.path.relpath(
                        corpora_files[cond][ifile], out_dir)},
                ))

    header = {
        "kind": MANIFEST_KIND,
        "version": MANIFEST_VERSION,
        "master_seed": master_seed,
        "variants": variants,
        "classes": sorted({kw for _, kw, _ in clips}),
        "conditions": ["non_playback"] + sorted(corpora_files),
        "seed_note": "room_seed drives default_rng for room, interferer pick, crop, SIR",
    }
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, header, entries)
    return manifest_path
