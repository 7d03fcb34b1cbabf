"""Keyword spotting under device playback: simulation, cancellation, fusion models."""

from .aec import NlmsConfig, WienerConfig, erle_db, nlms_cancel, wiener_oracle_cancel
from .dsp import (AudioBuffer, FeatureSequence, Spectrogram, fir_convolve, istft,
                  lfbe, mel_filterbank, read_wav, stft, write_wav)
from .errors import (AudioFormatError, ColaError, ConfigError, DataError,
                     ManifestError, NumericalError, ShortInputError, ZeroEnergyError)
from .mixer import (DatasetManifestEntry, MixtureTriplet, augment_triplet,
                    build_speechcommands_mix, mix_at_sir, read_manifest)
from .nnet import (CostReport, SpecAugmentPolicy, TcnClassifier, TcnConfig,
                   count_cost, encoder_fov, load_checkpoint, receptive_field,
                   save_checkpoint, spec_augment)
from .metrics import accuracy, frr_at_far, report_by_condition
from .roomsim import (ImpulseResponse, RoomConfig, apply_playback_path,
                      image_source_rir, measure_t60, sample_room_config)
from .training import Checkpoint, DataBundle, TrainConfig, fit, load_data_bundle

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "Spectrogram", "FeatureSequence", "stft", "istft", "lfbe",
    "mel_filterbank", "fir_convolve", "read_wav", "write_wav",
    "RoomConfig", "ImpulseResponse", "sample_room_config", "image_source_rir",
    "measure_t60", "apply_playback_path",
    "MixtureTriplet", "DatasetManifestEntry", "mix_at_sir", "augment_triplet",
    "build_speechcommands_mix", "read_manifest",
    "NlmsConfig", "WienerConfig", "nlms_cancel", "wiener_oracle_cancel", "erle_db",
    "TcnConfig", "TcnClassifier", "CostReport", "SpecAugmentPolicy", "count_cost",
    "receptive_field", "encoder_fov", "spec_augment", "save_checkpoint",
    "load_checkpoint",
    "TrainConfig", "DataBundle", "Checkpoint", "fit", "load_data_bundle",
    "accuracy", "frr_at_far", "report_by_condition",
    "DataError", "AudioFormatError", "ConfigError", "ManifestError",
    "ShortInputError", "ZeroEnergyError", "ColaError", "NumericalError",
    "__version__",
]
