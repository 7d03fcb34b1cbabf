"""Tiny end-to-end pass: synthesize data, train briefly, report by condition.

Everything lands in a temp directory and runs in about a minute; accuracy is
not the point here, the moving parts are.

Run: python3 demos/end_to_end_small.py
"""
import tempfile
from pathlib import Path

import numpy as np

from bargein import fixtures, mixer
from bargein.metrics import report_by_condition
from bargein.nnet import TcnConfig
from bargein.training import (TrainConfig, fit, load_data_bundle,
                              load_eval_examples, score_example)

work = Path(tempfile.mkdtemp(prefix="bargein_demo_"))
print(f"working in {work}")

dirs = fixtures.make_fixture_corpus(work / "corpus", n_train_per_class=4,
                                    n_dev_per_class=1, n_test_per_class=3,
                                    n_interferers=6, seed=0,
                                    keywords=("go", "stop", "yes"))
manifest = mixer.build_speechcommands_mix(
    dirs["corpus"], {"playback_tts": dirs["tts"]}, work / "mix", master_seed=1)
print(f"manifest: {manifest}")

bundle = load_data_bundle(manifest)
print(f"train: {len(bundle.train_clips)} clips, {len(bundle.train_oracle)} "
      f"oracle pairs; dev: {len(bundle.dev)}")

ckpt = fit(TcnConfig(fusion="mask_d2", n_classes=3),
           TrainConfig(augmentation="both", batch_size=12, max_epochs=8,
                       early_stop_patience=7, seed=0), bundle)
print(f"trained to epoch {ckpt.epoch}, dev accuracy {ckpt.dev_metric:.2f}")

model = ckpt.build_model()
tests, classes = load_eval_examples(manifest, "test")
rows = []
for ex in tests:
    pooled = score_example(model, ex, segment_frames=117)
    pred = int(pooled.argmax())
    exp = np.exp(pooled - pooled.max())
    rows.append({"condition": ex.condition, "prediction": pred,
                 "label": ex.label, "score": float(exp[pred] / exp.sum()),
                 "is_target": pred == ex.label})
text, records = report_by_condition(rows, far_target=0.1)
print()
print(text)
