"""Command-line driver: synth | train | eval | aec | cost.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Experiment configs are schema-versioned JSON; every randomized artifact
records the master seed it was produced from.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dsp, fixtures, metrics, mixer, training
from .aec import erle_db, nlms_cancel, wiener_oracle_cancel
from .errors import ColaError, ConfigError, DataError, NumericalError
from .nnet import (FUSIONS, TcnConfig, count_cost, load_checkpoint,
                   receptive_field, save_checkpoint)
from .training import TrainConfig

CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; 2 is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# --- experiment config ----------------------------------------------------------


@dataclasses.dataclass
class ExperimentConfig:
    model: TcnConfig
    train: TrainConfig
    manifest: Path
    out_dir: Path
    train_conditions: tuple
    dev_conditions: tuple | None
    include_music_oracle: bool

    def resolved_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": {
                "manifest": str(self.manifest),
                "train_conditions": list(self.train_conditions),
                "dev_conditions": (None if self.dev_conditions is None
                                   else list(self.dev_conditions)),
                "include_music_oracle": self.include_music_oracle,
            },
            "out_dir": str(self.out_dir),
        }


def _get(d: dict, key: str, where: str, types, required: bool = True, default=None):
    if key not in d:
        if required:
            raise ConfigError(f"{where}{key}: missing required field")
        return default
    v = d[key]
    if types is not None and not isinstance(v, types):
        want = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{where}{key}: expected {want}, got {type(v).__name__}")
    return v


def _check_known(d: dict, cls, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{where}{k}: unknown field")


def load_experiment_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Parse and validate a config file; error messages carry field paths."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")

    version = _get(raw, "schema_version", "config.", int)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config.schema_version: expected {CONFIG_SCHEMA_VERSION}, got {version}"
        )
    model_d = _get(raw, "model", "config.", dict, required=False, default={})
    train_d = _get(raw, "train", "config.", dict, required=False, default={})
    data_d = _get(raw, "data", "config.", dict)
    out_dir = _get(raw, "out_dir", "config.", str)

    _check_known(model_d, TcnConfig, "config.model.")
    if "dilations" in model_d:
        model_d = dict(model_d, dilations=tuple(model_d["dilations"]))
    try:
        model = TcnConfig.from_dict(model_d)
    except DataError as exc:
        raise ConfigError(f"config.model: {exc}") from exc

    _check_known(train_d, TrainConfig, "config.train.")
    try:
        train = TrainConfig(**train_d)
    except DataError as exc:
        raise ConfigError(f"config.train: {exc}") from exc
    if seed_override is not None:
        train.seed = seed_override

    manifest = _get(data_d, "manifest", "config.data.", str)
    conds = _get(data_d, "train_conditions", "config.data.", list,
                 required=False, default=["playback_tts"])
    dev_conds = _get(data_d, "dev_conditions", "config.data.", (list, type(None)),
                     required=False, default=None)
    music = _get(data_d, "include_music_oracle", "config.data.", bool,
                 required=False, default=False)
    for k in data_d:
        if k not in ("manifest", "train_conditions", "dev_conditions", "include_music_oracle"):
            raise ConfigError(f"config.data.{k}: unknown field")

    manifest_path = (path.parent / manifest).resolve()
    if not manifest_path.is_file():
        raise ConfigError(f"config.data.manifest: file not found: {manifest_path}")
    return ExperimentConfig(
        model=model, train=train, manifest=manifest_path,
        out_dir=(path.parent / out_dir).resolve(),
        train_conditions=tuple(conds),
        dev_conditions=None if dev_conds is None else tuple(dev_conds),
        include_music_oracle=music,
    )


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.make_fixture:
        paths = fixtures.make_fixture_corpus(out / "corpus", seed=args.seed)
        gscv2, tts, music = paths["corpus"], paths["tts"], paths["music"]
    else:
        if not args.gscv2:
            raise UsageError("synth needs --gscv2 (or --make-fixture)")
        gscv2 = Path(args.gscv2)
        tts = Path(args.tts) if args.tts else None
        music = Path(args.music) if args.music else None
    corpora = {}
    if tts:
        corpora["playback_tts"] = tts
    if music:
        corpora["playback_music"] = music
    if not corpora:
        raise UsageError("synth needs at least one of --tts / --music")
    keywords = args.keywords.split(",") if args.keywords else None
    manifest = mixer.build_speechcommands_mix(
        gscv2, corpora, out / "mix", master_seed=args.seed,
        variants=args.variants, keywords=keywords,
    )
    header, entries = mixer.read_manifest(manifest)
    print(f"manifest {manifest}")
    print(f"entries {len(entries)} classes {len(header['classes'])} seed {args.seed}")
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config, seed_override=args.seed)
    if args.dry_run:
        print(json.dumps(cfg.resolved_dict(), indent=2, sort_keys=True))
        for playback in (False, True):
            c = count_cost(cfg.model, playback_mode=playback)
            print(f"cost fusion={c.fusion} playback={c.playback_mode} "
                  f"params={c.params} flops_per_output_frame={c.flops_per_output_frame}")
        return 0
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    data = training.load_data_bundle(
        cfg.manifest, train_conditions=cfg.train_conditions,
        dev_conditions=cfg.dev_conditions,
        include_music_oracle=cfg.include_music_oracle,
    )
    ckpt = training.fit(cfg.model, cfg.train, data,
                        log_path=cfg.out_dir / "train.log", quiet=args.quiet)
    model = ckpt.build_model()
    meta = {
        # "config" is reserved by the checkpoint container for the model config
        "experiment": cfg.resolved_dict(),
        "class_names": ckpt.class_names,
        "best_epoch": ckpt.epoch,
        "dev_metric": ckpt.dev_metric,
        "rng_state": ckpt.rng_state,
    }
    ckpt_path = cfg.out_dir / "checkpoint.npz"
    save_checkpoint(ckpt_path, model, meta)
    print(f"checkpoint {ckpt_path}")
    print(f"best_epoch {ckpt.epoch} dev_metric {ckpt.dev_metric:.6f}")
    return 0


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def score_rows(model, examples: list) -> list:
    """Rows for report_by_condition: confidence-thresholded decisions.

    Multiclass: prediction is the argmax, score its softmax confidence, and
    is_target marks utterances the classifier decided correctly, so the
    threshold trades rejected-correct against accepted-wrong decisions.
    Single-logit: plain detection scoring against binary labels.
    """
    seg = receptive_field(model.config)
    rows = []
    for ex in examples:
        pooled = training.score_example(model, ex, seg)
        if pooled.size == 1:
            score = float(1.0 / (1.0 + np.exp(-pooled[0])))
            pred = int(pooled[0] > 0)
            is_target = bool(ex.label)
        else:
            pred = int(pooled.argmax())
            score = float(_softmax(pooled)[pred])
            is_target = pred == ex.label
        rows.append({"condition": ex.condition, "prediction": pred, "label": ex.label,
                     "score": score, "is_target": is_target})
    return rows


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    examples, class_names = training.load_eval_examples(
        args.manifest, split=args.split,
        conditions=tuple(args.conditions.split(",")) if args.conditions else None,
    )
    if not examples:
        raise DataError(f"no {args.split} examples in {args.manifest}")
    model_classes = meta.get("class_names")
    if model_classes and list(model_classes) != list(class_names):
        raise DataError(
            f"checkpoint classes {model_classes} != manifest classes {class_names}"
        )
    rows = score_rows(model, examples)
    cost_pb = count_cost(model.config, playback_mode=True)
    cost_npb = count_cost(model.config, playback_mode=False)
    reports = []
    for far in args.far:
        text, records = metrics.report_by_condition(
            rows, far_target=far, cost=cost_pb, cost_non_playback=cost_npb)
        print(text)
        print()
        reports.append({"far_target": far, "records": records})
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
             "split": args.split, "reports": reports}, indent=2, sort_keys=True))
        print(f"report {args.out}")
    return 0


def cmd_aec(args) -> int:
    mixture = dsp.read_wav(args.mixture)
    reference = dsp.read_wav(args.reference)
    if args.kind == "nlms":
        out = nlms_cancel(mixture, reference)
    else:
        if not args.target:
            raise UsageError("wiener needs --target (oracle clean signal)")
        out = wiener_oracle_cancel(mixture, reference, dsp.read_wav(args.target))
    dsp.write_wav(args.out, out)
    half = len(mixture) // 2
    print(f"wrote {args.out}")
    print(f"erle_db_full {erle_db(mixture, out):.4f}")
    print(f"erle_db_tail {erle_db(mixture, out, start=half):.4f}")
    return 0


def cmd_cost(args) -> int:
    base = TcnConfig()
    if args.config:
        cfg = load_experiment_config(args.config)
        base = cfg.model
    rows = []
    for fusion in FUSIONS:
        c = dataclasses.replace(base, fusion=fusion)
        for playback in (False, True):
            r = count_cost(c, playback_mode=playback)
            rows.append((fusion, "playback" if playback else "non_playback",
                         r.params, r.flops_per_output_frame))
    headers = ("fusion", "state", "params", "flops_per_output_frame")
    widths = [max(len(headers[i]), *(len(str(r[i])) for r in rows)) for i in range(4)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    print(fmt.format(*headers))
    for r in rows:
        print(fmt.format(*[str(v) for v in r]))
    print(f"receptive_field {receptive_field(base)}")
    return 0


# --- wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bargein", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="synth|train|eval|aec|cost")

    p = sub.add_parser("synth", help="synthesize the playback dataset", parents=[])
    p.add_argument("--gscv2", help="speech-commands style corpus directory")
    p.add_argument("--tts", help="directory of speech-like interferer WAVs")
    p.add_argument("--music", help="directory of music-like interferer WAVs")
    p.add_argument("--make-fixture", action="store_true",
                   help="generate the bundled synthetic corpus first")
    p.add_argument("--keywords", help="comma-separated keyword filter")
    p.add_argument("--variants", type=int, default=1,
                   help="playback mixtures per clip per condition")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker cap (single-process now)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config train.seed")
    p.add_argument("--dry-run", action="store_true",
                   help="print resolved config and cost report, skip training")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (single-process now)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--conditions", help="comma-separated condition filter")
    p.add_argument("--far", type=float, action="append", default=None,
                   help="FAR target(s) for the FRR column (repeatable)")
    p.add_argument("--out", help="write the report as JSON here")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (single-process now)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aec", help="run a classical echo canceller on WAV files")
    p.add_argument("kind", choices=("nlms", "wiener"))
    p.add_argument("--mixture", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--target", help="oracle clean signal (wiener only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aec)

    p = sub.add_parser("cost", help="parameter/FLOP table over fusion modes")
    p.add_argument("--config", help="experiment config supplying the model section")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "far", None) is None and args.command == "eval":
        args.far = [0.1]
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ColaError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
