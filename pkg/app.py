# backend/app.py
"""
Command-line front door.

  python app.py extract WAV_DIR --out DIR
  python app.py synth [--seed N] --out DIR
  python app.py train MANIFEST [--init CHECKPOINT] --out DIR
  python app.py enroll CHECKPOINT MANIFEST [--speaker ID] --out DIR
  python app.py eval CHECKPOINT MODELS_DIR TRIALS TEST_MANIFEST [--tnorm --cohort DIR|MANIFEST] [--det-out PATH]
  python app.py sweep MANIFEST ENROLL_MANIFEST TEST_MANIFEST TRIALS --sizes 1,3,5 [--repeats N]
"""
import argparse
import sys
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

import manifests
import settings
import storage_io
from errors import ContractError, EmptyInputError, VerificationError
from etl_features import extract_directory
from evaluation import Cohort, TrialEvaluator, enroll_cohort, evaluate
from networks import NetworkParams
from scoring import SpeakerModel, enroll
from synthetic_data import generate_corpus
from training import load_dataset, sweep_model_size, train

MODEL_SUFFIX = ".svspk"


@lru_cache(maxsize=4)
def get_config(path: str, seed: Optional[int] = None) -> settings.ExperimentConfig:
    cfg = settings.cached_config(path)
    return cfg if seed is None else cfg.with_seed(seed)


def _config(args: argparse.Namespace) -> settings.ExperimentConfig:
    return get_config(str(args.config), args.seed)


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else settings.OUTPUT_DIR / args.command


def _load_models(models_dir: Path, speakers: Sequence[str]) -> Dict[str, SpeakerModel]:
    models = {}
    for spk in speakers:
        path = models_dir / f"{spk}{MODEL_SUFFIX}"
        if not path.exists():
            raise EmptyInputError(f"no speaker model for {spk!r} (expected {path})")
        models[spk] = storage_io.load_speaker_model(path)
    return models


def _load_cohort(source: Path, params: NetworkParams, cfg: settings.ExperimentConfig) -> Cohort:
    """A directory of impostor speaker models, or a manifest of impostor utterances to enroll."""
    size = cfg.evaluation.cohort_size
    if source.is_dir():
        files = sorted(source.glob(f"*{MODEL_SUFFIX}"))[:size]
        return Cohort([storage_io.load_speaker_model(p) for p in files])
    df = manifests.read_manifest(source)
    by_speaker = {s: g["utterance_id"].tolist() for s, g in df.groupby("speaker_id", sort=True)}
    return enroll_cohort(params, manifests.load_feature_map(df), by_speaker, size,
                         cfg.evaluation.max_enroll_utterances)


# ------------------------------ commands ------------------------------
def cmd_extract(args: argparse.Namespace) -> int:
    extract_directory(Path(args.wav_dir), _out_dir(args), _config(args).features)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    paths = generate_corpus(_config(args).synth, out)
    for name, path in paths.items():
        print(f"[OK] {name} -> {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    dataset = load_dataset(Path(args.manifest))
    init = storage_io.load_checkpoint(args.init) if args.init else None
    result = train(cfg.train, dataset, init)
    checkpoint = storage_io.save_checkpoint(out / "model.svmodel", result.params)
    log = manifests.write_table(result.log, out / "train_log.tsv")
    print(f"[OK] checkpoint -> {checkpoint}")
    print(f"[OK] log -> {log}")
    return 0


def cmd_enroll(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    params = storage_io.load_checkpoint(args.checkpoint)
    df = manifests.read_manifest(args.manifest)
    if args.speaker:
        df = df[df["speaker_id"] == args.speaker]
        if df.empty:
            raise ContractError(f"speaker {args.speaker!r} has no utterances in {args.manifest}")
    if df.empty:
        raise EmptyInputError(f"manifest {args.manifest} lists no utterances")
    feats = manifests.load_feature_map(df)
    for spk, group in df.groupby("speaker_id", sort=True):
        model = enroll(params, [feats[u] for u in group["utterance_id"]], speaker_id=spk,
                       max_utterances=cfg.evaluation.max_enroll_utterances)
        path = storage_io.save_speaker_model(out / f"{spk}{MODEL_SUFFIX}", model)
        print(f"[OK] {spk} ({model.count} utterances) -> {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    params = storage_io.load_checkpoint(args.checkpoint)
    trials = manifests.read_trials(args.trials)
    if trials.empty:
        raise ContractError(f"trial list {args.trials} is empty")
    models = _load_models(Path(args.models), sorted(set(trials["claimed_speaker"])))
    test = manifests.read_manifest(args.test_manifest)
    features = manifests.load_feature_map(test[test["utterance_id"].isin(set(trials["test_id"]))])
    tnorm = args.tnorm or cfg.evaluation.tnorm
    if tnorm and not args.cohort:
        raise ContractError("t-norm needs --cohort (impostor models or a manifest of speakers outside the trial list)")
    cohort = _load_cohort(Path(args.cohort), params, cfg) if tnorm else None
    report = evaluate(params, models, trials, features, tnorm=tnorm, cohort=cohort)
    for name, path in report.write(out, Path(args.det_out) if args.det_out else None).items():
        print(f"[OK] {name} -> {path}")
    return 0


def _parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return sizes


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    dataset = load_dataset(Path(args.manifest))
    eval_set = TrialEvaluator(args.enroll_manifest, args.test_manifest, args.trials).eval_set()
    table: pd.DataFrame = sweep_model_size(cfg.train, dataset, eval_set, args.sizes,
                                           max_enroll=cfg.evaluation.max_enroll_utterances, repeats=args.repeats)
    path = manifests.write_table(table, out / "sweep.tsv")
    print(f"[OK] sweep -> {path}")
    return 0


# ------------------------------ parser ------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(settings.CONFIG_PATH), help="experiment config (flat YAML or key=value lines)")
    common.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(prog="app.py", description="Text-dependent speaker verification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="WAV directory -> FBNK features + manifest")
    p.add_argument("wav_dir")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a network from a manifest")
    p.add_argument("manifest")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", parents=[common], help="build speaker models")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--speaker", default=None, help="enroll only this speaker")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("eval", parents=[common], help="score a trial list")
    p.add_argument("checkpoint")
    p.add_argument("models", help="directory of speaker models")
    p.add_argument("trials")
    p.add_argument("test_manifest")
    p.add_argument("--tnorm", action="store_true")
    p.add_argument("--cohort", default=None, help="impostor speaker models (directory) or utterances (manifest) for t-norm")
    p.add_argument("--det-out", default=None, help="write (far, frr) points here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="EER against speaker model size")
    p.add_argument("manifest")
    p.add_argument("enroll_manifest")
    p.add_argument("test_manifest")
    p.add_argument("trials")
    p.add_argument("--sizes", type=_parse_sizes, default=[1, 2, 3, 4, 5, 6, 7, 8])
    p.add_argument("--repeats", type=int, default=1, help="average the EER over this many training seeds")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationError as e:
        print(f"[app] ERROR: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
