# backend/tools/run_experiments.py
"""
Experiment recipes on the synthetic benchmark. Each recipe prints a TSV table
and writes it under --out.

  python tools/run_experiments.py frame-vs-utterance
  python tools/run_experiments.py softmax-vs-e2e
  python tools/run_experiments.py pretrain
  python tools/run_experiments.py architectures
  python tools/run_experiments.py model-size --sizes 1,3,5 --repeats 3
  python tools/run_experiments.py noise --levels 0,0.3,1,3
"""
import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import manifests  # noqa: E402
import settings  # noqa: E402
from evaluation import EvalSet, evaluate_set  # noqa: E402
from networks import count_multiply_adds, count_parameters, match_parameter_count  # noqa: E402
from synthetic_data import eval_set, oracle_eer, synthesize  # noqa: E402
from training import sweep_model_size, train, train_end_to_end, train_softmax  # noqa: E402


def _corpus(cfg: settings.ExperimentConfig):
    corpus = synthesize(cfg.synth)
    return corpus, eval_set(corpus)


def _net(cfg: settings.ExperimentConfig, **update) -> settings.TrainConfig:
    """Train config with network fields overridden."""
    return cfg.train.model_copy(update={"network": cfg.network.model_copy(update=update)})


def _score(params, evals: EvalSet, cfg: settings.ExperimentConfig) -> Dict[str, float]:
    """Raw and t-norm EER; the t-norm cohort is the held-out cohort speakers."""
    report = evaluate_set(params, evals, tnorm=True, max_enroll=cfg.evaluation.max_enroll_utterances,
                          cohort_size=cfg.evaluation.cohort_size)
    return {"eer_raw": report.eer_raw, "eer_tnorm": report.eer_tnorm}


def frame_vs_utterance(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    corpus, evals = _corpus(cfg)
    rows = []
    utterance = cfg.network.model_copy(update={"network": "dnn"})
    frame = match_parameter_count(utterance, cfg.network.model_copy(update={"network": "frame_dnn"}))
    for network in (frame, utterance):
        tc = cfg.train.model_copy(update={"network": network}).model_copy(update={"loss": "softmax", "dropout": args.dropout})
        params = train_softmax(tc, corpus.train).params
        rows.append({"level": network.network, "parameters": count_parameters(params), **_score(params, evals, cfg)})
    return pd.DataFrame(rows)


def softmax_vs_e2e(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    corpus, evals = _corpus(cfg)
    rows = []
    for loss in ("softmax", "e2e"):
        params = train(cfg.train.model_copy(update={"loss": loss}), corpus.train).params
        rows.append({"loss": loss, **_score(params, evals, cfg)})
    return pd.DataFrame(rows)


def pretrain(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    corpus, evals = _corpus(cfg)
    soft = train_softmax(cfg.train.model_copy(update={"loss": "softmax"}), corpus.train).params
    tuned = train_end_to_end(cfg.train, corpus.train, init=soft).params
    scratch = train_end_to_end(cfg.train, corpus.train).params
    return pd.DataFrame([
        {"init": "softmax only", **_score(soft, evals, cfg)},
        {"init": "random", **_score(scratch, evals, cfg)},
        {"init": "softmax", **_score(tuned, evals, cfg)},
    ])


def architectures(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    corpus, evals = _corpus(cfg)
    variants = {
        "dnn-small": {"network": "dnn", "hidden_layers": cfg.network.hidden_layers},
        "dnn-best": {"network": "dnn", "hidden_layers": cfg.network.hidden_layers + 1},
        "lstm": {"network": "lstm"},
    }
    rows = []
    for name, update in variants.items():
        tc = _net(cfg, **update)
        if tc.network.network == "lstm":
            tc = tc.model_copy(update={"learning_rate": args.lstm_learning_rate, "clip_norm": args.lstm_clip_norm})
        params = train_end_to_end(tc, corpus.train).params
        rows.append({
            "network": name,
            "parameters": count_parameters(params),
            "multiply_adds": count_multiply_adds(tc.network),
            **_score(params, evals, cfg),
        })
    return pd.DataFrame(rows)


def model_size(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    corpus, evals = _corpus(cfg)
    return sweep_model_size(cfg.train, corpus.train, evals, args.sizes, max_enroll=cfg.evaluation.max_enroll_utterances,
                            repeats=args.repeats)


def noise(cfg: settings.ExperimentConfig, args: argparse.Namespace) -> pd.DataFrame:
    rows = []
    for level in args.levels:
        synth = cfg.synth.model_copy(update={"noise_level": level})
        corpus = synthesize(synth)
        evals = eval_set(corpus)
        params = train_end_to_end(cfg.train, corpus.train).params
        report = evaluate_set(params, evals, max_enroll=cfg.evaluation.max_enroll_utterances)
        rows.append({"noise_level": level, "eer_raw": report.eer_raw, "eer_oracle": oracle_eer(synth, evals.trials)})
    return pd.DataFrame(rows)


RECIPES: Dict[str, Callable[[settings.ExperimentConfig, argparse.Namespace], pd.DataFrame]] = {
    "frame-vs-utterance": frame_vs_utterance,
    "softmax-vs-e2e": softmax_vs_e2e,
    "pretrain": pretrain,
    "architectures": architectures,
    "model-size": model_size,
    "noise": noise,
}


def _numbers(cast):
    def parse(text: str) -> List:
        return [cast(s) for s in text.split(",") if s.strip()]
    return parse


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Synthetic-benchmark experiment recipes")
    parser.add_argument("recipe", choices=sorted(RECIPES))
    parser.add_argument("--config", default=str(settings.CONFIG_PATH))
    parser.add_argument("--out", default=str(settings.OUTPUT_DIR / "experiments"))
    parser.add_argument("--steps", type=int, default=None, help="override training steps")
    parser.add_argument("--dropout", type=float, default=0.1, help="softmax dropout for frame-vs-utterance")
    parser.add_argument("--sizes", type=_numbers(int), default=[1, 3, 5])
    parser.add_argument("--repeats", type=int, default=3, help="training seeds averaged per model size")
    parser.add_argument("--lstm-learning-rate", type=float, default=0.02)
    parser.add_argument("--lstm-clip-norm", type=float, default=1.0)
    parser.add_argument("--levels", type=_numbers(float), default=[0.0, 0.3, 1.0, 3.0])
    args = parser.parse_args(argv)

    cfg = settings.load_config(Path(args.config))
    if args.steps is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"steps": args.steps})})
    table = RECIPES[args.recipe](cfg, args)
    path = manifests.write_table(table, Path(args.out) / f"{args.recipe}.tsv")
    print(table.to_csv(sep="\t", index=False, float_format=manifests.FLOAT_FORMAT), end="")
    print(f"[OK] {args.recipe} -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
