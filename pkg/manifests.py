# backend/manifests.py
"""Tab-separated tables: manifests, trial lists, scores, summaries, logs."""
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np
import pandas as pd

import storage_io
from errors import EmptyInputError, FormatError
from features import FeatureMatrix

MANIFEST_COLUMNS = ["utterance_id", "speaker_id", "path"]
TRIAL_COLUMNS = ["trial_id", "test_id", "claimed_speaker", "label"]
SCORE_COLUMNS = ["trial_id", "raw", "tnorm", "label"]
LABELS = ("target", "nontarget")
FLOAT_FORMAT = "%.8f"

PathLike = Union[str, Path]


def _read_tsv(path: PathLike, columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise EmptyInputError(f"missing table: {path}")
    try:
        df = pd.read_csv(path, sep="\t", header=None, dtype=str, keep_default_na=False, comment=None)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: {e}") from e
    if df.shape[1] != len(columns):
        raise FormatError(f"{path}: expected {len(columns)} columns ({', '.join(columns)}), found {df.shape[1]}")
    df.columns = columns
    return df


def _write_tsv(df: pd.DataFrame, path: PathLike, header: bool) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, sep="\t", header=header, index=False, float_format=FLOAT_FORMAT, na_rep="-", lineterminator="\n")
    return path


def _fmt(value: object) -> str:
    if value is None:
        return "-"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


# ------------------------------ manifests ------------------------------
def read_manifest(path: PathLike) -> pd.DataFrame:
    """Manifest rows with feature paths resolved against the manifest's directory."""
    path = Path(path)
    df = _read_tsv(path, MANIFEST_COLUMNS)
    dupes = df["utterance_id"][df["utterance_id"].duplicated()].unique().tolist()
    if dupes:
        raise FormatError(f"{path}: duplicate utterance ids {dupes[:5]}")
    df["path"] = [str(p if Path(p).is_absolute() else path.parent / p) for p in df["path"]]
    return df


def write_manifest(df: pd.DataFrame, path: PathLike) -> Path:
    """Feature paths under the manifest's directory are stored relative to it."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: str) -> str:
        full = Path(p).resolve()
        return full.relative_to(base).as_posix() if base in full.parents else str(p)

    out = df[MANIFEST_COLUMNS].copy()
    out["path"] = [rel(p) for p in out["path"]]
    return _write_tsv(out, path, header=False)


def load_feature_map(manifest: pd.DataFrame) -> Dict[str, FeatureMatrix]:
    return {r.utterance_id: storage_io.read_features(r.path) for r in manifest.itertuples(index=False)}


# ------------------------------ trials / scores ------------------------------
def read_trials(path: PathLike) -> pd.DataFrame:
    df = _read_tsv(path, TRIAL_COLUMNS)
    bad = sorted(set(df["label"]) - set(LABELS))
    if bad:
        raise FormatError(f"{path}: trial labels must be target or nontarget, found {bad}")
    return df


def write_trials(df: pd.DataFrame, path: PathLike) -> Path:
    return _write_tsv(df[TRIAL_COLUMNS], path, header=False)


def write_scores(df: pd.DataFrame, path: PathLike) -> Path:
    out = df[SCORE_COLUMNS].copy()
    out["raw"] = out["raw"].astype(float)
    out["tnorm"] = pd.to_numeric(out["tnorm"], errors="coerce").astype(float)
    return _write_tsv(out, path, header=False)


def read_scores(path: PathLike) -> pd.DataFrame:
    df = _read_tsv(path, SCORE_COLUMNS)
    df["raw"] = df["raw"].astype(float)
    df["tnorm"] = pd.to_numeric(df["tnorm"].replace("-", np.nan), errors="coerce")
    return df


# ------------------------------ summaries / tables ------------------------------
def write_summary(values: Mapping[str, object], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in values.items()), encoding="utf-8")
    return path


def read_summary(path: PathLike) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{path}: summary line without '=': {line!r}")
            out[key] = value
    return out


def write_table(df: pd.DataFrame, path: PathLike) -> Path:
    """Training logs, sweep tables and DET points carry a header row."""
    return _write_tsv(df, path, header=True)
