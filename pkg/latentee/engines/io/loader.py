"""
Data ingestion - wide subjects file and long outcomes file
"""
import logging
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd

from latentee.engines.io.config import ModelConfig
from latentee.engines.model.data import Dataset, SubjectData
from latentee.engines.model.spec import ModelSpec
from latentee.errors import JoinError, MissingCovariate, ParseError

logger = logging.getLogger(__name__)

ID_COLUMN = "id"
OCCASION_COLUMN = "occasion"


def _read_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, dtype={ID_COLUMN: str}, skip_blank_lines=True, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty; a header row is required", path=str(path), line=1)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed CSV: {e}", path=str(path))
    return frame


def _require_columns(frame: pd.DataFrame, columns: List[str], path: str):
    for column in columns:
        if column not in frame.columns:
            raise ParseError(f"missing column '{column}'", path=path, line=1, column=column)


def _numeric(frame: pd.DataFrame, column: str, path: str, allow_missing: bool,
             missing_error=ParseError) -> np.ndarray:
    """Column as floats; line numbers count the header as line 1"""
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() & raw.notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"non-numeric value '{raw.iloc[row]}'", path=path, line=row + 2, column=column)
    infinite = np.isinf(values.to_numpy(dtype=float))
    if infinite.any():
        row = int(np.flatnonzero(infinite)[0])
        raise ParseError(f"non-finite value '{raw.iloc[row]}'", path=path, line=row + 2, column=column)
    if not allow_missing and values.isna().any():
        row = int(np.flatnonzero(values.isna().to_numpy())[0])
        raise missing_error("empty cell", path=path, line=row + 2, column=column)
    return values.to_numpy(dtype=float)


def load_data(subjects_path: Union[str, Path], outcomes_path: Union[str, Path],
              config: ModelConfig, spec: ModelSpec = None) -> Dataset:
    """
    Load the two-file data bundle.

    Args:
        subjects_path: Wide file with id, subject covariates and surrogates
        outcomes_path: Long file with id, occasion, response and occasion covariates
        config: Model configuration naming the columns
        spec: Spec to attach (built from config when omitted)

    Returns:
        Dataset; subjects without outcome rows are kept

    Raises:
        ParseError: malformed file or bad cell
        JoinError: outcome row for an unknown subject
        MissingCovariate: empty covariate cell
    """
    subjects = _read_csv(subjects_path)
    outcomes = _read_csv(outcomes_path)
    return build_dataset(subjects, outcomes, config, spec, str(subjects_path), str(outcomes_path))


def build_dataset(subjects: pd.DataFrame, outcomes: pd.DataFrame, config: ModelConfig, spec: ModelSpec = None,
                  s_path: str = "<subjects>", o_path: str = "<outcomes>") -> Dataset:
    """Dataset from in-memory tables laid out like the two files; same errors as load_data"""
    spec = spec or config.to_spec()
    for frame in (subjects, outcomes):
        if ID_COLUMN in frame.columns:
            frame[ID_COLUMN] = frame[ID_COLUMN].map(lambda v: v if pd.isna(v) else str(v))
    _require_columns(subjects, [ID_COLUMN, *spec.subject_covariates, *spec.surrogates], s_path)
    response = config.outcome.response
    _require_columns(outcomes, [ID_COLUMN, OCCASION_COLUMN, response, *spec.occasion_covariates], o_path)

    ids = subjects[ID_COLUMN]
    if ids.isna().any():
        row = int(np.flatnonzero(ids.isna().to_numpy())[0])
        raise ParseError("empty subject id", path=s_path, line=row + 2, column=ID_COLUMN)
    dupes = ids[ids.duplicated()]
    if len(dupes):
        row = int(dupes.index[0])
        raise ParseError(f"duplicate subject id '{dupes.iloc[0]}'", path=s_path, line=row + 2, column=ID_COLUMN)

    W = np.column_stack([_numeric(subjects, c, s_path, False, MissingCovariate) for c in spec.subject_covariates]) \
        if spec.r else np.zeros((len(subjects), 0))
    X = np.column_stack([_numeric(subjects, c, s_path, True) for c in spec.surrogates])

    known = set(ids)
    orphan = ~outcomes[ID_COLUMN].isin(known)
    if orphan.any():
        row = int(np.flatnonzero(orphan.to_numpy())[0])
        bad_id = outcomes[ID_COLUMN].iloc[row]
        raise JoinError(f"outcome row references unknown subject '{bad_id}'", path=o_path, line=row + 2,
                        column=ID_COLUMN)
    occ = _numeric(outcomes, OCCASION_COLUMN, o_path, False)
    y = _numeric(outcomes, response, o_path, False)
    Z = np.column_stack([_numeric(outcomes, c, o_path, False, MissingCovariate) for c in spec.occasion_covariates]) \
        if spec.q else np.zeros((len(outcomes), 0))

    rows_by_id = {}
    for row, sid in enumerate(outcomes[ID_COLUMN]):
        rows_by_id.setdefault(sid, []).append(row)

    records = []
    for i, sid in enumerate(ids):
        rows = rows_by_id.get(sid, [])
        rows = sorted(rows, key=lambda r: occ[r])
        expected = np.arange(1, len(rows) + 1)
        if rows and not np.array_equal(occ[rows], expected):
            raise ParseError(f"occasions for subject '{sid}' must be 1..{len(rows)} without gaps",
                             path=o_path, line=rows[0] + 2, column=OCCASION_COLUMN)
        x = X[i]
        records.append(SubjectData(
            id=str(sid), x=x, mask=~np.isnan(x), w=W[i],
            z=Z[rows].reshape(len(rows), spec.q), y=y[rows],
        ))
    logger.info(f"Loaded {len(records)} subjects and {len(outcomes)} outcome rows")
    return Dataset(spec, records)


def write_dataset(dataset: Dataset, subjects_path: Union[str, Path], outcomes_path: Union[str, Path],
                  response: str = "y"):
    """Write a dataset as the two-file bundle"""
    spec = dataset.spec
    wide = pd.DataFrame({ID_COLUMN: dataset.ids})
    for k, name in enumerate(spec.subject_covariates):
        wide[name] = dataset.W[:, k]
    for j, name in enumerate(spec.surrogates):
        wide[name] = dataset.X[:, j]
    wide.to_csv(subjects_path, index=False, float_format="%.17g")

    rows = []
    for s in dataset.subjects:
        for t in range(s.n_i):
            rows.append([s.id, t + 1, s.y[t], *s.z[t]])
    long = pd.DataFrame(rows, columns=[ID_COLUMN, OCCASION_COLUMN, response, *spec.occasion_covariates])
    long.to_csv(outcomes_path, index=False, float_format="%.17g")
    logger.info(f"Wrote {dataset.N} subjects to {subjects_path} and {len(long)} outcome rows to {outcomes_path}")
