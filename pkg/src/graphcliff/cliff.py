"""Benchmark CSV ingestion, activity-cliff annotation and cliff-stratified splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from rapidfuzz.distance import Levenshtein
from rapidfuzz.process import cdist

from .chem import Molecule, SmilesError, murcko_scaffold, parse_smiles
from .fingerprint import FpConfig, ecfp, tanimoto_matrix

log = logging.getLogger(__name__)

DEFAULT_COLUMNS = {"smiles": "smiles", "pki": "y", "cliff": "cliff_mol", "split": "split"}


class DatasetError(ValueError):
    """Problems with a dataset file: missing columns, no usable rows."""


@dataclass
class CompoundRecord:
    id: int
    smiles: str
    pki: float
    cliff: bool | None = None
    split: str | None = None
    mol: Molecule | None = field(default=None, repr=False, compare=False)

    def molecule(self) -> Molecule:
        if self.mol is None:
            self.mol = parse_smiles(self.smiles)
        return self.mol


@dataclass
class SkipReport:
    row: int
    smiles: str
    reason: str


@dataclass
class Dataset:
    records: list[CompoundRecord]
    skipped: list[SkipReport]
    path: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _parse_flag(text: str) -> bool | None:
    text = text.strip().lower()
    if text in ("", "nan", "none"):
        return None
    if text in ("1", "1.0", "true", "yes"):
        return True
    if text in ("0", "0.0", "false", "no"):
        return False
    raise ValueError(f"cannot read {text!r} as a flag")


def load_dataset(path: str | Path, column_map: dict[str, str] | None = None) -> Dataset:
    """Read a benchmark CSV.  Rows whose SMILES do not parse are skipped and reported.

    ``column_map`` maps the logical fields ``smiles``, ``pki``, ``cliff`` and
    ``split`` to header names.  ``smiles`` and ``pki`` columns must exist; the
    other two are optional.
    """
    columns = {**DEFAULT_COLUMNS, **(column_map or {})}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise DatasetError(f"{path}: empty file")
        for key in ("smiles", "pki"):
            if columns[key] not in header:
                raise DatasetError(f"{path}: missing column {columns[key]!r} (for {key})")
        has_cliff = columns["cliff"] in header
        has_split = columns["split"] in header
        records: list[CompoundRecord] = []
        skipped: list[SkipReport] = []
        for row_no, row in enumerate(reader, start=2):
            smiles = (row[columns["smiles"]] or "").strip()
            try:
                mol = parse_smiles(smiles)
                pki = float(row[columns["pki"]])
                if not math.isfinite(pki):
                    raise ValueError(f"non-finite label {pki}")
                cliff = _parse_flag(row[columns["cliff"]]) if has_cliff else None
                split = (row[columns["split"]] or "").strip().lower() or None if has_split else None
                if split not in (None, "train", "test"):
                    raise ValueError(f"unknown split {split!r}")
            except (SmilesError, ValueError) as exc:
                skipped.append(SkipReport(row_no, smiles, str(exc)))
                continue
            records.append(CompoundRecord(len(records), smiles, pki, cliff, split, mol))
    if not records and not skipped:
        raise DatasetError(f"{path}: no data rows")
    if not records:
        raise DatasetError(f"{path}: all {len(skipped)} rows were skipped")
    for s in skipped:
        log.warning("%s row %d skipped (%s): %s", path, s.row, s.reason, s.smiles)
    return Dataset(records, skipped, str(path))


@dataclass(frozen=True)
class CliffPair:
    i: int
    j: int
    sim_sub: float
    sim_scaf: float
    sim_smiles: float
    delta_pki: float
    is_cliff: bool


@dataclass
class CliffAnnotation:
    pairs: list[CliffPair]
    flags: list[bool]
    sim_threshold: float
    fold: float

    def cliff_pairs(self) -> list[CliffPair]:
        return [p for p in self.pairs if p.is_cliff]


def similarity_matrices(
    smiles: list[str], mols: list[Molecule], fp: FpConfig | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Substructure, scaffold and SMILES similarity matrices (n x n)."""
    fp = fp or FpConfig()
    sub_bits = np.array([ecfp(m, fp).to_array() for m in mols])
    scaffolds = [murcko_scaffold(m) for m in mols]
    scaf_bits = np.array([ecfp(s, fp).to_array() for s in scaffolds])
    sim_sub = tanimoto_matrix(sub_bits)
    sim_scaf = tanimoto_matrix(scaf_bits)
    # empty scaffolds have no bits, so tanimoto_matrix already yields 0 for them
    sim_smiles = cdist(smiles, smiles, scorer=Levenshtein.normalized_similarity, dtype=np.float64)
    return sim_sub, sim_scaf, sim_smiles


def annotate_cliffs(
    records: list[CompoundRecord],
    sim_threshold: float = 0.9,
    fold: float = 10.0,
    fp: FpConfig | None = None,
) -> CliffAnnotation:
    """Score all pairs and flag activity cliffs.

    A pair is similar when any of the three similarities is strictly above
    ``sim_threshold``; it is a cliff when also ``|delta pKi| >= log10(fold)``.
    """
    if len(records) < 2:
        raise ValueError("need at least two records to annotate cliffs")
    if not 0.0 < sim_threshold < 1.0:
        raise ValueError(f"sim_threshold must be in (0, 1), got {sim_threshold}")
    if fold <= 1.0:
        raise ValueError(f"fold must be > 1, got {fold}")
    smiles = [r.smiles for r in records]
    mols = [r.molecule() for r in records]
    sim_sub, sim_scaf, sim_smiles = similarity_matrices(smiles, mols, fp)
    pki = np.array([r.pki for r in records])
    delta = pki[None, :] - pki[:, None]
    # tolerance keeps exact 10-fold pairs on the cliff side despite float noise
    potency = np.abs(delta) >= math.log10(fold) - 1e-9
    similar = (sim_sub > sim_threshold) | (sim_scaf > sim_threshold) | (sim_smiles > sim_threshold)
    cliff = similar & potency
    n = len(records)
    iu, ju = np.triu_indices(n, k=1)
    pairs = [
        CliffPair(int(i), int(j), float(sim_sub[i, j]), float(sim_scaf[i, j]), float(sim_smiles[i, j]),
                  float(delta[i, j]), bool(cliff[i, j]))
        for i, j in zip(iu, ju)
    ]
    np.fill_diagonal(cliff, False)
    flags = cliff.any(axis=1).tolist()
    return CliffAnnotation(pairs, flags, sim_threshold, fold)


def apply_flags(records: list[CompoundRecord], annotation: CliffAnnotation) -> list[CompoundRecord]:
    return [replace(r, cliff=flag) for r, flag in zip(records, annotation.flags)]


def stratified_split(records: list[CompoundRecord], test_frac: float = 0.2, seed: int = 0) -> list[CompoundRecord]:
    """Assign train/test so the cliff ratio in the test set tracks the global one.

    Within each stratum (cliff, non-cliff) the records are shuffled with ``seed``
    and round(test_frac * stratum size) of them go to test.  Missing cliff flags
    count as non-cliff.
    """
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    rng = np.random.default_rng(seed)
    out = list(records)
    for stratum in (True, False):
        idx = [k for k, r in enumerate(records) if bool(r.cliff) is stratum]
        if not idx:
            continue
        order = rng.permutation(len(idx))
        n_test = int(math.floor(test_frac * len(idx) + 0.5))
        test = {idx[k] for k in order[:n_test]}
        for k in idx:
            out[k] = replace(records[k], split="test" if k in test else "train")
    return out
