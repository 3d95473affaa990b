"""Morgan/ECFP bit fingerprints, Tanimoto and normalized Levenshtein similarity."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from rapidfuzz.distance import Levenshtein

from .chem import Molecule

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
# Mixed into every hash so identifiers are stable across runs and platforms.
HASH_SEED = 0x6772617068636C66


def fnv1a64(values: tuple[int, ...], seed: int = HASH_SEED) -> int:
    """FNV-1a over the little-endian 8-byte encoding of ``(seed, *values)``."""
    h = _FNV_OFFSET
    payload = struct.pack(f"<{len(values) + 1}Q", seed & _MASK64, *(v & _MASK64 for v in values))
    for byte in payload:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class FpConfig:
    radius: int = 2
    nbits: int = 1024

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.nbits <= 0 or self.nbits & (self.nbits - 1):
            raise ValueError(f"nbits must be a power of two, got {self.nbits}")


@dataclass(frozen=True)
class Fingerprint:
    nbits: int = 1024
    on_bits: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if any(b < 0 or b >= self.nbits for b in self.on_bits):
            raise ValueError("fingerprint bit index out of range")

    def __len__(self) -> int:
        return len(self.on_bits)

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.nbits, dtype=bool)
        arr[list(self.on_bits)] = True
        return arr

    def hex(self) -> str:
        """Bit ``i`` is bit ``i`` of the big-endian integer, zero-padded to nbits/4 digits."""
        value = 0
        for b in self.on_bits:
            value |= 1 << b
        return format(value, f"0{self.nbits // 4}x")

    @classmethod
    def from_hex(cls, text: str, nbits: int | None = None) -> Fingerprint:
        nbits = nbits or len(text) * 4
        value = int(text, 16)
        return cls(nbits, frozenset(i for i in range(nbits) if value >> i & 1))


def atom_invariants(mol: Molecule) -> list[int]:
    return [
        fnv1a64((a.atomic_number, a.degree, a.formal_charge, a.implicit_h, int(a.aromatic), int(a.in_ring)))
        for a in mol.atoms
    ]


def morgan_identifiers(mol: Molecule, radius: int = 2) -> set[int]:
    """All atom-environment identifiers for radii 0..radius, deduplicated by value."""
    ids = atom_invariants(mol)
    found = set(ids)
    adj = mol.neighbors()
    for r in range(1, radius + 1):
        new = []
        for k in range(mol.n_atoms):
            env = sorted((int(bond.order), ids[other]) for other, bond in adj[k])
            flat = [v for pair in env for v in pair]
            new.append(fnv1a64((r, ids[k], *flat)))
        ids = new
        found.update(ids)
    return found


def ecfp(mol: Molecule, cfg: FpConfig | None = None) -> Fingerprint:
    cfg = cfg or FpConfig()
    if mol.n_atoms == 0:
        return Fingerprint(cfg.nbits)
    return Fingerprint(cfg.nbits, frozenset(i % cfg.nbits for i in morgan_identifiers(mol, cfg.radius)))


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|A & B| / |A | B|; two empty fingerprints give 0.0."""
    if a.nbits != b.nbits:
        raise ValueError(f"fingerprint widths differ: {a.nbits} vs {b.nbits}")
    union = len(a.on_bits | b.on_bits)
    if union == 0:
        return 0.0
    return len(a.on_bits & b.on_bits) / union


def tanimoto_matrix(bits: np.ndarray) -> np.ndarray:
    """Pairwise Tanimoto for a (n, nbits) boolean matrix; empty-vs-empty is 0."""
    x = bits.astype(np.float64)
    inter = x @ x.T
    counts = x.sum(axis=1)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / union, 0.0)
    return sim


def levenshtein_distance(a: str, b: str) -> int:
    return Levenshtein.distance(a, b)


def levenshtein_similarity(a: str, b: str) -> float:
    """1 - lev(a, b) / max(|a|, |b|); two empty strings are identical (1.0)."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / longest
