"""Training loop, metrics, checkpoint container and warm-start."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .chem import Molecule, parse_smiles
from .cliff import CompoundRecord
from .graphnn import FEATURE_VERSION, ModelConfig, as_params, collate, init_params, model_forward, predict

log = logging.getLogger(__name__)

MAGIC = b"GCLFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_frac: float = 0.1
    patience: int = 30
    clip_norm: float = 5.0
    stop_below: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "learning_rate", "adam_eps", "patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")
        if not 0.0 <= self.val_frac < 0.5:
            raise ValueError(f"val_frac must be in [0, 0.5), got {self.val_frac}")


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_rmse: list[float] = field(default_factory=list)
    val_rmse: list[float | None] = field(default_factory=list)

    def append(self, epoch: int, train_rmse: float, val_rmse: float | None) -> None:
        self.epoch.append(epoch)
        self.train_rmse.append(train_rmse)
        self.val_rmse.append(val_rmse)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        lines = ["epoch,train_rmse,val_rmse"]
        for e, tr, va in zip(self.epoch, self.train_rmse, self.val_rmse):
            lines.append(f"{e},{tr:.17g},{'' if va is None else format(va, '.17g')}")
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    label_mean: float = 0.0
    label_std: float = 1.0
    seed: int = 0
    history: History = field(default_factory=History)
    feature_version: str = FEATURE_VERSION
    extra: dict = field(default_factory=dict)

    def predict(self, mols: Sequence[Molecule]) -> np.ndarray:
        return predict(list(mols), self.params, self.model_config) * self.label_std + self.label_mean

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "feature_version": self.feature_version,
            "model_config": self.model_config.to_dict(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "seed": self.seed,
            "history": self.history.to_dict(),
            "extra": self.extra,
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, u64 manifest length, JSON manifest, then per array a u64 element count and float64 LE data."""
    manifest = json.dumps(ckpt.manifest(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(manifest)), manifest]
    for arr in ckpt.params.values():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expect_feature_version: str = FEATURE_VERSION) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (m_len,) = struct.unpack("<Q", take(8))
    try:
        manifest = json.loads(take(m_len))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if manifest.get("feature_version") != expect_feature_version:
        raise CheckpointError(
            f"{path}: feature version {manifest.get('feature_version')!r} != {expect_feature_version!r}"
        )
    params: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        if pos == len(blob):
            raise CheckpointError(
                f"{path}: manifest lists {len(manifest['arrays'])} arrays but file holds {len(params)}"
            )
        (count,) = struct.unpack("<Q", take(8))
        shape = tuple(entry["shape"])
        if count != math.prod(shape):
            raise CheckpointError(f"{path}: array {entry['name']} has {count} values, shape {shape}")
        params[entry["name"]] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after the last listed array")
    hist = manifest.get("history", {})
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        params=params,
        label_mean=manifest["label_mean"],
        label_std=manifest["label_std"],
        seed=manifest["seed"],
        history=History(hist.get("epoch", []), hist.get("train_rmse", []), hist.get("val_rmse", [])),
        feature_version=manifest["feature_version"],
        extra=manifest.get("extra", {}),
    )


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] = params[k] - c.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


def warm_start_params(fresh: dict[str, np.ndarray], source: Checkpoint) -> dict[str, np.ndarray]:
    """Copy arrays whose names exist in ``fresh``; a matching name with another shape is an error."""
    out = dict(fresh)
    extras = []
    for name, arr in source.params.items():
        if name not in fresh:
            extras.append(name)
            continue
        if arr.shape != fresh[name].shape:
            raise CheckpointError(f"warm-start shape conflict for {name}: {arr.shape} vs {fresh[name].shape}")
        out[name] = np.array(arr, dtype=np.float64)
    if extras:
        log.warning("warm-start ignored %d arrays not in the model: %s", len(extras), ", ".join(extras))
    return out


def rmse(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(y)) ** 2)))


def _split_train_val(n: int, val_frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(val_frac * n))
    if val_frac > 0 and n_val == 0 and n > 1:
        n_val = 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_model(
    records: Sequence[CompoundRecord],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    warm_start: Checkpoint | None = None,
    use_all: bool = False,
) -> tuple[Checkpoint, History]:
    """Fit on the train split with Adam on MSE of standardized labels, keeping the best-validation weights.

    Records without a split label are rejected unless ``use_all`` is set, in
    which case every record is treated as training data.
    """
    if use_all:
        train_recs = list(records)
    else:
        if any(r.split is None for r in records):
            raise ValueError("records need split labels (or pass use_all=True)")
        train_recs = [r for r in records if r.split == "train"]
    if not train_recs:
        raise ValueError("empty training set")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(model_cfg, cfg.seed)
    if warm_start is not None:
        params = warm_start_params(params, warm_start)

    mols = [r.molecule() for r in train_recs]
    y = np.array([r.pki for r in train_recs])
    fit_idx, val_idx = _split_train_val(len(train_recs), cfg.val_frac, rng)
    mean = float(np.mean(y[fit_idx]))
    std = float(np.std(y[fit_idx])) or 1.0
    y_std = (y - mean) / std

    history = History()
    ckpt = Checkpoint(model_cfg, params, mean, std, cfg.seed, history)
    if cfg.epochs == 0:
        return ckpt, history

    opt = Adam(params, cfg)
    fit_mols = [mols[i] for i in fit_idx]
    val_mols = [mols[i] for i in val_idx]
    best = (math.inf, {k: v.copy() for k, v in params.items()}, 0)
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(fit_idx))
        for start in range(0, len(order), cfg.batch_size):
            sel = fit_idx[order[start : start + cfg.batch_size]]
            batch = collate([mols[i] for i in sel])
            tparams = as_params(params, requires_grad=True)
            pred, _ = model_forward(batch, tparams, model_cfg)
            loss = T.mse(pred, y_std[sel])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}: {loss.item()}")
            T.backward(loss)
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tparams.items()}
            norm = clip_by_global_norm(grads, cfg.clip_norm)
            if not math.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}")
            opt.step(params, grads)

        train_rmse = rmse(predict(fit_mols, params, model_cfg) * std + mean, y[fit_idx])
        val_rmse = rmse(predict(val_mols, params, model_cfg) * std + mean, y[val_idx]) if len(val_idx) else None
        if not math.isfinite(train_rmse):
            raise TrainingDiverged(f"non-finite train RMSE at epoch {epoch}")
        history.append(epoch, train_rmse, val_rmse)
        log.info("epoch %d train_rmse %.4f val_rmse %s", epoch, train_rmse, val_rmse)
        if cfg.stop_below is not None and train_rmse < cfg.stop_below:
            if val_rmse is None or val_rmse < best[0]:
                best = (val_rmse if val_rmse is not None else train_rmse, params, epoch)
            break
        if val_rmse is None:
            best = (train_rmse, params, epoch)
            continue
        if val_rmse < best[0]:
            best = (val_rmse, {k: v.copy() for k, v in params.items()}, epoch)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break

    ckpt = Checkpoint(model_cfg, best[1], mean, std, cfg.seed, history, extra={"best_epoch": best[2]})
    return ckpt, history


@dataclass(frozen=True)
class EvalResult:
    rmse: float
    rmse_cliff: float | None
    n: int
    n_cliff: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(pred: np.ndarray, y: np.ndarray, cliff: np.ndarray) -> EvalResult:
    pred, y, cliff = np.asarray(pred), np.asarray(y), np.asarray(cliff, dtype=bool)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty record set")
    n_cliff = int(cliff.sum())
    rc = rmse(pred[cliff], y[cliff]) if n_cliff else None
    return EvalResult(rmse(pred, y), rc, len(y), n_cliff)


def evaluate(checkpoint: Checkpoint, records: Sequence[CompoundRecord]) -> EvalResult:
    """RMSE over all records and over cliff-flagged ones; rmse_cliff is None without cliffs."""
    if not records:
        raise ValueError("cannot evaluate an empty record set")
    pred = checkpoint.predict([r.molecule() for r in records])
    return metrics(pred, [r.pki for r in records], [bool(r.cliff) for r in records])


def synthetic_label(mol: Molecule) -> float:
    """0.3 per aromatic atom plus 0.1 per ring atom."""
    return 0.3 * sum(a.aromatic for a in mol.atoms) + 0.1 * sum(a.in_ring for a in mol.atoms)


def synthetic_records(smiles: Sequence[str]) -> list[CompoundRecord]:
    out = []
    for k, s in enumerate(smiles):
        mol = parse_smiles(s)
        out.append(CompoundRecord(k, s, synthetic_label(mol), False, "train", mol))
    return out
