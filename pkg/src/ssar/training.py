"""MAE-loss training with Adam and a step-halving learning-rate schedule."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, absolute, no_grad, reduce, sub
from .data import Manifest, ManifestRow, PipelineConfig, SliceSequence, prepare_sequence, read_volume
from .models import SliceSeqAgeNet, Volumetric3DNet, save_weights

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "train_mae", "test_mae", "seconds"]


class ConfigError(ValueError):
    """Inconsistent or invalid run configuration."""


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    halve_every: float = 15
    epochs: int = 60
    batch_size: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 15

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * 0.5**floor(epoch / halve_every)``; ``halve_every`` of 0 or inf disables decay."""
    if not cfg.halve_every or math.isinf(cfg.halve_every):
        return cfg.lr0
    return cfg.lr0 * 0.5 ** (epoch // int(cfg.halve_every))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    tgt = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    if pred.size == 0:
        raise ValueError("mae_loss on empty input")
    return reduce("mean", absolute(sub(pred, Tensor(tgt, dtype=pred.dtype))))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> None:
    """One bias-corrected Adam update; clears every parameter's ``grad``."""
    for i, p in enumerate(params):
        if p.grad is not None and not np.isfinite(p.grad).all():
            name = names[i] if names else (p.name or f"#{i}")
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        # overflow is reported below as a named NonFiniteError
        with np.errstate(over="ignore", invalid="ignore"):
            update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
        p.grad = None
        if not np.isfinite(p.data).all():
            name = names[i] if names else (p.name or f"#{i}")
            raise NonFiniteError(f"parameter {name} became non-finite after update")


@contextlib.contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS threads; ``threads=1`` gives bit-reproducible runs."""
    if not threads:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        yield


# data feeding -----------------------------------------------------------------------


def model_input(seq: SliceSequence, kind: str) -> Tensor:
    """``[n, 1, H, W]`` for the slice model; the 3D model gets the slices as depth, ``[1, n, H, W]``."""
    arr = seq.slices if kind == SliceSeqAgeNet.kind else seq.slices[:, 0][None]
    return Tensor(arr, dtype=np.float32)


class SampleCache:
    """Lazily loads and preprocesses manifest volumes into model inputs."""

    def __init__(self, manifest: Manifest, pipeline: PipelineConfig, model_kind: str):
        self.manifest, self.pipeline, self.kind = manifest, pipeline, model_kind
        self._cache: dict[str, Tensor] = {}

    def input_for(self, row: ManifestRow) -> Tensor:
        x = self._cache.get(row.subject_id)
        if x is None:
            seq = prepare_sequence(read_volume(self.manifest.resolve(row)), self.pipeline)
            x = self._cache[row.subject_id] = model_input(seq, self.kind)
        return x


def predict_rows(model, cache: SampleCache, rows: Sequence[ManifestRow]) -> np.ndarray:
    out = np.empty(len(rows))
    with no_grad():
        for i, row in enumerate(rows):
            out[i] = model(cache.input_for(row)).item()
    return out


# training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_test_mae: float = math.inf
    best_params: list[np.ndarray] | None = None

    def restore_best(self, model=None):
        """Copy the best-test-MAE parameters into ``model`` (default: the trained model)."""
        model = model or self.model
        if self.best_params is not None:
            for p, arr in zip(model.parameters(), self.best_params):
                p.data = arr.copy()
        return model


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_log(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], _fmt(r["lr"]), _fmt(r["train_mae"]), _fmt(r["test_mae"]), f"{r['seconds']:.3f}"])


def read_log(path) -> list[dict]:
    """Parse a ``train_log.csv`` back into the dicts :func:`write_log` consumed."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    num = lambda v: math.nan if v == "" else float(v)  # noqa: E731
    return [
        {"epoch": int(r["epoch"]), "lr": num(r["lr"]), "train_mae": num(r["train_mae"]),
         "test_mae": num(r["test_mae"]), "seconds": num(r["seconds"])}
        for r in rows
    ]


def train(
    model,
    manifest: Manifest,
    cfg: TrainConfig,
    pipeline: PipelineConfig,
    out_dir=None,
    extra_descriptor: dict[str, str] | None = None,
) -> TrainResult:
    """Train ``model`` on the manifest's train split, evaluating on its test split each epoch.

    With ``out_dir`` set, writes ``train_log.csv``, ``ckpt_epoch{N}.ssar`` every
    ``checkpoint_every`` epochs, ``best.ssar`` and ``final.ssar``.
    """
    train_rows = manifest.split("train")
    test_rows = manifest.split("test")
    if not train_rows:
        raise ConfigError("manifest has no train split")
    if isinstance(model, SliceSeqAgeNet) and model.seq_len != pipeline.n_slices:
        raise ConfigError(f"model seq_len={model.seq_len} but pipeline n_slices={pipeline.n_slices}")
    cache = SampleCache(manifest, pipeline, model.kind)
    first = cache.input_for(train_rows[0])
    try:
        with no_grad():
            model(first)
    except ValueError as exc:
        raise ConfigError(f"data/model mismatch on first sample {train_rows[0].subject_id}: {exc}") from exc

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    params = [p for _, p in named]
    names = [n for n, _ in named]
    state = AdamState.for_params(params)
    result = TrainResult(model)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_rows))
        total, pending = 0.0, 0
        for idx in order:
            row = train_rows[idx]
            loss = mae_loss(model(cache.input_for(row)), row.age_years)
            total += loss.item()
            if cfg.batch_size > 1:
                loss = loss * (1.0 / cfg.batch_size)
            loss.backward()
            pending += 1
            if pending == cfg.batch_size:
                adam_step(params, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, names)
                pending = 0
        if pending:
            adam_step(params, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, names)
        train_mae = total / len(train_rows)
        test_mae = math.nan
        if test_rows:
            pred = predict_rows(model, cache, test_rows)
            test_mae = float(np.mean(np.abs(pred - np.array([r.age_years for r in test_rows]))))
        score = test_mae if test_rows else train_mae
        if score < result.best_test_mae:
            result.best_test_mae, result.best_epoch = score, epoch + 1
            result.best_params = [p.data.copy() for p in params]
        row = {"epoch": epoch + 1, "lr": lr, "train_mae": train_mae, "test_mae": test_mae}
        row["seconds"] = time.perf_counter() - t0
        result.log.append(row)
        log.info("epoch %d lr %.3g train_mae %.4f test_mae %.4f (%.1fs)", epoch + 1, lr, train_mae, test_mae, row["seconds"])
        if out is not None:
            write_log(result.log, out / "train_log.csv")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_weights(model, out / f"ckpt_epoch{epoch + 1}.ssar", extra_descriptor)

    if out is not None:
        save_weights(model, out / "final.ssar", extra_descriptor)
        final = [p.data for p in params]
        result.restore_best()
        save_weights(model, out / "best.ssar", extra_descriptor)
        for p, arr in zip(params, final):
            p.data = arr
    return result


def make_model(kind: str, pipeline: PipelineConfig, **kw):
    """Construct ``sliceseq`` or ``vol3d`` with keyword overrides for its constructor."""
    if kind == SliceSeqAgeNet.kind:
        return SliceSeqAgeNet(pipeline.n_slices, **kw)
    if kind == Volumetric3DNet.kind:
        return Volumetric3DNet(**kw)
    raise ConfigError(f"unknown model {kind!r}; expected sliceseq or vol3d")
