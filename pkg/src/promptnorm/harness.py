"""Training runs, corruption sweeps, occurrence counting, and telemetry."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from promptnorm import autodiff as ad
from promptnorm.autodiff import NonFiniteError
from promptnorm.encoders import (FrozenEncoders, FrozenTask, build_encoders, encode_images,
                                 encode_texts, generate_task)
from promptnorm.losses import (BetaMix, OmegaSchedule, PANConfig, PUNConfig, accuracy,
                               ce_loss, omega_at_epoch, pan_alphas, pan_loss,
                               predict_with_prompts, pun_loss, total_loss)
from promptnorm.prompt import SoftPrompt, build_hybrid_set, prompt_norms, replace, rescale
from promptnorm.rng import stream

log = logging.getLogger(__name__)

LossMode = Literal["ce", "pun", "pan", "both"]
LOSS_MODES = ("ce", "pun", "pan", "both")

DEFAULT_VARIANCES = (0.0, 0.001, 0.01, 0.1, 0.5)
DEFAULT_FACTORS = (0.001, 0.01, 0.1, 0.5, 2.0)


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; ``report`` holds the partial run."""

    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ModelConfig:
    length: int = 16
    dim: int = 32
    image_dim: int = 24
    feature_dim: int = 48
    classes: int = 8
    shots: int = 8
    test_per_class: int = 32
    noise: float = 0.3
    task_seed: int = 0
    encoder_seed: int = 0
    temperature: float = 0.07

    def build(self) -> tuple[FrozenEncoders, FrozenTask]:
        enc = build_encoders(self.encoder_seed, self.length, self.dim, self.image_dim,
                             self.feature_dim)
        task = generate_task(self.task_seed, self.classes, self.dim, self.image_dim,
                             self.shots, self.test_per_class, self.noise)
        return enc, task


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    epochs: int = 200
    batch_size: int = 16
    lr: float = 0.01
    optimizer: Literal["sgd", "momentum"] = "momentum"
    momentum: float = 0.9
    init_std: float = 0.02
    mode: LossMode = "ce"
    pun: PUNConfig = field(default_factory=PUNConfig)
    pan: PANConfig = field(default_factory=PANConfig)
    schedule: OmegaSchedule = field(default_factory=OmegaSchedule)
    beta: BetaMix = field(default_factory=BetaMix)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"optimizer must be 'sgd' or 'momentum', got {self.optimizer!r}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.schedule.max_epochs != self.epochs:
            object.__setattr__(self, "schedule",
                               dataclasses.replace(self.schedule, max_epochs=self.epochs))

    @property
    def effective_beta(self) -> float:
        return {"ce": 0.0, "pun": 1.0, "pan": 0.0, "both": self.beta.beta}[self.mode]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"model": ModelConfig, "pun": PUNConfig, "pan": PANConfig,
                  "schedule": OmegaSchedule, "beta": BetaMix}
        for key, typ in nested.items():
            if key in d:
                d[key] = typ(**d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# reports

@dataclass
class EpochRecord:
    epoch: int
    loss_ce: float
    loss_ce_per_sample: float
    loss_pun: float
    loss_pan: float
    loss_total: float
    train_accuracy: float
    test_accuracy: float
    mean_norm: float
    norms: list[float]
    alpha_counts: list[int]
    pre_inference_passes: int


@dataclass
class NormTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch index must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SweepGrid:
    arm: Literal["replace", "rescale"]
    parameters: tuple[float, ...]
    mean: float = 0.0

    def __post_init__(self):
        if self.arm not in ("replace", "rescale"):
            raise ValueError(f"unknown sweep arm {self.arm!r}")
        if not self.parameters:
            raise ValueError("sweep grid needs at least one parameter")
        if self.arm == "replace" and any(v < 0 for v in self.parameters):
            raise ValueError("variances must be >= 0")
        object.__setattr__(self, "parameters", tuple(float(p) for p in self.parameters))


def default_grids() -> tuple[SweepGrid, SweepGrid]:
    return SweepGrid("replace", DEFAULT_VARIANCES), SweepGrid("rescale", DEFAULT_FACTORS)


@dataclass(frozen=True)
class SweepCell:
    seed: int
    arm: str
    parameter: float
    position: int
    accuracy_base: float
    accuracy_corrupted: float
    norm_before: float
    norm_after: float

    @property
    def delta(self) -> float:
        return self.accuracy_corrupted - self.accuracy_base

    @property
    def exceeds(self) -> bool:
        return self.accuracy_corrupted > self.accuracy_base


@dataclass
class FrequencyTable:
    """Exceedance counts per (arm, parameter), per seed and averaged over seeds."""

    cells: list[SweepCell] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return sorted({c.seed for c in self.cells})

    def keys(self) -> list[tuple[str, float]]:
        seen: dict[tuple[str, float], None] = {}
        for c in self.cells:
            seen.setdefault((c.arm, c.parameter), None)
        return list(seen)

    def count(self, arm: str, parameter: float, seed: int | None = None) -> float:
        """Positions where corrupted accuracy strictly beats the original.

        With ``seed=None`` the per-seed counts are averaged.
        """
        seeds = self.seeds if seed is None else [seed]
        totals = [sum(c.exceeds for c in self.cells
                      if c.arm == arm and c.parameter == parameter and c.seed == s)
                  for s in seeds]
        return float(np.mean(totals)) if seed is None else totals[0]

    def norm_direction(self, arm: str, parameter: float) -> str:
        """'down', 'up' or 'flat', from the measured mean change of the corrupted row's norm."""
        deltas = [c.norm_after - c.norm_before for c in self.cells
                  if c.arm == arm and c.parameter == parameter]
        d = float(np.mean(deltas))
        return "down" if d < 0 else "up" if d > 0 else "flat"

    def averaged_cells(self) -> list[dict]:
        """One row per (arm, parameter, position), accuracies and norms averaged over seeds."""
        groups: dict[tuple[str, float, int], list[SweepCell]] = {}
        for c in self.cells:
            groups.setdefault((c.arm, c.parameter, c.position), []).append(c)
        rows = []
        for (arm, param, pos), cs in groups.items():
            base = float(np.mean([c.accuracy_base for c in cs]))
            corrupted = float(np.mean([c.accuracy_corrupted for c in cs]))
            rows.append({
                "arm": arm, "parameter": param, "position": pos,
                "accuracy_base": base, "accuracy_corrupted": corrupted,
                "delta": corrupted - base,
                "norm_before": float(np.mean([c.norm_before for c in cs])),
                "norm_after": float(np.mean([c.norm_after for c in cs])),
                "exceeds": corrupted > base,
            })
        return rows

    def summary(self) -> list[dict]:
        out = []
        for arm, param in self.keys():
            out.append({
                "arm": arm, "parameter": param,
                "direction": self.norm_direction(arm, param),
                "count_mean": self.count(arm, param),
                "count_per_seed": {str(s): self.count(arm, param, s) for s in self.seeds},
            })
        return out

    def to_dict(self) -> dict:
        return {"cells": [dataclasses.asdict(c) for c in self.cells], "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyTable":
        return cls([SweepCell(**c) for c in d["cells"]])


@dataclass
class RunReport:
    config: dict
    trace: NormTrace = field(default_factory=NormTrace)
    frequency: FrequencyTable | None = None
    seeds: list[int] = field(default_factory=list)
    checkpoint: str | None = None
    status: str = "ok"
    summary: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @property
    def final(self) -> EpochRecord | None:
        return self.trace.records[-1] if self.trace.records else None

    def to_dict(self, *, timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "seeds": list(self.seeds),
            "checkpoint": self.checkpoint,
            "status": self.status,
            "trace": [dataclasses.asdict(r) for r in self.trace.records],
            "frequency": None if self.frequency is None else self.frequency.to_dict(),
            "summary": self.summary,
        }
        if timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        trace = NormTrace([EpochRecord(**r) for r in d["trace"]])
        freq = None if d.get("frequency") is None else FrequencyTable.from_dict(d["frequency"])
        return cls(d["config"], trace, freq, list(d["seeds"]), d.get("checkpoint"),
                   d.get("status", "ok"), dict(d.get("summary", {})),
                   float(d.get("wall_clock_seconds", 0.0)))


# --------------------------------------------------------------------------
# training

Observer = Callable[[str, dict], None]


def _init_prompt(cfg: TrainConfig) -> SoftPrompt:
    return SoftPrompt.random(stream(cfg.seed, "prompt-init"), cfg.model.length, cfg.model.dim,
                             cfg.init_std)


def train(cfg: TrainConfig, observer: Observer | None = None,
          init: SoftPrompt | None = None) -> tuple[SoftPrompt, RunReport]:
    """Optimize the soft prompt for ``cfg.epochs`` epochs.

    In PAN modes every batch starts with one gradient-free pre-inference
    pass over a freshly drawn hybrid prompt set; its alphas weight the norm
    penalty for that batch only. ``observer(event, info)`` receives
    ``"pre_inference"`` and ``"step"`` events for instrumentation.
    """
    started = time.perf_counter()
    emit = observer or (lambda event, info: None)
    m = cfg.model
    enc, task = m.build()
    E = task.class_embeddings
    lam = m.temperature
    f_train = encode_images(enc, task.train_x)
    f_test = encode_images(enc, task.test_x)
    y_train, y_test = task.train_y, task.test_y
    n = len(y_train)

    V = (init if init is not None else _init_prompt(cfg)).rows.copy()
    velocity = np.zeros_like(V)
    use_pun = cfg.mode in ("pun", "both")
    use_pan = cfg.mode in ("pan", "both")
    beta = cfg.effective_beta
    report = RunReport(cfg.to_dict(), seeds=[cfg.seed])
    tape = ad.GradientTape()

    for epoch in range(cfg.epochs):
        w = omega_at_epoch(epoch, cfg.schedule) if cfg.schedule.enabled else 1.0
        order = stream(cfg.seed, "batch-order", epoch).permutation(n)
        sums = dict(ce=0.0, pun=0.0, pan=0.0, total=0.0)
        alpha_counts = [0] * m.length
        passes = 0
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            tape.reset()
            alphas = None
            if use_pan:
                hybrid = build_hybrid_set(SoftPrompt(V), cfg.pan.n, cfg.pan.tau,
                                          stream(cfg.seed, "hybrid", epoch, b))
                before = len(tape)
                preds = predict_with_prompts(hybrid, E, enc, f_train[idx], lam)
                alphas = pan_alphas(preds, y_train[idx], cfg.pan.omega * w)
                passes += 1
                for pos in alphas.selected:
                    alpha_counts[pos - 1] += 1
                emit("pre_inference", {"epoch": epoch, "batch": b, "positions": hybrid.positions,
                                       "alphas": alphas, "tape_len_before": before,
                                       "tape_len_after": len(tape), "predictions": preds})
            try:
                v = tape.watch(V)
                ce = ce_loss(f_train[idx], encode_texts(enc, v, E), y_train[idx], lam)
                pun = pun_loss(v, PUNConfig(cfg.pun.omega * w, cfg.pun.p)) if use_pun else None
                pan = pan_loss(v, alphas, cfg.pan.p) if use_pan else None
                loss = total_loss(ce, pun, pan, beta)
                grad = ad.backward(tape, loss)[v].data
            except NonFiniteError as exc:
                report.status = "diverged"
                report.wall_clock_seconds = time.perf_counter() - started
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch {b}: {exc}",
                                       report) from exc
            emit("step", {"epoch": epoch, "batch": b, "grad": grad, "alphas": alphas,
                          "loss": loss.item(), "tape_len": len(tape), "prompt": v.data,
                          "indices": idx})
            sums["ce"] += ce.item()
            sums["pun"] += 0.0 if pun is None else pun.item()
            sums["pan"] += 0.0 if pan is None else pan.item()
            sums["total"] += loss.item()
            n_batches += 1
            with np.errstate(over="ignore", invalid="ignore"):  # checked just below
                if cfg.optimizer == "momentum":
                    velocity = cfg.momentum * velocity + grad
                    V = V - cfg.lr * velocity
                else:
                    V = V - cfg.lr * grad
            if not np.all(np.isfinite(V)):
                report.status = "diverged"
                report.wall_clock_seconds = time.perf_counter() - started
                raise TrainingDiverged(f"prompt became non-finite at epoch {epoch}, batch {b}",
                                       report)
        tape.reset()
        text = encode_texts(enc, V, E).data
        norms = prompt_norms(V)
        report.trace.append(EpochRecord(
            epoch=epoch + 1,
            loss_ce=sums["ce"] / n_batches,
            loss_ce_per_sample=sums["ce"] / n,
            loss_pun=sums["pun"] / n_batches,
            loss_pan=sums["pan"] / n_batches,
            loss_total=sums["total"] / n_batches,
            train_accuracy=accuracy(f_train, text, y_train, lam),
            test_accuracy=accuracy(f_test, text, y_test, lam),
            mean_norm=norms.mean,
            norms=[float(x) for x in norms.per_position],
            alpha_counts=alpha_counts,
            pre_inference_passes=passes,
        ))
    report.wall_clock_seconds = time.perf_counter() - started
    log.info("trained seed=%d mode=%s final test acc %.4f", cfg.seed, cfg.mode,
             report.final.test_accuracy)
    return SoftPrompt(V), report


# --------------------------------------------------------------------------
# corruption sweeps

def _param_key(x: float) -> int:
    return int(np.float64(x).view(np.uint64))


def corrupt(prompt: SoftPrompt, arm: str, parameter: float, position: int, seed: int,
            mean: float = 0.0) -> SoftPrompt:
    """One sweep cell's corrupted prompt. REPLACE draws are keyed by (seed, variance, position)."""
    if arm == "rescale":
        return rescale(prompt, position, parameter)
    rng = stream(seed, "sweep/replace", _param_key(parameter), position)
    return replace(prompt, position, mean, math.sqrt(parameter), rng)


def _sweep_block(args) -> list[SweepCell]:
    prompt, E, enc, f_test, y_test, lam, grid, seed, base = args
    before = prompt_norms(prompt).per_position
    cells = []
    for param in grid.parameters:
        for pos in range(1, prompt.length + 1):
            corrupted = corrupt(prompt, grid.arm, param, pos, seed, grid.mean)
            text = encode_texts(enc, corrupted.rows, E).data
            cells.append(SweepCell(
                seed=seed, arm=grid.arm, parameter=param, position=pos,
                accuracy_base=base,
                accuracy_corrupted=accuracy(f_test, text, y_test, lam),
                norm_before=float(before[pos - 1]),
                norm_after=float(prompt_norms(corrupted).per_position[pos - 1]),
            ))
    return cells


def corruption_sweep(prompt: SoftPrompt, task: FrozenTask, enc: FrozenEncoders,
                     grids: Sequence[SweepGrid], seeds: Sequence[int],
                     temperature: float = 0.07, workers: int = 1) -> FrequencyTable:
    """Corrupt every position under every grid parameter and compare test accuracy."""
    f_test = encode_images(enc, task.test_x)
    base = accuracy(f_test, encode_texts(enc, prompt.rows, task.class_embeddings).data,
                    task.test_y, temperature)
    jobs = [(prompt, task.class_embeddings, enc, f_test, task.test_y, temperature, g, s, base)
            for s in sorted(set(seeds)) for g in grids]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_sweep_block, jobs))
    else:
        blocks = [_sweep_block(j) for j in jobs]
    return FrequencyTable([c for block in blocks for c in block])


@dataclass(frozen=True)
class LowNormSummary:
    low_norm: float
    norm_increasing: float
    per_arm: dict[str, dict[str, float]]


def count_low_norm_occurrences(table: FrequencyTable) -> LowNormSummary:
    """Sum seed-averaged exceedance counts over norm-reducing parameters.

    Norm-increasing parameters are reported separately and never enter the
    low-norm sum.
    """
    per_arm: dict[str, dict[str, float]] = {}
    for arm, param in table.keys():
        slot = per_arm.setdefault(arm, {"low_norm": 0.0, "norm_increasing": 0.0})
        direction = table.norm_direction(arm, param)
        if direction == "down":
            slot["low_norm"] += table.count(arm, param)
        elif direction == "up":
            slot["norm_increasing"] += table.count(arm, param)
    return LowNormSummary(
        low_norm=sum(a["low_norm"] for a in per_arm.values()),
        norm_increasing=sum(a["norm_increasing"] for a in per_arm.values()),
        per_arm=per_arm,
    )


# --------------------------------------------------------------------------
# telemetry and aggregation

def norm_telemetry(trace: NormTrace) -> list[list[Any]]:
    """Header plus one row per epoch: epoch, test_accuracy, mean_norm, norm_1..norm_L."""
    length = len(trace.records[0].norms) if trace.records else 0
    rows: list[list[Any]] = [["epoch", "test_accuracy", "mean_norm"]
                             + [f"norm_{j}" for j in range(1, length + 1)]]
    for r in trace.records:
        rows.append([r.epoch, r.test_accuracy, r.mean_norm, *r.norms])
    return rows


def _run_seed(args) -> dict:
    cfg, seed = args
    try:
        _, report = train(dataclasses.replace(cfg, seed=seed))
    except Exception as exc:  # noqa: BLE001 - a failed child becomes a marker, not a crash
        return {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    final = report.final
    return {"seed": seed, "status": "ok", "test_accuracy": final.test_accuracy,
            "train_accuracy": final.train_accuracy, "mean_norm": final.mean_norm,
            "trace": [dataclasses.asdict(r) for r in report.trace.records]}


def multi_seed(cfg: TrainConfig, seeds: Sequence[int], workers: int = 1) -> dict:
    """Train once per seed and aggregate; merge order is by seed value."""
    if not seeds:
        raise ValueError("need at least one seed")
    ordered = sorted(set(int(s) for s in seeds))
    jobs = [(cfg, s) for s in ordered]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_seed, jobs))
    else:
        runs = [_run_seed(j) for j in jobs]
    ok = [r for r in runs if r["status"] == "ok"]
    accs = np.array([r["test_accuracy"] for r in ok])
    norms = np.array([r["mean_norm"] for r in ok])
    return {
        "config": cfg.to_dict(),
        "seeds": ordered,
        "runs": runs,
        "status": "ok" if len(ok) == len(runs) else "partial",
        "test_accuracy_mean": float(accs.mean()) if ok else None,
        "test_accuracy_std": float(accs.std()) if ok else None,
        "mean_norm_mean": float(norms.mean()) if ok else None,
    }
