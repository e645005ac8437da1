"""Losses, optimizer, metrics, best-of-k evaluation and the ablation drivers."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError
from .dataset import Scene
from .group_graph import GroupAssignment
from .model import (
    LATENT_DIM,
    ModelParams,
    PredictionSet,
    SceneBatch,
    decode,
    draw_eps,
    encode,
    init_params,
    predict_batch,
    tile_rows,
)
from .sampler import reparameterize

log = logging.getLogger(__name__)

__all__ = [
    "LossConfig",
    "Metrics",
    "TrainResult",
    "NumericalError",
    "trajectory_l1",
    "per_candidate_l1",
    "kl_standard_normal",
    "variety_min",
    "variety_loss",
    "Adam",
    "ade",
    "fde",
    "best_of_k_eval",
    "train",
    "rho_sweep",
    "segments_intersect",
    "count_crossings",
    "within_group_crossings",
    "within_group_divergence",
    "write_metrics_csv",
    "METRICS_COLUMNS",
]

RHO_GRID = (0.0, 0.2, 0.5, 0.7, 0.9, 1.0)


class NumericalError(FloatingPointError):
    pass


@dataclass
class LossConfig:
    """Training hyper-parameters.  ``alpha`` weights the KL term."""

    alpha: float = 1.0
    k_variety: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 400
    rho: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.k_variety < 1:
            raise ValueError("k_variety must be at least 1")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive, epochs non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")


# --------------------------------------------------------------------- losses


def trajectory_l1(pred: Tensor, true) -> Tensor:
    true = true if isinstance(true, Tensor) else Tensor(true)
    if pred.shape != true.shape:
        raise ShapeError(f"trajectory_l1: shapes {pred.shape} and {true.shape} differ")
    return (pred - true).abs().sum()


def per_candidate_l1(pred: Tensor, true: np.ndarray) -> Tensor:
    """L1 per row of an ``R x T x 2`` prediction, shape ``(R,)``."""
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError(f"per_candidate_l1: shapes {pred.shape} and {true.shape} differ")
    return (pred - Tensor(true)).abs().sum(axis=2).sum(axis=1)


def kl_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma) || N(0, I)) summed over rows and dims."""
    if np.any(sigma.data <= 0):
        raise ValueError("variances must be strictly positive")
    return ((sigma + mu.square() - 1.0 - sigma.log()) * 0.5).sum()


def variety_min(candidates: Tensor, true: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Sum over pedestrians of the smallest candidate L1.

    ``candidates`` is ``k x N x T x 2``.  Returns the summed loss and the
    chosen candidate index per pedestrian; only chosen rows receive gradient.
    """
    k, n = candidates.shape[:2]
    flat = candidates.reshape(k * n, *candidates.shape[2:])
    errs = per_candidate_l1(flat, np.tile(true, (k, 1, 1))).reshape(k, n)
    best = np.argmin(errs.data, axis=0)
    return errs[best, np.arange(n)].sum(), best


def variety_loss(
    batch: SceneBatch,
    params: ModelParams,
    config: LossConfig,
    seed=0,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Best-of-``k_variety`` L1 per pedestrian plus ``alpha`` * KL, summed over the batch."""
    k, n = config.k_variety, batch.n_peds
    enc = encode(batch, params)
    if eps is None:
        eps = draw_eps(batch.groups, k, config.rho, seed)
    z = reparameterize(tile_rows(enc.mu, k), tile_rows(enc.sigma, k), np.asarray(eps).reshape(k * n, LATENT_DIM))
    pred = decode(z, np.tile(batch.last_disp, (k, 1)), params, batch.horizon)
    recon, _ = variety_min(pred.reshape(k, n, batch.horizon, 2), batch.future_rel)
    return recon + kl_standard_normal(enc.mu, enc.sigma) * config.alpha


# ------------------------------------------------------------------ optimizer


class Adam:
    """Bias-corrected Adam over named tensors; reads ``.grad`` (None counts as zero)."""

    def __init__(self, params: ModelParams, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"]).reshape(self.m[name].shape)
            self.v[name] = np.array(state[f"v.{name}"]).reshape(self.v[name].shape)


# -------------------------------------------------------------------- metrics


def _check_pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim < 2 or pred.shape[-1] != 2:
        raise ShapeError(f"prediction {pred.shape} and ground truth {true.shape} must match as ... x T x 2")
    return pred, true


def ade(pred_positions, true_positions) -> float:
    """Mean Euclidean error over pedestrians and steps (meters)."""
    pred, true = _check_pair(pred_positions, true_positions)
    return float(np.linalg.norm(pred - true, axis=-1).mean())


def fde(pred_positions, true_positions) -> float:
    """Mean Euclidean error at the last step (meters)."""
    pred, true = _check_pair(pred_positions, true_positions)
    return float(np.linalg.norm(pred[..., -1, :] - true[..., -1, :], axis=-1).mean())


@dataclass
class Metrics:
    ade: float
    fde: float
    n_scenes: int
    n_peds: int
    per_scene: list[tuple[float, float]] = field(default_factory=list)


def _best_of_k(pred: PredictionSet, future: np.ndarray, fde_mode: str) -> tuple[np.ndarray, np.ndarray]:
    pos = pred.sample_positions()  # k x N x T x 2
    dist = np.linalg.norm(pos - future[None], axis=-1)  # k x N x T
    ades = dist.mean(axis=2)
    fdes = dist[:, :, -1]
    best = np.argmin(ades, axis=0)
    cols = np.arange(ades.shape[1])
    if fde_mode == "ade":
        return ades[best, cols], fdes[best, cols]
    if fde_mode == "independent":
        return ades[best, cols], fdes.min(axis=0)
    raise ValueError(f"fde_mode must be 'ade' or 'independent', got {fde_mode!r}")


def best_of_k_eval(
    scenes: Sequence[Scene],
    params: ModelParams,
    k: int = 20,
    rho: float = 1.0,
    seed=0,
    batch_size: int = 64,
    fde_mode: str = "ade",
) -> Metrics:
    """Per pedestrian, keep the sample with the lowest ADE; average over all pedestrians.

    FDE comes from that same sample unless ``fde_mode='independent'``.
    """
    if not scenes:
        raise ValueError("no scenes to evaluate")
    seeds = np.random.SeedSequence(seed).spawn((len(scenes) + batch_size - 1) // batch_size)
    ade_all, fde_all, per_scene = [], [], []
    for b, start in enumerate(range(0, len(scenes), batch_size)):
        chunk = scenes[start : start + batch_size]
        preds = predict_batch(SceneBatch.from_scenes(chunk), params, k, rho, seeds[b])
        for scene, pred in zip(chunk, preds):
            a, f = _best_of_k(pred, scene.future, fde_mode)
            ade_all.append(a)
            fde_all.append(f)
            per_scene.append((float(a.mean()), float(f.mean())))
    ade_all = np.concatenate(ade_all)
    fde_all = np.concatenate(fde_all)
    return Metrics(float(ade_all.mean()), float(fde_all.mean()), len(scenes), int(ade_all.size), per_scene)


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    final_params: ModelParams
    best_epoch: int
    best_val_ade: float
    history: list[dict]
    optimizer: Adam


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train(
    train_scenes: Sequence[Scene],
    config: LossConfig,
    *,
    val_scenes: Sequence[Scene] | None = None,
    variant: str = "hierarchical",
    seed: int = 0,
    params: ModelParams | None = None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
    eval_k: int = 1,
    val_every: int = 1,
    log_line: Callable[[str], None] | None = None,
    on_improve: Callable[[ModelParams, int, float], None] | None = None,
    on_epoch: Callable[[ModelParams, Adam, int], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the variety loss, keeping the lowest-validation-ADE parameters.

    Batch loss is the scene-summed loss divided by the number of scenes.  The
    validation set defaults to the training scenes.  Randomness (shuffling,
    latent draws, initialization) is derived from ``seed``.
    """
    if not train_scenes:
        raise ValueError("no training scenes")
    params = params if params is not None else init_params(seed, variant)
    opt = Adam(params, lr=config.learning_rate)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    val = list(val_scenes) if val_scenes else list(train_scenes)
    cache: dict[tuple, SceneBatch] = {}
    history: list[dict] = []
    best_ade, best_epoch, best = np.inf, -1, params.copy()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, epoch, 1])
        total = 0.0
        for b, idx in enumerate(_batches(len(train_scenes), config.batch_size, rng)):
            key = tuple(idx.tolist())
            batch = cache.get(key)
            if batch is None:
                batch = SceneBatch.from_scenes([train_scenes[i] for i in idx])
                if len(cache) < 256:
                    cache[key] = batch
            loss = variety_loss(batch, params, config, seed=[seed, epoch, b, 2]) * (1.0 / batch.n_scenes)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"loss became non-finite at epoch {epoch + 1}")
            params.zero_grads()
            loss.backward()
            opt.step()
            total += value * len(idx)
        row = {"epoch": epoch + 1, "train_loss": total / len(train_scenes), "val_ade": np.nan, "val_fde": np.nan}
        last = epoch == start_epoch + config.epochs - 1
        if (epoch + 1 - start_epoch) % val_every == 0 or last:
            m = best_of_k_eval(val, params, k=eval_k, rho=config.rho, seed=[seed, 3])
            row["val_ade"], row["val_fde"] = m.ade, m.fde
            if m.ade < best_ade:
                best_ade, best_epoch, best = m.ade, epoch + 1, params.copy()
                if on_improve is not None:
                    on_improve(best, epoch + 1, m.ade)
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        if log_line is not None:
            log_line(
                f"{row['epoch']} {row['train_loss']:.6f} {row['val_ade']:.6f} {row['val_fde']:.6f} {row['wall_seconds']:.3f}"
            )
        if on_epoch is not None:
            on_epoch(params, opt, epoch + 1)
    params.zero_grads()
    return TrainResult(best, params, best_epoch, float(best_ade), history, opt)


def rho_sweep(
    train_scenes: Sequence[Scene],
    eval_scenes: Sequence[Scene],
    config: LossConfig,
    rhos: Sequence[float] = RHO_GRID,
    *,
    variant: str = "hierarchical",
    seed: int = 0,
    eval_k: int = 20,
    log_line: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train one model per ``rho`` (same seed and data) and report best-of-k metrics."""
    for r in rhos:
        if not 0.0 <= float(r) <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {r}")
    rows = []
    for r in rhos:
        cfg = LossConfig(**{**config.__dict__, "rho": float(r)})
        res = train(train_scenes, cfg, variant=variant, seed=seed, eval_k=1, val_every=max(cfg.epochs, 1))
        m = best_of_k_eval(eval_scenes, res.params, k=eval_k, rho=float(r), seed=seed)
        rows.append({"rho": float(r), "ade": m.ade, "fde": m.fde, "n_scenes": m.n_scenes, "n_peds": m.n_peds})
        if log_line is not None:
            log_line(f"rho={r} ade={m.ade:.6f} fde={m.fde:.6f}")
    return rows


# --------------------------------------------------------- coherence counters


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_intersect(p1, p2, q1, q2) -> bool:
    """True when closed segments p1-p2 and q1-q2 share a point."""
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return (
        (d1 == 0 and on_segment(q1, q2, p1))
        or (d2 == 0 and on_segment(q1, q2, p2))
        or (d3 == 0 and on_segment(p1, p2, q1))
        or (d4 == 0 and on_segment(p1, p2, q2))
    )


def count_crossings(path_a: np.ndarray, path_b: np.ndarray) -> int:
    """Number of intersecting segment pairs between two polylines."""
    n = 0
    for i in range(len(path_a) - 1):
        for j in range(len(path_b) - 1):
            if segments_intersect(path_a[i], path_a[i + 1], path_b[j], path_b[j + 1]):
                n += 1
    return n


def _group_pairs(groups: GroupAssignment):
    for members in groups.members():
        for a in range(members.size):
            for b in range(a + 1, members.size):
                yield members[a], members[b]


def within_group_crossings(pred: PredictionSet, groups: GroupAssignment) -> int:
    """Crossings between same-sample predicted paths of every within-group pair.

    Paths start at the last observed position.
    """
    pos = pred.sample_positions()
    start = pred.last_positions
    total = 0
    for s in range(pos.shape[0]):
        for a, b in _group_pairs(groups):
            pa = np.vstack([start[a], pos[s, a]])
            pb = np.vstack([start[b], pos[s, b]])
            total += count_crossings(pa, pb)
    return total


def within_group_divergence(pred: PredictionSet, groups: GroupAssignment) -> float:
    """Mean over within-group pairs of the across-sample variance of final-step member distance."""
    final = pred.sample_positions()[:, :, -1]  # k x N x 2
    vals = [np.var(np.linalg.norm(final[:, a] - final[:, b], axis=-1)) for a, b in _group_pairs(groups)]
    return float(np.mean(vals)) if vals else 0.0


# ------------------------------------------------------------------------ csv

METRICS_COLUMNS = ["dataset", "split", "k", "rho", "ade_m", "fde_m", "n_scenes", "n_peds", "seed"]


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in METRICS_COLUMNS})
