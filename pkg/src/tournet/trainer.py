"""Policy-gradient training with a greedy self-critic baseline.

The default ("enhanced") mode runs one forward per batch and derives both
the sampled rollout and the greedy baseline from that single output; the
"original_two_module" mode keeps a second frozen parameter set for the
baseline (two forwards per batch) and syncs it on validation improvement,
for resource-comparison ablations only.

The surrogate loss is mean(advantage * log P(tour)) with the advantage a
constant: descending it descends the expected tour length. Advantages are
batch-centered by default (their mean is exactly zero); a literal flag
adds the batch mean instead of subtracting it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, neg_inf
from .decoder import (BeamConfig, beam_decode, greedy_decode,
                      greedy_decode_batch, sample_decode)
from .instances import TspInstance, distance_matrix, generate_uniform, tour_length
from .model import (ForwardCounter, ModelConfig, ModelOutput, ModelParams,
                    forward_batch, forward_graph, init_params, neighbor_mask)

CHECKPOINT_VERSION = "tournet-ckpt-1"


class NumericAbort(RuntimeError):
    """Raised when training produces non-finite losses or gradients."""


@dataclass
class TrainConfig:
    n: int = 20
    metric: str = "euclid"
    epochs: int = 80
    steps_per_epoch: int = 250
    batch_size: int = 64
    val_size: int = 500
    lr: float = 1e-4
    seed: int = 0
    critic_mode: str = "enhanced"  # or "original_two_module"
    omega_mode: str = "centered"  # or "literal"
    dtype: str = "float32"
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if min(self.n, self.epochs, self.steps_per_epoch, self.batch_size,
               self.val_size) <= 0 or self.lr <= 0:
            raise ValueError("all training sizes and the learning rate must be positive")
        if self.critic_mode not in ("enhanced", "original_two_module"):
            raise ValueError(f"unknown critic mode {self.critic_mode!r}")
        if self.omega_mode not in ("centered", "literal"):
            raise ValueError(f"unknown omega mode {self.omega_mode!r}")


def desk_preset(out_dir: str = "runs/desk", seed: int = 0) -> TrainConfig:
    """CPU-scale preset: TSP20, narrow model, 80 x 250 steps of batch 64."""
    return TrainConfig(
        n=20, epochs=80, steps_per_epoch=250, batch_size=64, val_size=500,
        lr=1e-4, seed=seed, out_dir=out_dir,
        model=ModelConfig(hidden=64, gnn_layers=3, fc_layers=2, heads=4))


def paper_preset(out_dir: str = "runs/paper", seed: int = 0) -> TrainConfig:
    """Full-scale preset (TSP50); far beyond desk CPU budgets."""
    return TrainConfig(
        n=50, epochs=1000, steps_per_epoch=2500, batch_size=64, val_size=10000,
        lr=1e-4, seed=seed, out_dir=out_dir, model=ModelConfig())


PRESETS: dict[str, Callable[..., TrainConfig]] = {
    "desk": desk_preset,
    "paper": paper_preset,
}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.named_parameters()},
                   v={k: np.zeros_like(p.data) for k, p in params.named_parameters()})


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update; gradients are consumed (zeroed)."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.named_parameters():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


@dataclass
class StepStats:
    mean_sample_length: float
    mean_greedy_length: float
    omega: float
    grad_norm: float
    advantages: np.ndarray
    surrogate: float


def batch_log_prob(beta_t: Tensor, A_t: Tensor, tours: np.ndarray) -> Tensor:
    """Differentiable log P(tour) for a batch, replaying the decode masks.

    Chain rule over the decode: softmax(beta) at the start, masked softmax
    of the current node's score row per step, terminal step probability 1.
    """
    b, n = tours.shape
    dtype = beta_t.data.dtype
    lb = ad.log_softmax(beta_t, axis=1)
    first = ad.gather(lb, tours[:, :1], axis=1)  # (b, 1)
    rows_idx = np.repeat(tours[:, :-1, None], n, axis=2)  # (b, n-1, n)
    rows = ad.gather(A_t, rows_idx, axis=1)
    onehot = np.eye(n, dtype=bool)[tours]  # (b, n, n)
    visited_before = np.cumsum(onehot, axis=1).astype(bool)[:, :-1, :]
    masked = ad.masked_fill(rows, visited_before, neg_inf(dtype))
    lgam = ad.log_softmax(masked, axis=2)
    steps = ad.gather(lgam, tours[:, 1:, None], axis=2)  # (b, n-1, 1)
    return ad.add(ad.reshape(first, (b,)), ad.reduce_sum(steps, axis=(1, 2)))


def _batch_inputs(batch: Sequence[TspInstance], cfg_model: ModelConfig):
    dms = np.stack([distance_matrix(i) for i in batch])
    coords = np.stack([i.coords for i in batch])
    nmask = np.stack([neighbor_mask(d, cfg_model) for d in dms])
    return coords, dms, nmask


def reinforce_step(batch: Sequence[TspInstance], params: ModelParams,
                   cfg: TrainConfig, rng: np.random.Generator,
                   baseline_params: ModelParams | None = None,
                   counter: ForwardCounter | None = None) -> StepStats:
    """One policy-gradient step: forward, rollout vs greedy baseline,
    centered advantage, backward. Gradients land on ``params``; the caller
    applies the optimizer."""
    if not batch:
        raise ValueError("empty batch")
    coords, dms, nmask = _batch_inputs(batch, params.cfg)
    beta_t, A_t = forward_graph(coords, dms, nmask, params, training=True,
                                counter=counter)
    beta = np.asarray(beta_t.data)
    A = np.asarray(A_t.data)

    tours = np.stack([
        sample_decode(ModelOutput(beta=beta[i], A=A[i]), rng).tour
        for i in range(len(batch))
    ])

    if cfg.critic_mode == "original_two_module":
        if baseline_params is None:
            raise ValueError("original_two_module mode needs baseline params")
        with ad.no_grad():
            bb, bA = forward_graph(coords, dms, nmask, baseline_params,
                                   training=False, counter=counter)
        greedy_tours = greedy_decode_batch(np.asarray(bb.data), np.asarray(bA.data))
    else:
        greedy_tours = greedy_decode_batch(beta, A)

    idx = np.arange(len(batch))[:, None]
    sample_len = dms[idx, tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    greedy_len = dms[idx, greedy_tours, np.roll(greedy_tours, -1, axis=1)].sum(axis=1)

    raw = sample_len - greedy_len
    omega = float(raw.mean())
    adv = raw - omega if cfg.omega_mode == "centered" else raw + omega

    logp = batch_log_prob(beta_t, A_t, tours)
    adv_t = Tensor(adv.astype(beta_t.data.dtype))
    surrogate = ad.reduce_mean(ad.mul(adv_t, logp))
    if not np.isfinite(surrogate.data):
        raise NumericAbort(f"non-finite surrogate loss: {float(surrogate.data)!r}")
    surrogate.backward()

    sq = 0.0
    for name, p in params.named_parameters():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}")
        sq += float((p.grad.astype(np.float64) ** 2).sum())

    return StepStats(mean_sample_length=float(sample_len.mean()),
                     mean_greedy_length=float(greedy_len.mean()),
                     omega=omega, grad_norm=float(np.sqrt(sq)),
                     advantages=adv, surrogate=float(surrogate.data))


# ---------------------------------------------------------------------------
# Checkpoints: one .npz container with named little-endian arrays plus a
# JSON metadata block (see README for the layout).

@dataclass
class Checkpoint:
    params: ModelParams
    best_val: float = float("inf")
    epoch: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    train_cfg: dict | None = None
    baseline_arrays: dict | None = None
    version: str = CHECKPOINT_VERSION


def _le(a: np.ndarray) -> np.ndarray:
    dt = a.dtype.newbyteorder("<")
    return a.astype(dt, copy=False)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {k: _le(v) for k, v in ckpt.params.state_arrays().items()}
    if ckpt.adam is not None:
        for k, v in ckpt.adam.m.items():
            arrays[f"adam/m/{k}"] = _le(v)
        for k, v in ckpt.adam.v.items():
            arrays[f"adam/v/{k}"] = _le(v)
    if ckpt.baseline_arrays is not None:
        for k, v in ckpt.baseline_arrays.items():
            arrays[f"baseline/{k}"] = _le(v)
    meta = {
        "version": ckpt.version,
        "model_cfg": dataclasses.asdict(ckpt.params.cfg),
        "dtype": str(ckpt.params.dtype),
        "best_val": ckpt.best_val,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "train_cfg": ckpt.train_cfg,
        "has_adam": ckpt.adam is not None,
        "adam_t": ckpt.adam.t if ckpt.adam is not None else 0,
        "has_baseline": ckpt.baseline_arrays is not None,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']!r}")
        cfg = ModelConfig(**meta["model_cfg"])
        params = ModelParams(cfg, dtype=np.dtype(meta["dtype"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    params.load_state_arrays({k: v for k, v in arrays.items()
                              if k.startswith(("param/", "bnstat/"))})
    adam = None
    if meta["has_adam"]:
        adam = AdamState.for_params(params)
        adam.t = int(meta["adam_t"])
        for k in adam.m:
            adam.m[k] = np.ascontiguousarray(arrays[f"adam/m/{k}"])
            adam.v[k] = np.ascontiguousarray(arrays[f"adam/v/{k}"])
    baseline = None
    if meta.get("has_baseline"):
        baseline = {k[len("baseline/"):]: np.ascontiguousarray(v)
                    for k, v in arrays.items() if k.startswith("baseline/")}
    return Checkpoint(params=params, best_val=float(meta["best_val"]),
                      epoch=int(meta["epoch"]), adam=adam,
                      rng_state=meta["rng_state"], train_cfg=meta["train_cfg"],
                      baseline_arrays=baseline, version=meta["version"])


# ---------------------------------------------------------------------------
# Training loop

LOG_COLUMNS = ("epoch", "step", "mean_L_sample", "mean_L_greedy", "omega",
               "grad_norm", "elapsed_s")


def _validation_instances(cfg: TrainConfig) -> list[TspInstance]:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    return [TspInstance(coords=rng.random((cfg.n, 2)), metric=cfg.metric,
                        name=f"val-{i}") for i in range(cfg.val_size)]


def greedy_validation_mean(params: ModelParams, instances: Sequence[TspInstance],
                           chunk: int = 256) -> float:
    """Mean greedy tour length over a frozen set, eval-mode forward."""
    total = 0.0
    for lo in range(0, len(instances), chunk):
        part = instances[lo:lo + chunk]
        outs = forward_batch(part, params, mode="eval")
        beta = np.stack([o.beta for o in outs])
        A = np.stack([o.A for o in outs])
        tours = greedy_decode_batch(beta, A)
        for inst, tour in zip(part, tours):
            total += tour_length(tour, distance_matrix(inst))
    return total / len(instances)


def train(cfg: TrainConfig, resume: str | None = None,
          counter: ForwardCounter | None = None,
          log_hook: Callable[[StepStats], None] | None = None) -> Checkpoint:
    """Run the full loop: fresh random batches every step, Adam updates,
    greedy validation each epoch, checkpoint saved on improvement. Returns
    the best checkpoint."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)

    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    start_epoch = 0
    best_val = float("inf")
    baseline_params = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.train_cfg is not None:
            saved = dict(ckpt.train_cfg)
            saved_model = ModelConfig(**saved.pop("model"))
            if saved_model != cfg.model:
                raise ValueError("resume checkpoint model config mismatch")
        params = ckpt.params
        adam = ckpt.adam if ckpt.adam is not None else AdamState.for_params(params)
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch
        best_val = ckpt.best_val
        if cfg.critic_mode == "original_two_module":
            baseline_params = ModelParams(cfg.model, dtype=dtype)
            if ckpt.baseline_arrays is not None:
                baseline_params.load_state_arrays(ckpt.baseline_arrays)
            else:
                baseline_params.load_state_arrays(params.state_arrays())
    else:
        params = init_params(cfg.model, seed=cfg.seed, dtype=dtype)
        adam = AdamState.for_params(params)
        if cfg.critic_mode == "original_two_module":
            baseline_params = params.copy()

    val_instances = _validation_instances(cfg)
    best_params = params.copy()
    log_path = out_dir / "train_log.csv"
    write_header = not (resume is not None and log_path.exists())
    log_fh = open(log_path, "a" if not write_header else "w", newline="")
    log = csv.writer(log_fh)
    if write_header:
        log.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()

    train_cfg_dict = dataclasses.asdict(cfg)
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            for step in range(1, cfg.steps_per_epoch + 1):
                batch_coords = rng.random((cfg.batch_size, cfg.n, 2))
                batch = [TspInstance(coords=c, metric=cfg.metric) for c in batch_coords]
                stats = reinforce_step(batch, params, cfg, rng,
                                       baseline_params=baseline_params,
                                       counter=counter)
                adam_step(params, adam, cfg.lr)
                log.writerow([epoch, step, f"{stats.mean_sample_length:.6f}",
                              f"{stats.mean_greedy_length:.6f}",
                              f"{stats.omega:.6f}", f"{stats.grad_norm:.6f}",
                              f"{time.perf_counter() - t0:.3f}"])
                if log_hook is not None:
                    log_hook(stats)
            log_fh.flush()

            val_mean = greedy_validation_mean(params, val_instances)
            improved = val_mean < best_val
            if improved:
                best_val = val_mean
                best_params = params.copy()
                save_checkpoint(out_dir / "checkpoint_best.npz",
                                Checkpoint(params=params, best_val=best_val,
                                           epoch=epoch, train_cfg=train_cfg_dict))
                if baseline_params is not None:
                    baseline_params.load_state_arrays(params.state_arrays())
            latest = Checkpoint(
                params=params, best_val=best_val, epoch=epoch, adam=adam,
                rng_state=rng.bit_generator.state, train_cfg=train_cfg_dict,
                baseline_arrays=baseline_params.state_arrays()
                if baseline_params is not None else None)
            save_checkpoint(out_dir / "checkpoint_latest.npz", latest)
    finally:
        log_fh.close()

    return Checkpoint(params=best_params, best_val=best_val, epoch=cfg.epochs,
                      train_cfg=train_cfg_dict)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class EvalReport:
    lengths: np.ndarray
    mean_length: float
    gap: float | None
    oracle_mean: float | None
    t_time: float
    s_time_mean: float | None
    policy: str
    start_min: np.ndarray | None = None
    start_mean: np.ndarray | None = None
    start_max: np.ndarray | None = None


def _decode_one(out: ModelOutput, policy: str, beam: BeamConfig,
                dm: np.ndarray, seed) -> np.ndarray:
    if policy == "greedy":
        return greedy_decode(out).tour
    if policy == "sample":
        return sample_decode(out, seed).tour
    if policy == "beam":
        return beam_decode(out, beam, dm=dm)
    raise ValueError(f"unknown policy {policy!r}")


def all_starts_lengths(out: ModelOutput, dm: np.ndarray) -> np.ndarray:
    """Greedy tour length when decoding is forced to begin at each node."""
    n = out.n
    forced = np.full((n, n), neg_inf(out.beta.dtype), dtype=out.beta.dtype)
    np.fill_diagonal(forced, 0.0)
    tours = greedy_decode_batch(forced, np.broadcast_to(out.A, (n, n, n)))
    return dm[tours, np.roll(tours, -1, axis=1)].sum(axis=1)


def evaluate(params: ModelParams, instances: Sequence[TspInstance],
             policy: str = "greedy", beam: BeamConfig | None = None,
             seed: int = 0, oracle_lengths: np.ndarray | None = None,
             all_starts: bool = False, measure_single: bool = False,
             chunk: int = 256) -> EvalReport:
    """Deterministic lengths, optional gap vs an oracle, wall-clock timing.

    T time is the batched total over all instances; S time (optional)
    averages per-instance solves including their own forward pass.
    """
    beam = beam or BeamConfig()
    dms = [distance_matrix(i) for i in instances]
    lengths = np.zeros(len(instances))
    smin = np.zeros(len(instances)) if all_starts else None
    smean = np.zeros(len(instances)) if all_starts else None
    smax = np.zeros(len(instances)) if all_starts else None

    t_start = time.perf_counter()
    pos = 0
    for lo in range(0, len(instances), chunk):
        part = instances[lo:lo + chunk]
        outs = forward_batch(part, params, mode="eval")
        for out, inst in zip(outs, part):
            dm = dms[pos]
            tour = _decode_one(out, policy, beam, dm,
                               np.random.default_rng([seed, pos]))
            lengths[pos] = tour_length(tour, dm)
            if all_starts:
                sl = all_starts_lengths(out, dm)
                smin[pos], smean[pos], smax[pos] = sl.min(), sl.mean(), sl.max()
            pos += 1
    t_time = time.perf_counter() - t_start

    s_time_mean = None
    if measure_single:
        times = []
        for i, inst in enumerate(instances):
            t1 = time.perf_counter()
            out = forward_batch([inst], params, mode="eval")[0]
            _decode_one(out, policy, beam, dms[i], np.random.default_rng([seed, i]))
            times.append(time.perf_counter() - t1)
        s_time_mean = float(np.mean(times))

    gap = None
    oracle_mean = None
    if oracle_lengths is not None:
        oracle_mean = float(np.mean(oracle_lengths))
        gap = float(lengths.mean() / oracle_mean - 1.0)
    return EvalReport(lengths=lengths, mean_length=float(lengths.mean()),
                      gap=gap, oracle_mean=oracle_mean, t_time=t_time,
                      s_time_mean=s_time_mean, policy=policy,
                      start_min=smin, start_mean=smean, start_max=smax)
