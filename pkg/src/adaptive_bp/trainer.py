"""Training loop with budgeted selective backprop.

Strategies:
  full_ft            every tensor updated every step
  adaptive           importance is re-evaluated at each eval event and the
                     tensor subset re-planned under the FLOPs budget
  static_first_epoch one importance-based plan at the start, frozen after
  fixed_topk         the largest budget-feasible prefix of slots nearest the
                     loss, chosen once from the cost profile alone

Importance-evaluation passes are real work and their FLOPs are charged to
the run totals (reported separately from per-step training cost).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import backward_selective, forward, save_weights
from .errors import ConfigError, InfeasibleBudgetError, NumericError
from .graph import ModelDims, as_mask
from .importance import evaluate_importance
from .model import (TASKS, ToyModelConfig, batch_accuracy, build_toy_decoder,
                    synth_batch)
from .optim import make_optimizer
from .profiler import profile_flops, selective_cost
from .selector import dp_select

STRATEGIES = ("adaptive", "full_ft", "fixed_topk", "static_first_epoch")

LOSS_DIVERGENCE_CAP = 1e6


@dataclass
class RunConfig:
    dims: ModelDims
    task: str = "copy"
    strategy: str = "adaptive"
    rho: float = 0.5
    T_q: int = 1000
    dy_convention: str = "inclusive"
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 3
    steps_per_epoch: int = 200
    batch_size: int = 16
    eval_every: int = 100  # steps between importance re-evaluations
    seed: int = 0
    max_payload: int = 8
    init_checkpoint: str = ""  # warm-start weights (path prefix), e.g. fine-tuning

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError(f"rho={self.rho} outside (0, 1]")
        if min(self.epochs, self.steps_per_epoch, self.batch_size,
               self.eval_every) < 1:
            raise ConfigError("epochs, steps, batch size, eval_every must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.dy_convention not in ("inclusive", "exclusive"):
            raise ConfigError(f"unknown dy convention {self.dy_convention!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.dims.validate()


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    eval_accuracy: float
    train_flops: int
    importance_flops: int
    selected_slots: list


@dataclass
class TrainReport:
    config: dict
    T_full: int
    T_fp: int
    budget_flops: float
    epochs: list = field(default_factory=list)  # EpochRecord dicts
    step_flops: list = field(default_factory=list)
    final_loss: float = 0.0
    final_accuracy: float = 0.0
    total_train_flops: int = 0
    total_importance_flops: int = 0
    realized_reduction: float = 0.0
    plans: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_report.json"), "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        with open(os.path.join(out_dir, "epochs.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "epoch", "mean_loss", "eval_accuracy", "train_flops",
                "importance_flops", "selected_slots"])
            writer.writeheader()
            for rec in self.epochs:
                row = dict(rec)
                row["selected_slots"] = " ".join(map(str, row["selected_slots"]))
                writer.writerow(row)


def fixed_topk_mask(profile, rho: float, convention: str) -> np.ndarray:
    """Largest feasible prefix of slots nearest the loss.

    The slot-1 tensor is tied, so any prefix containing it pays full-depth
    dy cost; if even the one-tensor prefix overshoots, prefixes starting at
    slot 2 are used instead.
    """
    N = profile.n_tensors
    budget = rho * profile.T_full
    for start in (1, 2):
        best = None
        for k in range(start, N + 1):
            m = np.zeros(N, dtype=bool)
            m[start - 1 : k] = True
            if selective_cost(profile, m, convention) <= budget:
                best = m
            else:
                break
        if best is not None:
            return best
    raise InfeasibleBudgetError(
        f"no non-empty slot prefix fits budget rho={rho}")


def train(config: RunConfig, out_dir: str | None = None) -> TrainReport:
    config.validate()
    graph, weights = build_toy_decoder(ToyModelConfig(config.dims, config.seed))
    if config.init_checkpoint:
        from .engine import load_weights

        loaded = load_weights(config.init_checkpoint)
        if set(loaded) != set(weights):
            raise ConfigError("checkpoint tensors do not match the model")
        weights = loaded
    profile = profile_flops(graph, config.batch_size)
    budget = config.rho * profile.T_full
    if budget < profile.T_fp:
        raise InfeasibleBudgetError(
            f"budget rho*T_full={budget:.3g} below forward cost {profile.T_fp}")

    optimizer = make_optimizer(config.optimizer, lr=config.lr,
                               weight_decay=config.weight_decay)
    N = len(graph)
    convention = config.dy_convention

    if config.strategy == "full_ft":
        mask = np.ones(N, dtype=bool)
    elif config.strategy == "fixed_topk":
        mask = fixed_topk_mask(profile, config.rho, convention)
    else:
        mask = None  # planned at the first eval event

    report = TrainReport(config={**asdict(config), "dims": asdict(config.dims)},
                         T_full=profile.T_full, T_fp=profile.T_fp,
                         budget_flops=budget)

    def batch_at(index):
        return synth_batch(config.task, config.dims, config.batch_size,
                           config.seed, index, config.max_payload)

    def eval_accuracy(n_batches=8):
        accs = []
        for j in range(n_batches):
            b = batch_at(10**6 + j)  # held out of the training index stream
            _, tape, _ = forward(graph, weights, b)
            accs.append(batch_accuracy(tape.store["probs"], b))
        return float(np.mean(accs))

    global_step = 0
    last_loss = float("nan")
    for epoch in range(config.epochs):
        losses = []
        epoch_train = 0
        epoch_importance = 0
        for _ in range(config.steps_per_epoch):
            batch = batch_at(global_step)

            replan = (config.strategy == "adaptive"
                      and global_step % config.eval_every == 0)
            if mask is None or replan:
                vec, _, fm, bm = evaluate_importance(
                    graph, weights, batch, optimizer, profile, config.rho)
                plan = dp_select(profile, vec.values, config.rho,
                                 T_q=config.T_q, convention=convention)
                epoch_importance += fm.fp_flops + bm.bp_total
                mask = plan.mask
                report.plans.append({"step": global_step, **plan.to_json()})

            loss, tape, fwd_meter = forward(graph, weights, batch)
            if not np.isfinite(loss) or loss > LOSS_DIVERGENCE_CAP:
                raise NumericError(f"training loss diverged at step {global_step}: {loss}")
            grads, bwd_meter = backward_selective(tape, mask, convention)
            optimizer.step(weights, grads)

            step_cost = fwd_meter.fp_flops + bwd_meter.bp_total
            report.step_flops.append(int(step_cost))
            epoch_train += step_cost
            losses.append(loss)
            last_loss = loss
            global_step += 1

        acc = eval_accuracy()
        report.epochs.append(asdict(EpochRecord(
            epoch=epoch, mean_loss=float(np.mean(losses)), eval_accuracy=acc,
            train_flops=int(epoch_train), importance_flops=int(epoch_importance),
            selected_slots=(np.flatnonzero(mask) + 1).tolist())))
        report.total_train_flops += int(epoch_train)
        report.total_importance_flops += int(epoch_importance)

    report.final_loss = float(last_loss)
    report.final_accuracy = report.epochs[-1]["eval_accuracy"]
    full_equiv = profile.T_full * config.epochs * config.steps_per_epoch
    report.realized_reduction = 1.0 - report.total_train_flops / full_equiv

    if out_dir:
        report.save(out_dir)
        save_weights(os.path.join(out_dir, "weights"), weights)
        with open(os.path.join(out_dir, "graph.json"), "w") as fh:
            json.dump(graph.to_json(), fh, indent=2)
    return report
