"""Quantisation-aware training with full-precision master weights."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..activations import ContinuationSchedule, beta_at
from ..errors import DomainError, TrainingError
from ..network.model import BNParams, Model, forward as net_forward, predict_mask, quantize_model
from ..network.spec import NetworkSpec, build_toy, canonical_mode
from . import graph
from .data import synth_dataset
from .layers import softmax_ce_forward
from .metrics import mean_dice

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "beta", "train_loss", "val_dice", "mean_weight_sparsity"]


@dataclass
class TrainConfig:
    lr: float = 0.0025
    batch_size: int = 10
    epochs: int = 40
    iters_per_epoch: int = 150
    w_bg: float = 0.5
    w_fg: float = 2.5
    schedule: ContinuationSchedule | None = None  # None: 3.0 -> 8.0 over `epochs`
    mode: str = "ternary-full"
    seed: int = 0
    binary_grad: str = "continuation"
    sparsity: float | None = None
    # desk-scale network and data
    width: int = 8
    levels: int = 3
    in_slices: int = 3
    size: int = 64
    n_train: int = 400
    n_val: int = 24
    ternarize_input: bool = False
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_final: float = 0.1  # last-epoch lr as a fraction of `lr`, decayed geometrically

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        for name in ("lr", "batch_size", "epochs", "iters_per_epoch", "w_bg", "w_fg",
                     "width", "levels", "in_slices", "size", "n_train", "n_val", "lr_final"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.seed < 0:
            raise DomainError("seed must be non-negative")
        if self.schedule is None:
            self.schedule = ContinuationSchedule(3.0, 8.0, self.epochs)
        elif self.schedule.total_epochs != self.epochs:
            self.schedule = dataclasses.replace(self.schedule, total_epochs=self.epochs)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """8 epochs of 50 iterations on the width-8 network."""
        base = dict(epochs=8, iters_per_epoch=50)
        base.update(overrides)
        return cls(**base)

    def learning_rate(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr
        return self.lr * self.lr_final ** (min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1))

    def network(self) -> NetworkSpec:
        return build_toy(self.width, self.in_slices, self.levels, self.size, mode=self.mode,
                         ternarize_input=self.ternarize_input)

    def policy(self) -> graph.Policy:
        return graph.policy_for(self.mode, self.binary_grad, self.sparsity)


@dataclass
class MasterWeights:
    """Full-precision parameters plus Adam moments; only :meth:`adam_step` writes them."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator) -> "MasterWeights":
        params, buffers = graph.init_params(spec, rng)
        return cls(spec, params, buffers,
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "MasterWeights":
        dup = lambda d: {k: v.copy() for k, v in d.items()}
        return MasterWeights(self.spec, dup(self.params), dup(self.buffers), dup(self.m),
                             dup(self.v), self.step)

    def adam_step(self, grads, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.step += 1
        b1, b2 = betas
        c1 = 1 - b1**self.step
        c2 = 1 - b2**self.step
        for k, g in grads.items():
            if k not in self.params:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(self.params[k].dtype)

    def to_model(self) -> Model:
        """Float inference model (master weights and running batch-norm statistics)."""
        weights, precision, bn, bias = {}, {}, {}, {}
        for layer in self.spec.layers:
            n = layer.name
            if layer.has_weights:
                weights[n] = self.params[f"{n}.w"].astype(np.float32)
                precision[n] = "float32"
            if layer.kind == "prediction":
                bias[n] = self.params[f"{n}.b"].astype(np.float32)
            if layer.kind == "batchnorm":
                bn[n] = BNParams(self.params[f"{n}.gain"], self.params[f"{n}.shift"],
                                 self.buffers[f"{n}.mean"], self.buffers[f"{n}.var"], graph.BN_EPS)
        return Model(self.spec, weights, precision, bn, bias)

    def weight_sparsity(self, policy: graph.Policy) -> dict[str, float]:
        """Fraction of zero codes per quantised convolution (0 for float/binary)."""
        out = {}
        for layer in self.spec.conv_layers:
            w = self.params[f"{layer.name}.w"]
            if policy.weights == "ternary":
                eff, _ = graph.quantised_filters(w, policy)
                out[layer.name] = float(np.mean(eff == 0))
            else:
                out[layer.name] = 0.0
        return out


def train_step(master: MasterWeights, batch, config: TrainConfig, epoch: int):
    """One optimisation step; returns ``(loss, master)``.

    The quantised weights exist only inside the forward/backward pass; the
    update is applied to the full-precision master copy.
    """
    images, masks = batch
    for name, p in master.params.items():
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"non-finite master weights in {name} before step {master.step}")
    policy = config.policy()
    beta = beta_at(config.schedule, epoch)
    scores, tape = graph.forward(master.spec, master.params, master.buffers, images, policy, beta)
    loss, dscores = softmax_ce_forward(scores, masks, (config.w_bg, config.w_fg))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {master.step}")
    grads = graph.backward(tape, dscores.astype(scores.dtype))
    master.adam_step(grads, config.learning_rate(epoch), config.adam_betas, config.adam_eps)
    return loss, master


def evaluate(master: MasterWeights, images, masks, config: TrainConfig, beta: float | None = None) -> float:
    """Mean validation Dice through the inference path.

    Ternary/binary modes evaluate with hard quantised activations and popcount
    convolutions; ternary-weights-only keeps the smooth activation at ``beta``.
    """
    model = master.to_model()
    if config.mode in ("ternary-full", "binary-full"):
        model = quantize_model(model, "ternary" if config.mode == "ternary-full" else "binary",
                               config.sparsity)
    scores = net_forward(model, images, mode=config.mode, beta=beta, hard=True)
    return mean_dice(predict_mask(scores), masks)


@dataclass
class TrainResult:
    master: MasterWeights
    metrics: list[dict]
    sparsity: list[dict]
    config: TrainConfig

    def model(self) -> Model:
        return self.master.to_model()

    def deployed_model(self) -> Model:
        """The master weights quantised for the configured mode."""
        model = self.master.to_model()
        if self.config.mode in ("ternary-full", "ternary-weights-only"):
            q = quantize_model(model, "ternary", self.config.sparsity)
            return dataclasses.replace(q, spec=model.spec)
        if self.config.mode == "binary-full":
            return quantize_model(model, "binary")
        return model


def train(config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Run all epochs; optionally write ``metrics.csv``, ``sparsity.csv`` and checkpoints."""
    seq = np.random.SeedSequence(config.seed)
    data_seq, val_seq, init_seq, batch_seq = seq.spawn(4)
    spec = config.network()
    policy = config.policy()
    train_x, train_y, _ = synth_dataset(np.random.default_rng(data_seq), config.n_train,
                                        config.size, config.in_slices)
    val_x, val_y, _ = synth_dataset(np.random.default_rng(val_seq), config.n_val,
                                    config.size, config.in_slices)
    master = MasterWeights.init(spec, np.random.default_rng(init_seq))
    batch_rng = np.random.default_rng(batch_seq)
    metrics, sparsity = [], []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = beta_at(config.schedule, epoch)
        losses = []
        for _ in range(config.iters_per_epoch):
            idx = batch_rng.integers(0, config.n_train, size=config.batch_size)
            loss, master = train_step(master, (train_x[idx], train_y[idx]), config, epoch)
            losses.append(loss)
        eval_beta = beta if config.mode == "ternary-weights-only" else None
        val = evaluate(master, val_x, val_y, config, beta=eval_beta)
        per_layer = master.weight_sparsity(policy)
        row = {
            "epoch": epoch + 1,
            "beta": beta,
            "train_loss": float(np.mean(losses)),
            "val_dice": val,
            "mean_weight_sparsity": float(np.mean(list(per_layer.values()))),
        }
        metrics.append(row)
        sparsity.extend({"epoch": epoch + 1, "layer": k, "zero_fraction": v} for k, v in per_layer.items())
        log.info("epoch %d beta %.3f loss %.4f dice %.4f sparsity %.3f (%.1fs)", epoch + 1, beta,
                 row["train_loss"], val, row["mean_weight_sparsity"], time.perf_counter() - t0)
        if progress:
            progress(row)
    result = TrainResult(master, metrics, sparsity, config)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: TrainResult, out_dir) -> None:
    from ..network.serialize import serialize

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_HEADER, result.metrics)
    write_csv(out / "sparsity.csv", ["epoch", "layer", "zero_fraction"], result.sparsity)
    serialize(result.model(), out / "master.tnn")
    serialize(result.deployed_model(), out / "model.tnn")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
