"""Loss mixing across prediction levels, Adam with the inverse-sqrt warmup
schedule, checkpoint averaging, and the training loop."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctc, diffcore as dc
from .diffcore import ContractError, NumericError, ParamStore, Tensor
from .encoder import EncoderModel, ForwardOutput
from .labels import error_rate
from .synthdata import Utterance


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run.

    `mix_weight` balances the final loss against the averaged intermediate
    losses; 0 means pure final-loss training.
    """

    mix_weight: float = 0.5
    epochs: int = 200
    batch_size: int = 10
    warmup_steps: int = 500
    lr_factor: float = 2.0
    seed: int = 0
    average_k: int = 10
    max_steps: int | None = None
    eval_interval: int = 50
    grad_clip: float = 5.0
    early_stop_train_cer: float | None = None
    n_workers: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.mix_weight < 1.0:
            raise ContractError(f"mix_weight must be in [0, 1), got {self.mix_weight}")
        if self.average_k < 1:
            raise ContractError(f"average_k must be >= 1, got {self.average_k}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_interval < 1:
            raise ContractError("batch_size, epochs, and eval_interval must be >= 1")
        if self.warmup_steps < 1:
            raise ContractError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


@dataclass
class MetricsRow:
    """One logged evaluation point."""

    step: int
    lr: float
    loss_total: float
    loss_final: float
    inter_losses: dict[tuple[str, int], float]
    cer_train: float
    cer_valid: float
    ser_valid: dict[int, float]


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    best_checkpoints: list[tuple[int, float]]
    averaged_store: ParamStore
    aborted: bool
    steps_run: int


def ctc_loss_node(probs: Tensor, target: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood as a graph node over a posterior matrix."""
    result = ctc.ctc_loss(probs.value, target)
    out = Tensor(np.float64(result.loss), parents=(probs,), op="ctc_nll")

    def _bwd() -> None:
        contribution = float(out.grad) * result.grad
        if probs.grad is None:
            probs.grad = contribution
        else:
            probs.grad += contribution

    out._backward = _bwd
    return out


def total_loss(
    out: ForwardOutput,
    char_target: Sequence[int],
    syl_target: Sequence[int],
    mix_weight: float,
) -> tuple[Tensor, dict]:
    """Weighted sum of the final character loss and all intermediate losses.

    The final loss gets weight (1 - mix_weight); each intermediate loss gets
    mix_weight divided by the number of intermediate prediction points, so the
    coefficients always sum to one.  With no intermediate layers the final
    loss is returned as-is.
    """
    final_node = ctc_loss_node(out.final, char_target)
    parts: dict = {"final": float(final_node.value)}
    inter_nodes: list[Tensor] = []
    for layer in sorted(out.char_inters):
        node = _layer_loss(out.char_inters[layer], char_target, "char", layer)
        parts[("char", layer)] = float(node.value)
        inter_nodes.append(node)
    for layer in sorted(out.syl_inters):
        node = _layer_loss(out.syl_inters[layer], syl_target, "syl", layer)
        parts[("syl", layer)] = float(node.value)
        inter_nodes.append(node)
    if mix_weight == 0.0 or not inter_nodes:
        return final_node, parts
    per_layer = mix_weight / len(inter_nodes)
    total = dc.scale(final_node, 1.0 - mix_weight)
    for node in inter_nodes:
        total = dc.add(total, dc.scale(node, per_layer))
    return total, parts


def _layer_loss(probs: Tensor, target: Sequence[int], level: str, layer: int) -> Tensor:
    try:
        return ctc_loss_node(probs, target)
    except ctc.InfeasibleAlignmentError as exc:
        raise ctc.InfeasibleAlignmentError(f"{level} head at layer {layer}: {exc}") from exc


def noam_lr(step: int, d_model: int, warmup_steps: int, factor: float) -> float:
    """Inverse-sqrt schedule with linear warmup, peaking at `warmup_steps`."""
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    return factor * d_model ** (-0.5) * min(step ** (-0.5), step * warmup_steps ** (-1.5))


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over every parameter in the store."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in store.names():
        tensor = store[name]
        g = tensor.grad_or_zeros()
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m, v = store.moments(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for name in store.names():
        g = store[name].grad
        if g is not None:
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for name in store.names():
            if store[name].grad is not None:
                store[name].grad *= factor
    return norm


def average_checkpoints(stores: Sequence[ParamStore]) -> ParamStore:
    """Elementwise arithmetic mean of the parameter values."""
    if not stores:
        raise ContractError("no checkpoints to average")
    names = stores[0].names()
    for other in stores[1:]:
        if other.names() != names:
            raise ContractError("checkpoint parameter names do not match")
    out = ParamStore()
    for name in names:
        shape = stores[0][name].value.shape
        for other in stores[1:]:
            if other[name].value.shape != shape:
                raise ContractError(f"checkpoint shapes differ for {name!r}")
        stack = np.stack([s[name].value for s in stores])
        out.add(name, stack.mean(axis=0))
    return out


def layerwise_error_rates(
    model: EncoderModel, utts: Sequence[Utterance]
) -> dict[tuple[str, int], float]:
    """Greedy-decoding error rate per prediction point over a dataset.

    Keys are ("char", layer) and ("syl", layer); the final character output
    appears under layer n_layers.
    """
    pairs: dict[tuple[str, int], list] = {}
    for utt in utts:
        out = model.forward(utt.features)
        _collect_pairs(pairs, out, utt, model.n_layers)
    return {key: error_rate(vals) for key, vals in sorted(pairs.items())}


def _collect_pairs(pairs: dict, out: ForwardOutput, utt: Utterance, last_layer: int) -> None:
    pairs.setdefault(("char", last_layer), []).append(
        (utt.char_ids, ctc.greedy_decode(out.final.value))
    )
    for layer, probs in out.char_inters.items():
        pairs.setdefault(("char", layer), []).append(
            (utt.char_ids, ctc.greedy_decode(probs.value))
        )
    for layer, probs in out.syl_inters.items():
        pairs.setdefault(("syl", layer), []).append(
            (utt.syl_ids, ctc.greedy_decode(probs.value))
        )


def _evaluate(
    model: EncoderModel, utts: Sequence[Utterance], mix_weight: float
) -> tuple[float, dict[tuple[str, int], float], dict]:
    """Mean total loss, per-point error rates, and mean per-part losses in one
    pass over `utts`."""
    pairs: dict[tuple[str, int], list] = {}
    losses = []
    part_sums: dict = {}
    for utt in utts:
        out = model.forward(utt.features)
        node, parts = total_loss(out, utt.char_ids, utt.syl_ids, mix_weight)
        losses.append(float(node.value))
        for key, val in parts.items():
            part_sums[key] = part_sums.get(key, 0.0) + val
        _collect_pairs(pairs, out, utt, model.n_layers)
    rates = {key: error_rate(vals) for key, vals in sorted(pairs.items())}
    part_means = {key: val / len(utts) for key, val in part_sums.items()}
    return float(np.mean(losses)), rates, part_means


def metrics_columns(placement) -> list[str]:
    inter = sorted(
        [("char", n) for n in placement.char_layers]
        + [("syl", n) for n in placement.syl_layers],
        key=lambda kv: (kv[1], kv[0]),
    )
    cols = ["step", "lr", "loss_total", "loss_final"]
    cols += [f"loss_layer_{n}_{level}" for level, n in inter]
    cols += ["cer_valid"]
    cols += [f"ser_valid_{n}" for n in sorted(placement.syl_layers)]
    return cols


def write_metrics_csv(rows: Sequence[MetricsRow], placement, path: str | Path) -> None:
    """Fixed-header CSV: step, lr, losses per layer, then validation rates."""
    inter = sorted(
        [("char", n) for n in placement.char_layers]
        + [("syl", n) for n in placement.syl_layers],
        key=lambda kv: (kv[1], kv[0]),
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metrics_columns(placement))
        for row in rows:
            record = [row.step, repr(row.lr), repr(row.loss_total), repr(row.loss_final)]
            record += [repr(row.inter_losses[key]) for key in inter]
            record += [repr(row.cer_valid)]
            record += [repr(row.ser_valid[n]) for n in sorted(placement.syl_layers)]
            writer.writerow(record)


@dataclass
class _Checkpoint:
    step: int
    valid_loss: float
    store: ParamStore


def train(
    model: EncoderModel,
    train_set: Sequence[Utterance],
    valid_set: Sequence[Utterance],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Run the optimization loop; deterministic given the model seed and cfg.seed.

    Batches are lists of utterances; each builds its own graph and the batch
    loss is their mean, so no frame padding is needed.  Evaluation every
    `eval_interval` steps records a metrics row and a checkpoint candidate;
    the `average_k` best checkpoints by validation total loss are averaged
    into the final parameter set.  A non-finite loss or gradient aborts the
    run, returning the last finite parameters.
    """
    if not train_set:
        raise ContractError("training set is empty")
    if not valid_set:
        raise ContractError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    n_train = len(train_set)
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    step_budget = cfg.max_steps if cfg.max_steps else cfg.epochs * steps_per_epoch

    metrics: list[MetricsRow] = []
    best: list[_Checkpoint] = []
    aborted = False
    step = 0
    pool = ThreadPoolExecutor(cfg.n_workers) if cfg.n_workers > 1 else None

    def forward_one(utt: Utterance) -> Tensor:
        out = model.forward(utt.features)
        node, _ = total_loss(out, utt.char_ids, utt.syl_ids, cfg.mix_weight)
        return node

    def evaluate_now(lr: float) -> MetricsRow:
        valid_loss, valid_rates, _ = _evaluate(model, valid_set, cfg.mix_weight)
        train_loss, train_rates, train_parts = _evaluate(model, train_set, cfg.mix_weight)
        inter = {k: v for k, v in train_parts.items() if isinstance(k, tuple)}
        row = MetricsRow(
            step=step,
            lr=lr,
            loss_total=train_loss,
            loss_final=train_parts["final"],
            inter_losses=inter,
            cer_train=train_rates[("char", model.n_layers)],
            cer_valid=valid_rates[("char", model.n_layers)],
            ser_valid={n: valid_rates[("syl", n)] for n in sorted(model.placement.syl_layers)},
        )
        metrics.append(row)
        best.append(_Checkpoint(step, valid_loss, model.store.clone()))
        best.sort(key=lambda c: (c.valid_loss, c.step))
        del best[cfg.average_k :]
        return row

    try:
        done = False
        while not done:
            order = rng.permutation(n_train)
            for start in range(0, n_train, cfg.batch_size):
                batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
                step += 1
                lr = noam_lr(step, model.cfg.d_model, cfg.warmup_steps, cfg.lr_factor)
                model.store.zero_grad()
                try:
                    if pool is not None:
                        nodes = list(pool.map(forward_one, batch))
                    else:
                        nodes = [forward_one(u) for u in batch]
                    batch_loss = nodes[0]
                    for node in nodes[1:]:
                        batch_loss = dc.add(batch_loss, node)
                    batch_loss = dc.scale(batch_loss, 1.0 / len(nodes))
                    if not np.isfinite(batch_loss.value):
                        raise NumericError(f"non-finite loss at step {step}")
                    dc.backward(batch_loss)
                    clip_global_norm(model.store, cfg.grad_clip)
                    adam_step(model.store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                except NumericError:
                    # Divergence: stop with the last finite parameters intact.
                    aborted = True
                    done = True
                    break
                if step % cfg.eval_interval == 0 or step >= step_budget:
                    row = evaluate_now(lr)
                    if (
                        cfg.early_stop_train_cer is not None
                        and row.cer_train <= cfg.early_stop_train_cer
                    ):
                        done = True
                        break
                if step >= step_budget:
                    done = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    if not metrics and not aborted:
        evaluate_now(noam_lr(max(step, 1), model.cfg.d_model, cfg.warmup_steps, cfg.lr_factor))
    if not best:
        # Aborted before the first evaluation: keep the last finite parameters.
        best.append(_Checkpoint(step, math.inf, model.store.clone()))
    averaged = average_checkpoints([c.store for c in best])

    if out_dir is not None:
        out = Path(out_dir)
        write_metrics_csv(metrics, model.placement, out / "metrics.csv")
        for cp in best:
            model.with_store(cp.store).save(
                out / f"checkpoint_{cp.step:06d}.ntc", extra_meta=checkpoint_meta
            )
        model.with_store(averaged).save(out / "model_avg.ntc", extra_meta=checkpoint_meta)

    return TrainResult(
        metrics=metrics,
        best_checkpoints=[(c.step, c.valid_loss) for c in best],
        averaged_store=averaged,
        aborted=aborted,
        steps_run=step,
    )
