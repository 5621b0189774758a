import csv
import io
import logging
import math
from time import time as ts
from typing import Callable, List, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from . import utils
from .exceptions import NonFiniteGradientError, TrainingDivergedError
from .models import EpochLosses, LossCurves, TrainConfig

logger = logging.getLogger(__name__)

LOSS_CURVE_COLUMNS = ["epoch", "train_total", "train_prof", "train_scen", "val_total", "val_prof", "val_scen"]


class AdamWState:
    def __init__(self, params: Sequence[torch.Tensor]):
        self.step = 0
        self.exp_avg = [torch.zeros_like(p) for p in params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in params]


def adamw_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamWState, config: TrainConfig
) -> Tuple[List[torch.Tensor], AdamWState]:
    """
    One AdamW update with bias correction and decoupled decay:

        p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)

    Returns new parameter tensors; `state` is advanced in place and returned.
    """
    if not (len(params) == len(grads) == len(state.exp_avg)):
        raise ValueError(
            f"params ({len(params)}), grads ({len(grads)}) and state ({len(state.exp_avg)}) must have equal length"
        )

    for i, (p, g, m) in enumerate(zip(params, grads, state.exp_avg)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"Shape mismatch at parameter {i}: param {p.shape}, grad {g.shape}, state {m.shape}")

        bad = (~torch.isfinite(g)).sum().item()
        if bad:
            raise NonFiniteGradientError(f"Parameter {i} (shape {tuple(p.shape)}) has {bad} non-finite gradient values")

    beta1, beta2 = config.beta1, config.beta2
    lr, wd, eps = config.learning_rate, config.weight_decay, config.eps

    state.step += 1
    bias_correction1 = 1.0 - beta1**state.step
    bias_correction2 = 1.0 - beta2**state.step

    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = beta1 * state.exp_avg[i] + (1.0 - beta1) * g
        v = beta2 * state.exp_avg_sq[i] + (1.0 - beta2) * g * g
        state.exp_avg[i] = m
        state.exp_avg_sq[i] = v

        m_hat = m / bias_correction1
        v_hat = v / bias_correction2
        updated.append(p - lr * (m_hat / (torch.sqrt(v_hat) + eps) + wd * p))

    return updated, state


class AdamW(torch.optim.Optimizer):
    """torch optimizer front for `adamw_step`; every parameter is decayed."""

    def __init__(self, params, config: TrainConfig):
        super().__init__(params, {"config": config})

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None if closure is None else closure()

        for index, group in enumerate(self.param_groups):
            params = group["params"]
            # Parameters without a gradient this step still receive the decay term
            grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in params]

            state = self.state.setdefault(f"group-{index}", {}).get("adamw")
            if state is None:
                state = AdamWState(params)
                self.state[f"group-{index}"]["adamw"] = state

            updated, _ = adamw_step(params, grads, state, group["config"])
            for p, new in zip(params, updated):
                p.copy_(new)

        return loss


class StepLoss:
    """Loss of one batch: `total` drives the gradient; sub-losses are logged when present."""

    def __init__(
        self, total: torch.Tensor, l_prof: Optional[torch.Tensor] = None, l_scen: Optional[torch.Tensor] = None
    ):
        self.total = total
        self.l_prof = l_prof
        self.l_scen = l_scen


LossFn = Callable[[nn.Module, Tuple[torch.Tensor, ...]], StepLoss]


def epoch_order(num_examples: int, seed: int, epoch: int) -> List[int]:
    generator = torch.Generator().manual_seed(utils.derive_seed(seed, "shuffle", epoch))
    return torch.randperm(num_examples, generator=generator).tolist()


class _LossMeter:
    def __init__(self):
        self.count = 0
        self.total = 0.0
        self.prof = 0.0
        self.scen = 0.0
        self.has_sub_losses = False

    def update(self, loss: StepLoss, batch_size: int):
        self.count += batch_size
        self.total += loss.total.item() * batch_size
        if loss.l_prof is not None and loss.l_scen is not None:
            self.has_sub_losses = True
            self.prof += loss.l_prof.item() * batch_size
            self.scen += loss.l_scen.item() * batch_size

    def means(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        if not self.count:
            return None, None, None

        total = self.total / self.count
        if not self.has_sub_losses:
            return total, None, None

        return total, self.prof / self.count, self.scen / self.count


def evaluate_loss(model: nn.Module, dataset: Dataset, loss_fn: LossFn, batch_size: int) -> _LossMeter:
    meter = _LossMeter()
    was_training = model.training
    model.eval()

    with torch.no_grad():
        for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            meter.update(loss_fn(model, tuple(batch)), batch[0].shape[0])

    model.train(was_training)
    return meter


def train_model(
    model: nn.Module,
    train_data: Dataset,
    val_data: Optional[Dataset],
    config: TrainConfig,
    loss_fn: LossFn,
    name: str = "model",
    curves_path: Optional[str] = None,
) -> Tuple[nn.Module, LossCurves]:
    """
    AdamW over `config.epochs` epochs of ceil(n / batch_size) steps each.

    Shuffle order is derived from (config.seed, epoch). Validation runs once per epoch on the full `val_data`.
    A non-finite loss aborts with TrainingDivergedError after flushing the curves gathered so far.
    """
    n = len(train_data)
    if n == 0:
        raise ValueError(f"{name}: training set is empty")

    optimizer = AdamW(model.parameters(), config)
    curves = LossCurves()
    steps_per_epoch = math.ceil(n / config.batch_size)

    logger.info("Training %s: %d examples, %d epochs x %d steps", name, n, config.epochs, steps_per_epoch)

    s = ts()
    step = 0

    for epoch in range(1, config.epochs + 1):
        model.train()
        meter = _LossMeter()
        loader = DataLoader(train_data, batch_size=config.batch_size, sampler=epoch_order(n, config.seed, epoch))

        for batch in loader:
            step += 1
            optimizer.zero_grad()

            loss = loss_fn(model, tuple(batch))
            value = loss.total.item()
            if not math.isfinite(value):
                if curves_path:
                    write_loss_curves_csv(curves, curves_path)
                raise TrainingDivergedError(epoch, step, value)

            loss.total.backward()
            optimizer.step()
            meter.update(loss, batch[0].shape[0])

        train_total, train_prof, train_scen = meter.means()
        val_total = val_prof = val_scen = None
        if val_data is not None and len(val_data):
            val_total, val_prof, val_scen = evaluate_loss(model, val_data, loss_fn, config.batch_size).means()

        curves.append(
            EpochLosses(
                epoch=epoch,
                train_total=train_total,
                train_prof=train_prof,
                train_scen=train_scen,
                val_total=val_total,
                val_prof=val_prof,
                val_scen=val_scen,
            )
        )
        logger.debug("%s epoch %d: train=%.5f val=%s", name, epoch, train_total, val_total)

    logger.info("Trained %s in %.3fs (%d steps)", name, ts() - s, step)

    if curves_path:
        write_loss_curves_csv(curves, curves_path)

    model.eval()
    return model, curves


def _format_value(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def loss_curves_to_csv(curves: LossCurves) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOSS_CURVE_COLUMNS)

    for record in curves.records:
        writer.writerow([record.epoch] + [_format_value(getattr(record, c)) for c in LOSS_CURVE_COLUMNS[1:]])

    return buffer.getvalue()


def write_loss_curves_csv(curves: LossCurves, path: str):
    utils.write_text(path, loss_curves_to_csv(curves))


def read_loss_curves_csv(path: str) -> LossCurves:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != LOSS_CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")

        records = []
        for row in reader:
            values = {c: (float(row[c]) if row[c] != "" else None) for c in LOSS_CURVE_COLUMNS[1:]}
            records.append(EpochLosses(epoch=int(row["epoch"]), **values))

    return LossCurves(records=records)


def average_curves(curves: Sequence[LossCurves]) -> LossCurves:
    """Epoch-wise mean of same-length curves (Method 2 reports the mean over its cells)."""
    if not curves:
        return LossCurves()

    averaged = LossCurves()
    for records in zip(*(c.records for c in curves)):

        def _mean(name):
            values = [getattr(r, name) for r in records]
            if any(v is None for v in values):
                return None
            return sum(values) / len(values)

        averaged.append(EpochLosses(epoch=records[0].epoch, **{c: _mean(c) for c in LOSS_CURVE_COLUMNS[1:]}))

    return averaged
