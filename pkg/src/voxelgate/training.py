"""Adam training loop, checkpointing, and case prediction.

One loop owns the model: per epoch it shuffles (seeded by epoch), batches,
runs forward in training mode, applies the soft Tversky loss, backward,
and an Adam step; after each epoch it evaluates the validation cases and
keeps the best-mean-dice checkpoint plus a resumable "last" checkpoint.
Everything downstream of (seed, config, dataset bytes) is deterministic.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics, model, nifti, vseg
from .errors import (
    EmptyDataset,
    InvalidConfig,
    MissingGradient,
    NonFiniteLoss,
    ShapeMismatch,
)
from .metrics import TverskyWeights
from .rng import make_rng
from .tensor import Tensor, backward


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 1
    seed: int = 0
    activation: str = "relu"
    tversky: TverskyWeights = field(default_factory=TverskyWeights)
    stop_at_val_dice: Optional[float] = None   # experiment-harness early exit

    def validate(self):
        if self.learning_rate <= 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.activation not in ("relu", "leaky_relu"):
            raise InvalidConfig(f"activation must be relu|leaky_relu, got {self.activation!r}")
        return self


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: model.ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        )


def adam_step(params: model.ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update: m, v moment tracking with bias correction, then
    p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if g is None:
            raise MissingGradient(f"no gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.dtype)


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_dice: float
    val_tversky_loss: float

    def as_csv(self):
        return (f"{self.epoch},{self.train_loss:.6f},"
                f"{self.val_dice:.6f},{self.val_tversky_loss:.6f}")


LOG_HEADER = "epoch,train_loss,val_dice,val_tversky_loss"


def _batch_tensor(cases, dtype) -> Tensor:
    shapes = {c.image.shape for c in cases}
    if len(shapes) != 1:
        raise ShapeMismatch(f"cases in one batch have differing extents: {shapes}")
    return Tensor(np.stack([c.image for c in cases]).astype(dtype))


def _batch_onehot(cases, n_classes, dtype) -> Tensor:
    return Tensor(np.stack([metrics.one_hot(c.labels, n_classes, dtype)
                            for c in cases]))


def train(config: TrainConfig, params: model.ModelParams, train_cases, val_cases,
          out_dir=None, resume_from=None) -> list:
    """Run the optimization loop; returns the list of per-epoch log rows.

    With ``out_dir`` set, writes log.csv plus best/ and last/ checkpoints.
    ``resume_from`` restores a last/ checkpoint and continues to
    config.epochs as if uninterrupted.
    """
    config.validate()
    train_cases = list(train_cases)
    val_cases = list(val_cases)
    if not train_cases:
        raise EmptyDataset("no training cases")
    for c in train_cases + val_cases:
        if c.labels is None:
            raise EmptyDataset(f"case {c.case_id} has no labels")

    state = AdamState.for_params(params)
    start_epoch = 1
    step = 0
    best_dice = -1.0
    rows = []
    if resume_from is not None:
        state, start_epoch, step, best_dice = _load_adam(Path(resume_from), params)

    dtype = next(iter(params.tensors.values())).dtype
    n_classes = params.config.out_classes
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs + 1):
        order = make_rng(config.seed, "shuffle", epoch).permutation(len(train_cases))
        shuffled = [train_cases[i] for i in order]
        losses = []
        for b0 in range(0, len(shuffled), config.batch_size):
            batch = shuffled[b0:b0 + config.batch_size]
            x = _batch_tensor(batch, dtype)
            y = _batch_onehot(batch, n_classes, dtype)
            params.zero_grads()
            probs = model.forward(params, x, training=True, step=step)
            loss = metrics.soft_tversky_loss(probs, y, config.tversky)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                ids = ",".join(c.case_id for c in batch)
                raise NonFiniteLoss(f"epoch {epoch}, batch {b0 // config.batch_size} "
                                    f"({ids}): loss is not finite")
            backward(loss)
            grads = {name: t.grad for name, t in params.tensors.items()}
            adam_step(params, grads, state, config.learning_rate)
            step += 1
            losses.append(loss_val)

        report = metrics.evaluate_split(params, val_cases, config.tversky)
        row = LogRow(epoch=epoch, train_loss=float(np.mean(losses)),
                     val_dice=report.mean_dice,
                     val_tversky_loss=report.mean_tversky_loss)
        rows.append(row)

        if out_dir is not None:
            _append_log(out_dir / "log.csv", row)
            if row.val_dice > best_dice:
                _save_checkpoint(out_dir / "checkpoints" / "best", config, params,
                                 state, epoch, step, row.val_dice)
            _save_checkpoint(out_dir / "checkpoints" / "last", config, params,
                             state, epoch, step, max(best_dice, row.val_dice))
        if row.val_dice > best_dice:
            best_dice = row.val_dice
        if config.stop_at_val_dice is not None and row.val_dice > config.stop_at_val_dice:
            break
    return rows


def _append_log(path: Path, row: LogRow) -> None:
    if not path.exists():
        path.write_text(LOG_HEADER + "\n")
    with open(path, "a") as fh:
        fh.write(row.as_csv() + "\n")


def _save_checkpoint(path: Path, config: TrainConfig, params, state: AdamState,
                     epoch: int, step: int, best_dice: float) -> None:
    path.mkdir(parents=True, exist_ok=True)
    model.save_params(params, path / "model")
    adam_dir = path / "adam"
    adam_dir.mkdir(exist_ok=True)
    for name, arr in state.m.items():
        vseg.save_array(arr.astype(np.float32), adam_dir / f"{name}.m.vseg")
    for name, arr in state.v.items():
        vseg.save_array(arr.astype(np.float32), adam_dir / f"{name}.v.vseg")
    lines = [
        f"t = {state.t}",
        f"epoch = {epoch}",
        f"step = {step}",
        f"best_dice = {best_dice!r}",
        f"learning_rate = {config.learning_rate!r}",
        f"batch_size = {config.batch_size}",
        f"epochs = {config.epochs}",
        f"seed = {config.seed}",
        f"activation = {config.activation}",
        f"tversky_alpha = {config.tversky.alpha!r}",
        f"tversky_beta = {config.tversky.beta!r}",
    ]
    (path / "state.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Restore (train config, model params, epoch, step, best dice)."""
    path = Path(path)
    params = model.load_params(path / "model")
    values = vseg.load_sidecar(path / "state.txt")
    config = TrainConfig(
        learning_rate=float(values["learning_rate"]),
        batch_size=int(values["batch_size"]),
        epochs=int(values["epochs"]),
        seed=int(values["seed"]),
        activation=values["activation"],
        tversky=TverskyWeights(float(values["tversky_alpha"]),
                               float(values["tversky_beta"])),
    )
    return config, params, int(values["epoch"]), int(values["step"]), float(values["best_dice"])


def _load_adam(path: Path, params) -> tuple:
    values = vseg.load_sidecar(path / "state.txt")
    state = AdamState(
        m={name: vseg.load_array(path / "adam" / f"{name}.m.vseg")
           for name in params.tensors},
        v={name: vseg.load_array(path / "adam" / f"{name}.v.vseg")
           for name in params.tensors},
        t=int(values["t"]),
    )
    loaded = model.load_params(path / "model")
    for name, tensor in params.tensors.items():
        tensor.data = loaded.tensors[name].data
    for name in params.buffers:
        params.buffers[name][...] = loaded.buffers[name]
    return state, int(values["epoch"]) + 1, int(values["step"]), float(values["best_dice"])


def predict_case(params: model.ModelParams, case, out_path=None, probs_path=None):
    """Predict hard labels (and optionally class probabilities) for one case.

    Labels go out as uint8 NIfTI when ``out_path`` is given; probabilities
    as a float32 VSEG1 blob when ``probs_path`` is given.
    """
    dtype = next(iter(params.tensors.values())).dtype
    batch = case.image[None].astype(dtype)
    probs = model.forward(params, batch, training=False)
    labels = np.argmax(probs.data[0], axis=0).astype(np.uint8)
    if out_path is not None:
        nifti.write_volume(nifti.volume_from_array(labels, datatype_code=2), out_path)
    if probs_path is not None:
        vseg.save_array(probs.data[0].astype(np.float32), probs_path)
    return labels, probs.data[0]
