"""Adam, the two-stage schedule and checkpointed training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, precision
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .config import check_fields
from .data import SequenceSample, epoch_order
from .losses import LossReport, LossWeights, SequencePrediction, total_loss
from .nets import NetConfig, RecurrentModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_stage1: int = 20
    epochs_stage2: int = 10
    repeats: int = 1
    window: int = 10
    stride: int = 1
    supervised: bool = False
    clip_norm: float = 10.0
    seed: int = 0
    precision: str = "float32"

    @property
    def total_epochs(self) -> int:
        return self.epochs_stage1 + self.epochs_stage2

    def stage(self, epoch: int) -> int:
        return 1 if epoch < self.epochs_stage1 else 2

    def max_interval(self, epoch: int) -> Optional[int]:
        """Stage 1 trains on consecutive pairs only; stage 2 on every pair."""
        return 1 if self.stage(epoch) == 1 else None

    def to_sections(self) -> dict:
        train = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("net", "weights")}
        net = {k: list(v) if isinstance(v, tuple) else v for k, v in self.net.to_dict().items()}
        return {"net": net, "loss": asdict(self.weights), "train": train}

    @classmethod
    def from_sections(cls, sections: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        base = base or cls()
        net_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in sections.get("net", {}).items()}
        loss_kw = dict(sections.get("loss", {}))
        train_kw = dict(sections.get("train", {}))
        check_fields(NetConfig, net_kw, "net")
        check_fields(LossWeights, loss_kw, "loss")
        check_fields(cls, train_kw, "train")
        for key in ("net", "weights"):
            if key in train_kw:
                raise ValueError(f"train.{key} is not a schedule field")
        net = replace(base.net, **net_kw)
        weights = replace(base.weights, **loss_kw)
        return replace(base, net=net, weights=weights, **train_kw)

    @property
    def dtype(self):
        return np.float64 if self.precision in ("float64", "64") else np.float32


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> bool:
    """One bias-corrected Adam update in place; non-finite gradients reject the step."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.rejected += 1
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=p.dtype)
            state.v[name] = np.zeros(p.shape, dtype=p.dtype)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return True


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; return the norm."""
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# losses over one window
# ---------------------------------------------------------------------------

def predict_sequence(model: RecurrentModel, frames: Sequence) -> SequencePrediction:
    steps = model.rollout(frames)
    return SequencePrediction([s.inverse_depth for s in steps], [s.pose_matrix for s in steps[1:]])


def window_loss(model: RecurrentModel, sample: SequenceSample, weights: LossWeights = LossWeights(),
                supervised: bool = False, max_interval: Optional[int] = None):
    """Forward and reversed passes with shared weights, combined into one objective."""
    fw = predict_sequence(model, sample.frames)
    bw = predict_sequence(model, sample.frames[::-1])
    gt_xi = sample.gt_inverse_depths() if supervised else None
    gt_valid = sample.gt_valid if supervised else None
    if supervised and gt_valid is None and sample.gt_depths is not None:
        gt_valid = [d > 0 for d in sample.gt_depths]
    return total_loss(sample.frames, fw, bw, sample.intrinsics, weights, supervised, gt_xi, gt_valid,
                      max_interval)


def _mean_reports(reports: List[LossReport]) -> dict:
    keys = list(LossReport.TERMS) + ["total"]
    return {k: float(np.mean([r.as_dict()[k] for r in reports])) for k in keys}


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RecurrentModel
    history: List[dict]
    checkpoint: Optional[Path] = None


class Trainer:
    """Runs the two-stage schedule over a fixed list of forward windows."""

    def __init__(self, config: TrainConfig, samples: Sequence[SequenceSample],
                 checkpoint_dir=None, model: Optional[RecurrentModel] = None):
        if len(samples) == 0:
            raise ValueError("training needs a non-empty dataset")
        self.config = config
        self.samples = list(samples)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        with precision(config.dtype):
            self.model = model or RecurrentModel(config.net)
        self.adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
        self.epoch = 0
        self.history: List[dict] = []
        self.last_checkpoint: Optional[Path] = None

    # -- checkpoints ---------------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        arrays = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        for k, v in self.adam.m.items():
            arrays[f"adam/m/{k}"] = v
            arrays[f"adam/v/{k}"] = self.adam.v[k]
        meta = {
            "config": self.config.to_sections(),
            "epoch": self.epoch,
            "seed": self.config.seed,
            "adam": {"step": self.adam.step, "rejected": self.adam.rejected, "lr": self.adam.lr,
                     "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "history": self.history,
        }
        save_arrays(path, arrays, meta)
        return path

    def load(self, path) -> None:
        arrays, meta = load_arrays(path)
        state = {k[6:]: v for k, v in arrays.items() if k.startswith("model/")}
        try:
            self.model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: incompatible model ({exc})") from exc
        a = meta["adam"]
        self.adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                              {k[7:]: v for k, v in arrays.items() if k.startswith("adam/m/")},
                              {k[7:]: v for k, v in arrays.items() if k.startswith("adam/v/")},
                              a.get("rejected", 0))
        self.epoch = int(meta["epoch"])
        self.history = list(meta["history"])

    @classmethod
    def from_checkpoint(cls, path, samples: Sequence[SequenceSample], checkpoint_dir=None,
                        overrides: Optional[dict] = None) -> "Trainer":
        _, meta = load_arrays(path)
        config = TrainConfig.from_sections(meta["config"])
        if overrides:
            config = replace(config, **overrides)
        trainer = cls(config, samples, checkpoint_dir)
        trainer.load(path)
        return trainer

    # -- loop ------------------------------------------------------------------
    def step(self, sample: SequenceSample, max_interval: Optional[int]) -> LossReport:
        cfg = self.config
        self.model.train()
        params = self.model.named_parameters()
        for p in params.values():
            p.grad = None
        total, report = window_loss(self.model, sample, cfg.weights, cfg.supervised, max_interval)
        if not np.isfinite(report.total):
            raise NonFiniteError("non-finite loss")
        total.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)) for k, p in params.items()}
        clip_by_global_norm(grads, cfg.clip_norm)
        adam_step(params, grads, self.adam)
        return report

    def run_epoch(self) -> dict:
        cfg = self.config
        epoch = self.epoch
        max_interval = cfg.max_interval(epoch)
        order = epoch_order(len(self.samples), cfg.seed, epoch)
        rejected_before = self.adam.rejected
        reports = []
        for _ in range(cfg.repeats):
            for idx in order:
                reports.append(self.step(self.samples[idx], max_interval))
        row = {"epoch": epoch, "stage": cfg.stage(epoch), **_mean_reports(reports),
               "rejected_steps": self.adam.rejected - rejected_before}
        self.history.append(row)
        self.epoch += 1
        return row

    def run(self, epochs: Optional[int] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
        """Train until the schedule ends (or for ``epochs`` more epochs)."""
        cfg = self.config
        end = cfg.total_epochs if epochs is None else min(cfg.total_epochs, self.epoch + epochs)
        with precision(cfg.dtype):
            while self.epoch < end:
                snapshot = self._snapshot()
                try:
                    row = self.run_epoch()
                except NonFiniteError as exc:
                    self._restore(snapshot)
                    raise TrainingDiverged(f"diverged in epoch {self.epoch}: {exc}", self.last_checkpoint)
                log.info("epoch %d stage %d total %.5f", row["epoch"], row["stage"], row["total"])
                if self.checkpoint_dir is not None:
                    self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
                    self.last_checkpoint = self.save(self.checkpoint_dir / "latest.ckpt")
                if on_epoch is not None:
                    on_epoch(row)
        return TrainResult(self.model, self.history, self.last_checkpoint)

    def _snapshot(self):
        return ({k: v.copy() for k, v in self.model.state_dict().items()},
                AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step,
                          {k: v.copy() for k, v in self.adam.m.items()},
                          {k: v.copy() for k, v in self.adam.v.items()}, self.adam.rejected),
                self.epoch, list(self.history))

    def _restore(self, snapshot) -> None:
        state, adam, epoch, history = snapshot
        self.model.load_state_dict(state)
        self.adam, self.epoch, self.history = adam, epoch, history


def train_two_stage(samples: Sequence[SequenceSample], config: TrainConfig = TrainConfig(),
                    checkpoint_dir=None) -> TrainResult:
    return Trainer(config, samples, checkpoint_dir).run()


def load_model(path) -> RecurrentModel:
    """Rebuild a model from a checkpoint for inference."""
    arrays, meta = load_arrays(path)
    config = TrainConfig.from_sections(meta["config"])
    with precision(config.dtype):
        model = RecurrentModel(config.net)
    state = {k[6:]: v for k, v in arrays.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: incompatible model ({exc})") from exc
    return model
