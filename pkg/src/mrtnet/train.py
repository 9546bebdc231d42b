"""Adam training loop, evaluation, and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .data import Sample, collate
from .diffcore import ConfigError, Tensor, backward
from .metrics import EvalResult, evaluate
from .model import Architecture, MRTNet, init_params
from .nn import Params

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Params) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def architecture(cfg: Config, d_v: int) -> Architecture:
    return Architecture(d_v=d_v, d_q=cfg.d_q, d=cfg.d, n_model=cfg.n_model,
                        max_query_len=cfg.max_query_len, kernel_size=cfg.kernel_size,
                        num_heads=cfg.num_heads)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    arch: Architecture
    params: dict[str, np.ndarray]
    epoch: int
    best_metric: float

    def model(self) -> MRTNet:
        params = {name: Tensor(arr.copy(), requires_grad=True, name=name)
                  for name, arr in self.params.items()}
        return MRTNet(self.arch, params)

    def save(self, path: str | Path) -> None:
        meta = {"config": self.config, "arch": self.arch.__dict__, "epoch": self.epoch,
                "best_metric": self.best_metric, "order": list(self.params)}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.params)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {name: z[name].copy() for name in meta["order"]}
        return cls(meta["config"], Architecture(**meta["arch"]), params, meta["epoch"],
                   meta["best_metric"])


def snapshot(params: Params) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def check_compatible(ckpt: Checkpoint, cfg: Config) -> None:
    """Raise ConfigError listing every tensor whose shape differs from ``cfg``."""
    expected = init_params(architecture(cfg, ckpt.arch.d_v), seed=0)
    bad = []
    for name in sorted(set(expected) | set(ckpt.params)):
        want = expected[name].shape if name in expected else None
        have = ckpt.params[name].shape if name in ckpt.params else None
        if want != have:
            bad.append(f"{name}: checkpoint {have} vs config {want}")
    if bad:
        raise ConfigError("checkpoint does not match config:\n  " + "\n  ".join(bad))


# ----------------------------------------------------------------- evaluation

def batches(samples: Sequence[Sample], size: int, order: Sequence[int] | None = None):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), size):
        yield collate([samples[j] for j in order[i:i + size]])


def predict_samples(net: MRTNet, samples: Sequence[Sample], batch_size: int = 16):
    out = []
    for batch in batches(samples, batch_size):
        out.extend(net.predict(batch))
    return out


def evaluate_model(net: MRTNet, samples: Sequence[Sample], batch_size: int = 16) -> EvalResult:
    preds = [span for span, _ in predict_samples(net, samples, batch_size)]
    return evaluate(preds, [s.gt_sec for s in samples])


def format_report(result: EvalResult) -> str:
    lines = [f"samples: {result.num_samples}"]
    for mu, value in result.r1_iou.items():
        lines.append(f"R@1, IoU={mu}: {value:.2f}")
    lines.append(f"mIoU: {result.miou:.2f}")
    return "\n".join(lines) + "\n"


def write_report(result: EvalResult, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path, json_path = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
    text_path.write_text(format_report(result), encoding="utf-8")
    json_path.write_text(json.dumps(result.report(), sort_keys=True) + "\n", encoding="utf-8")
    return text_path, json_path


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _first_nonfinite(report) -> str | None:
    for name, value in report.named_components():
        if not math.isfinite(value):
            return name
    if not math.isfinite(report.total.item()):
        return "total"
    return None


def train(cfg: Config, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch Adam with early stopping on validation mIoU.

    Without ``val_samples`` the training set doubles as the validation set.
    """
    if not train_samples:
        raise ConfigError("no training samples")
    val_samples = train_samples if not val_samples else val_samples
    arch = architecture(cfg, train_samples[0].video.shape[1])
    net = MRTNet(arch, seed=cfg.seed)
    loss_cfg = cfg.loss_config()
    opt = Adam(cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])

    best = Checkpoint(cfg.to_dict(), arch, snapshot(net.params), 0, -1.0)
    history: list[dict] = []
    stale = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        seen = 0
        for batch in batches(train_samples, cfg.batch_size, shuffle_rng.permutation(len(train_samples))):
            report = net.loss(batch, loss_cfg, cfg.dropout, dropout_rng)
            bad = _first_nonfinite(report)
            if bad is not None:
                raise NumericalError(f"epoch {epoch}: non-finite loss component {bad!r}")
            # parameters outside this step's graph (e.g. map heads with alphas=0) get no update
            for p in net.params.values():
                p.grad = None
            backward(report.total)
            for name, p in net.params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericalError(f"epoch {epoch}: non-finite gradient for {name!r}")
            opt.step(net.params)
            size = len(batch.samples)
            seen += size
            for name, value in [("total", report.total.item())] + report.named_components():
                sums[name] = sums.get(name, 0.0) + value * size
        result = evaluate_model(net, val_samples, cfg.batch_size)
        row = {"epoch": epoch, "loss": sums["total"] / seen,
               "components": {k: v / seen for k, v in sums.items() if k != "total"},
               "val_miou": result.miou, "val_r1": {str(k): v for k, v in result.r1_iou.items()}}
        history.append(row)
        log.info("epoch %d loss %.4f val mIoU %.2f", epoch, row["loss"], result.miou)
        if on_epoch is not None:
            on_epoch(row)
        if result.miou > best.best_metric:
            best = Checkpoint(cfg.to_dict(), arch, snapshot(net.params), epoch, result.miou)
            stale = 0
        else:
            stale += 1
            if cfg.early_stop_patience > 0 and stale >= cfg.early_stop_patience:
                stopped = True
                break
    return TrainResult(best, history, stopped)
