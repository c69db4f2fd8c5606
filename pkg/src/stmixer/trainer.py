"""Training and evaluation: AdamW, warmup + cosine schedule, checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .hloss import HeadOutputs, HLossConfig, h1_score, h2_probs, hloss, predict
from .metrics import REPORT_COLUMNS, EvalReport, build_report
from .model import ModelConfig, STMixerModel

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,loss," + ",".join(REPORT_COLUMNS)
CKPT_MAGIC = b"STMXCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    batch: int = 16
    warmup_epochs: float = 5
    total_epochs: int = 60
    warmup_start: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1.0
    seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be below total_epochs {self.total_epochs}")
        if self.batch < 1 or self.base_lr < 0 or self.warmup_start < 0:
            raise ValueError("batch must be positive and rates non-negative")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch / 64

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLoss(RuntimeError):
    pass


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Learning rate at fractional epoch ``t``: linear warmup, then cosine to 0."""
    w, T, peak = cfg.warmup_epochs, cfg.total_epochs, cfg.peak_lr
    t = min(max(t, 0.0), T)
    if t <= w:
        return cfg.warmup_start + (peak - cfg.warmup_start) * (t / w if w else 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (t - w) / (T - w)))


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, state: OptState, lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update from the grads stored on ``params``."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= (lr * update).astype(p.data.dtype)


def stack_batch(cases) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, np.ndarray]:
    """(roi_t1 batch, present T0 volumes, t0_present flags, labels)."""
    t1 = np.stack([c.roi_t1.voxels for c in cases])
    present = np.array([c.roi_t0 is not None for c in cases])
    t0 = np.stack([c.roi_t0.voxels for c in cases if c.roi_t0 is not None]) if present.any() else None
    labels = np.array([int(c.label) for c in cases], dtype=np.intp)
    return t1, t0, present, labels


def forward_cases(model: STMixerModel, cases) -> tuple[HeadOutputs, np.ndarray]:
    t1, t0, present, labels = stack_batch(cases)
    return model(t1, t0, present), labels


@dataclass
class CaseScores:
    ids: list
    labels: np.ndarray
    textures: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    preds: np.ndarray

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("id,label,texture,h1_score,p_stability,p_dilatation,p_shrinkage,pred\n")
        for i, cid in enumerate(self.ids):
            p = self.h2[i]
            out.write(f"{cid},{self.labels[i]},{self.textures[i]},{self.h1[i]:.8f},"
                      f"{p[0]:.8f},{p[1]:.8f},{p[2]:.8f},{self.preds[i]}\n")
        return out.getvalue()


def score_cases(model: STMixerModel, cases, alpha: float = 1.0, batch: int = 64) -> CaseScores:
    """Per-case scores. Without an H1 term (alpha 0) H1 is untrained, so the
    dilatation score and the decision fall back to the H2 head."""
    h1s, h2s, preds, labels = [], [], [], []
    for start in range(0, len(cases), batch):
        out, y = forward_cases(model, cases[start:start + batch])
        p2 = h2_probs(out)
        h1s.append(h1_score(out) if alpha > 0 else p2[:, 1])
        h2s.append(p2)
        preds.append(predict(out, use_h1=alpha > 0))
        labels.append(y)
    textures = np.array([getattr(c.texture, "value", c.texture) for c in cases])
    return CaseScores([c.id for c in cases], np.concatenate(labels), textures,
                      np.concatenate(h1s), np.concatenate(h2s), np.concatenate(preds))


def evaluate(model: STMixerModel, cases, alpha: float = 1.0, batch: int = 64) -> EvalReport:
    if not cases:
        raise ValueError("cannot evaluate an empty split")
    s = score_cases(model, cases, alpha, batch)
    return build_report(s.h1, s.h2, s.preds, s.labels, s.textures)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    report: EvalReport

    def csv_row(self) -> str:
        return f"{self.epoch},{self.loss:.6f},{self.report.csv_row()}"


def history_csv(history: list[EpochRecord]) -> str:
    return CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in history)


def train(model: STMixerModel, train_cases, cfg: TrainConfig, val_cases=None,
          epochs: int | None = None, checkpoint: Path | None = None,
          csv_path: Path | None = None) -> list[EpochRecord]:
    """Train for ``epochs`` (default ``cfg.total_epochs``) on the schedule of ``cfg``.

    The parameters with the best validation AUC@H1 are written to
    ``checkpoint`` (and kept in ``model.best_state``).
    """
    if not train_cases:
        raise ValueError("training set is empty")
    epochs = cfg.total_epochs if epochs is None else epochs
    loss_cfg = HLossConfig(alpha=cfg.alpha)
    state = OptState()
    steps = math.ceil(len(train_cases) / cfg.batch)
    history: list[EpochRecord] = []
    best = -math.inf
    model.best_state = None
    if csv_path is not None:
        Path(csv_path).write_text(CSV_HEADER + "\n")
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_cases))
        total = 0.0
        for b in range(steps):
            batch = [train_cases[i] for i in order[b * cfg.batch:(b + 1) * cfg.batch]]
            model.zero_grad()
            with dc.Tape() as tape:
                out, y = forward_cases(model, batch)
                loss = hloss(out, y, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch + 1}, batch {b}")
            tape.backward(loss)
            adamw_step(model.params, state, lr_at(epoch + b / steps, cfg), cfg)
            total += value
        eval_cases = val_cases if val_cases else train_cases
        report = evaluate(model, eval_cases, cfg.alpha, cfg.eval_batch)
        rec = EpochRecord(epoch + 1, total / steps, report)
        history.append(rec)
        log.info("epoch %d loss %.4f auc_h1 %.4f auc_h2_d %.4f", rec.epoch, rec.loss,
                 report.auc_h1, report.auc_h2_d)
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(rec.csv_row() + "\n")
        if report.auc_h1 > best:
            best = report.auc_h1
            model.best_state = {k: p.data.copy() for k, p in model.params.items()}
            if checkpoint is not None:
                save_checkpoint(checkpoint, model, {"train": cfg.to_dict(), "epoch": rec.epoch})
    return history


# checkpoint file ---------------------------------------------------------------
#
# little-endian:
#   magic "STMXCKPT" | u32 version | u32 n | n bytes JSON config echo
#   u32 param count, then per param:
#   u16 name length | name (utf-8) | u8 ndim | ndim x u32 dims | float32 data

def save_checkpoint(path, model: STMixerModel, extra: dict | None = None) -> None:
    echo = json.dumps({"model": model.cfg.to_dict(), **(extra or {})}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(p.data.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[STMixerModel, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    echo = json.loads(data[pos:pos + n])
    pos += n
    model = STMixerModel(ModelConfig.from_dict(echo["model"]))
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(shape)
        pos += size
        if name not in model.params or model.params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint param {name} {shape} does not fit the model")
        model.params[name].data = arr.astype(np.float32)
    return model, echo
