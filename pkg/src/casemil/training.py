"""Case-level loss, optimizers, component snapshots and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .casedata import CaseRecord, Label, case_group_of, group_batches
from .model import CaseModel, ForwardResult
from .milpool import CaseHeads
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
SCHEMES = ("default", "dynamic", "fixed-image")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss

@dataclass
class LossConfig:
    beta: float = 1e-4
    pos_weight: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and >= 0")
        if not self.pos_weight > 0:
            raise ValueError("pos_weight must be > 0")


def auto_pos_weight(cases: list[CaseRecord]) -> float:
    n_mal = sum(c.case_label == Label.malignant for c in cases)
    n_ben = len(cases) - n_mal
    if n_mal == 0:
        raise TrainingError("no malignant cases in the training split")
    return n_ben / n_mal


def clamp_prob(p: Tensor, eps: float = PROB_CLAMP) -> Tensor:
    """Clamp to [eps, 1 - eps]; gradient is zero where the clamp is active."""
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    fixed = np.where(inside, 0.0, np.clip(p.data, eps, 1 - eps))
    return p * inside.astype(float) + fixed


def weighted_bce(y: np.ndarray, p: Tensor, pos_weight: float) -> Tensor:
    """Per-case weighted binary cross entropy, shape (B,)."""
    p = clamp_prob(p)
    y = np.asarray(y, dtype=float)
    pos = T.log(p) * (pos_weight * y)
    neg = T.log(1.0 - p) * (1.0 - y)
    return -(pos + neg)


def case_loss(y, heads: CaseHeads, saliency_maps: Tensor, cfg: LossConfig) -> Tensor:
    """Mean over the batch of  sum_heads wBCE + beta * sum_m |A_m|_1.

    ``saliency_maps`` is (B, M, H', W') or, for a single case, (M, H', W').
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    b = y.shape[0]
    total = None
    for name, p in heads.as_dict().items():
        term = weighted_bce(y, T.reshape(p, (b,)), cfg.pos_weight)
        if not np.all(np.isfinite(term.data)):
            raise FloatingPointError(f"non-finite loss from the {name} head")
        total = term if total is None else total + term
    sal = T.reshape(saliency_maps, (b, -1))
    l1 = T.sum_(T.abs_(sal), axis=1)
    per_case = total + T.scale(l1, cfg.beta)
    loss = T.mean(per_case)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite saliency regularizer")
    return loss


def batch_loss(model: CaseModel, cases: list[CaseRecord], cfg: LossConfig,
               patches=None) -> tuple[Tensor, ForwardResult]:
    res = model.forward(cases, patches)
    y = np.array([int(c.case_label) for c in cases], dtype=float)
    m = res.n_images
    sal = T.reshape(res.bundle.saliency, (len(cases), m) + res.bundle.saliency.shape[1:])
    return case_loss(y, res.heads, sal, cfg), res


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    buf: dict = field(default_factory=dict)


def make_optimizer(params: list[Parameter], kind: str = "adam", lr: float = 1e-4, weight_decay: float = 1e-5,
                   momentum: float = 0.0) -> OptimizerState:
    if kind not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    st = OptimizerState(kind=kind, lr=lr, weight_decay=weight_decay, momentum=momentum)
    for p in params:
        st.step[p.name] = 0
        if kind == "adam":
            st.m[p.name] = np.zeros_like(p.data)
            st.v[p.name] = np.zeros_like(p.data)
        elif momentum:
            st.buf[p.name] = np.zeros_like(p.data)
    return st


def optimizer_step(params: list[Parameter], state: OptimizerState) -> None:
    """One update of every owned parameter; a missing gradient counts as zero."""
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.step[p.name] += 1
        if state.kind == "adam":
            t = state.step[p.name]
            m = state.m[p.name] = state.beta1 * state.m[p.name] + (1 - state.beta1) * g
            v = state.v[p.name] = state.beta2 * state.v[p.name] + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            if state.momentum:
                g = state.buf[p.name] = state.momentum * state.buf[p.name] + g
            p.data = p.data - state.lr * g


# ---------------------------------------------------------------- snapshots

@dataclass
class ComponentSnapshot:
    weights: dict
    m: dict
    v: dict
    buf: dict
    step: dict
    stamp: int


class SnapshotStore:
    """Last-participating copies of weights and optimizer state, per component."""

    def __init__(self, model: CaseModel, state: OptimizerState):
        self.model = model
        self.state = state
        self.snaps: dict[str, ComponentSnapshot] = {}
        for comp in model.registry.components:
            self.refresh(comp, 0)

    def refresh(self, comp: str, stamp: int) -> None:
        params = self.model.parameters(comp)
        st = self.state
        self.snaps[comp] = ComponentSnapshot(
            weights={p.name: p.data.copy() for p in params},
            m={p.name: st.m[p.name].copy() for p in params if p.name in st.m},
            v={p.name: st.v[p.name].copy() for p in params if p.name in st.v},
            buf={p.name: st.buf[p.name].copy() for p in params if p.name in st.buf},
            step={p.name: st.step[p.name] for p in params},
            stamp=stamp,
        )

    def restore(self, comp: str) -> None:
        snap = self.snaps[comp]
        st = self.state
        for p in self.model.parameters(comp):
            p.data = snap.weights[p.name].copy()
            st.step[p.name] = snap.step[p.name]
            if p.name in snap.m:
                st.m[p.name] = snap.m[p.name].copy()
                st.v[p.name] = snap.v[p.name].copy()
            if p.name in snap.buf:
                st.buf[p.name] = snap.buf[p.name].copy()


def participating_components(batch: list[CaseRecord], model: CaseModel) -> set[str]:
    layouts = {c.layout for c in batch}
    if len(layouts) != 1:
        raise TrainingError("heterogeneous batch: cases must share one view combination")
    return model.participating(layouts.pop())


def default_step(batch, model: CaseModel, state: OptimizerState, loss_cfg: LossConfig) -> float:
    model.registry.zero_grad()
    loss, _ = batch_loss(model, batch, loss_cfg)
    T.backward(loss)
    optimizer_step(model.parameters(), state)
    return loss.item()


def dynamic_step(batch, model: CaseModel, state: OptimizerState, snapshots: SnapshotStore,
                 loss_cfg: LossConfig, stamp: int = 0) -> float:
    """Default step, then roll back components that took no part in this batch."""
    active = participating_components(batch, model)
    loss = default_step(batch, model, state, loss_cfg)
    for comp in model.registry.components:
        if comp in active:
            snapshots.refresh(comp, stamp)
        else:
            snapshots.restore(comp)
    return loss


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-5
    momentum: float = 0.0
    beta: float = 1e-4
    pos_weight: float | None = None  # None: benign/malignant ratio of the training split
    batch_size: int = 4
    max_epochs: int = 30
    patience: int = 10
    scheme: str = "dynamic"
    shuffle_seed: int = 0
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown training scheme {self.scheme!r}; valid: {SCHEMES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size, max_epochs must be >= 1 and patience >= 0")


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    f1: float
    auc: float

    def line(self) -> str:
        return f"epoch={self.epoch} split={self.split} loss={self.loss:.6f} f1={self.f1:.6f} auc={self.auc:.6f}"


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_auc: float
    epochs_run: int
    history: list


def select_training_cases(cases: list[CaseRecord], scheme: str) -> list[CaseRecord]:
    if scheme == "fixed-image":
        return [c for c in cases if case_group_of(c).four_std]
    return list(cases)


def evaluate_loss(model: CaseModel, cases, loss_cfg: LossConfig, batch_size: int = 16):
    """Mean loss plus fusion-head probabilities in input order."""
    order = {id(c): i for i, c in enumerate(cases)}
    probs = np.zeros(len(cases))
    total, n = 0.0, 0
    with T.no_grad():
        for batch in group_batches(cases, batch_size):
            loss, res = batch_loss(model, batch, loss_cfg)
            total += loss.item() * len(batch)
            n += len(batch)
            for c, p in zip(batch, res.heads.final.data):
                probs[order[id(c)]] = p
    return total / max(n, 1), probs


def train(model: CaseModel, train_cases: list[CaseRecord], val_cases: list[CaseRecord],
          cfg: TrainConfig, log_path=None, on_epoch=None) -> TrainResult:
    from .evaluation import auc as auc_score, f1 as f1_score

    cases = select_training_cases(train_cases, cfg.scheme)
    if not cases:
        raise TrainingError("empty training split")
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else auto_pos_weight(cases)
    loss_cfg = LossConfig(beta=cfg.beta, pos_weight=pos_weight)
    state = make_optimizer(model.parameters(), cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    snaps = SnapshotStore(model, state) if cfg.scheme == "dynamic" else None
    history: list[EpochLog] = []
    best_score, best_epoch, best_state, bad = (-math.inf, -math.inf), 0, model.registry.state(), 0
    logf = Path(log_path).open("w", encoding="utf-8") if log_path else None
    step = 0
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            batches = group_batches(cases, cfg.batch_size, seed=cfg.shuffle_seed * 100003 + epoch)
            losses = []
            for batch in batches:
                step += 1
                if snaps is not None:
                    losses.append(dynamic_step(batch, model, state, snaps, loss_cfg, stamp=step) * len(batch))
                else:
                    losses.append(default_step(batch, model, state, loss_cfg) * len(batch))
            train_loss = float(np.sum(losses)) / len(cases)
            _, tr_probs = evaluate_loss(model, cases, loss_cfg, cfg.eval_batch_size)
            tr_y = [int(c.case_label) for c in cases]
            entries = [EpochLog(epoch, "train", train_loss, f1_score(tr_probs, tr_y), _safe_auc(auc_score, tr_probs, tr_y))]
            if val_cases:
                v_loss, v_probs = evaluate_loss(model, val_cases, loss_cfg, cfg.eval_batch_size)
                v_y = [int(c.case_label) for c in val_cases]
                entries.append(EpochLog(epoch, "val", v_loss, f1_score(v_probs, v_y), _safe_auc(auc_score, v_probs, v_y)))
            for e in entries:
                history.append(e)
                log.info(e.line())
                if logf:
                    logf.write(e.line() + "\n")
                    logf.flush()
            if on_epoch:
                on_epoch(entries)
            # AUC first, lower loss breaks ties (validation AUC saturates at 1 on easy data)
            auc_now = entries[-1].auc if math.isfinite(entries[-1].auc) else -math.inf
            score = (auc_now, -entries[-1].loss)
            if score > best_score:
                best_score, best_epoch, best_state, bad = score, epoch, model.registry.state(), 0
            else:
                bad += 1
                if bad > cfg.patience:
                    break
    finally:
        if logf:
            logf.close()
    model.registry.load_state(best_state)
    return TrainResult(best_state, best_epoch, best_score[0], epoch, history)


def _safe_auc(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except ValueError:
        return float("nan")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: CaseModel, path, meta: dict) -> None:
    """Parameter container + ``.index`` + ``.meta`` sidecar of ``key = value`` lines."""
    T.save_parameters(model.parameters(), path)
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_checkpoint_meta(path) -> dict:
    meta = {}
    for line in Path(str(path) + ".meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_checkpoint_into(model: CaseModel, path) -> None:
    params = T.load_parameters(path)
    own = {p.name: p for p in model.parameters()}
    if set(own) != {p.name for p in params}:
        raise ValueError("checkpoint parameters do not match the model configuration")
    for p in params:
        q = own[p.name]
        if q.component_id != p.component_id or q.data.shape != p.data.shape:
            raise ValueError(f"checkpoint entry {p.name} does not match the model")
        q.data = p.data.copy()
