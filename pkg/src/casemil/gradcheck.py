"""Finite-difference verification of every op kind and every end-to-end model path."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .casedata import CaseRecord, ImageRecord, Label, Side, View
from .featurenet import NetConfig
from .milpool import VALID_SPECS
from .model import CaseModel, ModelConfig
from .tensor import Tensor
from .training import LossConfig, batch_loss

TOLERANCE = 1e-4
EPS = 1e-5
KINK_GAP = 1e-3  # op-kind inputs are moved this far from kinks
PATH_KINK_GAP = 10 * EPS  # model paths: a single-parameter probe moves kinked inputs by about EPS
GRAD_FLOOR = 1e-6  # central-difference noise is about ulp(loss) / EPS, near 1e-10 here
CASE_TRIES = 40


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        return f"{self.name:<32s} max_rel_error={self.max_rel_error:.3e} {'ok' if self.ok else 'FAIL'}"


def _away_from(x: np.ndarray, point: float = 0.0, gap: float = KINK_GAP) -> np.ndarray:
    d = x - point
    return np.where(np.abs(d) < gap, point + np.sign(d + (d == 0)) * gap, x)


def _spread(x: np.ndarray, gap: float = KINK_GAP) -> np.ndarray:
    """Distinct values at least ``gap`` apart, so max/topk have no ties within eps."""
    flat = x.reshape(-1)
    order = np.argsort(flat, kind="stable")
    out = flat.copy()
    for a, b in zip(order[:-1], order[1:]):
        if out[b] - out[a] < gap:
            out[b] = out[a] + gap
    return out.reshape(x.shape)


def _op_cases(rng):
    """(name, list of input arrays, fn(list of Tensors) -> Tensor); inputs probed one at a time."""
    u = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731
    return [
        ("matmul", [u(3, 4), u(4, 2)], lambda a: T.matmul(a[0], a[1])),
        ("conv2d", [u(2, 2, 5, 4), u(3, 2, 3, 3)], lambda a: T.conv2d(a[0], a[1], stride=2, padding=1)),
        ("relu", [_away_from(u(3, 4))], lambda a: T.relu(a[0])),
        ("tanh", [u(3, 4)], lambda a: T.tanh(a[0])),
        ("sigmoid", [u(3, 4)], lambda a: T.sigmoid(a[0])),
        ("softmax", [u(3, 4)], lambda a: T.softmax(a[0], axis=1)),
        ("exp", [u(3, 4)], lambda a: T.exp(a[0])),
        ("log", [np.abs(u(3, 4)) + 0.1], lambda a: T.log(a[0])),
        ("add", [u(3, 4), u(1, 4)], lambda a: T.add(a[0], a[1])),
        ("sub", [u(3, 4), u(3, 1)], lambda a: T.sub(a[0], a[1])),
        ("mul", [u(3, 4), u(1, 4)], lambda a: T.mul(a[0], a[1])),
        ("sum", [u(3, 4)], lambda a: T.sum_(a[0], axis=1)),
        ("mean", [u(3, 4)], lambda a: T.mean(a[0], axis=0)),
        ("max", [_spread(u(3, 4))], lambda a: T.max_(a[0], axis=1)),
        ("topk", [_spread(u(3, 5))], lambda a: T.topk(a[0], 2, axis=1)),
        ("concat", [u(2, 3), u(2, 2)], lambda a: T.concat([a[0], a[1]], axis=1)),
        ("abs", [_away_from(u(3, 4))], lambda a: T.abs_(a[0])),
        ("scale", [u(3, 4)], lambda a: T.scale(a[0], -1.7)),
        ("reshape", [u(3, 4)], lambda a: T.reshape(a[0], (2, 6))),
        ("index", [u(3, 4)], lambda a: a[0][1:, [0, 2, 2]]),
    ]


def check_op_kinds(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    results = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, arrays, fn in _op_cases(rng):
            ts = [Tensor(a) for a in arrays]
            with T.no_grad():
                w = rng.uniform(0.5, 1.5, size=fn(ts).shape)
            probe = lambda _x, ts=ts, fn=fn, w=w: T.sum_(fn(ts) * w)  # noqa: E731
            err = max(T.grad_check(probe, t, EPS) for t in ts)
            results.append(CheckResult(name, err))
    # worst case per op kind
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    return [CheckResult(f"op:{k}", v) for k, v in worst.items()]


def tiny_config(pooling: str) -> ModelConfig:
    return ModelConfig(net=NetConfig(channels_per_stage=(2, 4), embed_dim=4), pooling=pooling,
                       t_fraction=0.2, k=2, image_height=16, image_width=12, patch_size=8, hidden_dim=4)


def toy_case(seed: int = 0, layout=((Side.L, View.CC), (Side.L, View.MLO), (Side.R, View.CC)),
             height: int = 16, width: int = 12, label: Label = Label.malignant) -> CaseRecord:
    """Noise images, each with one bright blob at its own place and strength.

    Distinct content per image and per region keeps attention logits apart; near-identical
    instances give attention gradients so small that central differences only see roundoff.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    images = []
    for i, (s, v) in enumerate(layout):
        cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.12 * height) ** 2))
        amp = 0.4 + 0.6 * i / max(1, len(layout) - 1)
        images.append(ImageRecord(s, v, np.clip(0.3 * rng.uniform(0, 1, size=(height, width)) + amp * blob, 0, 1)))
    return CaseRecord(f"toy{seed}", images, label)


def tiny_model(pooling: str, seed: int = 0) -> CaseModel:
    """Tiny model moved to a point where central differences can resolve every gradient.

    Zero biases put ReLU inputs exactly on the kink wherever a conv only sees padding, so
    biases are jittered away from zero. Local-net weights are doubled: at the default init
    the k patch embeddings are nearly equal and small, which leaves the patch-attention
    gradients below the finite-difference noise floor.
    """
    model = CaseModel(tiny_config(pooling), seed=seed)
    rng = np.random.default_rng([seed, 99])
    for p in model.parameters():
        if p.name.endswith(".bias"):
            b = rng.uniform(-0.2, 0.2, size=p.shape)
            p.data = np.where(np.abs(b) < 0.05, 0.05 * np.sign(b + (b == 0)), b)
        elif p.name.startswith("local."):
            p.data = 2.0 * p.data
    return model


def kink_margin(model: CaseModel, case: CaseRecord, patches=None) -> float:
    """Smallest distance of any relu/abs/max/topk input to its kink in one forward pass."""
    with T.no_grad(), T.kink_margins() as log:
        model.forward([case], patches)
    return min((m for _op, m in log), default=np.inf)


def _min_nonzero_grad(model: CaseModel, loss: Tensor) -> float:
    model.registry.zero_grad()
    T.backward(loss)
    g = np.concatenate([np.abs(p.grad).ravel() for p in model.parameters() if p.grad is not None])
    model.registry.zero_grad()
    g = g[g > 0]
    return float(g.min()) if g.size else np.inf


def conditioned_case(model: CaseModel, objective, seed: int = 0, tries: int = CASE_TRIES):
    """Pick the probe case among ``tries`` toy cases; returns (case, frozen patches).

    A case qualifies when every relu/abs/max/topk input stays PATH_KINK_GAP away from its
    kink and every nonzero analytic gradient entry is at least GRAD_FLOOR, i.e. well above
    the roundoff noise of a central difference. The first qualifying case wins; failing
    that, the kink-free case with the largest smallest gradient. The tolerance is never
    touched, and a wrong gradient still shows up on the entries that are resolvable.
    """
    best, best_floor = None, -1.0
    for j in range(tries):
        case = toy_case(1000 * seed + j + 1)
        with T.no_grad():
            patches = model.forward([case]).bundle.patches
        if kink_margin(model, case, patches) < PATH_KINK_GAP:
            continue
        floor = _min_nonzero_grad(model, objective(case, patches))
        if floor >= GRAD_FLOOR:
            return case, patches
        if floor > best_floor:
            best, best_floor = (case, patches), floor
    if best is None:
        raise RuntimeError(f"no toy case clears the kink gap {PATH_KINK_GAP} in {tries} tries")
    return best


def check_model_path(pooling: str, seed: int = 0, beta: float = 0.05) -> CheckResult:
    """Case loss (three heads + saliency L1) w.r.t. every parameter, candidate boxes frozen."""
    model = tiny_model(pooling, seed)
    cfg = LossConfig(beta=beta, pos_weight=1.7)
    objective = lambda c, pt: batch_loss(model, [c], cfg, pt)[0]  # noqa: E731
    case, patches = conditioned_case(model, objective, seed)
    f = lambda _p: objective(case, patches)  # noqa: E731
    err = max(T.grad_check(f, p, EPS) for p in model.parameters())
    model.registry.zero_grad()
    return CheckResult(f"path:{pooling}", err)


def check_heads(seed: int = 0) -> list[CheckResult]:
    """Each loss term on its own: the three heads and the saliency L1 term."""
    model = tiny_model("es-att-side", seed)
    out = []
    for name in ("topt", "local", "fusion", "saliency_l1"):
        def objective(c, pt, name=name):
            res = model.forward([c], pt)
            if name == "saliency_l1":
                return T.sum_(T.abs_(res.bundle.saliency))
            return T.sum_(T.log(res.heads.as_dict()[name]))
        case, patches = conditioned_case(model, objective, seed)
        f = lambda _p, o=objective, c=case, pt=patches: o(c, pt)  # noqa: E731
        err = max(T.grad_check(f, p, EPS) for p in model.parameters())
        out.append(CheckResult(f"term:{name}", err))
    model.registry.zero_grad()
    return out


def run_all(seed: int = 0, trials: int = 20) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = check_op_kinds(trials, seed)
    results += [check_model_path(spec, seed) for spec in VALID_SPECS]
    results += check_heads(seed)
    return results, time.perf_counter() - t0
