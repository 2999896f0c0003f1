"""Training protocol: Adam, warmup + reduce-on-plateau cycles, augmentation."""

from __future__ import annotations

import copy
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import evaluate as E
from .corpus import PatchCorpus
from .loss import batch_loss
from .model import DEFAULT_ARCH, Architecture, HypNetWeights, hypnet_forward, init_weights
from .tensor import Tensor, get_default_dtype, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimState, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update in place, no weight decay.

    Gradients default to each tensor's ``.grad``; a missing gradient counts
    as zero.  Any non-finite gradient aborts before a parameter is touched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grads is None:
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


# -- learning-rate schedule ---------------------------------------------------


@dataclass
class LrSchedule:
    """Linear warmup, then divide by ``decay`` after ``patience`` epochs without improvement.

    :meth:`step` is called once at the end of every epoch and returns the
    rate for the next one.  ``finished`` turns true when the next decay
    would take the rate below ``lr_min``.
    """

    lr_max: float = 1e-2
    lr_min: float = 1e-5
    warmup_epochs: int = 4
    warmup_start: float = 0.25e-2
    patience: int = 3
    decay: float = 10.0
    lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    bad_epochs: int = field(init=False, default=0)
    n_decays: int = field(init=False, default=0)
    finished: bool = field(init=False, default=False)

    def __post_init__(self) -> None:
        self.lr = self.lr_at_warmup(0)

    def lr_at_warmup(self, epoch: int) -> float:
        if epoch >= self.warmup_epochs:
            return self.lr_max
        return self.warmup_start + (self.lr_max - self.warmup_start) * epoch / self.warmup_epochs

    def step(self, epoch: int, eval_loss: float) -> float:
        if epoch + 1 <= self.warmup_epochs:
            self.lr = self.lr_at_warmup(epoch + 1)
            return self.lr
        if eval_loss < self.best:
            self.best = eval_loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            proposed = self.lr_max / self.decay ** (self.n_decays + 1)
            if proposed < self.lr_min * (1.0 - 1e-9):
                self.finished = True
            else:
                self.n_decays += 1
                self.lr = max(proposed, self.lr_min)
        return self.lr


def schedule_step(sched: LrSchedule, epoch: int, eval_loss: float) -> float:
    return sched.step(epoch, eval_loss)


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentPolicy:
    """Paired ops hit both patches identically; independent ops draw per patch."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_small_rotation: float = 1.0
    max_rotation_deg: float = 5.0
    p_gamma: float = 1.0
    gamma_min: float = 0.7
    gamma_max: float = 1.4

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(p_hflip=0.0, p_vflip=0.0, p_rot90=0.0, p_small_rotation=0.0, p_gamma=0.0)


def rot90(patch: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(patch, k).copy()


def small_rotation(patch: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the patch centre with reflected borders."""
    return ndimage.rotate(patch, angle_deg, reshape=False, order=1, mode="reflect")


def adjust_gamma(patch: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(patch, 0.0, 1.0) ** gamma


def augment_pair(p1: np.ndarray, p2: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, log: list | None = None):
    """Augment a pair of [0, 1] float patches.

    ``log``, if given, receives one dict recording the paired transform ids
    applied to each patch and the independent parameters drawn per patch.
    """
    paired = []
    if rng.random() < policy.p_hflip:
        paired.append("hflip")
    if rng.random() < policy.p_vflip:
        paired.append("vflip")
    if rng.random() < policy.p_rot90:
        paired.append("rot90")

    out, record = [], {"paired": [], "independent": []}
    for p in (p1, p2):
        q = np.asarray(p, dtype=np.float64)
        applied = []
        for op in paired:
            if op == "hflip":
                q = q[:, ::-1]
            elif op == "vflip":
                q = q[::-1, :]
            else:
                q = np.rot90(q)
            applied.append(op)
        record["paired"].append(tuple(applied))
        angle = gamma = None
        if rng.random() < policy.p_small_rotation:
            angle = float(rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg))
            q = small_rotation(np.ascontiguousarray(q), angle)
        if rng.random() < policy.p_gamma:
            gamma = float(np.exp(rng.uniform(np.log(policy.gamma_min), np.log(policy.gamma_max))))
            q = adjust_gamma(q, gamma)
        record["independent"].append((angle, gamma))
        out.append(np.clip(np.ascontiguousarray(q), 0.0, 1.0))
    if log is not None:
        log.append(record)
    return out[0], out[1]


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    cycles: int = 4
    max_epochs: int = 60  # per cycle
    batch_size: int = 128
    margin: float = 1.0
    lr_max: float = 1e-2
    lr_min: float = 1e-5
    warmup_epochs: int = 4
    warmup_start: float = 0.25e-2
    patience: int = 3
    decay: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    first_cycle_strategy: str = "random"
    later_strategy: str = "hard"
    final_weights: str = "last"  # or "best": best-validation weights of the last cycle
    eval_batch_size: int = 256
    augment: bool = True

    def __post_init__(self) -> None:
        for name in ("first_cycle_strategy", "later_strategy"):
            if getattr(self, name) not in ("random", "hard"):
                raise ConfigError(f"{name} must be 'random' or 'hard', got {getattr(self, name)!r}")
        if self.final_weights not in ("last", "best"):
            raise ConfigError(f"final_weights must be 'last' or 'best', got {self.final_weights!r}")
        if self.max_epochs < 0 or self.eval_batch_size < 1:
            raise ConfigError("max_epochs must be >= 0 and eval_batch_size >= 1")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_max, self.lr_min, self.warmup_epochs, self.warmup_start, self.patience, self.decay)

    def strategy(self, cycle: int) -> str:
        return self.first_cycle_strategy if cycle == 0 else self.later_strategy


@dataclass
class EpochRecord:
    cycle: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_fpr95: float

    def csv(self) -> str:
        return f"{self.cycle},{self.epoch},{self.lr:.6g},{self.train_loss:.6f},{self.val_loss:.6f},{self.val_fpr95:.6f}"


METRICS_HEADER = "cycle,epoch,lr,train_loss,val_loss,val_fpr95"


def metrics_csv(records: list[EpochRecord]) -> str:
    return "\n".join([METRICS_HEADER] + [r.csv() for r in records]) + "\n"


@dataclass
class TrainState:
    weights: HypNetWeights
    cycle: int = 0
    epoch: int = 0
    optim: OptimState | None = None
    sched: LrSchedule | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    records: list[EpochRecord] = field(default_factory=list)
    best_val: float = math.inf
    best_weights: list[HypNetWeights] = field(default_factory=list)


@dataclass
class TrainResult:
    weights: HypNetWeights
    records: list[EpochRecord]
    best_weights: list[HypNetWeights]


def _validation_score(weights: HypNetWeights, corpus: PatchCorpus, cfg: TrainConfig, val_seed: int) -> tuple[float, float]:
    """Validation batch loss (random negatives from a fixed seed) and FPR95."""
    desc, rows = E.split_descriptors(weights, corpus, "val", cfg.eval_batch_size)
    matched = rows[corpus.label[rows] == 1]
    da, db = desc[0][corpus.idx0[matched]], desc[1][corpus.idx1[matched]]
    with no_grad():
        vloss = batch_loss(Tensor(da), Tensor(db), "random", cfg.margin, np.random.default_rng(val_seed)).item()
    dist = E.pair_distances(desc[0], desc[1], corpus.idx0[rows], corpus.idx1[rows])
    return vloss, E.fpr95(dist, corpus.label[rows])


def _to_unit(patches: np.ndarray) -> np.ndarray:
    return np.asarray(patches, dtype=np.float64) / 255.0


def _train_epoch(state: TrainState, a: np.ndarray, b: np.ndarray, cfg: TrainConfig, policy: AugmentPolicy) -> float:
    rng, weights = state.rng, state.weights
    strategy = cfg.strategy(state.cycle)
    dtype = get_default_dtype()
    order = rng.permutation(len(a))
    losses = []
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s : s + cfg.batch_size]
        if len(idx) < 2:
            continue
        pa, pb = _to_unit(a[idx]), _to_unit(b[idx])
        if cfg.augment:
            for k in range(len(idx)):
                pa[k], pb[k] = augment_pair(pa[k], pb[k], policy, rng)
        xa = Tensor((pa * 2.0 - 1.0)[:, None].astype(dtype))
        xb = Tensor((pb * 2.0 - 1.0)[:, None].astype(dtype))
        da = hypnet_forward(xa, 0, weights, "train", rng)
        db = hypnet_forward(xb, 1, weights, "train", rng)
        loss = batch_loss(da, db, strategy, cfg.margin, rng)
        weights.zero_grad()
        loss.backward()
        adam_step(weights.params, state.optim, state.sched.lr)
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def save_checkpoint(path: Path, state: TrainState) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": state.weights.arch,
        "weights": {k: v.copy() for k, v in state.weights.state().items()},
        "cycle": state.cycle,
        "epoch": state.epoch,
        "optim": copy.deepcopy(state.optim),
        "sched": copy.deepcopy(state.sched),
        "rng": state.rng.bit_generator.state,
        "records": [asdict(r) for r in state.records],
        "best_val": state.best_val,
        "best_weights": [w.state() for w in state.best_weights],
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh)
    tmp.replace(path)


def load_checkpoint(path: Path) -> TrainState:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arch = payload["arch"]
    dtype = next(iter(payload["weights"].values())).dtype

    def restore(st):
        w = init_weights(0, arch, dtype=dtype)
        w.load_state(st)
        return w

    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    return TrainState(
        weights=restore(payload["weights"]),
        cycle=payload["cycle"],
        epoch=payload["epoch"],
        optim=payload["optim"],
        sched=payload["sched"],
        rng=rng,
        records=[EpochRecord(**r) for r in payload["records"]],
        best_val=payload["best_val"],
        best_weights=[restore(s) for s in payload["best_weights"]],
    )


def run_training(
    corpus: PatchCorpus,
    cfg: TrainConfig,
    seed: int = 0,
    policy: AugmentPolicy | None = None,
    arch: Architecture = DEFAULT_ARCH,
    checkpoint: Path | None = None,
    resume: Path | None = None,
    on_epoch_end: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Run ``cfg.cycles`` warmup/plateau cycles over the corpus's training pairs.

    Cycle 1 uses ``cfg.first_cycle_strategy`` negatives, later cycles
    ``cfg.later_strategy``.  Adam moments and the schedule restart each
    cycle.  With ``checkpoint`` set, full state is written after every epoch
    and ``resume`` continues from such a file.
    """
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    if cfg.cycles < 1:
        raise ConfigError("cycles must be at least 1")
    if not corpus.has_split("train"):
        raise ConfigError("corpus has no matched training pairs")
    if not corpus.has_split("val"):
        raise ConfigError("corpus has no validation split")
    a, b = corpus.matched("train")
    if len(a) < 2:
        raise ConfigError("need at least 2 training pairs")
    policy = policy or AugmentPolicy()
    val_seed = seed + 7919

    if resume is not None:
        state = load_checkpoint(resume)
    else:
        state = TrainState(weights=init_weights(seed, arch), rng=np.random.default_rng(seed))

    while state.cycle < cfg.cycles:
        if state.epoch == 0 and state.sched is None:
            state.optim = OptimState(cfg.beta1, cfg.beta2, cfg.adam_eps)
            state.sched = cfg.schedule()
            state.best_val = math.inf
            state.best_weights.append(state.weights.copy())
        if state.epoch >= cfg.max_epochs or state.sched.finished:
            state.cycle += 1
            state.epoch = 0
            state.sched = None
            continue
        lr = state.sched.lr
        train_loss = _train_epoch(state, a, b, cfg, policy)
        val_loss, val_fpr = _validation_score(state.weights, corpus, cfg, val_seed)
        rec = EpochRecord(state.cycle, state.epoch, lr, train_loss, val_loss, val_fpr)
        state.records.append(rec)
        log.info("cycle %d epoch %d lr %.3g train %.4f val %.4f fpr95 %.4f", *asdict(rec).values())
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_weights[state.cycle] = state.weights.copy()
        state.sched.step(state.epoch, val_loss)
        state.epoch += 1
        if checkpoint is not None:
            save_checkpoint(checkpoint, state)
        if on_epoch_end is not None:
            on_epoch_end(rec)

    final = state.best_weights[-1] if cfg.final_weights == "best" else state.weights
    return TrainResult(final, state.records, state.best_weights)
