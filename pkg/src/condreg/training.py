"""AdamW, single-loop regularized training, the nested-loop adversarial
baseline, and the lambda sweep driver."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from condreg.data import DatasetSplit
from condreg.divergences import MEASURES, SinkhornConfig, get_measure
from condreg.errors import ConfigError, DataBalanceError, ShapeError
from condreg.model import (
    ModelParams,
    build_model,
    cross_entropy,
    accuracy,
    encode,
    flatten,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
    unflatten,
)
from condreg.numerics import derive_seed, make_rng
from condreg.stats import LabeledBatch

logger = logging.getLogger(__name__)

TRAIN_MEASURES = MEASURES + ("adversarial", "none")
DEFAULT_LAMBDAS = (0.001, 0.01, 0.1, 1.0, 10.0)
MAX_SKIP_FRACTION = 0.2


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    measure: str = "gaussian_w"
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    unroll: Optional[int] = None
    seed: int = 0
    checkpoint_every: int = 500
    encoder_hidden: tuple = (32,)
    embed_dim: int = 2
    adversary_hidden: tuple = (32,)
    bandwidth: Optional[float] = None
    sinkhorn_epsilon: Optional[float] = None
    sinkhorn_power: int = 2
    sinkhorn_max_iter: int = 500
    sinkhorn_tol: float = 1e-6
    monitor_size: int = 512

    def __post_init__(self):
        if self.measure not in TRAIN_MEASURES:
            raise ConfigError(f"unknown measure {self.measure!r}; choose from {TRAIN_MEASURES}")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be at least 4")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")
        if self.measure == "adversarial" and (self.unroll is None or self.unroll < 1):
            raise ConfigError("measure 'adversarial' requires unroll >= 1")
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "adversary_hidden", tuple(self.adversary_hidden))

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(
            epsilon=self.sinkhorn_epsilon,
            power=self.sinkhorn_power,
            max_iter=self.sinkhorn_max_iter,
            tol=self.sinkhorn_tol,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["adversary_hidden"] = list(self.adversary_hidden)
        return d


# ------------------------------------------------------------------ AdamW


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamWState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adamw_step(
    params,
    grads,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update on a flat parameter vector.

    The bias-corrected Adam step is applied first, then the decoupled decay
    ``theta *= 1 - lr * weight_decay``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params, grads and optimizer state must share a shape")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads**2
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    new = new * (1.0 - lr * weight_decay)
    return new, AdamWState(m, v, t)


class _GroupOptimizer:
    """AdamW over the concatenated weights of several networks."""

    def __init__(self, nets, lr, weight_decay):
        self.nets = nets
        self.lr = lr
        self.weight_decay = weight_decay
        self.shapes = [w.shape for net in nets for w in net.weights]
        self.state = AdamWState.zeros(sum(int(np.prod(s)) for s in self.shapes))

    def step(self, grads):
        vec = flatten([w for net in self.nets for w in net.weights])
        new, self.state = adamw_step(
            vec, flatten(grads), self.state, self.lr, self.weight_decay
        )
        arrays = iter(unflatten(new, self.shapes))
        for net in self.nets:
            net.weights = [next(arrays) for _ in net.weights]


# ---------------------------------------------------------------- records


@dataclass
class RunRecord:
    step: int
    main_loss: float
    reg_value: Optional[float]
    main_acc: float
    probe_acc: Optional[float] = None
    checkpoint_path: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    records: list
    snapshots: list  # (step, ModelParams) at every record
    counters: dict = field(default_factory=dict)
    config: Optional[TrainConfig] = None


def _train_batch(data) -> LabeledBatch:
    return data.train if isinstance(data, DatasetSplit) else data


def _aux_batch(data) -> LabeledBatch:
    if isinstance(data, DatasetSplit):
        return data.aux
    # a bare batch has no separate D'; fall back to sampling from it
    return data


def _init_params(d_in, cfg, with_adversary):
    rng = make_rng(derive_seed(cfg.seed, 1))
    return build_model(
        d_in,
        hidden=cfg.encoder_hidden,
        d_out=cfg.embed_dim,
        adversary_hidden=cfg.adversary_hidden if with_adversary else None,
        rng=rng,
    )


def _monitor_subset(batch, cfg):
    if len(batch) <= cfg.monitor_size:
        return batch
    rng = make_rng(derive_seed(cfg.seed, 3))
    idx = np.sort(rng.choice(len(batch), cfg.monitor_size, replace=False))
    return batch.take(idx)


MIN_GROUP_ROWS = 2


def _has_both_groups(s) -> bool:
    # the Gaussian fits need an unbiased std, hence two rows per group
    total = int(s.sum())
    return MIN_GROUP_ROWS <= total <= len(s) - MIN_GROUP_ROWS


def _reg_gradient(fn, z, sensitive):
    """Value of the measure on a batch and its gradient scattered back to rows."""
    mask = sensitive == 1
    res = fn(z[~mask], z[mask])
    dz = np.zeros_like(z)
    dz[~mask] = res.grad0
    dz[mask] = res.grad1
    return res.value, dz


def objective_gradient(params: ModelParams, batch: LabeledBatch, lam: float, reg_fn=None) -> list:
    """Gradient of ``CE + lam * measure`` on one batch.

    Returns the encoder gradients followed by the classifier gradients, in
    weight order. ``reg_fn`` is a measure from ``get_measure``; ``None``
    leaves only the cross-entropy term.
    """
    z, tape = encode(params, batch.samples)
    logits, ctape = mlp_forward(params.classifier, z)
    _, dlogits = cross_entropy(logits, batch.main)
    gclf, dz = mlp_backward(params.classifier, ctape, dlogits)
    if reg_fn is not None and lam > 0:
        _, dreg = _reg_gradient(reg_fn, z, batch.sensitive)
        dz = dz + lam * dreg
    genc, _ = mlp_backward(params.encoder, tape, dz)
    return genc + gclf


class _Recorder:
    def __init__(self, cfg, monitor, checkpoint_dir):
        self.cfg = cfg
        self.monitor = monitor
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.records = []
        self.snapshots = []
        if cfg.measure in MEASURES:
            self.measure_fn = get_measure(cfg.measure, cfg.bandwidth, cfg.sinkhorn_config())
        else:
            self.measure_fn = None

    def __call__(self, step, params):
        mon = self.monitor
        z, _ = encode(params, mon.samples)
        logits, _ = mlp_forward(params.classifier, z)
        loss, _ = cross_entropy(logits, mon.main)
        reg = None
        if self.measure_fn is not None:
            mask = mon.sensitive == 1
            if _has_both_groups(mon.sensitive):
                reg = float(self.measure_fn(z[~mask], z[mask]).value)
        elif self.cfg.measure == "adversarial":
            adv_logits, _ = mlp_forward(params.adversary, z)
            reg = cross_entropy(adv_logits, mon.sensitive)[0]
        path = None
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            name = f"step_{step:07d}.ckpt"
            save_checkpoint(params, self.checkpoint_dir / name)
            # relative to the run directory so records do not depend on --out
            path = f"{self.checkpoint_dir.name}/{name}"
        rec = RunRecord(step, loss, reg, accuracy(logits, mon.main), None, path)
        self.records.append(rec)
        self.snapshots.append((step, params.copy()))
        logger.debug("step %d loss %.4f reg %s", step, loss, reg)
        return rec


def _is_checkpoint(step, cfg):
    return step % cfg.checkpoint_every == 0 or step == cfg.steps


def _check_balance(skipped, scheduled):
    if skipped > MAX_SKIP_FRACTION * scheduled:
        raise DataBalanceError(
            f"{skipped} of {scheduled} batches had fewer than two rows of a sensitive class"
        )


def _require_groups(batch, name):
    if not _has_both_groups(batch.sensitive):
        raise DataBalanceError(
            f"{name} split needs at least {MIN_GROUP_ROWS} rows of each sensitive class"
        )


def train_single_loop(data, cfg: TrainConfig, checkpoint_dir=None) -> TrainResult:
    """Jointly train encoder and main classifier on CE + lam * measure.

    Each step samples a batch with replacement from the training split, splits
    its embeddings by the sensitive label, and takes one AdamW step on the
    encoder and classifier. Single-class batches are skipped and counted.
    """
    if cfg.measure not in MEASURES + ("none",):
        raise ConfigError(f"single-loop training does not support {cfg.measure!r}")
    train = _train_batch(data)
    if cfg.measure != "none":
        _require_groups(train, "training")
    params = _init_params(train.dim, cfg, with_adversary=False)
    rng = make_rng(derive_seed(cfg.seed, 2))
    use_reg = cfg.measure != "none" and cfg.lam > 0
    reg_fn = get_measure(cfg.measure, cfg.bandwidth, cfg.sinkhorn_config()) if use_reg else None

    opt = _GroupOptimizer([params.encoder, params.classifier], cfg.lr, cfg.weight_decay)
    recorder = _Recorder(cfg, _monitor_subset(train, cfg), checkpoint_dir)
    recorder(0, params)
    counters = {"scheduled": cfg.steps, "outer_updates": 0, "inner_updates": 0, "skipped": 0}

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        s = train.sensitive[idx]
        if not _has_both_groups(s):
            counters["skipped"] += 1
            _check_balance(counters["skipped"], cfg.steps)
        else:
            grads = objective_gradient(params, train.take(idx), cfg.lam, reg_fn)
            opt.step(grads)
            counters["outer_updates"] += 1
        if _is_checkpoint(step, cfg):
            recorder(step, params)

    if counters["skipped"]:
        logger.info("skipped %d single-class batches", counters["skipped"])
    return TrainResult(params, recorder.records, recorder.snapshots, counters, cfg)


def train_nested_loop(data, cfg: TrainConfig, checkpoint_dir=None) -> TrainResult:
    """Adversarial baseline with ``unroll`` head updates per encoder update.

    Inner loop: on batches from the auxiliary split, update the main
    classifier (CE on y) and the adversary (CE on s) with the encoder frozen.
    Outer step: update the encoder alone on CE(y) - lam * CE_adversary(s).
    """
    if cfg.measure != "adversarial":
        raise ConfigError("nested-loop training requires measure 'adversarial'")
    train, aux = _train_batch(data), _aux_batch(data)
    _require_groups(train, "training")
    _require_groups(aux, "auxiliary")
    params = _init_params(train.dim, cfg, with_adversary=True)
    rng = make_rng(derive_seed(cfg.seed, 2))

    enc_opt = _GroupOptimizer([params.encoder], cfg.lr, cfg.weight_decay)
    head_opt = _GroupOptimizer([params.classifier, params.adversary], cfg.lr, cfg.weight_decay)
    recorder = _Recorder(cfg, _monitor_subset(train, cfg), checkpoint_dir)
    recorder(0, params)
    scheduled = cfg.steps * (1 + cfg.unroll)
    counters = {"scheduled": scheduled, "outer_updates": 0, "inner_updates": 0, "skipped": 0}

    for step in range(1, cfg.steps + 1):
        for _ in range(cfg.unroll):
            idx = rng.integers(0, len(aux), size=cfg.batch_size)
            s = aux.sensitive[idx]
            if not _has_both_groups(s):
                counters["skipped"] += 1
                _check_balance(counters["skipped"], scheduled)
                continue
            z, _ = encode(params, aux.samples[idx])
            logits, ctape = mlp_forward(params.classifier, z)
            _, dl = cross_entropy(logits, aux.main[idx])
            gclf, _ = mlp_backward(params.classifier, ctape, dl)
            alogits, atape = mlp_forward(params.adversary, z)
            _, da = cross_entropy(alogits, s)
            gadv, _ = mlp_backward(params.adversary, atape, da)
            head_opt.step(gclf + gadv)
            counters["inner_updates"] += 1

        idx = rng.integers(0, len(train), size=cfg.batch_size)
        s = train.sensitive[idx]
        if not _has_both_groups(s):
            counters["skipped"] += 1
            _check_balance(counters["skipped"], scheduled)
        else:
            z, tape = encode(params, train.samples[idx])
            logits, ctape = mlp_forward(params.classifier, z)
            _, dl = cross_entropy(logits, train.main[idx])
            _, dz = mlp_backward(params.classifier, ctape, dl)
            if cfg.lam > 0:
                alogits, atape = mlp_forward(params.adversary, z)
                _, da = cross_entropy(alogits, s)
                _, dz_adv = mlp_backward(params.adversary, atape, da)
                dz = dz - cfg.lam * dz_adv
            genc, _ = mlp_backward(params.encoder, tape, dz)
            enc_opt.step(genc)
            counters["outer_updates"] += 1
        if _is_checkpoint(step, cfg):
            recorder(step, params)

    return TrainResult(params, recorder.records, recorder.snapshots, counters, cfg)


def train(data, cfg: TrainConfig, checkpoint_dir=None) -> TrainResult:
    """Dispatch to the nested loop for ``adversarial``, else the single loop."""
    if cfg.measure == "adversarial":
        return train_nested_loop(data, cfg, checkpoint_dir)
    return train_single_loop(data, cfg, checkpoint_dir)


def _sweep_entry(args):
    data, cfg, checkpoint_dir = args
    return train(data, cfg, checkpoint_dir)


def sweep(data, base_cfg: TrainConfig, lambdas=DEFAULT_LAMBDAS, jobs: int = 1, out_dir=None):
    """Train one independent model per lambda.

    The i-th run uses seed ``derive_seed(base_cfg.seed, 100, i)``. Results come back
    as ``(lam, TrainResult)`` pairs sorted by lambda.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ConfigError("lambda grid must be nonempty")
    jobs_args = []
    for i, lam in enumerate(lambdas):
        cfg = replace(base_cfg, lam=float(lam), seed=derive_seed(base_cfg.seed, 100, i))
        ckpt = None if out_dir is None else Path(out_dir) / f"lambda_{lam:g}" / "checkpoints"
        jobs_args.append((data, cfg, ckpt))
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_entry, jobs_args))
    else:
        results = [_sweep_entry(a) for a in jobs_args]
    pairs = [(float(lam), res) for lam, res in zip(lambdas, results)]
    return sorted(pairs, key=lambda p: p[0])
