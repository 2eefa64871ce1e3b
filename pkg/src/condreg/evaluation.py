"""Leakage evaluation: fresh probes on frozen embeddings, main/sensitive
accuracy reports and the checkpoint correlation analysis."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from condreg.errors import InsufficientSampleError, ParameterError
from condreg.model import (
    Mlp,
    MlpSpec,
    ModelParams,
    accuracy,
    cross_entropy,
    encode,
    flatten,
    init_mlp,
    mlp_backward,
    mlp_forward,
    unflatten,
)
from condreg.numerics import derive_seed, make_rng
from condreg.stats import LabeledBatch, diag_distance, pearson
from condreg.training import AdamWState, adamw_step


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 128
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ParameterError("probe steps, batch_size and hidden must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")


@dataclass
class Probe:
    """A trained classifier plus the feature standardization it was fit with."""

    net: Mlp
    center: np.ndarray
    scale: np.ndarray
    loss_curve: list

    def logits(self, z) -> np.ndarray:
        return mlp_forward(self.net, (np.asarray(z) - self.center) / self.scale)[0]

    def score(self, z, labels) -> float:
        return accuracy(self.logits(z), labels)


@dataclass
class ProbeReport:
    main_acc: float
    sensitive_acc: float
    probe_train_loss_curve: list
    n_eval: int
    diag_distance: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrelationReport:
    correlation: float
    abs_correlation: float
    pairs: list  # (reg_value, sensitive_acc) per checkpoint
    low_sample: bool
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def train_probe(z, s, cfg: ProbeConfig = ProbeConfig()) -> Probe:
    """Fit a one-hidden-layer LeakyReLU classifier predicting ``s`` from ``z``.

    Features are standardized with the probe's own training statistics, so
    shrinking the embedding scale cannot hide information from the probe.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s).reshape(-1).astype(np.int64)
    counts = np.bincount(s, minlength=2)
    if counts.min() < 2:
        raise InsufficientSampleError(f"probe needs 2 examples per class, got {counts.tolist()}")
    center = z.mean(axis=0)
    scale = z.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    zs = (z - center) / scale

    rng = make_rng(cfg.seed)
    net = init_mlp(MlpSpec((z.shape[1], cfg.hidden, 2)), rng)
    shapes = [w.shape for w in net.weights]
    state = AdamWState.zeros(sum(int(np.prod(sh)) for sh in shapes))
    curve = []
    bs = min(cfg.batch_size, len(s))
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(s), size=bs)
        logits, tape = mlp_forward(net, zs[idx])
        loss, dl = cross_entropy(logits, s[idx])
        grads, _ = mlp_backward(net, tape, dl)
        vec, state = adamw_step(
            flatten(net.weights), flatten(grads), state, cfg.lr, cfg.weight_decay
        )
        net.weights = unflatten(vec, shapes)
        curve.append(loss)
    return Probe(net, center, scale, curve)


def probe_leakage(z, s, cfg: ProbeConfig = ProbeConfig()) -> tuple[float, Probe, int]:
    """Train a probe on a ``train_fraction`` split of ``(z, s)`` and score the rest."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s).reshape(-1)
    order = make_rng(derive_seed(cfg.seed, 17)).permutation(len(s))
    cut = int(round(cfg.train_fraction * len(s)))
    fit_idx, eval_idx = order[:cut], order[cut:]
    if len(eval_idx) == 0:
        raise InsufficientSampleError("no rows left to score the probe")
    probe = train_probe(z[fit_idx], s[fit_idx], cfg)
    return probe.score(z[eval_idx], s[eval_idx]), probe, len(eval_idx)


def evaluate(params: ModelParams, test: LabeledBatch, cfg: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """Main-task accuracy of the trained classifier and leakage of a fresh probe."""
    z, _ = encode(params, test.samples)
    main_logits, _ = mlp_forward(params.classifier, z)
    sens_acc, probe, n_eval = probe_leakage(z, test.sensitive, cfg)
    try:
        dd = diag_distance(z)
    except ValueError:
        dd = None
    return ProbeReport(
        accuracy(main_logits, test.main), sens_acc, probe.loss_curve, n_eval, dd
    )


def correlation_analysis(checkpoints, test: LabeledBatch, cfg: ProbeConfig = ProbeConfig(), steps=None) -> CorrelationReport:
    """Pearson correlation between checkpoint regularizer values and probe leakage.

    Args:
        checkpoints: sequence of ``(ModelParams, reg_value)``.
        test: evaluation batch for the probes.
        cfg: probe settings; every checkpoint gets an identically seeded probe.
        steps: optional step numbers echoed into the report.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise InsufficientSampleError("correlation analysis needs at least 2 checkpoints")
    pairs = []
    for params, reg in checkpoints:
        z, _ = encode(params, test.samples)
        acc, _, _ = probe_leakage(z, test.sensitive, cfg)
        pairs.append((float(reg), acc))
    rho = pearson([p[0] for p in pairs], [p[1] for p in pairs])
    return CorrelationReport(rho, abs(rho), pairs, len(pairs) < 3, list(steps or []))
