"""Alternating critic / encoder-classifier training and the evaluation protocols
built on it (MI convergence, ablations, sensitivity sweeps, estimator
comparison, third-domain cross evaluation).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import losses
from .losses import EmaState, MiBatch
from .numerics import Net, NumericalError, Rng, clip_grad_norm
from .oracle import pearson_corr
from .synthdata import LabeledSet, UnlabeledSet, batch_indices

log = logging.getLogger(__name__)

ABLATIONS = ("none", "k", "m", "km")

# optimiser settings for estimate_mi_run on standardized Gaussian pairs
MI_RUN_SETTINGS = {"lr": 3e-3, "momentum": 0.8, "batch_size": 256, "max_steps": 5000,
                   "hinge_lambda": 2.0, "average_decay": 0.99, "clip_norm": None}
MI_RUN_EPOCHS = 15
ESTIMATORS = ("two_critic", "mine_single", "autoencoder")
METRIC_COLUMNS = ("epoch", "l_cls", "l_kld", "l_mi", "l_ent", "mi_estimate", "constraint_gap",
                  "source_acc", "target_acc")


class ConfigError(ValueError):
    pass


class TrainingAborted(NumericalError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"epoch {epoch} batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


class PhaseIsolationError(AssertionError):
    pass


def _sizes(value) -> tuple[int, ...]:
    if value is None or value == "":
        return ()
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return tuple(int(v) for v in value)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.1
    lr: float = 1e-3
    momentum: float = 0.0
    batch_size: int = 32
    max_epochs: int = 200
    max_steps: int | None = None
    seed: int = 0
    ablation: str = "km"
    estimator: str = "two_critic"
    hinge_lambda: float = 2.0
    ema_rate: float | None = None
    average_decay: float | None = None  # estimate_mi_run reports with weight-averaged critics
    clip_norm: float | None = 5.0  # global gradient norm cap; KL gradients scale as 1/var
    critic_steps: int = 1
    use_entropy: bool = True
    heldout_fraction: float = 0.1
    latent_dim: int = 8
    g_hidden: tuple = (32, 32)
    f_hidden: tuple = ()
    critic_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (32,)
    g_activation: str = "tanh"
    f_activation: str = "tanh"
    critic_activation: str = "elu"

    def __post_init__(self):
        for name in ("g_hidden", "f_hidden", "critic_hidden", "decoder_hidden"):
            setattr(self, name, _sizes(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta and gamma must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.hinge_lambda < 0:
            raise ConfigError("hinge_lambda must be >= 0")
        if self.ema_rate is not None and not 0 < self.ema_rate < 1:
            raise ConfigError("ema_rate must lie in (0, 1)")
        if self.average_decay is not None and not 0 <= self.average_decay < 1:
            raise ConfigError("average_decay must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or none")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be >= 1")
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")

    def coefficients(self) -> tuple[float, float, float]:
        """Effective (alpha, beta, gamma) after applying the ablation mode."""
        a, b = self.alpha, self.beta
        if self.ablation == "none":
            return 0.0, 0.0, 0.0
        if self.ablation == "k":
            b = 0.0
        elif self.ablation == "m":
            a = 0.0
        return a, b, (self.gamma if self.use_entropy else 0.0)

    def critic_sizes(self, d_in: int) -> list[int]:
        return [d_in, *self.critic_hidden, 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    l_cls: float
    l_kld: float
    l_mi: float
    l_ent: float
    mi_estimate: float
    constraint_gap: float
    source_acc: float
    target_acc: float

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class TrainedModel:
    G: Net
    F: Net
    M1: Net
    M2: Net
    config: TrainConfig
    decoder: Net | None = None
    history: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    audited_batches: int = 0


def build_nets(config: TrainConfig, d_x: int, n_classes: int, rng: Rng):
    """G, F, M1, M2 and decoder from independent child streams.

    G and F are always drawn first so every ablation mode and estimator arm
    sharing a seed starts from the same encoder and classifier.
    """
    g_rng, f_rng, m1_rng, m2_rng, dec_rng = (rng.fork() for _ in range(5))
    c = config
    G = Net([d_x, *c.g_hidden, c.latent_dim], c.g_activation, g_rng)
    F = Net([c.latent_dim, *c.f_hidden, n_classes], c.f_activation, f_rng)
    sizes = c.critic_sizes(d_x + c.latent_dim)
    M1 = Net(sizes, c.critic_activation, m1_rng)
    M2 = M1 if c.estimator == "mine_single" else Net(sizes, c.critic_activation, m2_rng)
    decoder = None
    if c.estimator == "autoencoder":
        decoder = Net([c.latent_dim, *c.decoder_hidden, d_x], c.g_activation, dec_rng)
    return G, F, M1, M2, decoder


def predict(G: Net, F: Net, x: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties toward the lowest class index
    return np.argmax(F.forward(G.forward(x, cache=False), cache=False), axis=1)


def evaluate(model: TrainedModel, data: LabeledSet) -> float:
    """Fraction of ``data`` classified correctly by ``argmax F(G(x))``."""
    if data.dim != model.G.layer_sizes[0]:
        raise ValueError(f"data has {data.dim} features, model expects {model.G.layer_sizes[0]}")
    return float(np.mean(predict(model.G, model.F, data.x) == data.y))


class _Stream:
    """Endless minibatch indices over ``n`` rows, reshuffling on exhaustion."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._queue: list = []

    def epoch_batches(self) -> list:
        return batch_indices(self.n, self.batch_size, self.rng)

    def next(self) -> np.ndarray:
        if not self._queue:
            self._queue = self.epoch_batches()
        return self._queue.pop(0)


def _split_heldout(n: int, fraction: float, rng: Rng):
    perm = rng.permutation(n)
    k = max(2, int(math.ceil(fraction * n)))
    return np.sort(perm[:k]), np.sort(perm[k:])


class _Phases:
    """Per-batch critic and model updates for one training run."""

    def __init__(self, model: TrainedModel, ema: EmaState | None):
        self.m = model
        self.c = model.config
        self.alpha, self.beta, self.gamma = self.c.coefficients()
        self.ema = ema
        self.autoencoder = self.c.estimator == "autoencoder"

    def critic_nets(self) -> list:
        m = self.m
        if self.autoencoder:
            return [m.decoder]
        return [m.M1] if m.M1 is m.M2 else [m.M1, m.M2]

    def critic_step(self, xt: np.ndarray, perm: np.ndarray) -> None:
        m, c = self.m, self.c
        zt = m.G.forward(xt, cache=False)
        nets = self.critic_nets()
        batch = None if self.autoencoder else MiBatch(xt, zt, zt[perm], perm)
        for _ in range(c.critic_steps):
            for n in nets:
                n.zero_grad()
            if self.autoencoder:
                losses.recon_mi_baseline(m.decoder, xt, zt, grad=1.0)
            else:
                losses.critic_objective(m.M1, m.M2, batch, hinge_lambda=c.hinge_lambda, ema=self.ema)
            if c.clip_norm:
                clip_grad_norm(nets, c.clip_norm)
            for n in nets:
                n.sgd_step(c.lr, c.momentum)

    def mi_term(self, xt, zt, perm, grad):
        """(L_mi, dL/dz_t scaled by ``grad``) with critics frozen."""
        m = self.m
        if self.autoencoder:
            value, dz = losses.recon_mi_baseline(m.decoder, xt, zt, grad=grad, param_grads=False)
            return value, dz
        out = losses.mi_loss(m.M1, m.M2, MiBatch(xt, zt, zt[perm], perm), grad=grad, param_grads=False)
        if grad is None:
            return out.value, None
        dz = out.dz_joint.copy()
        dz[perm] += out.dz_marginal
        return out.value, dz

    def model_step(self, xs, ys, xt, perm) -> tuple[float, float, float, float]:
        m, c = self.m, self.c
        ns = xs.shape[0]
        Z = m.G.forward(np.vstack([xs, xt]))
        logits = m.F.forward(Z)
        l_cls, d_cls = losses.classification_loss(logits[:ns], ys)
        l_ent, d_ent = losses.entropy_penalty(logits[ns:])
        l_kld, dzs, dzt = losses.latent_kld(Z[:ns], Z[ns:])
        l_mi, dz_mi = self.mi_term(xt, Z[ns:], perm, self.beta if self.beta else None)
        for v in (l_cls, l_ent, l_kld, l_mi):
            if not math.isfinite(v):
                raise NumericalError("non-finite loss")

        d_logits = np.zeros_like(logits)
        d_logits[:ns] = d_cls
        if self.gamma:
            d_logits[ns:] = self.gamma * d_ent
        dZ = m.F.backward(d_logits)
        if self.alpha:
            dZ[:ns] += self.alpha * dzs
            dZ[ns:] += self.alpha * dzt
        if self.beta:
            dZ[ns:] += dz_mi
        m.G.backward(dZ)
        if c.clip_norm:
            clip_grad_norm([m.G, m.F], c.clip_norm)
        m.G.sgd_step(c.lr, c.momentum)
        m.F.sgd_step(c.lr, c.momentum)
        return l_cls, l_kld, l_mi, l_ent

    def heldout_metrics(self, xh: np.ndarray, perm: np.ndarray) -> tuple[float, float]:
        m = self.m
        zh = m.G.forward(xh, cache=False)
        if self.autoencoder:
            value, _ = losses.recon_mi_baseline(m.decoder, xh, zh)
            return -value, math.nan
        batch = MiBatch(xh, zh, zh[perm], perm)
        l_mi = losses.mi_loss(m.M1, m.M2, batch).value
        return -l_mi, losses.constraint_gap(m.M1, m.M2, batch)


def _checksums(nets) -> list:
    return [n.checksum() for n in nets if n is not None]


def train_dpn(config: TrainConfig, source: LabeledSet, target: UnlabeledSet,
              eval_sets: Mapping[str, LabeledSet] | None = None, *, audit: bool = False,
              on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainedModel:
    """Run the alternating critic / model updates.

    ``target`` carries no labels. ``eval_sets`` are scored once per epoch for
    reporting only; the entry named ``"target"`` fills ``target_acc`` and every
    entry gets a curve in ``model.curves``. With ``audit`` the parameter
    checksums of the frozen nets are compared around every phase.
    """
    if not isinstance(target, UnlabeledSet):
        raise TypeError("target must be an UnlabeledSet")
    config.validate()
    eval_sets = dict(eval_sets or {})
    if source.dim != target.dim:
        raise ConfigError("source and target feature dims differ")
    root = Rng(config.seed)
    G, F, M1, M2, decoder = build_nets(config, source.dim, source.class_count, root.fork())
    split_rng, src_rng, tgt_rng, marg_rng = (root.fork() for _ in range(4))

    held_idx, train_idx = _split_heldout(len(target), config.heldout_fraction, split_rng)
    if config.batch_size > min(len(source), len(train_idx)):
        raise ConfigError("batch_size exceeds the smaller training set")
    x_held = target.x[held_idx]
    held_perm = losses.marginal_permutation(len(held_idx), split_rng)
    x_tgt = target.x[train_idx]

    model = TrainedModel(G, F, M1, M2, config, decoder, curves={k: [] for k in eval_sets})
    ema = EmaState(config.ema_rate) if config.ema_rate else None
    phases = _Phases(model, ema)
    src_stream = _Stream(len(source), config.batch_size, src_rng)
    tgt_stream = _Stream(len(x_tgt), config.batch_size, tgt_rng)
    frozen_model = [G, F]
    frozen_critics = [M1, M2, decoder]
    steps = 0

    for epoch in range(1, config.max_epochs + 1):
        src_stream._queue = src_stream.epoch_batches()
        tgt_stream._queue = tgt_stream.epoch_batches()
        n_batches = max(len(src_stream._queue), len(tgt_stream._queue))
        sums = np.zeros(4)
        for b in range(n_batches):
            si, ti = src_stream.next(), tgt_stream.next()
            xs, ys, xt = source.x[si], source.y[si], x_tgt[ti]
            perm = losses.marginal_permutation(len(ti), marg_rng)
            try:
                before = _checksums(frozen_model) if audit else None
                phases.critic_step(xt, perm)
                if audit and _checksums(frozen_model) != before:
                    raise PhaseIsolationError(f"G/F changed during critic phase (epoch {epoch}, batch {b})")
                before = _checksums(frozen_critics) if audit else None
                sums += phases.model_step(xs, ys, xt, perm)
                if audit:
                    if _checksums(frozen_critics) != before:
                        raise PhaseIsolationError(f"critics changed during model phase (epoch {epoch}, batch {b})")
                    model.audited_batches += 1
            except TrainingAborted:
                raise
            except NumericalError as exc:
                raise TrainingAborted(str(exc), epoch, b) from exc
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                n_batches = b + 1
                break
        l_cls, l_kld, l_mi, l_ent = (sums / n_batches).tolist()
        mi_est, gap = phases.heldout_metrics(x_held, held_perm)
        accs = {name: float(np.mean(predict(G, F, d.x) == d.y)) for name, d in eval_sets.items()}
        for name, acc in accs.items():
            model.curves[name].append(acc)
        rec = MetricsRecord(epoch, l_cls, l_kld, l_mi, l_ent, mi_est, gap,
                            float(np.mean(predict(G, F, source.x) == source.y)),
                            accs.get("target", math.nan))
        model.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d: %s", epoch, rec)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return model


# ---------------------------------------------------------------------------
# MI estimation on exogenous pairs


@dataclass
class MiCurve:
    epochs: list
    estimates: list
    steps: int
    gaps: list = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.estimates[-1] if self.estimates else math.nan


def estimate_mi_run(config: TrainConfig, x: np.ndarray, z: np.ndarray, *,
                    on_epoch: Callable[[int, float], None] | None = None) -> MiCurve:
    """Train critics alone to maximise the bound on fixed ``(x, z)`` pairs.

    Reports the bound (``-L_mi``) on a held-out split after every epoch.
    ``mine_single`` shares one critic between the joint and marginal terms.
    """
    if config.estimator not in ("two_critic", "mine_single"):
        raise ConfigError("estimate_mi_run supports two_critic and mine_single")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape[0] != z.shape[0]:
        raise ConfigError("x and z must have the same number of rows")
    root = Rng(config.seed)
    c = config
    d_in = x.shape[1] + z.shape[1]
    m1_rng, m2_rng = root.fork(), root.fork()
    sizes = c.critic_sizes(d_in)
    M1 = Net(sizes, c.critic_activation, m1_rng)
    M2 = M1 if c.estimator == "mine_single" else Net(sizes, c.critic_activation, m2_rng)
    nets = [M1] if M1 is M2 else [M1, M2]
    # the hinge keeps the critics in a small limit cycle; a running average of
    # the weights sits at its centre and is what gets reported
    averaged = [n.copy() for n in nets] if c.average_decay is not None else nets
    A1 = averaged[0]
    A2 = A1 if M1 is M2 else averaged[-1]
    split_rng, batch_rng, marg_rng = root.fork(), root.fork(), root.fork()
    held_idx, train_idx = _split_heldout(x.shape[0], c.heldout_fraction, split_rng)
    if c.batch_size > len(train_idx):
        raise ConfigError("batch_size exceeds the training split")
    xh, zh = x[held_idx], z[held_idx]
    held_batch = MiBatch.from_joint(xh, zh, split_rng)
    xtr, ztr = x[train_idx], z[train_idx]
    ema = EmaState(c.ema_rate) if c.ema_rate else None

    curve = MiCurve([], [], 0)
    for epoch in range(1, c.max_epochs + 1):
        for idx in batch_indices(len(train_idx), c.batch_size, batch_rng):
            batch = MiBatch.from_joint(xtr[idx], ztr[idx], marg_rng)
            for n in nets:
                n.zero_grad()
            l_mi, _ = losses.critic_objective(M1, M2, batch, hinge_lambda=c.hinge_lambda, ema=ema)
            if not math.isfinite(l_mi):
                raise TrainingAborted("non-finite loss", epoch, curve.steps)
            if c.clip_norm:
                clip_grad_norm(nets, c.clip_norm)
            try:
                for n in nets:
                    n.sgd_step(c.lr, c.momentum)
            except NumericalError as exc:
                raise TrainingAborted(str(exc), epoch, curve.steps) from exc
            if c.average_decay is not None:
                for avg, n in zip(averaged, nets):
                    avg.track_average(n, c.average_decay)
            curve.steps += 1
            if c.max_steps is not None and curve.steps >= c.max_steps:
                break
        est = -losses.mi_loss(A1, A2, held_batch).value
        if not math.isfinite(est):
            raise TrainingAborted("non-finite held-out estimate", epoch, curve.steps)
        curve.epochs.append(epoch)
        curve.estimates.append(est)
        curve.gaps.append(losses.constraint_gap(A1, A2, held_batch))
        if on_epoch is not None:
            on_epoch(epoch, est)
        if c.max_steps is not None and curve.steps >= c.max_steps:
            break
    return curve


# ---------------------------------------------------------------------------
# Experiment protocols


def _run_cell(args) -> tuple[float, list]:
    """Final target accuracy and metrics history of one run."""
    config, source, target = args
    model = train_dpn(config, source, target.unlabeled(), {"target": target})
    return evaluate(model, target), model.history


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class AblationTable:
    seeds: list
    accuracies: dict  # mode -> list per seed
    histories: dict = field(default_factory=dict)  # (mode, seed) -> metrics history

    def summary(self) -> dict:
        return {mode: {"mean": float(np.mean(v)), "std": float(np.std(v))} for mode, v in self.accuracies.items()}


def ablation_run(config: TrainConfig, source: LabeledSet, target: LabeledSet, seeds: Sequence[int],
                 modes: Sequence[str] = ABLATIONS, jobs: int = 1) -> AblationTable:
    """Final target accuracy for every (mode, seed); ``target`` labels are used for scoring only."""
    if not seeds:
        raise ConfigError("need at least one seed")
    cells = [(replace(config, ablation=m, seed=s), source, target) for m in modes for s in seeds]
    out = _map(_run_cell, cells, jobs)
    accs = [acc for acc, _ in out]
    k = len(seeds)
    histories = {(c.ablation, c.seed): hist for (c, _, _), (_, hist) in zip(cells, out)}
    return AblationTable(list(seeds), {m: accs[i * k:(i + 1) * k] for i, m in enumerate(modes)}, histories)


@dataclass
class SweepResult:
    alphas: list
    betas: list
    matrix: np.ndarray  # rows: alphas, columns: betas
    aborted: int
    histories: dict = field(default_factory=dict)  # (alpha, beta) -> metrics history


def _sweep_cell(args) -> tuple[float, list]:
    try:
        return _run_cell(args)
    except TrainingAborted as exc:
        log.warning("sweep cell aborted: %s", exc)
        return math.nan, []


def sensitivity_sweep(config: TrainConfig, source: LabeledSet, target: LabeledSet,
                      alphas: Sequence[float], betas: Sequence[float], jobs: int = 1) -> SweepResult:
    if not alphas or not betas:
        raise ConfigError("sweep grids must be non-empty")
    cells = [(replace(config, alpha=a, beta=b), source, target) for a in alphas for b in betas]
    out = _map(_sweep_cell, cells, jobs)
    accs = np.array([acc for acc, _ in out]).reshape(len(alphas), len(betas))
    histories = {(c.alpha, c.beta): hist for (c, _, _), (_, hist) in zip(cells, out)}
    return SweepResult(list(alphas), list(betas), accs, int(np.isnan(accs).sum()), histories)


@dataclass
class ComparisonTable:
    seeds: list
    accuracies: dict  # estimator arm -> list per seed
    histories: dict = field(default_factory=dict)  # (arm, seed) -> metrics history

    def summary(self) -> dict:
        return {arm: {"mean": float(np.mean(v)), "std": float(np.std(v))} for arm, v in self.accuracies.items()}


def estimator_comparison(config: TrainConfig, source: LabeledSet, target: LabeledSet,
                         seeds: Sequence[int] | None = None, jobs: int = 1) -> ComparisonTable:
    """Target accuracy per estimator arm, one entry per seed. The ordering is reported, not judged."""
    seeds = list(seeds) if seeds else [config.seed]
    cells = [(replace(config, estimator=e, seed=s), source, target) for e in ESTIMATORS for s in seeds]
    out = _map(_run_cell, cells, jobs)
    accs = [acc for acc, _ in out]
    k = len(seeds)
    histories = {(c.estimator, c.seed): hist for (c, _, _), (_, hist) in zip(cells, out)}
    return ComparisonTable(seeds, {e: accs[i * k:(i + 1) * k] for i, e in enumerate(ESTIMATORS)}, histories)


def cross_eval(model: TrainedModel, third: LabeledSet,
               curves: tuple[Sequence[float], Sequence[float]] | None = None) -> dict:
    """Third-domain accuracy plus Pearson r between the target and third-domain accuracy curves.

    ``curves`` defaults to ``model.curves["target"]`` and ``model.curves["third"]``.
    """
    if third.dim != model.G.layer_sizes[0]:
        raise ValueError("third domain feature dim does not match the model")
    if curves is None:
        curves = (model.curves.get("target", []), model.curves.get("third", []))
    out = {"third_acc": evaluate(model, third), "pearson_r": None, "reason": None}
    try:
        out["pearson_r"] = pearson_corr(*curves)
    except ValueError as exc:
        out["reason"] = str(exc)
    return out


def iter_rows(history: Iterable[MetricsRecord]):
    for rec in history:
        yield rec.row()
