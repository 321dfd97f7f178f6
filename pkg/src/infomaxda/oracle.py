"""Exact reference computations.

Closed-form Gaussian MI/KL, exhaustive expectations over small discrete joints
(used to check the ELBO identity, the infomax identity and both
Donsker-Varadhan inequalities), a central finite-difference gradient checker,
and Pearson correlation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses
from .numerics import Net, NumericalError, Rng

NORMALIZATION_TOL = 1e-12


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # 0 * log(anything) := 0
    out = np.zeros(np.broadcast(x, y).shape)
    mask = np.broadcast_to(x > 0, out.shape)
    xb = np.broadcast_to(x, out.shape)
    yb = np.broadcast_to(y, out.shape)
    out[mask] = xb[mask] * np.log(yb[mask])
    return out


def _entropy(p: np.ndarray) -> float:
    return -float(_xlogy(p, p).sum())


@dataclass(frozen=True)
class DiscreteDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64).ravel()
        if p.size < 2 or np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValueError("DiscreteDist needs >= 2 non-negative entries summing to 1")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint table ``probs[x, z]`` with both alphabets of size 2..16."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or not (2 <= p.shape[0] <= 16 and 2 <= p.shape[1] <= 16):
            raise ValueError(f"joint table must be between 2x2 and 16x16, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValueError("joint table must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def px(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    @property
    def pz(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    @property
    def product(self) -> np.ndarray:
        return np.outer(self.px, self.pz)

    @classmethod
    def random(cls, rng: Rng, nx: int, nz: int) -> "DiscreteJoint":
        w = rng.uniform(nx * nz).reshape(nx, nz) ** 3 + 1e-3
        return cls(w / w.sum())


def random_dist(rng: Rng, size: int) -> DiscreteDist:
    w = rng.uniform(size) + 1e-3
    return DiscreteDist(w / w.sum())


@dataclass
class CheckReport:
    name: str
    instances_run: int
    max_abs_violation: float
    tolerance: float
    worst_case_seed: int | None = None
    status: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.status:
            self.status = "passed" if self.passed else "failed"

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_violation <= self.tolerance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        if not math.isfinite(d["max_abs_violation"]):
            d["max_abs_violation"] = None
        return d


# ---------------------------------------------------------------------------
# Closed forms


def gaussian_mi(rho: float, dims: int = 1) -> float:
    """MI in nats of ``dims`` independent standard bivariate normal pairs with correlation ``rho``."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    if dims < 1:
        raise ValueError("dims must be >= 1")
    return -0.5 * dims * math.log1p(-rho * rho)


def gaussian_kld(mu1, var1, mu2, var2) -> float:
    """KL(N(mu1, diag var1) || N(mu2, diag var2))."""
    mu1, var1, mu2, var2 = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mu1, var1, mu2, var2))
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    return float(np.sum(0.5 * np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / (2 * var2) - 0.5))


# ---------------------------------------------------------------------------
# Discrete identities


def discrete_mi(joint: DiscreteJoint, check: bool = True) -> float:
    """``sum p(x,z) log p(x,z) / (p(x) p(z))``.

    With ``check`` the value is compared against ``H(X) - H(X|Z)`` computed
    from entropies, and an ``ArithmeticError`` is raised if they differ by
    more than 1e-12.
    """
    p = joint.probs
    ratio = np.where(p > 0, p, 1.0) / np.where(joint.product > 0, joint.product, 1.0)
    mi = float(_xlogy(p, ratio).sum())
    if check:
        alt = _entropy(joint.px) - (_entropy(p) - _entropy(joint.pz))
        if abs(mi - alt) > 1e-12:
            raise ArithmeticError(f"MI formulas disagree: {mi!r} vs {alt!r}")
    return mi


def elbo_identity_check(q: DiscreteDist, joint: DiscreteJoint, x_index: int, tol: float = 1e-9) -> CheckReport:
    """Compare ``KL(q || p(z|x))`` with ``log p(x) - B`` where ``B = E_q[log p(x,z)] - E_q[log q]``."""
    row = joint.probs[x_index]
    if q.probs.size != row.size:
        raise ValueError("q must be defined over the joint's z alphabet")
    p_x = float(row.sum())
    if p_x <= 0:
        raise ValueError("conditioning event has zero probability")
    if np.any((q.probs > 0) & (row <= 0)):
        raise ValueError("q puts mass where p(z|x) is zero")
    post = row / p_x
    lhs = float(_xlogy(q.probs, q.probs).sum() - _xlogy(q.probs, post).sum())
    elbo = float(_xlogy(q.probs, row).sum() - _xlogy(q.probs, q.probs).sum())
    rhs = -elbo + math.log(p_x)
    return CheckReport("elbo", 1, abs(lhs - rhs), tol, details={"kl": lhs, "elbo": elbo, "log_px": math.log(p_x)})


def infomax_identity_check(joint: DiscreteJoint, tol: float = 1e-12) -> CheckReport:
    """Check ``E[log p(x|z)] = -H(X|Z)`` and ``H(X) - H(X|Z) = MI``.

    ``H(X|Z)`` is taken as ``H(X,Z) - H(Z)`` so neither side reuses the other's
    arithmetic.
    """
    p = joint.probs
    pz = joint.pz
    cond = np.divide(p, pz[None, :], out=np.zeros_like(p), where=pz[None, :] > 0)
    expected_log_cond = float(_xlogy(p, cond).sum())
    h_x_given_z = _entropy(p) - _entropy(pz)
    mi = discrete_mi(joint, check=False)
    v1 = abs(expected_log_cond + h_x_given_z)
    v2 = abs((_entropy(joint.px) - h_x_given_z) - mi)
    return CheckReport("infomax", 1, max(v1, v2), tol,
                       details={"e_log_cond": expected_log_cond, "h_x_given_z": h_x_given_z, "mi": mi})


def dv_value(joint: DiscreteJoint, m: np.ndarray) -> float:
    """Exact ``E_joint[M] - log E_prod[exp M]`` for a tabulated critic."""
    return dv_two_critic_value(joint, m, m, half=False)


def dv_two_critic_value(joint: DiscreteJoint, m1: np.ndarray, m2: np.ndarray, half: bool = True) -> float:
    """Exact ``c * (E_joint[M1] - log E_prod[exp M2])`` with ``c = 1/2`` if ``half``."""
    prod = joint.product
    mx = m2.max()
    lme = mx + math.log(float(np.sum(prod * np.exp(m2 - mx))))
    value = float(np.sum(joint.probs * m1)) - lme
    return 0.5 * value if half else value


def optimal_critic(joint: DiscreteJoint) -> np.ndarray:
    """Log density ratio ``log p(x,z) / (p(x) p(z))``; requires a strictly positive table."""
    if np.any(joint.probs <= 0):
        raise ValueError("optimal critic needs a strictly positive joint")
    return np.log(joint.probs / joint.product)


def dv_inequality_check(joint: DiscreteJoint, n_critics: int, rng: Rng, tol: float = 1e-12,
                        critic_range: float = 3.0) -> CheckReport:
    """Random tabulated critics against the exact KL between joint and product.

    Draws ``n_critics`` single critics and ``n_critics`` pairs with values in
    ``[-critic_range, critic_range]``. Pairs violating
    ``E_joint[M2] >= E_joint[M1]`` have their roles swapped. Pairs are checked
    both with the 1/2 factor and without it (the form the training loss uses,
    and the stronger claim). The violation is the largest amount by which any
    bound exceeds the KL.
    """
    if n_critics < 1:
        raise ValueError("n_critics must be >= 1")
    kl = discrete_mi(joint)
    shape = joint.probs.shape
    size = joint.probs.size
    worst_single = -math.inf
    worst_pair = -math.inf
    worst_pair_full = -math.inf
    for _ in range(n_critics):
        m = (2 * rng.uniform(size) - 1).reshape(shape) * critic_range
        worst_single = max(worst_single, dv_value(joint, m) - kl)
        m1 = (2 * rng.uniform(size) - 1).reshape(shape) * critic_range
        m2 = (2 * rng.uniform(size) - 1).reshape(shape) * critic_range
        if np.sum(joint.probs * m2) < np.sum(joint.probs * m1):
            m1, m2 = m2, m1
        worst_pair = max(worst_pair, dv_two_critic_value(joint, m1, m2) - kl)
        worst_pair_full = max(worst_pair_full, dv_two_critic_value(joint, m1, m2, half=False) - kl)
    violation = max(0.0, worst_single, worst_pair, worst_pair_full)
    return CheckReport("dv", n_critics, violation, tol,
                       details={"kl": kl, "worst_single_excess": worst_single, "worst_pair_excess": worst_pair,
                                "worst_unhalved_pair_excess": worst_pair_full})


# ---------------------------------------------------------------------------
# Seeded suites


def _sizes(rng: Rng, lo: int, hi: int) -> tuple[int, int]:
    u = rng.uniform(2)
    return lo + int(u[0] * (hi - lo + 1)), lo + int(u[1] * (hi - lo + 1))


def _merge(name: str, reports: list[tuple[int, CheckReport]], tol: float) -> CheckReport:
    seed, worst = max(reports, key=lambda sr: sr[1].max_abs_violation)
    return CheckReport(name, len(reports), worst.max_abs_violation, tol, worst_case_seed=seed,
                       details={"worst": worst.details})


def elbo_suite(instances: int, seed: int, tol: float = 1e-9, max_size: int = 8) -> CheckReport:
    out = []
    for i in range(instances):
        s = seed + i
        rng = Rng(s)
        nx, nz = _sizes(rng, 2, max_size)
        joint = DiscreteJoint.random(rng, nx, nz)
        x_index = int(rng.uniform(1)[0] * nx)
        q = random_dist(rng, nz)
        out.append((s, elbo_identity_check(q, joint, x_index, tol)))
    return _merge("elbo", out, tol)


def infomax_suite(instances: int, seed: int, tol: float = 1e-12, max_size: int = 8) -> CheckReport:
    out = []
    for i in range(instances):
        s = seed + i
        rng = Rng(s)
        joint = DiscreteJoint.random(rng, *_sizes(rng, 2, max_size))
        out.append((s, infomax_identity_check(joint, tol)))
    return _merge("infomax", out, tol)


def dv_suite(instances: int, seed: int, tol: float = 1e-12, max_size: int = 8,
             optimal_tol: float = 1e-10) -> CheckReport:
    """One random critic and one constrained pair per random joint, plus the optimal critic."""
    out = []
    optimal_gap = 0.0
    for i in range(instances):
        s = seed + i
        rng = Rng(s)
        joint = DiscreteJoint.random(rng, *_sizes(rng, 2, max_size))
        out.append((s, dv_inequality_check(joint, 1, rng, tol)))
        optimal_gap = max(optimal_gap, abs(dv_value(joint, optimal_critic(joint)) - discrete_mi(joint)))
    report = _merge("dv", out, tol)
    report.details["optimal_critic_gap"] = optimal_gap
    if optimal_gap > optimal_tol:
        report.max_abs_violation = max(report.max_abs_violation, optimal_gap)
        report.status = "failed"
    return report


SUITES = {"elbo": elbo_suite, "infomax": infomax_suite, "dv": dv_suite}


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_gradcheck(nets: Net | Sequence[Net], loss_evaluator: Callable[[bool], float],
                          h: float = 1e-5, tol: float = 1e-4, skip: Sequence[np.ndarray] = ()) -> CheckReport:
    """Central-difference check of every parameter of ``nets``.

    ``loss_evaluator(backward)`` must return the scalar loss and, when
    ``backward`` is true, accumulate its gradient into the nets. The reported
    violation is ``max |g_a - g_n| / max(1e-8, |g_a| + |g_n|)``. Nets with relu
    hidden layers are not checked (status ``kink-unsafe``). Arrays listed in
    ``skip`` (by identity) are left out; use it only for parameters whose
    gradient is zero by construction, where the ratio measures roundoff.
    """
    if isinstance(nets, Net):
        nets = [nets]
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    if any("relu" in n.activations for n in nets):
        return CheckReport("gradcheck", 0, math.nan, tol, status="kink-unsafe")
    for n in nets:
        n.zero_grad()
    loss_evaluator(True)
    analytic = [[g.copy() for g in n.gradients()] for n in nets]
    for n in nets:
        n.zero_grad()

    worst, where, count, skipped = 0.0, None, 0, 0
    for ni, net in enumerate(nets):
        for pi, p in enumerate(net.parameters()):
            if any(p is q for q in skip):
                skipped += p.size
                continue
            flat = p.reshape(-1)
            ga_flat = analytic[ni][pi].reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_evaluator(False)
                flat[k] = orig - h
                down = loss_evaluator(False)
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError(f"loss non-finite at perturbed parameter net {ni} param {pi} index {k}")
                gn = (up - down) / (2 * h)
                ga = float(ga_flat[k])
                rel = abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))
                count += 1
                if rel > worst:
                    worst = rel
                    where = {"net": ni, "param": pi, "index": k, "analytic": ga, "numeric": gn}
    return CheckReport("gradcheck", count, worst, tol, details={"worst_offender": where, "skipped": skipped})


def pearson_corr(series_a, series_b) -> float:
    a = np.asarray(series_a, dtype=np.float64).ravel()
    b = np.asarray(series_b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("series must have equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise ValueError("zero variance")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Seeded gradient-check problems, one per loss

GRADCHECK_LOSSES = ("cls", "kld", "ent", "mi", "dv_single", "recon")


def _mi_problem(rng: Rng, shared: bool):
    n, dx, dz = 10, 2, 3
    G = Net([dx, 5, dz], "tanh", rng.fork())
    M1 = Net([dx + dz, 8, 1], "elu", rng.fork())
    M2 = M1 if shared else Net([dx + dz, 8, 1], "elu", rng.fork())
    x = rng.normal(n * dx).reshape(n, dx)
    perm = losses.marginal_permutation(n, rng)

    def evaluate(backward: bool) -> float:
        z = G.forward(x)
        batch = losses.MiBatch(x, z, z[perm], perm)
        grad = 1.0 if backward else None
        if shared:
            out = losses.dv_bound_single(M1, batch, grad)
        else:
            out = losses.mi_loss(M1, M2, batch, grad)
        if backward:
            dz_all = out.dz_joint.copy()
            dz_all[perm] += out.dz_marginal
            G.backward(dz_all)
        return out.value

    nets = [G, M1] if shared else [G, M1, M2]
    # a shared critic's output bias cancels between the two terms
    skip = [M1.biases[-1]] if shared else []
    return nets, evaluate, skip


def gradcheck_problem(loss: str, seed: int):
    """``(nets, loss_evaluator, skip)`` for a small seeded tanh/elu network driving ``loss``."""
    if loss not in GRADCHECK_LOSSES:
        raise ValueError(f"loss must be one of {GRADCHECK_LOSSES}")
    rng = Rng(seed)
    if loss in ("mi", "dv_single"):
        return _mi_problem(rng, shared=loss == "dv_single")

    n, d = 12, 3
    x = rng.normal(n * d).reshape(n, d)
    if loss == "cls":
        net = Net([d, 6, 4], "tanh", rng.fork())
        labels = (rng.uniform(n) * 4).astype(np.int64)

        def evaluate(backward):
            value, dlogits = losses.classification_loss(net.forward(x), labels)
            if backward:
                net.backward(dlogits)
            return value

        return [net], evaluate, []
    if loss == "ent":
        net = Net([d, 6, 4], "elu", rng.fork())

        def evaluate(backward):
            value, dlogits = losses.entropy_penalty(net.forward(x))
            if backward:
                net.backward(dlogits)
            return value

        return [net], evaluate, []
    if loss == "kld":
        # separate encoders per domain: with one shared encoder the output bias
        # gradient is exactly zero and the relative error measures only roundoff
        Gs = Net([d, 6, 4], "tanh", rng.fork())
        Gt = Net([d, 6, 4], "tanh", rng.fork())
        xt = rng.normal(n * d).reshape(n, d) * 1.5 + 0.5

        def evaluate(backward):
            value, dzs, dzt = losses.latent_kld(Gs.forward(x), Gt.forward(xt))
            if backward:
                Gs.backward(dzs)
                Gt.backward(dzt)
            return value

        return [Gs, Gt], evaluate, []
    G = Net([d, 6, 2], "tanh", rng.fork())
    decoder = Net([2, 6, d], "tanh", rng.fork())

    def evaluate(backward):
        z = G.forward(x)
        value, dz = losses.recon_mi_baseline(decoder, x, z, 1.0 if backward else None)
        if backward:
            G.backward(dz)
        return value

    return [G, decoder], evaluate, []


def gradcheck_loss(loss: str, seed: int = 0, tol: float = 1e-4) -> CheckReport:
    nets, evaluate, skip = gradcheck_problem(loss, seed)
    report = finite_diff_gradcheck(nets, evaluate, tol=tol, skip=skip)
    report.name = f"gradcheck:{loss}"
    report.worst_case_seed = seed
    report.status = "passed" if report.passed else "failed"
    return report
