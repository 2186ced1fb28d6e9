"""Empirical checks of the convergence story behind the reweighted update.

The guarantee under test: with the unnormalized rectified update

    theta' = theta - (alpha / n) * sum_i max(<grad_G, grad_f_i>, 0) * grad_f_i

the validation objective G never increases, provided G is L-smooth, example
gradients are bounded by sigma, and alpha <= 2 n / (L sigma^2). Neither L nor
sigma is available in closed form for an MLP, so both are estimated by
sampling; the estimates are lower bounds, which is why callers apply a
safety factor to the step-size bound.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, NonFiniteError
from .nn import (
    Batch,
    MLPModel,
    backward_per_example,
    dot_with_each,
    forward,
    sgd_step,
    weighted_gradient,
)


def validation_objective(images: np.ndarray, labels: np.ndarray):
    """Objective G(model) = mean loss on a fixed clean set.

    Returns a callable model -> (value, flat gradient).
    """
    batch = Batch(images, labels)

    def objective(model: MLPModel) -> tuple[float, np.ndarray]:
        cache = forward(model, batch)
        grads = backward_per_example(model, cache, batch)
        g = weighted_gradient(grads, np.full(len(batch), 1.0 / len(batch)))
        return float(cache.losses.mean()), g

    return objective


def quadratic_surrogate(curvature: float):
    """G(model) = curvature/2 * ||theta||^2; handy because L = curvature exactly."""

    def objective(model: MLPModel) -> tuple[float, np.ndarray]:
        theta = model.flatten()
        return 0.5 * curvature * float(theta @ theta), curvature * theta

    return objective


def estimate_smoothness(
    model: MLPModel,
    objective,
    probes: int = 40,
    radius: float = 1e-3,
    rng: np.random.Generator | None = None,
    restarts: int = 4,
) -> float:
    """Largest observed ||grad G(a) - grad G(b)|| / ||a - b|| near the model.

    Every probe measures a secant ratio, which lower-bounds any true Lipschitz
    constant of grad G. Probing purely random directions is not enough: in a
    space with hundreds of thousands of parameters a random direction sees the
    average curvature, which sits far below the top eigenvalue that controls
    step-size safety. Each restart therefore draws one random direction and
    then power-iterates, re-probing along the previous gradient difference so
    the direction climbs toward the dominant curvature; the estimate is the
    largest ratio seen anywhere.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    if radius <= 0:
        raise ValueError("probe radius must be positive")
    if restarts < 1:
        raise ValueError("need at least one restart")
    if rng is None:
        rng = np.random.default_rng(0)
    theta = model.flatten()
    _, g0 = objective(model)
    best = 0.0
    per_restart = max(1, -(-probes // restarts))
    spent = 0
    for _ in range(restarts):
        d = rng.standard_normal(theta.size)
        d /= np.linalg.norm(d)
        for _ in range(per_restart):
            if spent >= probes:
                break
            _, g1 = objective(model.with_params(theta + radius * d))
            spent += 1
            diff = g1 - g0
            ratio = float(np.linalg.norm(diff)) / radius
            best = max(best, ratio)
            if ratio == 0.0 or not np.isfinite(ratio):
                break
            d = diff / np.linalg.norm(diff)
    return best


def estimate_grad_bound(
    model: MLPModel,
    ds: Dataset,
    sample_count: int | None = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest per-example gradient norm over a sample of the dataset.

    sample_count=None scans the whole dataset.
    """
    if len(ds) == 0:
        raise ConfigError("cannot estimate gradient bound on an empty dataset")
    if sample_count is not None and sample_count < 1:
        raise ValueError("need at least one sampled example")
    if rng is None:
        rng = np.random.default_rng(0)
    if sample_count is None or sample_count >= len(ds):
        idx = np.arange(len(ds))
    else:
        idx = rng.choice(len(ds), size=sample_count, replace=False)
    batch = Batch(ds.images[idx], ds.labels[idx])
    grads = backward_per_example(model, forward(model, batch), batch)
    return float(np.sqrt(grads.norms_squared().max()))


@dataclass
class RegularityEstimate:
    """Sampled stand-ins for the smoothness and gradient-norm constants."""

    smoothness: float
    grad_bound: float
    probe_count: int
    sample_count: int
    note: str = "sampled lower bounds; true constants may be larger"


def estimate_regularity(
    model: MLPModel,
    train_ds: Dataset,
    objective,
    probes: int = 40,
    radius: float = 1e-3,
    sample_count: int | None = 256,
    rng: np.random.Generator | None = None,
) -> RegularityEstimate:
    if rng is None:
        rng = np.random.default_rng(0)
    smooth = estimate_smoothness(model, objective, probes=probes, radius=radius, rng=rng)
    bound = estimate_grad_bound(model, train_ds, sample_count=sample_count, rng=rng)
    return RegularityEstimate(
        smoothness=smooth,
        grad_bound=bound,
        probe_count=probes,
        sample_count=len(train_ds) if sample_count is None else sample_count,
    )


def safe_step_size(
    batch_size: int, estimate: RegularityEstimate, cap: float = 0.1, safety: float = 2.0
) -> float:
    """Step size meeting alpha <= 2 n / (L sigma^2) with a safety factor, capped.

    With the default safety of 2 this evaluates to n / (L_hat sigma_hat^2),
    compensating for the estimates being lower bounds.
    """
    if safety < 1.0:
        raise ValueError("safety factor must be at least 1")
    denom = estimate.smoothness * estimate.grad_bound**2
    if denom <= 0:
        return cap
    return min(2.0 * batch_size / (safety * denom), cap)


@dataclass
class DescentEntry:
    step: int
    g_before: float
    g_after: float
    grad_norm_sq: float
    align_sq: float  # sum of squared rectified alignments, the T_t statistic


def unnormalized_descent_step(
    model: MLPModel,
    batch: Batch,
    objective,
    alpha: float,
    step_index: int = 0,
) -> tuple[MLPModel, DescentEntry]:
    """One rectified unnormalized update; records G before and after.

    Examples orthogonal to (or anti-aligned with) grad G get zero coefficient,
    so a batch with no aligned example leaves the parameters unchanged.
    """
    if alpha < 0:
        raise ValueError("step size must be nonnegative")
    g0, grad_g = objective(model)
    grads = backward_per_example(model, forward(model, batch), batch)
    coef = np.maximum(dot_with_each(grads, grad_g), 0.0)
    align_sq = float((coef**2).sum())
    stepped = sgd_step(model, weighted_gradient(grads, coef), alpha / len(batch))
    g1, _ = objective(stepped)
    entry = DescentEntry(
        step=step_index,
        g_before=g0,
        g_after=g1,
        grad_norm_sq=float(grad_g @ grad_g),
        align_sq=align_sq,
    )
    return stepped, entry


@dataclass
class DescentRun:
    trace: list[DescentEntry]
    model: MLPModel
    alpha: float
    estimate: RegularityEstimate
    tolerance: float = 1e-9

    @property
    def violations(self) -> int:
        return sum(1 for e in self.trace if e.g_after > e.g_before + self.tolerance)


def _descent_trial(
    model: MLPModel,
    batches: list[Batch],
    objective,
    alpha: float,
) -> tuple[MLPModel, list[DescentEntry], float, float]:
    """Run one fixed-step trial, harvesting regularity probes as it goes.

    Every executed segment (theta_t, theta_{t+1}) doubles as a Lipschitz probe
    pair for grad G, and every batch contributes per-example gradient norms.
    Returns (final model, trace, max segment ratio, max gradient norm). The
    trial stops early if G blows up or the numbers leave float range; the
    probes gathered up to that point are what force a smaller step next time.
    """
    g_val, grad_g = objective(model)
    ceiling = 10.0 * max(g_val, 1.0)
    n = len(batches[0]) if batches else 1
    trace: list[DescentEntry] = []
    seg_ratio = 0.0
    grad_norm = 0.0
    for t, batch in enumerate(batches):
        try:
            grads = backward_per_example(model, forward(model, batch), batch)
            grad_norm = max(grad_norm, float(np.sqrt(grads.norms_squared().max())))
            coef = np.maximum(dot_with_each(grads, grad_g), 0.0)
            direction = weighted_gradient(grads, coef)
            stepped = sgd_step(model, direction, alpha / n)
            g_next, grad_next = objective(stepped)
        except NonFiniteError:
            break
        trace.append(
            DescentEntry(
                step=t,
                g_before=g_val,
                g_after=g_next,
                grad_norm_sq=float(grad_g @ grad_g),
                align_sq=float(coef @ coef),
            )
        )
        step_len = (alpha / n) * float(np.linalg.norm(direction))
        if step_len > 0:
            seg_ratio = max(
                seg_ratio, float(np.linalg.norm(grad_next - grad_g)) / step_len
            )
        model, g_val, grad_g = stepped, g_next, grad_next
        if not np.isfinite(g_val) or g_val > ceiling:
            break
    return model, trace, seg_ratio, grad_norm


def run_descent_verification(
    train_ds: Dataset,
    val_ds: Dataset,
    steps: int = 1000,
    batch_size: int = 100,
    seed: int = 0,
    alpha_cap: float = 0.1,
    safety: float = 2.0,
    hidden_sizes: tuple[int, ...] = (256,),
    activation: str = "relu",
    probes: int = 60,
    radius: float = 1e-3,
    sample_count: int | None = None,
    max_attempts: int = 10,
) -> DescentRun:
    """Pick a step size the estimated constants justify, then verify that G is
    monotonically nonincreasing along the whole trajectory.

    Constants estimated only at the starting point routinely undershoot what
    the trajectory encounters, and an undershot L or sigma inflates the step
    bound enough to break descent. So the estimates are refined to
    self-consistency: each trial replays the same batch sequence from the same
    initialization, the segments and batches of the trial feed back into L-hat
    and sigma-hat, and the run is accepted only when a full-length trial adds
    nothing to either estimate, meaning the constants that chose the step size
    held everywhere the run actually went. Estimates only grow, so the step
    size shrinks monotonically and the loop terminates.
    """
    if len(val_ds) == 0:
        raise ConfigError("descent verification needs a validation set")
    rng = np.random.default_rng(seed)
    num_classes = int(max(train_ds.labels.max(), val_ds.labels.max())) + 1
    model0 = MLPModel.init(
        [train_ds.images.shape[1], *hidden_sizes, num_classes], activation=activation, rng=rng
    )
    objective = validation_objective(val_ds.images, val_ds.labels)
    estimate = estimate_regularity(
        model0,
        train_ds,
        objective,
        probes=probes,
        radius=radius,
        sample_count=sample_count,
        rng=rng,
    )

    n_pool = len(train_ds)
    batches = []
    for _ in range(steps):
        if n_pool >= batch_size:
            idx = rng.choice(n_pool, size=batch_size, replace=False)
        else:
            idx = rng.choice(n_pool, size=batch_size, replace=True)
        batches.append(Batch(train_ds.images[idx], train_ds.labels[idx]))

    smooth = estimate.smoothness
    bound = estimate.grad_bound
    for attempt in range(1, max_attempts + 1):
        current = RegularityEstimate(
            smoothness=smooth,
            grad_bound=bound,
            probe_count=estimate.probe_count,
            sample_count=estimate.sample_count,
            note=(
                "sampled lower bounds refined with descent-path probes; "
                f"trial {attempt}"
            ),
        )
        alpha = safe_step_size(batch_size, current, cap=alpha_cap, safety=safety)
        model, trace, seg_ratio, grad_norm = _descent_trial(model0, batches, objective, alpha)
        confirmed = seg_ratio <= smooth and grad_norm <= bound and len(trace) == steps
        if confirmed or attempt == max_attempts:
            return DescentRun(trace=trace, model=model, alpha=alpha, estimate=current)
        smooth = max(smooth, seg_ratio)
        bound = max(bound, grad_norm)
    raise AssertionError("unreachable")


@dataclass
class RateRow:
    horizon: int
    min_grad_norm_sq: float
    envelope: float


def rate_report(trace: list[DescentEntry], checkpoints: int = 20) -> list[RateRow]:
    """Running minimum of ||grad G||^2 at log-spaced horizons.

    The envelope column is C / sqrt(T) with C calibrated at the first
    checkpoint; it is descriptive, giving the reader the reference slope for
    the expected decay rate rather than a bound that is asserted.
    """
    if not trace:
        raise ValueError("empty trace")
    total = len(trace)
    marks = np.unique(
        np.geomspace(1, total, num=min(checkpoints, total)).round().astype(int)
    )
    norms = np.array([e.grad_norm_sq for e in trace])
    running = np.minimum.accumulate(norms)
    first = running[marks[0] - 1]
    c = first * np.sqrt(marks[0])
    return [
        RateRow(
            horizon=int(t),
            min_grad_norm_sq=float(running[t - 1]),
            envelope=float(c / np.sqrt(t)),
        )
        for t in marks
    ]


def write_descent_csv(trace: list[DescentEntry], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "G", "grad_norm_sq", "T_t"])
        for e in trace:
            writer.writerow([e.step, repr(e.g_before), repr(e.grad_norm_sq), repr(e.align_sq)])


def write_rate_csv(rows: list[RateRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["T", "min_grad_norm_sq", "envelope"])
        for r in rows:
            writer.writerow([r.horizon, repr(r.min_grad_norm_sq), repr(r.envelope)])


def fd_meta_gradient(
    model: MLPModel,
    train_batch: Batch,
    val_batch: Batch,
    alpha: float,
    eps0: np.ndarray | None = None,
    h: float = 1e-5,
) -> np.ndarray:
    """Finite-difference oracle for the lookahead scores.

    Perturbs each example's epsilon by +-h, takes the actual SGD step, and
    differences the validation loss. Slow by design; used to cross-check the
    analytic routes.
    """
    n = len(train_batch)
    if eps0 is None:
        eps0 = np.zeros(n)
    eps0 = np.asarray(eps0, dtype=np.float64)
    grads = backward_per_example(model, forward(model, train_batch), train_batch)

    def val_loss_after(eps: np.ndarray) -> float:
        stepped = sgd_step(model, weighted_gradient(grads, eps), alpha)
        return float(forward(stepped, val_batch).losses.mean())

    u = np.empty(n)
    for i in range(n):
        plus = eps0.copy()
        plus[i] += h
        minus = eps0.copy()
        minus[i] -= h
        u[i] = -(val_loss_after(plus) - val_loss_after(minus)) / (2.0 * h)
    return u
