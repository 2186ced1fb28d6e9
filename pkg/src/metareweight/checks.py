"""Self-contained verification suite behind the `verify` subcommand.

Every check pits a fast implementation against an independent oracle: a
naive per-example loop, central finite differences, an explicit sort, or a
closed-form value. One check deliberately breaks the bias handling in a
copy of the score computation and demands that the finite-difference oracle
notices, which guards the oracle itself against going soft.
"""

import math
import os

import numpy as np

from . import reweight, theory
from .data import Dataset, ImbalanceSpec, load_idx, locate_mnist, make_imbalanced_pair, split_clean_validation
from .nn import (
    Batch,
    MLPModel,
    backward_per_example,
    finite_diff_grad,
    forward,
    sgd_step,
    weighted_gradient,
)
from .trainer import TrainConfig, train

_ACT_SCALAR = {
    "relu": lambda v: v if v > 0 else 0.0,
    "tanh": math.tanh,
    "sigmoid": lambda v: 1.0 / (1.0 + math.exp(-v)),
}


def _random_model(rng, sizes, activation="relu", bias_scale=0.0) -> MLPModel:
    model = MLPModel.init(sizes, activation=activation, rng=rng)
    if bias_scale:
        for w in model.layers:
            w[-1, :] = bias_scale * rng.standard_normal(w.shape[1])
    return model


def _random_batch(rng, n, d, k) -> Batch:
    return Batch(rng.random((n, d)), rng.integers(0, k, size=n))


def _naive_example_loss(model: MLPModel, x, label) -> float:
    """Pure-python forward pass for one example; the reference for `forward`."""
    act = _ACT_SCALAR[model.activation]
    a = [float(v) for v in x]
    z = []
    for l, w in enumerate(model.layers):
        a = a + [1.0]
        z = [sum(a[p] * w[p, q] for p in range(len(a))) for q in range(w.shape[1])]
        if l < len(model.layers) - 1:
            a = [act(v) for v in z]
    mx = max(z)
    total = sum(math.exp(v - mx) for v in z)
    return math.log(total) - (z[label] - mx)


def check_forward_reference():
    rng = np.random.default_rng(7)
    worst = 0.0
    for activation in ("relu", "tanh", "sigmoid"):
        model = _random_model(rng, [6, 5, 4], activation, bias_scale=0.3)
        batch = _random_batch(rng, 8, 6, 4)
        cache = forward(model, batch)
        for i in range(len(batch)):
            ref = _naive_example_loss(model, batch.inputs[i], int(batch.labels[i]))
            worst = max(worst, abs(float(cache.losses[i]) - ref))
    return worst <= 1e-12, f"max abs loss deviation {worst:.2e}"


def check_per_example_gradients():
    rng = np.random.default_rng(11)
    worst = 0.0
    for activation in ("relu", "tanh", "sigmoid"):
        model = _random_model(rng, [6, 5, 3], activation, bias_scale=0.2)
        batch = _random_batch(rng, 4, 6, 3)
        grads = backward_per_example(model, forward(model, batch), batch)
        for i in range(len(batch)):
            fd = finite_diff_grad(model, lambda m, i=i: float(forward(m, batch).losses[i]))
            analytic = grads.flat_one(i)
            err = np.abs(analytic - fd) / (1.0 + np.abs(fd))
            worst = max(worst, float(err.max()))
    return worst <= 1e-6, f"max relative deviation from finite differences {worst:.2e}"


def check_flat_reconstruction():
    rng = np.random.default_rng(13)
    model = _random_model(rng, [5, 4, 3], "tanh", bias_scale=0.1)
    batch = _random_batch(rng, 6, 5, 3)
    grads = backward_per_example(model, forward(model, batch), batch)
    flat = grads.flat()
    for i in range(len(batch)):
        if not np.array_equal(flat[i], grads.flat_one(i)):
            return False, f"row {i} of flat() differs from flat_one({i})"
    return True, ""


def check_closed_form_vs_flat():
    rng = np.random.default_rng(17)
    model = _random_model(rng, [6, 5, 3], "relu", bias_scale=0.2)
    tb = _random_batch(rng, 8, 6, 3)
    vb = _random_batch(rng, 4, 6, 3)
    tg = backward_per_example(model, forward(model, tb), tb)
    vg = backward_per_example(model, forward(model, vb), vb)
    u = reweight.meta_grad_closed_form(tg, vg)
    u_ref = (tg.flat() @ vg.flat().T).mean(axis=1)
    err = float(np.abs(u - u_ref).max())
    return err <= 1e-12, f"max abs deviation from materialized form {err:.2e}"


def check_lookahead_matches_closed_form():
    rng = np.random.default_rng(19)
    model = _random_model(rng, [6, 5, 3], "tanh", bias_scale=0.2)
    tb = _random_batch(rng, 8, 6, 3)
    vb = _random_batch(rng, 4, 6, 3)
    tg = backward_per_example(model, forward(model, tb), tb)
    vg = backward_per_example(model, forward(model, vb), vb)
    u_closed = reweight.meta_grad_closed_form(tg, vg)
    alpha = 0.05
    u_look = reweight.meta_grad_lookahead(model, tb, vb, alpha)
    rel = float(np.abs(u_look - alpha * u_closed).max() / (np.abs(alpha * u_closed).max() + 1e-300))
    return rel <= 1e-10, f"relative gap between routes {rel:.2e}"


def check_meta_gradient_finite_differences():
    rng = np.random.default_rng(23)
    model = _random_model(rng, [6, 5, 3], "sigmoid", bias_scale=0.2)
    tb = _random_batch(rng, 6, 6, 3)
    vb = _random_batch(rng, 4, 6, 3)
    alpha = 0.05
    worst = 0.0
    for eps0 in (None, np.full(6, 1.0 / 6)):
        u = reweight.meta_grad_lookahead(model, tb, vb, alpha, eps0=eps0)
        u_fd = theory.fd_meta_gradient(model, tb, vb, alpha, eps0=eps0)
        err = np.abs(u - u_fd) / (1.0 + np.abs(u_fd))
        worst = max(worst, float(err.max()))
    return worst <= 1e-4, f"max relative deviation from finite differences {worst:.2e}"


def check_bias_mutation_detected():
    """A bias-dropping variant of the score must disagree with the oracle."""
    rng = np.random.default_rng(29)
    model = _random_model(rng, [6, 5, 3], "tanh", bias_scale=0.5)
    tb = _random_batch(rng, 6, 6, 3)
    vb = _random_batch(rng, 4, 6, 3)
    tg = backward_per_example(model, forward(model, tb), tb)
    vg = backward_per_example(model, forward(model, vb), vb)

    scores = np.zeros((tg.count, vg.count))
    for zt, gt, zv, gv in zip(tg.inputs, tg.signals, vg.inputs, vg.signals):
        # Mutation under test: drop the constant-1 column, losing bias terms.
        scores += (zt[:, :-1] @ zv[:, :-1].T) * (gt @ gv.T)
    u_broken = scores.mean(axis=1)

    u_fd = theory.fd_meta_gradient(model, tb, vb, alpha=0.05) / 0.05
    gap = float(np.abs(u_broken - u_fd).max() / (np.abs(u_fd).max() + 1e-300))
    return gap > 1e-3, f"bias-free variant only {gap:.2e} away from oracle; oracle too loose"


def check_rectified_normalization():
    rng = np.random.default_rng(31)
    for _ in range(10000):
        n = int(rng.integers(1, 12))
        mode = rng.integers(0, 4)
        if mode == 0:
            u = rng.standard_normal(n)
        elif mode == 1:
            u = -np.abs(rng.standard_normal(n))
        elif mode == 2:
            u = np.zeros(n)
        else:
            u = np.abs(rng.standard_normal(n)) * 10.0 ** rng.integers(-8, 9)
        w = reweight.rectify_normalize(u)
        if (w < 0).any():
            return False, "negative weight"
        if np.any((u <= 0) & (w != 0)):
            return False, "nonpositive score got positive weight"
        total = w.sum()
        if (u > 0).any():
            if abs(total - 1.0) > 1e-12:
                return False, f"sum {total} not 1"
        elif total != 0.0:
            return False, f"all-nonpositive batch got sum {total}"
    return True, ""


def check_scale_invariance():
    rng = np.random.default_rng(37)
    worst = 0.0
    for _ in range(200):
        u = rng.standard_normal(10)
        if not (u > 0).any():
            continue
        base = reweight.rectify_normalize(u)
        for c in (1e-8, 3.7, 1e8):
            w = reweight.rectify_normalize(c * u)
            worst = max(worst, float(np.abs(w - base).max()))
    return worst <= 1e-12, f"max deviation under positive scaling {worst:.2e}"


def check_sign_semantics():
    """Same input with the validation label helps; with the wrong label hurts."""
    rng = np.random.default_rng(41)
    model = _random_model(rng, [4, 2], "relu")  # single layer: exact sign argument
    x = rng.random(4)
    vb = Batch(x[None, :], np.array([0]))
    tb = Batch(np.stack([x, x]), np.array([0, 1]))
    tg = backward_per_example(model, forward(model, tb), tb)
    vg = backward_per_example(model, forward(model, vb), vb)
    u = reweight.meta_grad_closed_form(tg, vg)
    if not (u[0] > 0 and u[1] < 0):
        return False, f"expected (+, -) scores, got {u}"
    w = reweight.rectify_normalize(u)
    if not (w[0] == 1.0 and w[1] == 0.0):
        return False, f"expected weights (1, 0), got {w}"
    return True, ""


def check_random_weights_distribution():
    rng = np.random.default_rng(43)
    zeros = 0
    total = 0
    for _ in range(2000):
        w = reweight.random_weights(5, rng)
        if abs(w.sum() - 1.0) > 1e-12 or (w < 0).any():
            return False, "weights not a rectified normalized draw"
        zeros += int((w == 0).sum())
        total += 5
    frac = zeros / total
    return abs(frac - 0.5) <= 0.05, f"clipped fraction {frac:.3f} not within 0.5 +- 0.05"


def check_resampling_balance():
    rng = np.random.default_rng(47)
    labels = np.array([0] * 990 + [1] * 10)
    idx = reweight.resample_indices(labels, 10000, rng)
    frac = float((labels[idx] == 1).mean())
    return abs(frac - 0.5) <= 0.02, f"minority frequency {frac:.3f} not within 0.5 +- 0.02"


def check_hard_mining_matches_sort():
    rng = np.random.default_rng(53)
    for _ in range(200):
        n = int(rng.integers(3, 20))
        losses = rng.integers(0, 4, size=n).astype(np.float64)  # force ties
        labels = rng.integers(0, 2, size=n)
        maj = [i for i in range(n) if labels[i] == 1]
        k = int(rng.integers(0, len(maj) + 1))
        got = reweight.hard_mining_select(losses, labels, 1, k)
        ranked = sorted(maj, key=lambda i: (-losses[i], i))[:k]
        want = sorted([i for i in range(n) if labels[i] != 1] + ranked)
        if list(got) != want:
            return False, f"selection {list(got)} != oracle {want}"
    return True, ""


def check_step_work_budget():
    rng = np.random.default_rng(59)
    images = rng.random((40, 6))
    labels = rng.integers(0, 2, size=40)
    ds = Dataset(images, labels)
    val = Dataset(images[:8], labels[:8])
    test = Dataset(images[:10], labels[:10])
    base = TrainConfig(
        strategy="uniform",
        total_steps=30,
        batch_size_train=10,
        batch_size_val=4,
        eval_every=30,
        hidden_sizes=(8,),
        include_val_in_train=False,
    )
    uni = train(base, ds, val, test)
    from dataclasses import replace

    meta = train(replace(base, strategy="meta_reweight"), ds, val, test)
    ratio = meta.work_units / uni.work_units
    return ratio <= 3.0, f"meta/uniform work ratio {ratio:.2f} exceeds 3"


def check_descent_step_properties():
    rng = np.random.default_rng(61)
    model = _random_model(rng, [5, 4, 3], "tanh", bias_scale=0.3)
    batch = _random_batch(rng, 10, 5, 3)

    # Zero-gradient objective: nothing aligns, parameters must not move.
    zero_model = model.with_params(np.zeros(model.param_count))
    quad = theory.quadratic_surrogate(0.8)
    stepped, entry = theory.unnormalized_descent_step(zero_model, batch, quad, alpha=0.1)
    if entry.align_sq != 0.0 or not np.array_equal(stepped.flatten(), zero_model.flatten()):
        return False, "orthogonal case moved the parameters"

    # Quadratic surrogate: smoothness estimate must equal the curvature.
    l_est = theory.estimate_smoothness(model, quad, probes=10, radius=1e-3, rng=rng)
    if abs(l_est - 0.8) > 1e-9:
        return False, f"quadratic smoothness estimate {l_est} != 0.8"

    # Gradient bound on a zero model has a closed form: the softmax signal
    # norm is sqrt((k-1)/k) for every example, so the bound factorizes.
    k = 3
    ds = Dataset(batch.inputs, batch.labels)
    zero_single = MLPModel([np.zeros((6, k))])
    got = theory.estimate_grad_bound(zero_single, ds, sample_count=10, rng=rng)
    inputs_aug = np.hstack([batch.inputs, np.ones((10, 1))])
    want = math.sqrt((k - 1) / k) * float(np.linalg.norm(inputs_aug, axis=1).max())
    if abs(got - want) > 1e-12:
        return False, f"gradient bound {got} != closed form {want}"

    # Real objective: descent should hold at a compliant step size.
    val = _random_batch(rng, 6, 5, 3)
    objective = theory.validation_objective(val.inputs, val.labels)
    est = theory.estimate_regularity(model, ds, objective, probes=10, rng=rng)
    alpha = theory.safe_step_size(10, est, cap=0.1)
    cur = model
    for t in range(50):
        cur, entry = theory.unnormalized_descent_step(cur, batch, objective, alpha, step_index=t)
        if entry.g_after > entry.g_before + 1e-9:
            return False, f"objective rose at step {t}: {entry.g_before} -> {entry.g_after}"
        if entry.align_sq < 0:
            return False, "negative alignment statistic"
    return True, ""


def check_rate_report():
    rng = np.random.default_rng(67)
    trace = [
        theory.DescentEntry(t, 0.0, 0.0, float(abs(rng.standard_normal())) + 1e-3, 0.0)
        for t in range(1500)
    ]
    rows = theory.rate_report(trace)
    if len(rows) < 5:
        return False, f"only {len(rows)} checkpoints"
    mins = [r.min_grad_norm_sq for r in rows]
    if any(b > a + 1e-15 for a, b in zip(mins, mins[1:])):
        return False, "running minimum increased"
    c = rows[0].envelope * math.sqrt(rows[0].horizon)
    for r in rows:
        if abs(r.envelope - c / math.sqrt(r.horizon)) > 1e-9 * c:
            return False, "envelope is not C/sqrt(T)"
    return True, ""


QUICK_CHECKS = [
    ("forward_matches_reference_loop", check_forward_reference),
    ("per_example_gradients_match_finite_differences", check_per_example_gradients),
    ("per_example_flat_reconstruction_bitwise", check_flat_reconstruction),
    ("closed_form_matches_materialized_form", check_closed_form_vs_flat),
    ("lookahead_matches_closed_form_scaled", check_lookahead_matches_closed_form),
    ("meta_gradient_matches_finite_differences", check_meta_gradient_finite_differences),
    ("bias_term_mutation_is_detected", check_bias_mutation_detected),
    ("rectified_normalization_invariants", check_rectified_normalization),
    ("positive_scale_invariance", check_scale_invariance),
    ("alignment_sign_semantics", check_sign_semantics),
    ("random_weights_distribution", check_random_weights_distribution),
    ("class_balanced_resampling", check_resampling_balance),
    ("hard_mining_matches_sort", check_hard_mining_matches_sort),
    ("step_work_budget", check_step_work_budget),
    ("descent_step_properties", check_descent_step_properties),
    ("rate_report_properties", check_rate_report),
]


def check_mnist_monotone_descent(data_dir=None, out_dir=None):
    paths = locate_mnist(data_dir)
    if paths is None:
        return None, "MNIST IDX files not found (set MNIST_DIR or pass --data-dir)"
    full = load_idx(paths["train_images"], paths["train_labels"])
    rng = np.random.default_rng(0)
    pair = make_imbalanced_pair(full, ImbalanceSpec(ratio=1, total=510), rng)
    train_ds, val_ds = split_clean_validation(pair, 5, rng)
    run = theory.run_descent_verification(
        train_ds, val_ds, steps=1000, batch_size=100, seed=0, alpha_cap=0.1
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        theory.write_descent_csv(run.trace, os.path.join(out_dir, "descent_trace.csv"))
        theory.write_rate_csv(
            theory.rate_report(run.trace), os.path.join(out_dir, "descent_rate.csv")
        )
    detail = (
        f"alpha={run.alpha:.3e} smoothness={run.estimate.smoothness:.3e} "
        f"grad_bound={run.estimate.grad_bound:.3e} violations={run.violations}"
    )
    return run.violations == 0, detail


def run_checks(level: str = "quick", data_dir: str | None = None, out_dir: str | None = None) -> int:
    """Run the suite, print one line per check, return a process exit code."""
    failed = 0
    for name, fn in QUICK_CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashed check is a failed check
            ok, detail = False, f"raised {e!r}"
        if ok:
            print(f"[PASS] {name}")
        else:
            failed += 1
            print(f"[FAIL] {name}: {detail}")
    if level == "full":
        try:
            ok, detail = check_mnist_monotone_descent(data_dir, out_dir)
        except Exception as e:
            ok, detail = False, f"raised {e!r}"
        if ok is None:
            print(f"[SKIP] mnist_monotone_descent: {detail}")
        elif ok:
            print(f"[PASS] mnist_monotone_descent: {detail}")
        else:
            failed += 1
            print(f"[FAIL] mnist_monotone_descent: {detail}")
    return 1 if failed else 0
