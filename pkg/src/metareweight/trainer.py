"""SGD training loop with pluggable per-batch example weighting strategies.

One parameter update per step regardless of strategy. The meta_reweight
strategy computes its weights with the closed-form validation alignment
scores, which costs one extra forward/backward pass over the validation
mini-batch per step; that extra work is tracked in the result's counters.
"""

import collections
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .nn import (
    ACTIVATIONS,
    Batch,
    MLPModel,
    backward_per_example,
    forward,
    weighted_gradient,
    sgd_step,
)
from .reweight import (
    hard_mining_select,
    meta_grad_closed_form,
    proportion_weights,
    random_weights,
    rectify_normalize,
    resample_indices,
)

STRATEGIES = ("uniform", "meta_reweight", "proportion", "resample", "hard_mining", "random")


@dataclass
class TrainConfig:
    strategy: str = "uniform"
    learning_rate: float = 1e-3
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    batch_size_train: int = 100
    batch_size_val: int = 10
    total_steps: int = 8000
    seed: int = 0
    eval_every: int = 100
    include_val_in_train: bool = True
    early_stop_on_hyperval: bool = False
    hard_mining_k: int | None = None
    hidden_sizes: tuple[int, ...] = (256,)
    activation: str = "relu"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown value {self.strategy!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be positive")
        if self.batch_size_train < 1:
            raise ConfigError("batch_size_train: must be at least 1")
        if self.batch_size_val < 1:
            raise ConfigError("batch_size_val: must be at least 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps: must be at least 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be at least 1")
        prev = -1
        for step, mult in self.lr_schedule:
            if step <= prev:
                raise ConfigError("lr_schedule: steps must be strictly increasing")
            if mult <= 0:
                raise ConfigError("lr_schedule: multipliers must be positive")
            prev = step
        if self.hard_mining_k is not None and self.hard_mining_k < 1:
            raise ConfigError("hard_mining_k: must be at least 1 when set")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes: need positive sizes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation: unknown value {self.activation!r}")


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    val_loss: float
    test_error: float
    grad_norm_sq: float
    mean_w_clean: float
    mean_w_flipped: float
    frac_zero_w: float
    hyperval_error: float = float("nan")

    CSV_COLUMNS = (
        "step",
        "train_loss",
        "val_loss_G",
        "test_error",
        "grad_norm_sq",
        "mean_w_clean",
        "mean_w_flipped",
        "frac_zero_w",
    )

    def csv_row(self) -> list:
        return [
            self.step,
            self.train_loss,
            self.val_loss,
            self.test_error,
            self.grad_norm_sq,
            self.mean_w_clean,
            self.mean_w_flipped,
            self.frac_zero_w,
        ]


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    model: MLPModel
    final_test_error: float
    steps: int
    forward_examples: int
    backward_examples: int
    wall_time: float
    weight_log: dict  # arrays: step, weight, flipped (last eval window)

    @property
    def work_units(self) -> int:
        """Example passes spent inside the stepping path."""
        return self.forward_examples + self.backward_examples


def evaluate(model: MLPModel, ds: Dataset, chunk: int = 2048) -> tuple[float, float]:
    """(error rate, mean loss) over a dataset, computed in chunks."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    wrong = 0
    loss_sum = 0.0
    for start in range(0, len(ds), chunk):
        part = Batch(ds.images[start : start + chunk], ds.labels[start : start + chunk])
        cache = forward(model, part)
        wrong += int((cache.logits.argmax(axis=1) != part.labels).sum())
        loss_sum += float(cache.losses.sum())
    return wrong / len(ds), loss_sum / len(ds)


def validation_loss_and_grad(model: MLPModel, ds: Dataset) -> tuple[float, np.ndarray]:
    """Mean validation loss and its flat gradient over the whole set."""
    if len(ds) == 0:
        raise ConfigError("validation set is empty")
    batch = Batch(ds.images, ds.labels)
    cache = forward(model, batch)
    grads = backward_per_example(model, cache, batch)
    g = weighted_gradient(grads, np.full(len(ds), 1.0 / len(ds)))
    return float(cache.losses.mean()), g


def _lr_multiplier(schedule: list[tuple[int, float]], step: int) -> float:
    mult = 1.0
    for boundary, m in schedule:
        if step >= boundary:
            mult = m
    return mult


def _concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(
        np.concatenate([a.images, b.images]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.original_labels, b.original_labels]),
        a.label_map or b.label_map,
    )


def train(
    config: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    hyperval_ds: Dataset | None = None,
) -> TrainResult:
    """Run the configured strategy and return metrics plus the final model.

    The validation set must be provenance-clean. By default it is folded back
    into the training pool, so every strategy sees the same examples and
    meta_reweight gets no extra data, only the identity of the clean ones.
    """
    config.validate()
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if len(test_ds) == 0:
        raise ConfigError("test set is empty")
    if len(val_ds) and val_ds.flipped_mask.any():
        raise ConfigError("validation set contains corrupted labels")
    if config.strategy == "meta_reweight" and len(val_ds) == 0:
        raise ConfigError("meta_reweight needs a nonempty validation set")
    if config.early_stop_on_hyperval and (hyperval_ds is None or len(hyperval_ds) == 0):
        raise ConfigError("early_stop_on_hyperval needs a hyperval dataset")

    pool = train_ds
    if config.include_val_in_train and len(val_ds):
        pool = _concat(train_ds, val_ds)

    sets = [pool.labels]
    if len(val_ds):
        sets.append(val_ds.labels)
    sets.append(test_ds.labels)
    num_classes = int(max(s.max() for s in sets if s.size)) + 1
    if num_classes < 2:
        raise ConfigError("need at least two classes to train a classifier")

    rng = np.random.default_rng(config.seed)
    model = MLPModel.init(
        [pool.images.shape[1], *config.hidden_sizes, num_classes],
        activation=config.activation,
        rng=rng,
    )

    counts = np.bincount(pool.labels, minlength=num_classes)
    majority_class = int(np.argmax(counts))
    pool_flipped = pool.flipped_mask
    n = config.batch_size_train
    n_pool = len(pool)
    m_val = min(config.batch_size_val, len(val_ds)) if len(val_ds) else 0

    forward_examples = 0
    backward_examples = 0
    window_loss = 0.0
    window_steps = 0
    window_w_clean = 0.0
    window_n_clean = 0
    window_w_flipped = 0.0
    window_n_flipped = 0
    window_zero = 0
    window_total = 0
    weight_tail: collections.deque = collections.deque(maxlen=config.eval_every)

    records: list[MetricsRecord] = []
    best_hyper = float("inf")
    best_model = model
    t0 = time.perf_counter()

    for t in range(config.total_steps):
        alpha = config.learning_rate * _lr_multiplier(config.lr_schedule, t)

        if config.strategy == "resample":
            idx = resample_indices(pool.labels, n, rng)
        elif n_pool >= n:
            idx = rng.choice(n_pool, size=n, replace=False)
        else:
            idx = rng.choice(n_pool, size=n, replace=True)
        batch = Batch(pool.images[idx], pool.labels[idx])

        cache = forward(model, batch)
        grads = backward_per_example(model, cache, batch)
        forward_examples += len(batch)
        backward_examples += len(batch)

        if config.strategy in ("uniform", "resample"):
            w = np.full(n, 1.0 / n)
        elif config.strategy == "proportion":
            w = proportion_weights(batch.labels, counts)
        elif config.strategy == "random":
            w = random_weights(n, rng)
        elif config.strategy == "hard_mining":
            in_batch_minority = int((batch.labels != majority_class).sum())
            k = config.hard_mining_k if config.hard_mining_k is not None else in_batch_minority
            k = min(k, int((batch.labels == majority_class).sum()))
            sel = hard_mining_select(cache.losses, batch.labels, majority_class, k)
            w = np.zeros(n)
            if sel.size:
                w[sel] = 1.0 / sel.size
        else:  # meta_reweight
            if m_val >= len(val_ds):
                vidx = np.arange(len(val_ds))
            else:
                vidx = rng.choice(len(val_ds), size=m_val, replace=False)
            vbatch = Batch(val_ds.images[vidx], val_ds.labels[vidx])
            vcache = forward(model, vbatch)
            vgrads = backward_per_example(model, vcache, vbatch)
            forward_examples += len(vbatch)
            backward_examples += len(vbatch)
            w = rectify_normalize(meta_grad_closed_form(grads, vgrads))

        step_loss = float(w @ cache.losses)
        model = sgd_step(model, weighted_gradient(grads, w), alpha)

        flipped = pool_flipped[idx]
        window_loss += step_loss
        window_steps += 1
        window_w_clean += float(w[~flipped].sum())
        window_n_clean += int((~flipped).sum())
        window_w_flipped += float(w[flipped].sum())
        window_n_flipped += int(flipped.sum())
        window_zero += int((w == 0.0).sum())
        window_total += n
        weight_tail.append((t, w, flipped.copy()))

        if (t + 1) % config.eval_every == 0 or t + 1 == config.total_steps:
            if len(val_ds):
                val_loss, val_grad = validation_loss_and_grad(model, val_ds)
                grad_norm_sq = float(val_grad @ val_grad)
            else:
                val_loss, grad_norm_sq = float("nan"), float("nan")
            test_error, _ = evaluate(model, test_ds)
            hyper_err = float("nan")
            if hyperval_ds is not None and len(hyperval_ds):
                hyper_err, _ = evaluate(model, hyperval_ds)
                if config.early_stop_on_hyperval and hyper_err < best_hyper:
                    best_hyper = hyper_err
                    best_model = model
            records.append(
                MetricsRecord(
                    step=t + 1,
                    train_loss=window_loss / max(window_steps, 1),
                    val_loss=val_loss,
                    test_error=test_error,
                    grad_norm_sq=grad_norm_sq,
                    mean_w_clean=window_w_clean / window_n_clean if window_n_clean else float("nan"),
                    mean_w_flipped=(
                        window_w_flipped / window_n_flipped if window_n_flipped else float("nan")
                    ),
                    frac_zero_w=window_zero / window_total if window_total else float("nan"),
                    hyperval_error=hyper_err,
                )
            )
            window_loss = 0.0
            window_steps = 0
            window_w_clean = 0.0
            window_n_clean = 0
            window_w_flipped = 0.0
            window_n_flipped = 0
            window_zero = 0
            window_total = 0

    if config.early_stop_on_hyperval:
        model = best_model
        final_test_error, _ = evaluate(model, test_ds)
    else:
        final_test_error = records[-1].test_error

    steps_arr = np.concatenate([np.full(w.size, s) for s, w, _ in weight_tail])
    weights_arr = np.concatenate([w for _, w, _ in weight_tail])
    flipped_arr = np.concatenate([f for _, _, f in weight_tail])
    return TrainResult(
        records=records,
        model=model,
        final_test_error=final_test_error,
        steps=config.total_steps,
        forward_examples=forward_examples,
        backward_examples=backward_examples,
        wall_time=time.perf_counter() - t0,
        weight_log={"step": steps_arr, "weight": weights_arr, "flipped": flipped_arr},
    )
