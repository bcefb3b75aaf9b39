"""Training loop, cross-validation harnesses and evaluation metrics."""

from __future__ import annotations

import dataclasses
import time
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .datapipe import apply_znormalize, znormalize
from .errors import ContractError
from .model import TsfModel, count_flops, mixup, tsf_forward
from .numerics import Tensor, adam_step, backward, log_softmax, zero_grad


@dataclasses.dataclass
class FoldResult:
    fold_id: str
    class_names: list
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    weighted_f1: float
    confusion: np.ndarray
    curve: list
    flops: float
    train_seconds: float = 0.0


# ----------------------------------------------------------------------
# metrics

def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    """Counts[i, j] = windows of true class i predicted as class j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError(
            f"label arrays disagree: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ContractError("cannot score an empty label set")
    bad = (y_true < 0) | (y_true >= classes) | (y_pred < 0) | \
        (y_pred >= classes)
    if np.any(bad):
        raise ContractError("labels outside [0, classes)")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def per_class_metrics(cm: np.ndarray):
    """(precision, recall, f1, support); every 0/0 resolves to 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp),
                          where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp),
                       where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom,
                   out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, support.astype(np.int64)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean F1 over the classes present in the ground truth."""
    _, _, f1, support = per_class_metrics(cm)
    present = support > 0
    if not np.any(present):
        raise ContractError("no ground-truth classes present")
    return float(f1[present].mean())


def weighted_f1(cm: np.ndarray) -> float:
    _, _, f1, support = per_class_metrics(cm)
    total = support.sum()
    if total == 0:
        raise ContractError("no ground-truth classes present")
    return float((f1 * support).sum() / total)


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ContractError("cannot score an empty label set")
    return float((y_true == y_pred).mean())


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, soft_targets: Tensor) -> Tensor:
    """Mean cross-entropy against soft target rows."""
    return (soft_targets * log_softmax(logits, axis=1)) \
        .sum(axis=1).mean() * -1.0


# ----------------------------------------------------------------------
# schedules and data plumbing

def learning_rate(config, epoch: int) -> float:
    return config.lr0 * 0.5 ** (epoch // config.lr_half_every)


def temperature(config, epoch: int) -> float:
    span = max(config.epochs - 1, 1)
    frac = min(epoch, span) / span
    return config.tau_start + (config.tau_end - config.tau_start) * frac


def stack_windows(windows):
    """[n, P, K, 3, L] array plus the int label vector."""
    if not windows:
        raise ContractError("empty window list")
    x = np.stack([w.data for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


def stratified_split(windows, fraction: float, rng):
    """Per-class carve-out of about `fraction` of the windows.

    Whole recordings move together: windows sharing (subject, trial)
    never straddle the split, since overlapping neighbors would leak the
    recording's texture and make the carved half useless as a check on
    generalization. Classes with a single recording keep it in the big
    half. Returns (rest, carved).
    """
    if not (0.0 <= fraction < 1.0):
        raise ContractError(f"fraction must be in [0, 1), got {fraction}")
    by_class = {}
    for i, w in enumerate(windows):
        by_class.setdefault(w.label, {}).setdefault(
            (w.subject_id, w.trial_id), []).append(i)
    carved = set()
    for groups in by_class.values():
        keys = sorted(groups)
        if len(keys) < 2 or fraction == 0.0:
            continue
        total = sum(len(groups[k]) for k in keys)
        want = max(1, int(round(fraction * total)))
        taken = 0
        for pos in rng.permutation(len(keys))[:len(keys) - 1]:
            if taken >= want:
                break
            indices = groups[keys[pos]]
            carved.update(indices)
            taken += len(indices)
    rest = [w for i, w in enumerate(windows) if i not in carved]
    small = [w for i, w in enumerate(windows) if i in carved]
    return rest, small


def predict(model: TsfModel, x: np.ndarray, batch_size: int = 256):
    """Inference labels + raw logits, batched to bound peak memory."""
    model.set_training(False)
    rng = np.random.default_rng(0)     # never drawn from at inference
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        logits = tsf_forward(x[start:start + batch_size], model, rng)
        chunks.append(logits.data)
    logits = np.concatenate(chunks, axis=0)
    return logits.argmax(axis=1), logits


# ----------------------------------------------------------------------
# training

def train_model(train_set, val_set, config, quiet: bool = True):
    """Fit on train_set, checkpoint on best validation accuracy.

    Normalization statistics come from the training split only and are
    returned for reuse on any held-out data. Returns
    (model, stats, curve).
    """
    if not train_set:
        raise ContractError("training split is empty")
    config.validate()
    train_norm, stats = znormalize(train_set)
    if val_set:
        val_norm = apply_znormalize(val_set, stats)
    else:
        warnings.warn("no validation windows; checkpointing on train set",
                      stacklevel=2)
        val_norm = train_norm

    seqs = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, route_rng, order_rng, mix_rng = \
        (np.random.default_rng(s) for s in seqs)

    model = TsfModel(config, init_rng)
    params = model.parameters()
    x, y = stack_windows(train_norm)
    xv, yv = stack_windows(val_norm)
    y_hot = one_hot(y, config.classes)

    curve = []
    best_acc = -1.0
    best_params = [p.data.copy() for p in params]
    n = x.shape[0]

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        model.set_temperature(temperature(config, epoch))
        model.set_training(True)
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            bx, by = x[idx], y_hot[idx]
            if config.mixup_alpha > 0 and idx.size > 1:
                bx, by = mixup(bx, by, config.mixup_alpha, mix_rng)
            logits = tsf_forward(bx, model, route_rng)
            loss = cross_entropy(logits, Tensor(by))
            zero_grad(params)
            backward(loss)
            adam_step(params, lr)
            losses.append(loss.item())

        preds, _ = predict(model, xv)
        val_acc = accuracy(yv, preds)
        curve.append({"epoch": epoch, "lr": lr,
                      "tau": temperature(config, epoch),
                      "train_loss": float(np.mean(losses)),
                      "val_accuracy": val_acc})
        if not quiet:
            print(f"epoch {epoch:3d}  loss {np.mean(losses):.4f}  "
                  f"val_acc {val_acc:.4f}")
        # >= keeps the latest best: later epochs run colder temperatures,
        # closer to inference routing
        if val_acc >= best_acc:
            best_acc = val_acc
            best_params = [p.data.copy() for p in params]

    for p, data in zip(params, best_params):
        p.data = data
    model.set_training(False)
    return model, stats, curve


def evaluate(model: TsfModel, windows, stats=None, class_names=None,
             fold_id: str = "0", curve=None,
             train_seconds: float = 0.0) -> FoldResult:
    """Score a window set; stats (if given) must be the training stats."""
    if not windows:
        raise ContractError("evaluation set is empty")
    if stats is not None:
        windows = apply_znormalize(windows, stats)
    x, y = stack_windows(windows)
    preds, _ = predict(model, x)
    classes = model.config.classes
    cm = confusion_matrix(y, preds, classes)
    precision, recall, f1, support = per_class_metrics(cm)
    if class_names is None:
        class_names = [f"class{i}" for i in range(classes)]
    return FoldResult(
        fold_id=str(fold_id), class_names=list(class_names),
        precision=precision, recall=recall, f1=f1, support=support,
        macro_f1=macro_f1(cm), weighted_f1=weighted_f1(cm),
        confusion=cm, curve=curve or [], flops=count_flops(model),
        train_seconds=train_seconds)


def run_fold(train_windows, test_windows, config, class_names,
             fold_id: str):
    """Train on one fold (with its own stratified validation carve)."""
    val_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0xF01D]))
    train_part, val_part = stratified_split(
        train_windows, config.val_fraction, val_rng)
    started = time.perf_counter()
    model, stats, curve = train_model(train_part, val_part, config)
    elapsed = time.perf_counter() - started
    result = evaluate(model, test_windows, stats, class_names,
                      fold_id=fold_id, curve=curve, train_seconds=elapsed)
    return result, model, stats


def _aggregate(per_run_results, runs):
    run_macro = [float(np.mean([r.macro_f1 for r in fold_set]))
                 for fold_set in per_run_results]
    run_weighted = [float(np.mean([r.weighted_f1 for r in fold_set]))
                    for fold_set in per_run_results]
    return {
        "runs": runs,
        "macro_mean": float(np.mean(run_macro)),
        "macro_std": float(np.std(run_macro)),
        "weighted_mean": float(np.mean(run_weighted)),
        "weighted_std": float(np.std(run_weighted)),
        "per_run_macro": run_macro,
        "per_run_weighted": run_weighted,
    }


def loso_cv(windows, config, class_names, runs: int = 3, workers: int = 1):
    """Leave-one-subject-out cross validation, repeated `runs` times.

    Each repetition derives its seed from the base config. With a single
    subject no subject-wise fold exists; a stratified 80/20 split stands
    in, with a warning. Returns (fold results, aggregate dict).
    """
    if not windows:
        raise ContractError("empty dataset")
    if runs < 1:
        raise ContractError("runs must be >= 1")
    subjects = sorted({w.subject_id for w in windows})

    jobs = []
    for r in range(runs):
        run_config = dataclasses.replace(config, seed=config.seed + r)
        if len(subjects) < 2:
            split_rng = np.random.default_rng(
                np.random.SeedSequence([run_config.seed, 0x51]))
            train_part, test_part = stratified_split(windows, 0.2, split_rng)
            if not test_part:
                # one recording per class: nothing carvable at recording
                # granularity, carve single windows instead
                warnings.warn("holdout falls back to window granularity: "
                              "no class has a second recording",
                              stacklevel=2)
                by_class = {}
                for w in windows:
                    by_class.setdefault(w.label, []).append(w)
                train_part, test_part = [], []
                for group in by_class.values():
                    split_rng.shuffle(group)
                    take = max(1, int(round(0.2 * len(group))))
                    take = min(take, len(group) - 1) if len(group) > 1 else 0
                    test_part.extend(group[:take])
                    train_part.extend(group[take:])
            jobs.append((train_part, test_part, run_config,
                         f"run{r}-holdout"))
        else:
            for subject in subjects:
                test_part = [w for w in windows if w.subject_id == subject]
                train_part = [w for w in windows if w.subject_id != subject]
                jobs.append((train_part, test_part, run_config,
                             f"run{r}-{subject}"))
    if len(subjects) < 2:
        warnings.warn("single subject: LOSO degraded to a stratified "
                      "80/20 holdout", stacklevel=2)

    def work(job):
        train_part, test_part, run_config, fold_id = job
        result, _, _ = run_fold(train_part, test_part, run_config,
                                class_names, fold_id)
        return result

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    folds_per_run = len(results) // runs
    per_run = [results[r * folds_per_run:(r + 1) * folds_per_run]
               for r in range(runs)]
    return results, _aggregate(per_run, runs)


def k_fold_cv(windows, config, class_names, k: int = 10,
              workers: int = 1):
    """Stratified k-fold cross validation; one run, k folds."""
    if k < 2:
        raise ContractError("k must be >= 2")
    if len(windows) < k:
        raise ContractError(f"{len(windows)} windows cannot fill {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
    assignment = np.empty(len(windows), dtype=np.int64)
    by_class = {}
    for i, w in enumerate(windows):
        by_class.setdefault(w.label, []).append(i)
    cursor = 0
    for indices in by_class.values():
        shuffled = rng.permutation(len(indices))
        for j, pos in enumerate(shuffled):
            assignment[indices[pos]] = (cursor + j) % k
        cursor += len(indices)

    jobs = []
    for fold in range(k):
        test_part = [w for i, w in enumerate(windows)
                     if assignment[i] == fold]
        train_part = [w for i, w in enumerate(windows)
                      if assignment[i] != fold]
        if not test_part:
            raise ContractError(f"fold {fold} is empty; lower k")
        jobs.append((train_part, test_part, config, f"fold{fold}"))

    def work(job):
        train_part, test_part, fold_config, fold_id = job
        result, _, _ = run_fold(train_part, test_part, fold_config,
                                class_names, fold_id)
        return result

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]
    return results, _aggregate([results], runs=1)
