"""Training loop, batched inference and evaluation."""
from __future__ import annotations

import logging

import numpy as np

from .autodiff import (AdamState, TrainConfig, adam_step, backward_cached, cross_entropy_loss, forward_cached,
                       update_running_stats)
from .data import AugmentationConfig, augment, normalize
from .errors import ModeError
from .metrics import class_metrics, confusion_matrix, metrics_table, overall_accuracy, roc_curve
from .model import CLASS_NAMES, TRAIN, block_forward_train, init_model, model_forward
from .tensor import conv2d, softmax

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


def train_step(model, xb, yb, state: AdamState):
    """One Adam step on a batch with batch-statistics batch-norm; returns (loss, logits)."""
    logits, caches = forward_cached(model, xb, batch_stats=True)
    loss, dlogits = cross_entropy_loss(logits, yb)
    grads, _ = backward_cached(model, dlogits, caches)
    update_running_stats(model, caches, BN_MOMENTUM)
    adam_step(model.parameters(), grads, state)
    return loss, logits


def fit(model, images, labels, config: TrainConfig, aug: AugmentationConfig | None = None, eval_set=None,
        recalibrate=True):
    """Train ``model`` in place on [0, 1] images of shape (N, H, W).

    Returns per-epoch history dicts (epoch, loss, train_accuracy and, with
    ``eval_set=(images, labels)``, test_accuracy). With ``recalibrate`` the
    batch-norm running statistics are recomputed on the un-augmented training
    images after every epoch; training itself only uses batch statistics, so
    this changes inference but not the optimisation path.
    """
    if model.mode != TRAIN:
        raise ModeError("only train-mode models can be trained")
    aug = aug or AugmentationConfig()
    rng = np.random.default_rng((config.seed, 1))
    state = AdamState(lr=config.learning_rate)
    n = len(images)
    dtype = model.dtype
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.stack([augment(images[i], aug, rng) for i in idx])[:, None].astype(dtype)
            yb = labels[idx]
            loss, logits = train_step(model, xb, yb, state)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        if recalibrate:
            recalibrate_bn(model, images, aug)
        row = {"epoch": epoch, "loss": total_loss / n, "train_accuracy": correct / n}
        if eval_set is not None:
            probs = predict_proba(model, eval_set[0], aug)
            row["test_accuracy"] = float((probs.argmax(axis=1) == eval_set[1]).mean())
        log.info("epoch %d %s", epoch, row)
        history.append(row)
    return history


def recalibrate_bn(model, images, aug: AugmentationConfig | None = None, batch_size=64):
    """Replace every running mean/variance with the exact population statistics
    of the un-augmented ``images``, block by block."""
    if model.mode != TRAIN:
        raise ModeError("only train-mode models carry batch-norm statistics")
    aug = aug or AugmentationConfig()
    h = normalize(np.asarray(images, dtype=np.float64), aug)[:, None].astype(model.dtype)
    for block in model.blocks:
        branches = [(block.bn3, lambda x: conv2d(x, block.conv3x3_w, stride=block.stride, padding=1)),
                    (block.bn1, lambda x: conv2d(x, block.conv1x1_w, stride=block.stride, padding=0))]
        if block.bn_id is not None:
            branches.append((block.bn_id, lambda x: x))
        for bn, branch in branches:
            s = np.zeros(bn.channels)
            sq = np.zeros(bn.channels)
            count = 0
            for start in range(0, len(h), batch_size):
                y = branch(h[start:start + batch_size]).astype(np.float64)
                s += y.sum(axis=(0, 2, 3))
                sq += (y * y).sum(axis=(0, 2, 3))
                count += y.shape[0] * y.shape[2] * y.shape[3]
            mean = s / count
            var = np.maximum(sq / count - mean * mean, 0.0) * (count / max(count - 1, 1))
            bn.running_mean[...] = mean
            bn.running_var[...] = var
        h = np.concatenate([block_forward_train(h[i:i + batch_size], block) for i in range(0, len(h), batch_size)])
    return model


def train_new(images, labels, config: TrainConfig, aug=None, eval_set=None, recalibrate=True, **model_kw):
    model = init_model(seed=config.seed, **model_kw)
    return model, fit(model, images, labels, config, aug, eval_set, recalibrate)


def predict_proba(model, images, aug: AugmentationConfig | None = None, batch_size=64):
    """Class probabilities for [0, 1] images (N, H, W) already at the model's input size."""
    aug = aug or AugmentationConfig()
    out = []
    for start in range(0, len(images), batch_size):
        xb = normalize(np.asarray(images[start:start + batch_size], dtype=np.float64), aug)
        out.append(softmax(model_forward(model, xb[:, None].astype(model.dtype))).astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model, images, labels, aug=None):
    """Report document: overall accuracy, confusion matrix, per-class metrics and AUCs.

    ROC curves are returned alongside, keyed by class name.
    """
    probs = predict_proba(model, images, aug)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred)
    rocs = {}
    for i, name in enumerate(CLASS_NAMES):
        if (labels == i).any() and (labels != i).any():
            rocs[name] = roc_curve(probs[:, i], labels, i)
    aucs = [rocs[name].auc if name in rocs else None for name in CLASS_NAMES]
    report = {
        "overall_accuracy": overall_accuracy(cm),
        "num_samples": int(len(labels)),
        "confusion_matrix": cm.tolist(),
        "classes": metrics_table(cm, aucs),
    }
    return report, rocs, [class_metrics(cm, i) for i in range(len(CLASS_NAMES))]
