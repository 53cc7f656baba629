#############################
#  RewardWin - Success Classifier
#
#  Small conv net that says how likely an image
#  shows the cube grabbed and lifted. Its
#  Success probability is the reward.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import constants as C
from . import nncore as nn
from . import simenv
from .dataset import CaptureSession, DatasetSplit
from .nncore import LayerSpec, NetworkParams
from .rewardwin_common import (BinaryReader, BinaryWriter, DataError, ShapeError, check_finite,
                               derive_seed, make_rng, read_bytes, write_atomically)

log = logging.getLogger(__name__)

Resolution = Tuple[int, int]

PREDICT_CHUNK = 256
SWEEP_GRID = ((5, 16), (5, 32), (5, 64), (10, 16), (10, 32), (10, 64))


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    network: NetworkParams
    resolution: Resolution    # (width, height)

    def __post_init__(self):
        if self.network.output_shape != (2,):
            raise ShapeError("classifier must end in two classes, got output %r" % (self.network.output_shape,))
        if self.network.input_shape != (1, self.resolution[1], self.resolution[0]):
            raise ShapeError("classifier input %r does not match resolution %dx%d"
                             % ((self.network.input_shape,) + tuple(self.resolution)))

    def same_as(self, other: "ClassifierParams") -> bool:
        return self.resolution == other.resolution and self.network.same_as(other.network)


@dataclass(frozen=True)
class TrainReport:
    train_loss: Tuple[float, ...]
    train_accuracy: Tuple[float, ...]
    validation_loss: Tuple[float, ...]
    validation_accuracy: Tuple[float, ...]
    best_epoch: int
    test_accuracy: float
    epochs: int
    batch_size: int
    seed: int

    def lines(self) -> List[str]:
        out = []
        for i in range(self.epochs):
            mark = " *" if i == self.best_epoch else ""
            out.append("epoch %2d  train loss %.4f acc %.4f  val loss %.4f acc %.4f%s"
                       % (i + 1, self.train_loss[i], self.train_accuracy[i],
                          self.validation_loss[i], self.validation_accuracy[i], mark))
        out.append("test accuracy %.4f (epochs=%d batch=%d seed=%d)"
                   % (self.test_accuracy, self.epochs, self.batch_size, self.seed))
        return out


def classifier_layers(resolution: Resolution) -> List[LayerSpec]:
    width, height = resolution
    h, w = height, width
    for _ in range(3):
        h, w = h // 2, w // 2
    if h < 1 or w < 1:
        raise ShapeError("resolution %dx%d is too small for three pooling stages" % (width, height))
    return [
        LayerSpec.conv2d(1, 16), LayerSpec.relu(), LayerSpec.maxpool2d(),
        LayerSpec.conv2d(16, 32), LayerSpec.relu(), LayerSpec.maxpool2d(),
        LayerSpec.conv2d(32, 64), LayerSpec.relu(), LayerSpec.maxpool2d(),
        LayerSpec.flatten(),
        LayerSpec.dense(64 * h * w, 128), LayerSpec.relu(),
        LayerSpec.dense(128, 2), LayerSpec.softmax(),
    ]


def build_classifier(resolution: Resolution = C.RESOLUTION, seed: int = 0,
                     zero_head: bool = False) -> ClassifierParams:
    resolution = (int(resolution[0]), int(resolution[1]))
    net = nn.build_network(classifier_layers(resolution), (1, resolution[1], resolution[0]), seed)
    if zero_head:
        # symmetric logits: every image scores exactly 0.5
        weights, biases = list(net.weights), list(net.biases)
        last = len(weights) - 2
        weights[last] = np.zeros_like(weights[last])
        biases[last] = np.zeros_like(biases[last])
        net = net.with_arrays(weights, biases)
    return ClassifierParams(net, resolution)


def _batch(images: np.ndarray, resolution: Resolution) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    width, height = resolution
    if x.shape[-2:] != (height, width):
        raise ShapeError("image is %dx%d, classifier expects %dx%d"
                         % (x.shape[-1], x.shape[-2], width, height))
    return x.reshape(-1, 1, height, width)


def class_probabilities(clf: ClassifierParams, images: np.ndarray) -> np.ndarray:
    x = _batch(images, clf.resolution)
    out = [nn.forward(clf.network, x[i:i + PREDICT_CHUNK])[0] for i in range(0, x.shape[0], PREDICT_CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def predict_success_batch(clf: ClassifierParams, images: np.ndarray) -> np.ndarray:
    return class_probabilities(clf, images)[:, C.LABEL_SUCCESS]


def predict_success(clf: ClassifierParams, image: np.ndarray) -> float:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError("expected one (height, width) image, got %r" % (image.shape,))
    return float(predict_success_batch(clf, image)[0])


def accuracy_from_probabilities(success_probs: np.ndarray, labels: np.ndarray) -> float:
    # Success only when strictly above one half; ties go to NonSuccess
    success_probs = np.asarray(success_probs, dtype=np.float64)
    labels = np.asarray(labels)
    if success_probs.size == 0:
        raise DataError("accuracy of an empty set")
    predicted = (success_probs > 0.5).astype(labels.dtype)
    return float(np.mean(predicted == labels))


def evaluate_accuracy(clf: ClassifierParams, session: CaptureSession) -> float:
    if len(session) == 0:
        raise DataError("session %d is empty" % session.session_id)
    return accuracy_from_probabilities(predict_success_batch(clf, session.images()), session.labels)


def _loss_and_accuracy(clf: ClassifierParams, images: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    probs = class_probabilities(clf, images)
    loss, _ = nn.softmax_cross_entropy(probs, labels)
    return loss, accuracy_from_probabilities(probs[:, C.LABEL_SUCCESS], labels)


def train_classifier(split: DatasetSplit, epochs: int = 10, batch_size: int = 32, seed: int = 0,
                     lr: float = 1e-3) -> Tuple[ClassifierParams, TrainReport]:
    """
    Minibatch Adam on softmax cross-entropy. The parameters of the epoch with
    the best validation accuracy are kept (earliest on ties); the test
    session is scored once, after that choice.
    """
    if epochs < 1 or batch_size < 1:
        raise DataError("epochs and batch_size must be >= 1, got %d/%d" % (epochs, batch_size))
    x_train, y_train = DatasetSplit.stack(split.train)
    x_val, y_val = DatasetSplit.stack(split.validation)
    x_test, y_test = DatasetSplit.stack(split.test)
    resolution = split.resolution

    clf = build_classifier(resolution, derive_seed(seed, "classifier"))
    state = nn.AdamState.create(clf.network, lr)
    rng = make_rng(seed, "shuffle")
    x_batches = x_train.reshape(-1, 1, resolution[1], resolution[0])

    history = {"train_loss": [], "train_accuracy": [], "validation_loss": [], "validation_accuracy": []}
    best, best_epoch, best_acc = clf, 0, -1.0
    for epoch in range(epochs):
        order = rng.permutation(x_batches.shape[0])
        net = clf.network
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            probs, tape = nn.forward(net, x_batches[idx])
            loss, grad = nn.softmax_cross_entropy(probs, y_train[idx])
            check_finite("classifier loss (epoch %d)" % (epoch + 1), [np.array(loss)])
            grads = nn.backward(net, tape, grad, logits_gradient=True)
            net, state = nn.adam_step(net, grads, state)
        clf = ClassifierParams(net, resolution)

        train_loss, train_acc = _loss_and_accuracy(clf, x_train, y_train)
        val_loss, val_acc = _loss_and_accuracy(clf, x_val, y_val)
        for key, value in zip(history, (train_loss, train_acc, val_loss, val_acc)):
            history[key].append(value)
        log.info("epoch %d/%d: train loss %.4f acc %.4f, val loss %.4f acc %.4f",
                 epoch + 1, epochs, train_loss, train_acc, val_loss, val_acc)
        if val_acc > best_acc:
            best, best_epoch, best_acc = clf, epoch, val_acc

    test_acc = accuracy_from_probabilities(predict_success_batch(best, x_test), y_test)
    log.info("kept epoch %d (val acc %.4f), test accuracy %.4f", best_epoch + 1, best_acc, test_acc)
    report = TrainReport(tuple(history["train_loss"]), tuple(history["train_accuracy"]),
                         tuple(history["validation_loss"]), tuple(history["validation_accuracy"]),
                         best_epoch, test_acc, epochs, batch_size, seed)
    return best, report


def _sweep_job(args):
    split, epochs, batch_size, seed = args
    return train_classifier(split, epochs, batch_size, seed)


def sweep_classifiers(split: DatasetSplit, grid: Sequence[Tuple[int, int]] = SWEEP_GRID, seed: int = 0,
                      workers: int = 1) -> Tuple[ClassifierParams, TrainReport, List[TrainReport]]:
    """Train one classifier per (epochs, batch_size) and keep the best by validation accuracy."""
    jobs = [(split, epochs, batch, seed) for epochs, batch in grid]
    if workers <= 1:
        results = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    reports = [r for _, r in results]
    pick = max(range(len(results)), key=lambda i: (reports[i].validation_accuracy[reports[i].best_epoch], -i))
    log.info("sweep: kept epochs=%d batch=%d", reports[pick].epochs, reports[pick].batch_size)
    return results[pick][0], reports[pick], reports


def reward_profile(clf: ClassifierParams, config: simenv.EnvConfig, episodes: int = 100,
                   seed: int = 0) -> Tuple[float, float]:
    """Mean predicted reward on reset frames and on scripted-expert final frames."""
    config = config.with_resolution(*clf.resolution)
    first, last = [], []
    for i in range(episodes):
        states = simenv.expert_rollout(config, derive_seed(seed, "profile", i))
        first.append(simenv.render(states[0], config))
        last.append(simenv.render(states[-1], config))
    return (float(np.mean(predict_success_batch(clf, np.stack(first)))),
            float(np.mean(predict_success_batch(clf, np.stack(last)))))


def classifier_to_bytes(clf: ClassifierParams) -> bytes:
    w = BinaryWriter().raw(C.CLASSIFIER_MAGIC).pack("HH", *clf.resolution)
    return nn.write_network(w, clf.network).getvalue()


def classifier_from_bytes(data: bytes, what: str = "classifier") -> ClassifierParams:
    r = BinaryReader(data, what)
    r.expect_magic(C.CLASSIFIER_MAGIC)
    width, height = r.unpack("HH")
    net = nn.read_network(r, (1, height, width))
    r.expect_end()
    return ClassifierParams(net, (width, height))


def save_classifier(path: Union[str, Path], clf: ClassifierParams) -> Path:
    return write_atomically(path, classifier_to_bytes(clf))


def load_classifier(path: Union[str, Path]) -> ClassifierParams:
    return classifier_from_bytes(read_bytes(path), str(path))
