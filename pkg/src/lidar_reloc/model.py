"""Three-headed range-image network: place descriptor, yaw regressor, classifier.

The shared trunk is three convolution + max-pool stages and one dense layer.
Two linear heads produce the 64-d place vector ``q`` and orientation vector
``w``. A two-layer MLP maps ``(w_a, w_b)`` to ``(cos, sin)`` of their yaw
offset, and another maps ``q`` to scores over straight / junction / turn.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .descriptors import DESCRIPTOR_DIM, DescriptorPair
from .geometry import rotation_angle, transform_cloud, wrap_angle, yaw_rotation
from .projection import ProjectionParams, RangeImage, project
from .tensor import (Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential, ShapeError, Tanh,
                     adam_step, load_checkpoint, save_checkpoint, softmax, zero_grad)

log = logging.getLogger(__name__)

CLASS_NAMES = ("straight", "junction", "turn")
N_CLASSES = 3
SIMILAR_RADIUS = 3.0
HARD_NEGATIVE_RADIUS = 6.0
HELDOUT_TRIPLETS = 128


# ---------------------------------------------------------------- losses

def triplet_loss(q_a, q_s, q_d, margin: float) -> float:
    """``max(0, |q_a - q_s|^2 - |q_a - q_d|^2 + margin)``, averaged over rows."""
    q_a, q_s, q_d = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (q_a, q_s, q_d))
    d_s = np.sum((q_a - q_s) ** 2, axis=1)
    d_d = np.sum((q_a - q_d) ** 2, axis=1)
    return float(np.mean(triplet_loss_from_distances(d_s, d_d, margin)))


def triplet_loss_from_distances(d_s, d_d, margin: float):
    if margin <= 0:
        raise ValueError("margin must be > 0")
    return np.maximum(0.0, np.asarray(d_s) - np.asarray(d_d) + margin)


def triplet_loss_grad(q_a, q_s, q_d, margin: float):
    """Gradients of the batch-mean triplet loss w.r.t. each input."""
    n = len(q_a)
    d_s = np.sum((q_a - q_s) ** 2, axis=1)
    d_d = np.sum((q_a - q_d) ** 2, axis=1)
    active = ((d_s - d_d + margin) > 0)[:, None] / n
    g_a = active * 2 * ((q_a - q_s) - (q_a - q_d))
    g_s = active * -2 * (q_a - q_s)
    g_d = active * 2 * (q_a - q_d)
    return g_a, g_s, g_d


def orientation_target(dtheta):
    dtheta = np.asarray(dtheta, dtype=float)
    return np.stack([np.cos(dtheta), np.sin(dtheta)], axis=-1)


def orientation_loss(y_yaw, dtheta) -> float:
    """``0.5 * ((y0 - cos d)^2 + (y1 - sin d)^2)``, averaged over rows."""
    y = np.atleast_2d(np.asarray(y_yaw, dtype=float))
    t = np.atleast_2d(orientation_target(dtheta))
    return float(np.mean(0.5 * np.sum((y - t) ** 2, axis=1)))


def orientation_loss_grad(y_yaw, dtheta):
    y = np.atleast_2d(y_yaw)
    return (y - np.atleast_2d(orientation_target(dtheta))) / len(y)


def hinge_loss(scores, label) -> float:
    """Multiclass hinge: sum over wrong classes of ``max(0, s_j - s_l + 1)``."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    lab = np.atleast_1d(label)
    if np.any((lab < 0) | (lab >= s.shape[1])):
        raise ValueError("label out of range")
    return float(np.mean(_hinge_terms(s, lab).sum(axis=1)))


def _hinge_terms(s, lab):
    rows = np.arange(len(s))
    marg = np.maximum(0.0, s - s[rows, lab][:, None] + 1.0)
    marg[rows, lab] = 0.0
    return marg


def hinge_loss_grad(scores, label):
    s = np.atleast_2d(scores)
    lab = np.atleast_1d(label)
    rows = np.arange(len(s))
    viol = (_hinge_terms(s, lab) > 0).astype(float)
    g = viol.copy()
    g[rows, lab] = -viol.sum(axis=1)
    return g / len(s)


def smooth_labels(onehot, a: float):
    """``labels * (1 - a) + a / N`` along the last axis."""
    if not 0.0 <= a < 1.0:
        raise ValueError("smoothing factor must lie in [0, 1)")
    onehot = np.asarray(onehot, dtype=float)
    return onehot * (1.0 - a) + a / onehot.shape[-1]


def cross_entropy(scores, target) -> float:
    """Softmax cross-entropy against a (possibly smoothed) target distribution."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    t = np.atleast_2d(np.asarray(target, dtype=float))
    z = s - s.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return float(np.mean(-np.sum(t * logp, axis=1)))


def cross_entropy_grad(scores, target):
    s = np.atleast_2d(scores)
    return (softmax(s) - np.atleast_2d(target)) / len(s)


def combined_loss(l_pr: float, l_theta: float, l_c: float) -> float:
    return l_pr + l_theta + l_c


# ---------------------------------------------------------------- network

class DescriptorNet:
    def __init__(self, height: int = 16, width: int = 360, hidden: int = 256, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.height, self.width, self.hidden = height, width, hidden
        self.trunk = Sequential(
            Conv2D(1, 64, 5, rng, input_grad=False), MaxPool2D(), ReLU(),
            Conv2D(64, 32, 3, rng), MaxPool2D(), ReLU(),
            Conv2D(32, 32, 3, rng), MaxPool2D(), ReLU(),
            Flatten(),
        )
        h, w = height, width
        for _ in range(3):
            h, w = (h + 1) // 2, (w + 1) // 2
        self.trunk.layers.extend([Dense(32 * h * w, hidden, rng), ReLU()])
        self.q_head = Dense(hidden, DESCRIPTOR_DIM, rng, gain=1.0)
        self.w_head = Dense(hidden, DESCRIPTOR_DIM, rng, gain=1.0)
        self.orientation = Sequential(Dense(2 * DESCRIPTOR_DIM, 64, rng), ReLU(),
                                      Dense(64, 2, rng, gain=1.0), Tanh())
        self.classifier = Sequential(Dense(DESCRIPTOR_DIM, 32, rng), ReLU(),
                                     Dense(32, N_CLASSES, rng, gain=1.0))

    # parameters -------------------------------------------------------
    def modules(self) -> dict:
        return {"trunk": self.trunk, "q_head": self.q_head, "w_head": self.w_head,
                "orientation": self.orientation, "classifier": self.classifier}

    def named_params(self) -> dict:
        out = {}
        for mname, mod in self.modules().items():
            for pname, p in mod.params().items():
                out[f"{mname}.{pname}"] = p
        return out

    def params_of(self, *names):
        return [p for m in names for p in self.modules()[m].params().values()]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_params().items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(tensors) != set(params):
            raise ValueError("checkpoint tensors do not match the network")
        for k, p in params.items():
            if tensors[k].shape != p.value.shape:
                raise ShapeError(f"{k}: checkpoint {tensors[k].shape} vs network {p.value.shape}")
            p.value[...] = tensors[k]

    def save(self, path) -> None:
        save_checkpoint(path, self.state(),
                        {"height": self.height, "width": self.width, "hidden": self.hidden})

    @classmethod
    def load(cls, path) -> DescriptorNet:
        tensors, meta = load_checkpoint(path)
        net = cls(meta["height"], meta["width"], meta["hidden"])
        net.load_state(tensors)
        return net

    # forward passes ---------------------------------------------------
    def _as_batch(self, imgs) -> np.ndarray:
        x = np.asarray(imgs, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.height, self.width):
            raise ShapeError(f"image shape {x.shape[1:]} does not match network "
                             f"{(self.height, self.width)}")
        return x[..., None]

    def embed(self, imgs):
        """``(q, w)`` for a stack of ``(H, W)`` images."""
        h = self.trunk.forward(self._as_batch(imgs))
        return self.q_head.forward(h), self.w_head.forward(h)

    def yaw_output(self, w_a, w_b) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(w_a), np.atleast_2d(w_b)], axis=1)
        return self.orientation.forward(x)

    def class_scores(self, q) -> np.ndarray:
        return self.classifier.forward(np.atleast_2d(q))


def forward_descriptor(img: RangeImage, net: DescriptorNet) -> DescriptorPair:
    q, w = net.embed(img.pixels)
    return DescriptorPair(q[0], w[0])


def decode_yaw(y) -> float:
    return float(np.arctan2(y[1], y[0]))


def estimate_yaw(w_a, w_b, net: DescriptorNet) -> float:
    """Yaw rotating the scene of ``w_a`` onto ``w_b``, in (-pi, pi]."""
    return wrap_angle(decode_yaw(net.yaw_output(w_a, w_b)[0]))


def classify(q, net: DescriptorNet) -> np.ndarray:
    return softmax(net.class_scores(q))[0]


class LearnedBackend:
    name = "learned"
    can_classify = True

    def __init__(self, net: DescriptorNet):
        self.net = net

    def describe(self, img: RangeImage) -> DescriptorPair:
        return forward_descriptor(img, self.net)

    def estimate_yaw(self, w_a, w_b) -> float:
        return estimate_yaw(w_a, w_b, self.net)

    def classify(self, q) -> np.ndarray:
        return classify(q, self.net)


# ---------------------------------------------------------------- sampling

class SamplingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: RangeImage
    similar: RangeImage
    dissimilar: RangeImage
    yaw_gt: float
    label: int


@dataclass(frozen=True)
class TripletIndices:
    anchor: np.ndarray
    similar: np.ndarray
    dissimilar: np.ndarray
    yaw_anchor: np.ndarray
    yaw_similar: np.ndarray
    yaw_dissimilar: np.ndarray


def _pairwise(P):
    return np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)


def sample_triplet_indices(positions, labels, stage: str, rng: np.random.Generator, n: int,
                           balanced: bool = False) -> TripletIndices:
    """Draw ``n`` anchor / similar / dissimilar index triples.

    Similar: within 3 m of the anchor. Dissimilar: at least 3 m away in the
    early stage, between 3 and 6 m in the late (hard negative) stage. With
    ``balanced`` the anchor class is drawn uniformly first.
    """
    if stage not in ("early", "late"):
        raise ValueError("stage must be 'early' or 'late'")
    P = np.asarray(positions, dtype=float)
    D = _pairwise(P)
    np.fill_diagonal(D, np.inf)
    sim = D <= SIMILAR_RADIUS
    np.fill_diagonal(D, 0.0)
    if stage == "early":
        dis = D >= SIMILAR_RADIUS
    else:
        dis = (D >= SIMILAR_RADIUS) & (D <= HARD_NEGATIVE_RADIUS)
    has_sim = sim.any(axis=1)
    has_dis = dis.any(axis=1)
    if not has_sim.any():
        raise SamplingError(f"no similar pair within {SIMILAR_RADIUS} m exists")
    if not has_dis.any():
        rule = (f">= {SIMILAR_RADIUS} m" if stage == "early"
                else f"within [{SIMILAR_RADIUS}, {HARD_NEGATIVE_RADIUS}] m")
        raise SamplingError(f"no dissimilar sample {rule} exists")
    ok = np.flatnonzero(has_sim & has_dis)
    if len(ok) == 0:
        raise SamplingError("no anchor has both a similar and a dissimilar partner")
    labels = np.asarray(labels)
    if balanced:
        classes = [c for c in range(N_CLASSES) if np.any(labels[ok] == c)]
        pools = [ok[labels[ok] == c] for c in classes]
        if len(classes) < N_CLASSES:
            log.warning("balanced sampling: only classes %s present", classes)
    a = np.empty(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    d = np.empty(n, dtype=np.int64)
    for i in range(n):
        if balanced:
            pool = pools[rng.integers(len(pools))]
            a[i] = pool[rng.integers(len(pool))]
        else:
            a[i] = ok[rng.integers(len(ok))]
        cand = np.flatnonzero(sim[a[i]])
        s[i] = cand[rng.integers(len(cand))]
        cand = np.flatnonzero(dis[a[i]])
        d[i] = cand[rng.integers(len(cand))]
    yaws = rng.uniform(-np.pi, np.pi, size=(3, n))
    return TripletIndices(a, s, d, yaws[0], yaws[1], yaws[2])


def relative_yaw(pose_a, pose_b, yaw_a: float, yaw_b: float) -> float:
    """Yaw taking the augmented cloud of ``a`` onto the augmented cloud of ``b``.

    Each cloud was rotated by its own augmentation yaw about the sensor
    origin; the true heading difference between the two poses is included.
    """
    return wrap_angle(yaw_b - yaw_a + pose_a.yaw - pose_b.yaw)


def _augmented_image(sample, yaw, params: ProjectionParams) -> RangeImage:
    return project(transform_cloud(sample.cloud, yaw_rotation(yaw)), params)


def sample_triplets(dataset, stage: str, rng: np.random.Generator, params: ProjectionParams,
                    batch_size: int = 16, balanced: bool = False) -> list[Triplet]:
    """Projected, yaw-augmented triplets from a labeled dataset.

    ``dataset`` items need ``cloud``, ``pose`` and ``label`` attributes.
    """
    P = np.array([s.pose.translation for s in dataset])
    idx = sample_triplet_indices(P, [s.label for s in dataset], stage, rng, batch_size, balanced)
    out = []
    for i in range(batch_size):
        A, S, D = dataset[idx.anchor[i]], dataset[idx.similar[i]], dataset[idx.dissimilar[i]]
        out.append(Triplet(
            _augmented_image(A, idx.yaw_anchor[i], params),
            _augmented_image(S, idx.yaw_similar[i], params),
            _augmented_image(D, idx.yaw_dissimilar[i], params),
            relative_yaw(A.pose, S.pose, idx.yaw_anchor[i], idx.yaw_similar[i]),
            A.label,
        ))
    return out


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


def _batch_arrays(triplets):
    imgs = np.stack([t.anchor.pixels for t in triplets] + [t.similar.pixels for t in triplets]
                    + [t.dissimilar.pixels for t in triplets])
    return imgs, np.array([t.yaw_gt for t in triplets]), np.array([t.label for t in triplets])


def joint_backward(net: DescriptorNet, triplets, margin: float, use_classifier: bool,
                   smoothing: float) -> tuple[dict, list[str]]:
    """Forward and backward of ``L_pr + L_theta (+ L_c)`` on a batch.

    Gradients are accumulated into the parameters; returns the loss parts
    and the names of the modules that received gradients.
    """
    imgs, yaw_gt, labels = _batch_arrays(triplets)
    B = len(triplets)
    h = net.trunk.forward(imgs[..., None])
    q = net.q_head.forward(h)
    w = net.w_head.forward(h)
    qa, qs, qd = q[:B], q[B:2 * B], q[2 * B:]
    l_pr = triplet_loss(qa, qs, qd, margin)
    ga, gs, gd = triplet_loss_grad(qa, qs, qd, margin)
    y = net.yaw_output(w[:B], w[B:2 * B])
    l_th = orientation_loss(y, yaw_gt)
    g_in = net.orientation.backward(orientation_loss_grad(y, yaw_gt))
    gw = np.zeros_like(w)
    gw[:B], gw[B:2 * B] = g_in[:, :DESCRIPTOR_DIM], g_in[:, DESCRIPTOR_DIM:]
    l_c = 0.0
    modules = ["trunk", "q_head", "w_head", "orientation"]
    if use_classifier:
        scores = net.class_scores(qa)
        if smoothing > 0:
            target = smooth_labels(np.eye(N_CLASSES)[labels], smoothing)
            l_c = cross_entropy(scores, target)
            gsc = cross_entropy_grad(scores, target)
        else:
            l_c = hinge_loss(scores, labels)
            gsc = hinge_loss_grad(scores, labels)
        ga = ga + net.classifier.backward(gsc)
        modules.append("classifier")
    gq = np.concatenate([ga, gs, gd])
    net.trunk.backward(net.q_head.backward(gq) + net.w_head.backward(gw))
    return {"L_pr": l_pr, "L_theta": l_th, "L_c": l_c,
            "L": combined_loss(l_pr, l_th, l_c)}, modules


def train_step(net: DescriptorNet, triplets, margin: float, use_classifier: bool,
               smoothing: float, lr: float) -> dict:
    """One joint update on a batch; returns the loss parts."""
    parts, modules = joint_backward(net, triplets, margin, use_classifier, smoothing)
    if not np.isfinite(parts["L"]):
        raise TrainingDiverged("loss is not finite")
    adam_step(net.params_of(*modules), lr)
    zero_grad(net.params_of("classifier"))
    return parts


def heldout_triplet_loss(net: DescriptorNet, triplets, margin: float) -> float:
    imgs, _, _ = _batch_arrays(triplets)
    q, _ = net.embed(imgs)
    B = len(triplets)
    return triplet_loss(q[:B], q[B:2 * B], q[2 * B:], margin)


def train(dataset, cfg, rng: np.random.Generator | None = None, heldout=None,
          log_path=None, net: DescriptorNet | None = None):
    """Two-stage joint training.

    Epochs before ``cfg.classifier_epoch`` optimize place and yaw losses
    only; later epochs add the classifier loss on class-balanced anchors.
    Negatives switch to the 3-6 m band at ``cfg.mining_epoch``. Returns the
    network and the per-epoch log.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = ProjectionParams.from_config(cfg)
    net = net or DescriptorNet(cfg.proj_height, cfg.proj_width, cfg.hidden_units, cfg.seed)
    held = None
    if heldout is not None:
        held = sample_triplets(heldout, "early", np.random.default_rng(cfg.seed + 7919), params,
                               batch_size=max(cfg.batch_size, HELDOUT_TRIPLETS))
    history = []
    sink = open(log_path, "w") if log_path else None

    def record(entry):
        history.append(entry)
        if sink:
            sink.write(json.dumps(entry, sort_keys=True) + "\n")
            sink.flush()

    if held is not None:
        record({"epoch": 0, "stage": "init", "heldout_L_pr": heldout_triplet_loss(net, held, cfg.margin)})
    n_batches = max(1, cfg.triplets_per_epoch // cfg.batch_size)
    try:
        for epoch in range(1, cfg.epochs + 1):
            stage = "early" if epoch - 1 < cfg.mining_epoch else "late"
            fine_tune = epoch - 1 >= cfg.classifier_epoch
            lr = cfg.epoch_learning_rate(epoch)
            sums = {"L_pr": 0.0, "L_theta": 0.0, "L_c": 0.0, "L": 0.0}
            for _ in range(n_batches):
                batch = sample_triplets(dataset, stage, rng, params, cfg.batch_size, balanced=fine_tune)
                try:
                    parts = train_step(net, batch, cfg.margin, fine_tune, cfg.label_smoothing,
                                       lr)
                except TrainingDiverged:
                    raise TrainingDiverged(f"training diverged at epoch {epoch}") from None
                for k in sums:
                    sums[k] += parts[k] / n_batches
            entry = {"epoch": epoch, "stage": "fine_tune" if fine_tune else "descriptor",
                     "negatives": stage, "lr": lr, **sums}
            if held is not None:
                entry["heldout_L_pr"] = heldout_triplet_loss(net, held, cfg.margin)
            log.info("epoch %d %s", epoch, entry)
            record(entry)
    finally:
        if sink:
            sink.close()
    return net, history


# ---------------------------------------------------------------- evaluation helpers

def yaw_pairs(dataset, rng: np.random.Generator, params: ProjectionParams, n: int):
    """Held-out (image_a, image_b, true yaw) pairs of nearby scans."""
    P = np.array([s.pose.translation for s in dataset])
    idx = sample_triplet_indices(P, [s.label for s in dataset], "early", rng, n)
    pairs = []
    for i in range(n):
        A, S = dataset[idx.anchor[i]], dataset[idx.similar[i]]
        pairs.append((_augmented_image(A, idx.yaw_anchor[i], params),
                      _augmented_image(S, idx.yaw_similar[i], params),
                      relative_yaw(A.pose, S.pose, idx.yaw_anchor[i], idx.yaw_similar[i])))
    return pairs


def yaw_errors_deg(backend, pairs) -> np.ndarray:
    errs = []
    for a, b, gt in pairs:
        est = backend.estimate_yaw(backend.describe(a).w, backend.describe(b).w)
        errs.append(abs(np.degrees(wrap_angle(est - gt))))
    return np.array(errs)


def balanced_recall(net: DescriptorNet, dataset, rng: np.random.Generator,
                    params: ProjectionParams, per_class: int) -> float:
    """Mean per-class recall on a class-balanced resample with random yaw."""
    labels = np.array([s.label for s in dataset])
    recalls = []
    for c in range(N_CLASSES):
        pool = np.flatnonzero(labels == c)
        if len(pool) == 0:
            continue
        pick = pool[rng.integers(len(pool), size=per_class)]
        imgs = np.stack([_augmented_image(dataset[i], rng.uniform(-np.pi, np.pi), params).pixels
                         for i in pick])
        q, _ = net.embed(imgs)
        pred = np.argmax(net.class_scores(q), axis=1)
        recalls.append(float(np.mean(pred == c)))
    return float(np.mean(recalls))


__all__ = [
    "CLASS_NAMES", "DescriptorNet", "LearnedBackend", "SamplingError", "Triplet",
    "TrainingDiverged", "classify", "combined_loss", "cross_entropy", "estimate_yaw",
    "forward_descriptor", "hinge_loss", "orientation_loss", "relative_yaw", "sample_triplets",
    "sample_triplet_indices", "smooth_labels", "train", "triplet_loss", "rotation_angle",
]
