"""Contrastive training of the fusion networks with exact gradients.

Loss per pair, with D the Euclidean distance between the two fused embeddings::

    same:       D**2
    different:  max(0, margin - D)**2

averaged over the batch. ``backward`` back-propagates it by hand through each
system; ``finite_diff_grads`` is the central-difference oracle it is tested
against.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, fmt_float, manifest_comment
from .errors import Divergence, InsufficientData, InvalidConfig
from .fusionnet import forward, init_model

SAME = 1
DIFFERENT = 0


@dataclass(frozen=True)
class TrainPair:
    sample_1: object
    sample_2: object
    label: int


@dataclass
class PairBatch:
    """Two aligned stacks of samples and a same(1)/different(0) label per row."""

    face_1: np.ndarray
    voice_1: np.ndarray
    face_2: np.ndarray
    voice_2: np.ndarray
    labels: np.ndarray
    index_1: np.ndarray = None
    index_2: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_indices(cls, dataset, first, second, labels):
        first = np.asarray(first, dtype=np.int64)
        second = np.asarray(second, dtype=np.int64)
        return cls(
            face_1=dataset.face[first],
            voice_1=dataset.voice[first],
            face_2=dataset.face[second],
            voice_2=dataset.voice[second],
            labels=np.asarray(labels, dtype=np.int64),
            index_1=first,
            index_2=second,
        )

    def pairs(self, dataset):
        for i, j, y in zip(self.index_1, self.index_2, self.labels):
            yield TrainPair(dataset[int(i)], dataset[int(j)], int(y))


@dataclass(frozen=True)
class TrainConfig:
    system: str = "C"
    margin: float = 1.0
    learning_rate: float = 0.3
    steps: int = 2000
    pairs_per_class: int = 60
    seed: int = 0

    def validate(self):
        if self.system not in ("A", "B", "C"):
            raise InvalidConfig(f"system must be A, B or C, got {self.system!r}")
        if not (math.isfinite(self.margin) and self.margin > 0):
            raise InvalidConfig(f"margin must be > 0, got {self.margin!r}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvalidConfig(f"learning_rate must be finite and >= 0, got {self.learning_rate!r}")
        if self.steps < 0:
            raise InvalidConfig(f"steps must be >= 0, got {self.steps}")
        if self.pairs_per_class < 1:
            raise InvalidConfig(f"pairs_per_class must be >= 1, got {self.pairs_per_class}")


def as_rng(seed_or_rng, *key):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(np.random.SeedSequence(seed_or_rng, spawn_key=key))


class PairSampler:
    """Draws balanced same/different batches. Same pairs always come from distinct clips.

    Identities, clips and rows are flattened into offset tables so a whole batch
    is drawn with a handful of vectorised RNG calls.
    """

    def __init__(self, dataset):
        groups = dataset.identity_groups()
        if len(groups) < 2:
            raise InsufficientData("need >= 2 identities")
        clip_start, clip_count, rows = [], [], []
        id_clip_start, id_clip_count = [], []
        for clips in groups.values():
            id_clip_start.append(len(clip_start))
            id_clip_count.append(len(clips))
            for clip_rows in clips.values():
                clip_start.append(len(rows))
                clip_count.append(len(clip_rows))
                rows.extend(clip_rows)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.clip_start = np.asarray(clip_start, dtype=np.int64)
        self.clip_count = np.asarray(clip_count, dtype=np.int64)
        self.id_clip_start = np.asarray(id_clip_start, dtype=np.int64)
        self.id_clip_count = np.asarray(id_clip_count, dtype=np.int64)
        self.positive_ids = np.flatnonzero(self.id_clip_count >= 2)
        if self.positive_ids.size == 0:
            raise InsufficientData("no identity has >= 2 clips")
        self.dataset = dataset

    def _row(self, rng, clip):
        offset = (rng.random(clip.shape) * self.clip_count[clip]).astype(np.int64)
        return self.rows[self.clip_start[clip] + offset]

    def _clip(self, rng, ident):
        offset = (rng.random(ident.shape) * self.id_clip_count[ident]).astype(np.int64)
        return self.id_clip_start[ident] + offset

    def sample(self, pairs_per_class, rng):
        n = pairs_per_class
        ident = self.positive_ids[rng.integers(self.positive_ids.size, size=n)]
        k = self.id_clip_count[ident]
        a = (rng.random(n) * k).astype(np.int64)
        b = (rng.random(n) * (k - 1)).astype(np.int64)
        b += b >= a
        pos_1 = self._row(rng, self.id_clip_start[ident] + a)
        pos_2 = self._row(rng, self.id_clip_start[ident] + b)

        n_id = self.id_clip_count.size
        id_1 = rng.integers(n_id, size=n)
        id_2 = rng.integers(n_id - 1, size=n)
        id_2 += id_2 >= id_1
        neg_1 = self._row(rng, self._clip(rng, id_1))
        neg_2 = self._row(rng, self._clip(rng, id_2))

        labels = np.concatenate([np.full(n, SAME), np.full(n, DIFFERENT)])
        return PairBatch.from_indices(
            self.dataset, np.concatenate([pos_1, neg_1]), np.concatenate([pos_2, neg_2]), labels
        )


def sample_pairs(dataset, pairs_per_class, seed):
    return PairSampler(dataset).sample(pairs_per_class, as_rng(seed))


def contrastive_loss(z1, z2, label, margin):
    d = float(np.linalg.norm(np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)))
    if label == SAME:
        return d * d
    return max(0.0, margin - d) ** 2


def _pair_losses(z1, z2, labels, margin):
    diff = z1 - z2
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    same = labels == SAME
    hinge = np.maximum(margin - dist, 0.0)
    losses = np.where(same, dist**2, hinge**2)
    return losses, diff, dist, same, hinge


def batch_loss(batch, model, margin):
    z1, _ = forward(model, batch.face_1, batch.voice_1)
    z2, _ = forward(model, batch.face_2, batch.voice_2)
    return float(_pair_losses(z1, z2, batch.labels, margin)[0].mean())


def _grad_a(model, trace, gz):
    grads = {
        "fc2_w": gz.T @ trace.hidden,
        "fc2_b": gz.sum(axis=0),
    }
    # ReLU subgradient is 0 at exactly 0.
    g_pre = (gz @ model.fc2_w) * (trace.pre_activation > 0)
    x = np.concatenate([trace.face, trace.voice], axis=1)
    grads["fc1_w"] = g_pre.T @ x
    grads["fc1_b"] = g_pre.sum(axis=0)
    return grads


def _grad_b(model, trace, gz):
    return {"proj_face": gz.T @ trace.face, "proj_voice": gz.T @ trace.voice}


def _grad_c(model, trace, gz):
    alpha = trace.weights
    g_alpha = np.stack(
        [np.einsum("ij,ij->i", gz, trace.proj_face), np.einsum("ij,ij->i", gz, trace.proj_voice)], axis=1
    )
    g_scores = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))
    x = np.concatenate([trace.face, trace.voice], axis=1)
    return {
        "att_w": g_scores.T @ x,
        "att_b": g_scores.sum(axis=0),
        "proj_face": (alpha[:, :1] * gz).T @ trace.face,
        "proj_voice": (alpha[:, 1:] * gz).T @ trace.voice,
    }


_GRAD = {"A": _grad_a, "B": _grad_b, "C": _grad_c}


def backward(batch, model, margin):
    """Mean contrastive loss over `batch` and its exact gradient for every parameter."""
    if len(batch) == 0:
        raise InsufficientData("empty batch")
    n = len(batch)
    # Both sides of every pair go through the network in one pass.
    face = np.concatenate([batch.face_1, batch.face_2])
    voice = np.concatenate([batch.voice_1, batch.voice_2])
    z, trace = forward(model, face, voice)
    z1, z2 = z[:n], z[n:]
    losses, diff, dist, same, hinge = _pair_losses(z1, z2, batch.labels, margin)

    with np.errstate(divide="ignore", invalid="ignore"):
        neg_scale = np.where(dist > 0, -2.0 * hinge / dist, 0.0)
    scale = np.where(same, 2.0, neg_scale) / n
    g1 = scale[:, None] * diff
    gz = np.concatenate([g1, -g1])

    grads = _GRAD[model.system](model, trace, gz)
    return float(losses.mean()), {k: grads[k] for k in model.param_names()}


def finite_diff_grads(batch, model, margin, h=1e-5, entries=None):
    """Central-difference gradient of the mean batch loss, one parameter entry at a time.

    `entries` optionally maps a parameter name to the flat indices to probe;
    other entries are left as NaN.
    """
    grads = {}
    for name, arr in model.params().items():
        g = np.zeros_like(arr)
        work = arr.copy()
        flat = work.reshape(-1)
        probe = range(flat.size)
        if entries is not None:
            g[...] = np.nan
            probe = entries.get(name, ())
        for k in probe:
            orig = flat[k]
            flat[k] = orig + h
            up = batch_loss(batch, model.with_params(**{name: work}), margin)
            flat[k] = orig - h
            down = batch_loss(batch, model.with_params(**{name: work}), margin)
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * h)
        grads[name] = g
    return grads


@dataclass(frozen=True)
class GradCheck:
    n_checked: int
    n_skipped: int
    n_failed: int
    worst_rel: float
    worst_abs: float = 0.0

    @property
    def ok(self):
        return self.n_failed == 0


def compare_grads(analytic, numeric, rtol=1e-4, atol=1e-7, skip=None):
    """Entrywise agreement: relative error below `rtol`, or absolute error below `atol` near zero.

    NaN entries in `numeric` (not probed) and entries flagged in `skip` are ignored.
    """
    checked = skipped = failed = 0
    worst = worst_abs = 0.0
    for name, num in numeric.items():
        ana = analytic[name]
        mask = ~np.isnan(num)
        if skip is not None:
            skipped += int(np.sum(skip[name] & mask))
            mask &= ~skip[name]
        a, f = ana[mask], num[mask]
        err = np.abs(a - f)
        scale = np.maximum(np.abs(a), np.abs(f))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(scale > 0, err / scale, 0.0)
        bad = (rel >= rtol) & (err >= atol)
        checked += int(mask.sum())
        failed += int(bad.sum())
        considered = rel[err >= atol]
        if considered.size:
            worst = max(worst, float(considered.max()))
        if err.size:
            worst_abs = max(worst_abs, float(err.max()))
    return GradCheck(checked, skipped, failed, worst, worst_abs)


def near_kink_mask(batch, model, h=1e-5, factor=10.0):
    """Parameters whose perturbation by +-factor*h flips some ReLU unit (System A only).

    Finite differences straddling a kink are not meaningful, so gradient checks
    skip these entries.
    """
    masks = {k: np.zeros(v.shape, dtype=bool) for k, v in model.params().items()}
    if model.system != "A":
        return masks
    face = np.concatenate([batch.face_1, batch.face_2])
    voice = np.concatenate([batch.voice_1, batch.voice_2])
    x = np.concatenate([face, voice], axis=1)
    pre = x @ model.fc1_w.T + model.fc1_b
    delta = factor * h
    # pre[s, j] moves by delta * |x[s, k]| when fc1_w[j, k] moves by delta.
    margin = np.abs(pre)
    masks["fc1_w"] = ((margin[:, :, None] <= delta * np.abs(x)[:, None, :]).any(axis=0))
    masks["fc1_b"] = (margin <= delta).any(axis=0)
    return masks


def sgd_step(model, grads, learning_rate):
    return model.with_params(**{k: v - learning_rate * grads[k] for k, v in model.params().items()})


@dataclass
class TrainResult:
    model: object
    loss_history: list = field(default_factory=list)


def train(dataset, config, init=None, dims=None):
    """Plain gradient descent on freshly sampled balanced batches.

    The initial model comes from ``init_model(config.system, config.seed)`` unless
    `init` is given; batch sampling uses an independent stream of the same seed.
    """
    config.validate()
    model = init if init is not None else init_model(config.system, config.seed, **(dims or {}))
    sampler = PairSampler(dataset)
    rng = as_rng(config.seed, 1)
    history = []
    for step in range(config.steps):
        batch = sampler.sample(config.pairs_per_class, rng)
        # Overflow is reported as Divergence below, not as numpy warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = backward(batch, model, config.margin)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise Divergence(step, loss)
        history.append(loss)
        if config.learning_rate != 0:
            model = sgd_step(model, grads, config.learning_rate)
    return TrainResult(model=model, loss_history=history)


def format_loss_csv(history, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(manifest_comment(manifest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(history):
        writer.writerow([step, fmt_float(loss)])
    return buf.getvalue()


def write_loss_csv(history, path, manifest=None):
    atomic_write_text(path, format_loss_csv(history, manifest))
