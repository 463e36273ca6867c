"""Forward passes for the three feature-level fusion networks.

System A stacks two FC layers (ReLU after the first) on the concatenated
``[face, voice]`` vector. System B projects each modality into a shared space
with a bias-free linear map and sums. System C uses the same projections but
mixes them with softmax attention weights computed from the raw concatenated
input::

    scores = W @ [e_f, e_v] + b          # one score per modality, face first
    alpha  = softmax(scores)
    z      = alpha_f * P_f e_f + alpha_v * P_v e_v

Every pass works on a batch (rows are samples) and returns a
:class:`ForwardTrace` holding the intermediates that ``training.backward``
consumes.
"""

import json
from dataclasses import dataclass, fields

import numpy as np

from ._io import FLOAT_FMT, atomic_write_text
from .embedspace import FACE_DIM, VOICE_DIM
from .errors import ShapeMismatch, UnknownSystemTag

JOINT_DIM = 600
HIDDEN_DIM = 1200
N_MODALITIES = 2
CHECKPOINT_VERSION = 1
SYSTEMS = ("A", "B", "C")


class FusionModel:
    """Shared behaviour of the parameter containers. Subclasses are dataclasses of arrays."""

    system = None

    def params(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def param_names(cls):
        return tuple(f.name for f in fields(cls))

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.params().items()})

    def with_params(self, **arrays):
        p = self.params()
        p.update(arrays)
        return type(self)(**p)

    def n_params(self):
        return sum(v.size for v in self.params().values())

    def equals(self, other):
        return type(self) is type(other) and all(
            np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values())
        )

    def _check(self):
        for name, value in self.params().items():
            arr = np.asarray(value, dtype=float)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")
        for name, shape in self.expected_shapes().items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"System {self.system}: {name} has shape {getattr(self, name).shape}, expected {shape}")


@dataclass
class FusionModelA(FusionModel):
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    system = "A"

    def __post_init__(self):
        self._check()

    @property
    def dims(self):
        hidden, in_dim = self.fc1_w.shape
        return {"input_dim": in_dim, "hidden_dim": hidden, "joint_dim": self.fc2_w.shape[0]}

    def expected_shapes(self):
        hidden, in_dim = self.fc1_w.shape
        joint = self.fc2_w.shape[0]
        return {"fc1_b": (hidden,), "fc2_w": (joint, hidden), "fc2_b": (joint,)}


@dataclass
class FusionModelB(FusionModel):
    proj_face: np.ndarray
    proj_voice: np.ndarray

    system = "B"

    def __post_init__(self):
        self._check()

    @property
    def dims(self):
        joint, face_dim = self.proj_face.shape
        return {"face_dim": face_dim, "voice_dim": self.proj_voice.shape[1], "joint_dim": joint}

    def expected_shapes(self):
        joint = self.proj_face.shape[0]
        return {"proj_voice": (joint, self.proj_voice.shape[1])}


@dataclass
class FusionModelC(FusionModel):
    att_w: np.ndarray
    att_b: np.ndarray
    proj_face: np.ndarray
    proj_voice: np.ndarray

    system = "C"

    def __post_init__(self):
        self._check()

    @property
    def dims(self):
        joint, face_dim = self.proj_face.shape
        return {"face_dim": face_dim, "voice_dim": self.proj_voice.shape[1], "joint_dim": joint}

    def expected_shapes(self):
        joint, face_dim = self.proj_face.shape
        voice_dim = self.proj_voice.shape[1]
        return {
            "att_w": (N_MODALITIES, face_dim + voice_dim),
            "att_b": (N_MODALITIES,),
            "proj_voice": (joint, voice_dim),
        }


MODEL_TYPES = {"A": FusionModelA, "B": FusionModelB, "C": FusionModelC}


@dataclass
class ForwardTrace:
    face: np.ndarray
    voice: np.ndarray
    z: np.ndarray
    proj_face: np.ndarray = None
    proj_voice: np.ndarray = None
    scores: np.ndarray = None
    weights: np.ndarray = None
    pre_activation: np.ndarray = None
    hidden: np.ndarray = None


def _as_batch(face, voice):
    face = np.asarray(face, dtype=float)
    voice = np.asarray(voice, dtype=float)
    single = face.ndim == 1
    if single:
        face, voice = face[None, :], voice[None, :]
    if face.ndim != 2 or voice.ndim != 2 or face.shape[0] != voice.shape[0]:
        raise ShapeMismatch("face/voice batches must be 2-d with equal row counts")
    return face, voice, single


def _expect_dims(model, face, voice):
    d = model.dims
    if "input_dim" in d:
        if face.shape[1] + voice.shape[1] != d["input_dim"]:
            width = face.shape[1] + voice.shape[1]
            raise ShapeMismatch(f"concatenated input has {width} entries, model expects {d['input_dim']}")
        return
    if face.shape[1] != d["face_dim"] or voice.shape[1] != d["voice_dim"]:
        raise ShapeMismatch(
            f"inputs are {face.shape[1]}/{voice.shape[1]}-d, model expects {d['face_dim']}/{d['voice_dim']}"
        )


def softmax(scores):
    """Row-wise softmax with max subtraction."""
    s = np.asarray(scores, dtype=float)
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax2(scores):
    a = softmax(np.asarray(scores, dtype=float).reshape(N_MODALITIES))
    return float(a[0]), float(a[1])


def attention_scores(e_f, e_v, att_w, att_b):
    """Affine attention scores for the face-first concatenation; row 0 face, row 1 voice."""
    x = np.concatenate([np.asarray(e_f, dtype=float), np.asarray(e_v, dtype=float)], axis=-1)
    att_w = np.asarray(att_w, dtype=float)
    att_b = np.asarray(att_b, dtype=float)
    if att_w.ndim != 2 or att_w.shape[1] != x.shape[-1] or att_b.shape != (att_w.shape[0],):
        raise ShapeMismatch(f"attention weights {att_w.shape}/{att_b.shape} do not fit input of {x.shape[-1]}")
    return x @ att_w.T + att_b


def forward_a(model, face, voice):
    face, voice, single = _as_batch(face, voice)
    _expect_dims(model, face, voice)
    x = np.concatenate([face, voice], axis=1)
    pre = x @ model.fc1_w.T + model.fc1_b
    hidden = np.maximum(pre, 0.0)
    z = hidden @ model.fc2_w.T + model.fc2_b
    trace = ForwardTrace(face=face, voice=voice, z=z, pre_activation=pre, hidden=hidden)
    return (z[0] if single else z), trace


def forward_b(model, face, voice):
    face, voice, single = _as_batch(face, voice)
    _expect_dims(model, face, voice)
    pf = face @ model.proj_face.T
    pv = voice @ model.proj_voice.T
    z = pf + pv
    trace = ForwardTrace(face=face, voice=voice, z=z, proj_face=pf, proj_voice=pv)
    return (z[0] if single else z), trace


def forward_c(model, face, voice, pinned_weights=None):
    """System C forward pass. `pinned_weights` (alpha_f, alpha_v) bypasses the attention layer."""
    face, voice, single = _as_batch(face, voice)
    _expect_dims(model, face, voice)
    pf = face @ model.proj_face.T
    pv = voice @ model.proj_voice.T
    scores = attention_scores(face, voice, model.att_w, model.att_b)
    if pinned_weights is None:
        weights = softmax(scores)
    else:
        weights = np.broadcast_to(np.asarray(pinned_weights, dtype=float), scores.shape).copy()
    z = weights[:, :1] * pf + weights[:, 1:] * pv
    trace = ForwardTrace(face=face, voice=voice, z=z, proj_face=pf, proj_voice=pv, scores=scores, weights=weights)
    return (z[0] if single else z), trace


_FORWARD = {"A": forward_a, "B": forward_b, "C": forward_c}


def forward(model, face, voice):
    return _FORWARD[model.system](model, face, voice)


def embed(model, face, voice):
    """Fused embeddings only, for scoring."""
    return forward(model, face, voice)[0]


def fuse_a(sample, model):
    return forward_a(model, sample.face, sample.voice)


def fuse_b(sample, model):
    return forward_b(model, sample.face, sample.voice)


def fuse_c(sample, model, pinned_weights=None):
    return forward_c(model, sample.face, sample.voice, pinned_weights)


# -- initialisation ------------------------------------------------------------


def xavier_uniform(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_model(system, seed, face_dim=FACE_DIM, voice_dim=VOICE_DIM, joint_dim=JOINT_DIM, hidden_dim=HIDDEN_DIM):
    """Xavier-uniform weights, zero biases. Deterministic in `seed`."""
    if system not in MODEL_TYPES:
        raise UnknownSystemTag(f"unknown system {system!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    in_dim = face_dim + voice_dim
    if system == "A":
        return FusionModelA(
            fc1_w=xavier_uniform(rng, hidden_dim, in_dim),
            fc1_b=np.zeros(hidden_dim),
            fc2_w=xavier_uniform(rng, joint_dim, hidden_dim),
            fc2_b=np.zeros(joint_dim),
        )
    proj_face = xavier_uniform(rng, joint_dim, face_dim)
    proj_voice = xavier_uniform(rng, joint_dim, voice_dim)
    if system == "B":
        return FusionModelB(proj_face=proj_face, proj_voice=proj_voice)
    return FusionModelC(
        att_w=xavier_uniform(rng, N_MODALITIES, in_dim),
        att_b=np.zeros(N_MODALITIES),
        proj_face=proj_face,
        proj_voice=proj_voice,
    )


# -- checkpoints ---------------------------------------------------------------


def format_model(model, seed=None, metadata=None):
    head = {
        "format_version": CHECKPOINT_VERSION,
        "system": model.system,
        "concat_order": ["face", "voice"],
        "seed": seed,
        "metadata": metadata or {},
        "shapes": {k: list(v.shape) for k, v in model.params().items()},
    }
    lines = [json.dumps(head, sort_keys=True)]
    for name, arr in model.params().items():
        body = ",".join(format(x, FLOAT_FMT) for x in arr.ravel().tolist())
        lines.append(f'{{"name": "{name}", "data": [{body}]}}')
    return "\n".join(lines) + "\n"


def save_model(model, path, seed=None, metadata=None):
    """Write a self-describing text checkpoint: a JSON header line, then one line per parameter."""
    atomic_write_text(path, format_model(model, seed, metadata))


def load_model(path, system=None, with_header=False):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = json.loads(lines[0])
    tag = head.get("system")
    if tag not in MODEL_TYPES:
        raise UnknownSystemTag(f"checkpoint declares unknown system {tag!r}")
    if system is not None and tag != system:
        raise UnknownSystemTag(f"checkpoint holds System {tag}, expected System {system}")
    cls = MODEL_TYPES[tag]
    shapes = head["shapes"]
    if set(shapes) != set(cls.param_names()):
        raise ShapeMismatch(f"System {tag} checkpoint lists parameters {sorted(shapes)}")
    arrays = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        name = rec["name"]
        if name not in shapes:
            raise ShapeMismatch(f"unexpected parameter {name!r}")
        data = np.asarray(rec["data"], dtype=float)
        shape = tuple(shapes[name])
        if data.size != int(np.prod(shape)):
            raise ShapeMismatch(f"{name}: {data.size} values for declared shape {shape}")
        arrays[name] = data.reshape(shape)
    missing = set(shapes) - set(arrays)
    if missing:
        raise ShapeMismatch(f"checkpoint lacks data for {sorted(missing)}")
    model = cls(**{k: arrays[k] for k in cls.param_names()})
    return (model, head) if with_header else model
