"""Verification trials, cosine scoring, EER/minDCF, score calibration and condition tables.

Threshold convention used by both metrics: a trial is accepted when its score is
``>= t``. FRR(t) counts targets below t, FAR(t) counts non-targets at or above t.
The sweep visits every distinct score, every midpoint between neighbours and one
point just above the maximum (reject everything).
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, fmt_float, manifest_comment, strip_comments
from .embedspace import CorruptionSpec, corrupt
from .errors import DegenerateLabels, EmptyClass, InsufficientData, MalformedRecord, MissingCheckpoint, ZeroVector
from .fusionnet import FusionModel, embed
from .training import as_rng

TARGET = 1
NONTARGET = 0
ZERO_NORM = 1e-12
UNIMODAL = ("face_only", "voice_only")
ALL_SYSTEMS = ("voice_only", "face_only", "score_fusion", "A", "B", "C")
CONDITIONS = ("clean", "voice_random", "voice_zeros", "face_random", "face_zeros")
SYSTEM_LABELS = {
    "voice_only": "Voice embedding (e_v)",
    "face_only": "Face embedding (e_f)",
    "score_fusion": "Score-level fusion",
    "A": "System A",
    "B": "System B",
    "C": "System C (attention)",
}


@dataclass
class TrialSet:
    enroll: np.ndarray
    test: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def n_target(self):
        return int(np.sum(self.labels == TARGET))

    @property
    def n_nontarget(self):
        return int(np.sum(self.labels == NONTARGET))


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    n_flagged: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def targets(self):
        return self.scores[self.labels == TARGET]

    @property
    def nontargets(self):
        return self.scores[self.labels == NONTARGET]


@dataclass
class MetricsReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    n_target: int
    n_nontarget: int
    n_flagged: int = 0


# -- trials --------------------------------------------------------------------


def build_trials(dataset, pos_per_identity, neg_per_identity, seed):
    """Per identity: up to `pos_per_identity` distinct-clip target pairs and
    `neg_per_identity` pairs against random clips of other identities.

    Target pairs are drawn without replacement from the C(k, 2) unordered clip
    pairs, so an identity with k clips yields at most k(k-1)/2 of them.
    """
    rng = as_rng(seed, 4)
    groups = dataset.identity_groups()
    idents = list(groups)
    if len(idents) < 2:
        raise InsufficientData("need >= 2 identities")
    clips = {i: list(groups[i].values()) for i in idents}
    short = [i for i in idents if len(clips[i]) < 2]
    if short:
        raise InsufficientData(f"identities with fewer than 2 clips: {', '.join(short[:5])}")

    def row(clip_rows):
        return clip_rows[rng.integers(len(clip_rows))] if len(clip_rows) > 1 else clip_rows[0]

    enroll, test, labels = [], [], []
    for pos, ident in enumerate(idents):
        own = clips[ident]
        k = len(own)
        pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        if len(pairs) > pos_per_identity:
            chosen = np.sort(rng.choice(len(pairs), size=pos_per_identity, replace=False))
            pairs = [pairs[c] for c in chosen]
        for a, b in pairs:
            enroll.append(row(own[a]))
            test.append(row(own[b]))
            labels.append(TARGET)
        for _ in range(neg_per_identity):
            other = rng.integers(len(idents) - 1)
            other = other + 1 if other >= pos else other
            enroll.append(row(own[rng.integers(k)]))
            theirs = clips[idents[other]]
            test.append(row(theirs[rng.integers(len(theirs))]))
            labels.append(NONTARGET)
    return TrialSet(np.asarray(enroll, dtype=np.int64), np.asarray(test, dtype=np.int64), np.asarray(labels, dtype=np.int64))


def format_trials(trials, dataset, manifest=None):
    lines = [manifest_comment(manifest).rstrip("\n")] if manifest is not None else []
    for e, t, y in zip(trials.enroll, trials.test, trials.labels):
        lines.append(json.dumps({"enroll_clip": dataset.clip_ids[e], "test_clip": dataset.clip_ids[t], "label": int(y)}))
    return "\n".join(lines) + "\n"


def write_trials(trials, dataset, path, manifest=None):
    atomic_write_text(path, format_trials(trials, dataset, manifest))


def read_trials(path, dataset):
    index = {}
    for i, clip in enumerate(dataset.clip_ids):
        index.setdefault(clip, i)
    enroll, test, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                e, t, y = index[rec["enroll_clip"]], index[rec["test_clip"]], int(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_no, f"bad trial record: {exc}") from None
            if y not in (TARGET, NONTARGET):
                raise MalformedRecord(line_no, f"label must be 0 or 1, got {y}")
            enroll.append(e)
            test.append(t)
            labels.append(y)
    return TrialSet(np.asarray(enroll, dtype=np.int64), np.asarray(test, dtype=np.int64), np.asarray(labels, dtype=np.int64))


# -- scoring -------------------------------------------------------------------


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def representations(dataset, scorer):
    """Per-row vectors a scorer compares: a raw modality or a fused embedding."""
    if scorer == "face_only":
        return dataset.face
    if scorer == "voice_only":
        return dataset.voice
    if isinstance(scorer, FusionModel):
        return embed(scorer, dataset.face, dataset.voice)
    raise ValueError(f"unknown scorer {scorer!r}")


def pairwise_cosine(reps, enroll, test):
    """Cosine per (enroll, test) row pair. Zero rows score -1 and are counted."""
    norms = np.linalg.norm(reps, axis=1)
    zero = norms < ZERO_NORM
    safe = np.where(zero, 1.0, norms)
    unit = reps / safe[:, None]
    scores = np.einsum("ij,ij->i", unit[enroll], unit[test])
    scores = np.clip(scores, -1.0, 1.0)
    flagged = zero[enroll] | zero[test]
    scores[flagged] = -1.0
    return scores, int(flagged.sum())


def score_trials(dataset, trials, scorer):
    reps = representations(dataset, scorer)
    scores, flagged = pairwise_cosine(reps, trials.enroll, trials.test)
    return ScoreSet(scores, trials.labels.copy(), flagged)


# -- metrics -------------------------------------------------------------------


def _split(scoreset):
    tar = np.sort(scoreset.targets)
    non = np.sort(scoreset.nontargets)
    if tar.size == 0 or non.size == 0:
        raise EmptyClass("need at least one target and one non-target score")
    return tar, non


def sweep_thresholds(scores):
    """Distinct scores interleaved with midpoints, then one point above the maximum."""
    values = np.unique(scores)
    thr = np.empty(2 * values.size)
    thr[0::2] = values
    thr[1:-1:2] = (values[:-1] + values[1:]) / 2
    thr[-1] = np.nextafter(values[-1], np.inf)
    return thr


def error_rates(scoreset, thresholds=None):
    """(thresholds, FRR, FAR) over the sweep."""
    tar, non = _split(scoreset)
    thr = sweep_thresholds(scoreset.scores) if thresholds is None else np.asarray(thresholds, dtype=float)
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, frr, far


def compute_eer(scoreset):
    """Equal error rate by linear interpolation at the first sign change of FAR - FRR."""
    thr, frr, far = error_rates(scoreset)
    diff = far - frr
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0:
        return float(frr[j]), float(thr[j])
    w = diff[j - 1] / (diff[j - 1] - diff[j])
    eer = frr[j - 1] + w * (frr[j] - frr[j - 1])
    return float(eer), float(thr[j - 1] + w * (thr[j] - thr[j - 1]))


def compute_min_dcf(scoreset, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Minimum detection cost, normalised by the cheaper of accept-all and reject-all."""
    thr, frr, far = error_rates(scoreset)
    dcf = c_miss * frr * p_target + c_fa * far * (1 - p_target)
    dcf = dcf / min(c_miss * p_target, c_fa * (1 - p_target))
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(thr[k])


def evaluate(scoreset, p_target=0.01, c_miss=1.0, c_fa=1.0):
    eer, eer_t = compute_eer(scoreset)
    dcf, dcf_t = compute_min_dcf(scoreset, p_target, c_miss, c_fa)
    return MetricsReport(
        eer=eer,
        eer_threshold=eer_t,
        min_dcf=dcf,
        dcf_threshold=dcf_t,
        n_target=int(scoreset.targets.size),
        n_nontarget=int(scoreset.nontargets.size),
        n_flagged=scoreset.n_flagged,
    )


def det_points(scoreset):
    thr, frr, far = error_rates(scoreset)
    return list(zip(thr.tolist(), frr.tolist(), far.tolist()))


# -- score-level fusion --------------------------------------------------------


@dataclass(frozen=True)
class CalibrationModel:
    weight_face: float
    weight_voice: float
    offset: float

    def fuse(self, face_scores, voice_scores):
        return self.weight_face * np.asarray(face_scores) + self.weight_voice * np.asarray(voice_scores) + self.offset


def calibrate_scores(face_scores, voice_scores, labels, learning_rate=0.1, steps=5000):
    """Logistic-regression fusion weights by full-batch gradient descent from zero.

    Inputs are standardised with their own mean and spread before the fit and the
    weights mapped back, so the returned model acts on raw scores.
    """
    s = np.column_stack([np.asarray(face_scores, dtype=float), np.asarray(voice_scores, dtype=float)])
    y = np.asarray(labels, dtype=float)
    if s.shape[0] != y.size:
        raise ValueError("scores and labels must align")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DegenerateLabels("calibration needs both target and non-target trials")
    mu = s.mean(axis=0)
    sd = s.std(axis=0)
    sd[sd == 0] = 1.0
    x = (s - mu) / sd
    w = np.zeros(2)
    c = 0.0
    n = y.size
    for _ in range(steps):
        logit = x @ w + c
        p = 0.5 * (1.0 + np.tanh(0.5 * logit))
        r = p - y
        w -= learning_rate * (x.T @ r) / n
        c -= learning_rate * r.sum() / n
    raw_w = w / sd
    return CalibrationModel(float(raw_w[0]), float(raw_w[1]), float(c - raw_w @ mu))


def fused_scoreset(calibration, face_set, voice_set):
    if not np.array_equal(face_set.labels, voice_set.labels):
        raise ValueError("face and voice score sets are not aligned")
    return ScoreSet(
        calibration.fuse(face_set.scores, voice_set.scores),
        face_set.labels.copy(),
        max(face_set.n_flagged, voice_set.n_flagged),
    )


# -- condition matrix ----------------------------------------------------------


def condition_spec(condition, seed, fraction=1.0, renormalize_noise=True):
    if condition == "clean":
        return None
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    modality, mode = condition.split("_")
    return CorruptionSpec(
        target_modality=modality,
        mode="zeros" if mode == "zeros" else "random_standard_normal",
        fraction=fraction,
        seed=seed,
        renormalize=renormalize_noise,
    )


@dataclass
class ConditionTable:
    systems: list
    conditions: list
    cells: dict = field(default_factory=dict)

    def get(self, system, condition):
        return self.cells[(system, condition)]

    def rows(self):
        for system in self.systems:
            for condition in self.conditions:
                yield system, condition, self.cells[(system, condition)]


def score_condition(dataset, trials, systems, calibration=None):
    """ScoreSets for every requested system on one (possibly corrupted) dataset."""
    out = {}
    cache = {}

    def unimodal(name):
        if name not in cache:
            cache[name] = score_trials(dataset, trials, name)
        return cache[name]

    for name in systems:
        scorer = systems[name]
        if name in UNIMODAL:
            out[name] = unimodal(name)
        elif name == "score_fusion":
            if calibration is None:
                raise MissingCheckpoint("score_fusion requires a calibration model")
            out[name] = fused_scoreset(calibration, unimodal("face_only"), unimodal("voice_only"))
        else:
            if scorer is None:
                raise MissingCheckpoint(f"no checkpoint for System {name}")
            out[name] = score_trials(dataset, trials, scorer)
    return out


def run_condition_matrix(
    dataset,
    trials,
    systems,
    conditions=CONDITIONS,
    calibration=None,
    corruption_seed=0,
    fraction=1.0,
    p_target=0.01,
    c_miss=1.0,
    c_fa=1.0,
    renormalize_noise=True,
):
    """Evaluate every (system, condition) cell.

    `systems` maps a system name to its scorer: ``"face_only"``/``"voice_only"``
    map to themselves, ``"score_fusion"`` needs `calibration`, and ``"A"``/``"B"``/
    ``"C"`` map to a loaded model. Corruption is applied to every row of the
    evaluation set, enrolment and test sides alike. Random null embeddings are
    scaled to unit length unless `renormalize_noise` is False.
    """
    for name, scorer in systems.items():
        if name in ("A", "B", "C") and scorer is None:
            raise MissingCheckpoint(f"no checkpoint for System {name}")
    table = ConditionTable(systems=list(systems), conditions=list(conditions))
    for condition in conditions:
        spec = condition_spec(condition, corruption_seed, fraction, renormalize_noise)
        data = dataset if spec is None else corrupt(dataset, spec)
        scored = score_condition(data, trials, systems, calibration)
        for name in systems:
            table.cells[(name, condition)] = evaluate(scored[name], p_target, c_miss, c_fa)
    return table


# -- report formatting ---------------------------------------------------------

REPORT_COLUMNS = [
    "system",
    "condition",
    "eer",
    "eer_threshold",
    "min_dcf",
    "dcf_threshold",
    "n_target",
    "n_nontarget",
    "n_flagged",
]


def format_table_csv(table, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(manifest_comment(manifest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for system, condition, r in table.rows():
        writer.writerow(
            [
                system,
                condition,
                fmt_float(r.eer),
                fmt_float(r.eer_threshold),
                fmt_float(r.min_dcf),
                fmt_float(r.dcf_threshold),
                r.n_target,
                r.n_nontarget,
                r.n_flagged,
            ]
        )
    return buf.getvalue()


def read_table_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(strip_comments(fh.read().splitlines())))
    systems, conditions, cells = [], [], {}
    for row in rows:
        if row["system"] not in systems:
            systems.append(row["system"])
        if row["condition"] not in conditions:
            conditions.append(row["condition"])
        cells[(row["system"], row["condition"])] = MetricsReport(
            eer=float(row["eer"]),
            eer_threshold=float(row["eer_threshold"]),
            min_dcf=float(row["min_dcf"]),
            dcf_threshold=float(row["dcf_threshold"]),
            n_target=int(row["n_target"]),
            n_nontarget=int(row["n_nontarget"]),
            n_flagged=int(row["n_flagged"]),
        )
    return ConditionTable(systems, conditions, cells)


def _dcf_text(value):
    # Saturated costs print as 0.999, matching how such tables are usually shown.
    return f"{min(value, 0.999):.3f}"


def _align(rows):
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def format_table_text(table, title=None):
    """Aligned text: systems as rows, an (EER %, minDCF) column pair per condition."""
    head = ["Systems"]
    for condition in table.conditions:
        head += [f"{condition} EER", f"{condition} mDCF"]
    rows = [head]
    for system in table.systems:
        row = [SYSTEM_LABELS.get(system, system)]
        for condition in table.conditions:
            r = table.get(system, condition)
            row += [f"{100 * r.eer:.2f}", _dcf_text(r.min_dcf)]
        rows.append(row)
    text = _align(rows)
    return (title + "\n" + text) if title else text


def format_scores_csv(scoreset, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(manifest_comment(manifest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["score", "label"])
    for s, y in zip(scoreset.scores.tolist(), scoreset.labels.tolist()):
        writer.writerow([fmt_float(s), y])
    return buf.getvalue()


