"""How learned attention weights co-vary with facial attributes and head pose.

For an attribute A the statistic is the share of samples with A true whose face
weight is strictly above the global mean face weight (and likewise for voice),
with a Wald interval on that proportion. A row counts as a signal when the lower
end of the interval for the larger of the two shares clears 60%.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from ._io import atomic_write_text, fmt_float, manifest_comment, strip_comments
from .errors import AttributeJoinFailure, EmptyCondition, EmptyLog, InvalidCount, MalformedRecord
from .fusionnet import forward_c

CELEBA_ATTRIBUTES = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald",
    "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair",
    "Blurry", "Brown_Hair", "Bushy_Eyebrows", "Chubby", "Double_Chin",
    "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup", "High_Cheekbones",
    "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks",
    "Sideburns", "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings",
    "Wearing_Hat", "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie", "Young",
)  # fmt: skip
AXES = ("yaw", "pitch", "roll")
ANGLE_EDGES = (30.0, 60.0)
BIN_LABELS = ("|t|<30", "30<=|t|<60", "60<=|t|")
SIGNIFICANCE_BAR = 0.60


@dataclass
class AttentionLog:
    clip_ids: list
    frame_index: np.ndarray
    alpha_face: np.ndarray
    alpha_voice: np.ndarray

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.alpha_face = np.asarray(self.alpha_face, dtype=float)
        self.alpha_voice = np.asarray(self.alpha_voice, dtype=float)
        if not (len(self.clip_ids) == self.frame_index.size == self.alpha_face.size == self.alpha_voice.size):
            raise ValueError("attention log columns must align")
        if np.any(np.abs(self.alpha_face + self.alpha_voice - 1.0) > 1e-9):
            raise ValueError("alpha_face + alpha_voice must be 1 on every row")

    def __len__(self):
        return len(self.clip_ids)

    @classmethod
    def from_model(cls, model, dataset):
        _, trace = forward_c(model, dataset.face, dataset.voice)
        return cls(list(dataset.clip_ids), dataset.frame_index.copy(), trace.weights[:, 0], trace.weights[:, 1])

    def keys(self):
        return list(zip(self.clip_ids, self.frame_index.tolist()))


def format_attention_log(log, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(manifest_comment(manifest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clip_id", "frame_index", "alpha_face", "alpha_voice"])
    for clip, frame, af, av in zip(log.clip_ids, log.frame_index.tolist(), log.alpha_face, log.alpha_voice):
        writer.writerow([clip, frame, fmt_float(af), fmt_float(av)])
    return buf.getvalue()


def read_attention_log(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(strip_comments(fh.read().splitlines())))
    return AttentionLog(
        [r["clip_id"] for r in rows],
        [int(r["frame_index"]) for r in rows],
        [float(r["alpha_face"]) for r in rows],
        [float(r["alpha_voice"]) for r in rows],
    )


@dataclass
class AttributeTable:
    keys: list
    names: tuple
    values: np.ndarray
    yaw: np.ndarray
    pitch: np.ndarray
    roll: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")
        self.values = np.asarray(self.values, dtype=bool).reshape(len(self.keys), len(self.names))
        for axis in AXES:
            arr = np.asarray(getattr(self, axis), dtype=float)
            if arr.shape != (len(self.keys),) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{axis} must hold one finite angle per row")
            if np.any(np.abs(arr) > 180.0):
                raise ValueError(f"{axis} angles must lie in [-180, 180] degrees")
            setattr(self, axis, arr)

    def __len__(self):
        return len(self.keys)

    def angles(self, axis):
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        return getattr(self, axis)

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return AttributeTable(
            [self.keys[i] for i in rows], self.names, self.values[rows], self.yaw[rows], self.pitch[rows], self.roll[rows]
        )


def format_attributes(table, manifest=None):
    lines = [manifest_comment(manifest).rstrip("\n")] if manifest is not None else []
    for i, (clip, frame) in enumerate(table.keys):
        rec = {
            "clip_id": clip,
            "frame_index": int(frame),
            "attributes": {n: bool(v) for n, v in zip(table.names, table.values[i])},
            "yaw": float(table.yaw[i]),
            "pitch": float(table.pitch[i]),
            "roll": float(table.roll[i]),
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def write_attributes(table, path, manifest=None):
    atomic_write_text(path, format_attributes(table, manifest))


def read_attributes(path):
    keys, rows, angles = [], [], {a: [] for a in AXES}
    names = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                attrs = rec["attributes"]
                key = (rec["clip_id"], int(rec.get("frame_index", 0)))
                row_angles = {a: float(rec[a]) for a in AXES}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_no, f"bad attribute record: {exc}") from None
            if names is None:
                names = tuple(attrs)
            elif tuple(attrs) != names and set(attrs) != set(names):
                raise MalformedRecord(line_no, "attribute names differ from the first record")
            keys.append(key)
            rows.append([bool(attrs[n]) for n in names])
            for a in AXES:
                angles[a].append(row_angles[a])
    names = names or ()
    return AttributeTable(keys, names, np.asarray(rows, dtype=bool).reshape(len(keys), len(names)), **angles)


def join_attributes(log, table):
    """Rows of `table` reordered to match `log`; every log row must have a match."""
    index = {key: i for i, key in enumerate(table.keys)}
    rows, unmatched = [], []
    for key in log.keys():
        i = index.get(key)
        if i is None:
            unmatched.append(key[0])
        else:
            rows.append(i)
    if unmatched:
        raise AttributeJoinFailure(unmatched)
    return table.take(rows)


def random_attribute_table(keys, seed, rate=0.3, names=CELEBA_ATTRIBUTES, max_angle=90.0):
    """Attributes drawn independently of everything else (a null model for the report)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    n = len(keys)
    values = rng.random((n, len(names))) < rate
    yaw, pitch, roll = (rng.uniform(-max_angle, max_angle, n) for _ in AXES)
    return AttributeTable(list(keys), names, values, yaw, pitch, roll)


# -- statistics ----------------------------------------------------------------


def global_mean_attention(log):
    if len(log) == 0:
        raise EmptyLog("attention log is empty")
    return float(np.mean(log.alpha_face)), float(np.mean(log.alpha_voice))


@dataclass(frozen=True)
class ConditionalProb:
    p_face: float
    p_voice: float
    n: int


def conditional_prob(log, mask, mean_face):
    """Share of masked rows with alpha_face strictly above / strictly below `mean_face`."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(log),):
        raise ValueError("mask must have one entry per log row")
    n = int(mask.sum())
    if n == 0:
        raise EmptyCondition("no rows satisfy the condition")
    a = log.alpha_face[mask]
    return ConditionalProb(float(np.sum(a > mean_face)) / n, float(np.sum(a < mean_face)) / n, n)


def wald_ci(p, n, level=0.95):
    """Half-width of the normal-approximation binomial interval."""
    if n < 1 or int(n) != n:
        raise InvalidCount(f"n must be a positive integer, got {n!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion must lie in [0, 1], got {p!r}")
    z = NormalDist().inv_cdf(0.5 + level / 2)
    return z * math.sqrt(p * (1.0 - p) / n)


def significance_flag(p, half_width, bar=SIGNIFICANCE_BAR):
    return p - half_width > bar


def bin_by_angle(table, axis):
    """Masks for |angle| in [0, 30), [30, 60), [60, inf). Boundaries go to the higher bin."""
    a = np.abs(table.angles(axis))
    lo, hi = ANGLE_EDGES
    return a < lo, (a >= lo) & (a < hi), a >= hi


@dataclass(frozen=True)
class StatRow:
    attribute: str
    n: int
    p_voice: float
    p_face: float
    half_width_95: float
    significant: bool
    flag: str = ""


def stat_row(name, log, mask, mean_face, level=0.95):
    try:
        cp = conditional_prob(log, mask, mean_face)
    except EmptyCondition:
        return StatRow(name, 0, math.nan, math.nan, math.nan, False, "empty")
    lead = max(cp.p_face, cp.p_voice)
    hw = wald_ci(lead, cp.n, level)
    flag = "degenerate_wald" if hw == 0.0 else ""
    return StatRow(name, cp.n, cp.p_voice, cp.p_face, hw, significance_flag(lead, hw), flag)


def emit_stat_report(log, table, level=0.95):
    """One row per attribute, then one per (axis, orientation bin)."""
    if len(table) != len(log):
        raise ValueError("attribute table must be joined to the log first")
    mean_face, _ = global_mean_attention(log)
    rows = [stat_row(name, log, table.column(name), mean_face, level) for name in table.names]
    for axis in AXES:
        for label, mask in zip(BIN_LABELS, bin_by_angle(table, axis)):
            rows.append(stat_row(f"{axis}:{label}", log, mask, mean_face, level))
    return rows


REPORT_COLUMNS = ["attribute", "n", "p_voice", "p_face", "ci_half_width", "significant", "flag"]


def _num(x):
    return "" if math.isnan(x) else fmt_float(x)


def format_report_csv(rows, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(manifest_comment(manifest))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow(
            [r.attribute, r.n, _num(r.p_voice), _num(r.p_face), _num(r.half_width_95), str(r.significant).lower(), r.flag]
        )
    return buf.getvalue()


def read_report_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(strip_comments(fh.read().splitlines())))

    def num(s):
        return math.nan if s == "" else float(s)

    return [
        StatRow(
            r["attribute"], int(r["n"]), num(r["p_voice"]), num(r["p_face"]), num(r["ci_half_width"]),
            r["significant"] == "true", r["flag"],
        )
        for r in rows
    ]  # fmt: skip


def _pct(x):
    return "-" if math.isnan(x) else f"{100 * x:.2f}"


def format_report_text(rows):
    """Two aligned blocks: head orientation (V/F per bin) and per-attribute shares with CIs."""
    by_name = {r.attribute: r for r in rows}
    lines = ["Head orientation (V: voice %, F: face %)"]
    grid = [["axis"] + [f"{lab} {vf}" for lab in BIN_LABELS for vf in ("V", "F")]]
    for axis in AXES:
        row = [axis]
        for lab in BIN_LABELS:
            r = by_name.get(f"{axis}:{lab}")
            row += [_pct(r.p_voice), _pct(r.p_face)] if r else ["-", "-"]
        grid.append(row)
    lines.append(_align(grid))
    lines.append("Facial attributes")
    attr = [["attribute", "n", "voice %", "face %", "95% CI", "signal"]]
    for r in rows:
        if ":" in r.attribute:
            continue
        ci = "-" if math.isnan(r.half_width_95) else f"+-{100 * r.half_width_95:.2f}"
        mark = "*" if r.significant else ""
        if r.flag:
            mark = (mark + " " + r.flag).strip()
        attr.append([r.attribute, str(r.n), _pct(r.p_voice), _pct(r.p_face), ci, mark])
    lines.append(_align(attr))
    return "\n".join(lines)


def _align(rows):
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]).rstrip() for r in rows
    ) + "\n"
