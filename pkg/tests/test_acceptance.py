"""End-to-end acceptance criteria. Each test reports one verdict line in the
terminal summary; the slow ones share trained models through a module fixture."""

import statistics
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from support import oracle_eer, oracle_min_dcf, random_instance, scoreset, unit_rows

from avfusion.attnstats import significance_flag, wald_ci
from avfusion.cli import main
from avfusion.embedspace import CorruptionSpec, SyntheticConfig, corrupt, corrupted_indices, generate_synthetic
from avfusion.fusionnet import FACE_DIM, HIDDEN_DIM, JOINT_DIM, VOICE_DIM, forward_c, init_model
from avfusion.training import TrainConfig, backward, compare_grads, finite_diff_grads, near_kink_mask, train
from avfusion.verifeval import build_trials, compute_eer, compute_min_dcf, run_condition_matrix

SEEDS = range(5)
REGIME = SyntheticConfig(n_identities=50, clips_per_identity=10, face_noise_sigma=0.1, voice_noise_sigma=0.4)
FULL_DIMS = {"face_dim": FACE_DIM, "voice_dim": VOICE_DIM, "joint_dim": JOINT_DIM, "hidden_dim": HIDDEN_DIM}


class Regime:
    """One seed of the reference regime: train on noise stream 0, score held-out clips from stream 1."""

    def __init__(self, seed):
        self.seed = seed
        self.train_set = generate_synthetic(replace(REGIME, seed=seed))
        self.test_set = generate_synthetic(replace(REGIME, seed=seed, noise_stream=1))
        self.trials = build_trials(self.test_set, 45, 45, seed=0)
        self.models = {}
        self.seconds = {}

    def model(self, system):
        if system not in self.models:
            start = time.perf_counter()
            self.models[system] = train(self.train_set, TrainConfig(system=system, seed=self.seed)).model
            self.seconds[system] = time.perf_counter() - start
        return self.models[system]

    def eer(self, systems, conditions):
        scorers = {s: self.model(s) if s in "ABC" else s for s in systems}
        table = run_condition_matrix(self.test_set, self.trials, scorers, conditions)
        return {(s, c): table.get(s, c).eer for s, c in table.cells}


@pytest.fixture(scope="module")
def regimes():
    return {seed: Regime(seed) for seed in SEEDS}


def median(values):
    return statistics.median(values)


@pytest.mark.acceptance(1, "analytic gradients match central finite differences")
def test_gradient_correctness(record_property):
    start = time.perf_counter()
    checked = worst = worst_abs = 0
    failures = []
    for system in "ABC":
        for seed in range(20):
            model, batch, margin = random_instance(system, 1000 + seed)
            _, grads = backward(batch, model, margin)
            result = compare_grads(grads, finite_diff_grads(batch, model, margin, h=1e-5), skip=near_kink_mask(batch, model))
            checked += result.n_checked
            worst = max(worst, result.worst_rel)
            worst_abs = max(worst_abs, result.worst_abs)
            if not result.ok:
                failures.append((system, seed, result))
        # A spot check at the real layer sizes on a random subset of entries.
        model, batch, margin = random_instance(system, 7, dims=FULL_DIMS, n_pairs=4)
        rng = np.random.default_rng(7)
        entries = {k: rng.choice(v.size, size=min(v.size, 12), replace=False) for k, v in model.params().items()}
        _, grads = backward(batch, model, margin)
        numeric = finite_diff_grads(batch, model, margin, entries=entries)
        result = compare_grads(grads, numeric, skip=near_kink_mask(batch, model))
        checked += result.n_checked
        if not result.ok:
            failures.append((system, "full", result))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{checked} entries, worst abs {worst_abs:.1e}, worst rel above 1e-7 {worst:.1e}, {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 60


@pytest.mark.acceptance(2, "EER and minDCF equal exhaustive-sweep oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        k = int(rng.integers(1, n))
        s = np.round(rng.uniform(-1, 1, n), int(rng.integers(1, 4)))
        tar, non = s[:k].tolist(), s[k:].tolist()
        p = float(rng.choice([0.01, 0.1, 0.5]))
        worst = max(
            worst,
            abs(compute_eer(scoreset(tar, non))[0] - float(oracle_eer(tar, non))),
            abs(compute_min_dcf(scoreset(tar, non), p_target=p)[0] - float(oracle_min_dcf(tar, non, Fraction(p)))),
        )
    third = compute_eer(scoreset([0.9, 0.8, 0.4], [0.6, 0.2, 0.1]))[0]
    flat = compute_min_dcf(scoreset([0.5] * 3, [0.5] * 4))[0]
    record_property("detail", f"worst deviation {worst:.1e}, EER {third:.6f}, flat minDCF {flat}")
    assert worst <= 1e-9
    assert abs(third - 1 / 3) <= 1e-9
    assert flat == 1.0


@pytest.mark.acceptance(3, "System C attention weights form a convex combination")
def test_fusion_invariants(record_property):
    worst_sum = worst_hull = 0.0
    lo_w, hi_w = 1.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = init_model("C", seed)
        model = model.with_params(att_w=model.att_w + rng.normal(0, 0.5, model.att_w.shape))
        face, voice = unit_rows(rng, 8, FACE_DIM), unit_rows(rng, 8, VOICE_DIM)
        z, trace = forward_c(model, face, voice)
        w = trace.weights
        worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
        lo_w, hi_w = min(lo_w, float(w.min())), max(hi_w, float(w.max()))
        lo = np.minimum(trace.proj_face, trace.proj_voice)
        hi = np.maximum(trace.proj_face, trace.proj_voice)
        worst_hull = max(worst_hull, float(np.max(lo - z)), float(np.max(z - hi)))
    record_property("detail", f"max |sum-1| {worst_sum:.1e}, alpha range [{lo_w:.3f}, {hi_w:.3f}]")
    assert worst_sum <= 1e-12
    assert 0.0 < lo_w and hi_w < 1.0
    # z is evaluated in floating point, so allow one rounding step outside the hull.
    assert worst_hull <= 1e-12


@pytest.mark.acceptance(4, "clean-condition ordering on the reference regime")
def test_clean_ordering(regimes, record_property):
    start = time.perf_counter()
    eers = {seed: r.eer(["voice_only", "face_only", "B", "C"], ["clean"]) for seed, r in regimes.items()}
    elapsed = time.perf_counter() - start
    med = {s: median(e[(s, "clean")] for e in eers.values()) for s in ("voice_only", "face_only", "B", "C")}
    record_property(
        "detail",
        ", ".join(f"{s} {100 * v:.2f}%" for s, v in med.items()) + f", {elapsed:.0f}s",
    )
    print({seed: {s: round(100 * v, 2) for (s, _), v in e.items()} for seed, e in eers.items()})
    assert all(e[("face_only", "clean")] < e[("voice_only", "clean")] for e in eers.values())
    assert med["C"] <= med["B"] <= med["voice_only"]
    assert elapsed < 600
    assert med["C"] < med["face_only"]


@pytest.mark.acceptance(5, "System C degrades least under full voice corruption")
def test_voice_corruption_robustness(regimes, record_property):
    conditions = ["clean", "voice_random", "voice_zeros"]
    eers = {seed: r.eer(["A", "B", "C"], conditions) for seed, r in regimes.items()}
    clean_c = median(e[("C", "clean")] for e in eers.values())
    votes = 0
    for e in eers.values():
        drop = {s: e[(s, "voice_random")] - e[(s, "clean")] for s in "ABC"}
        votes += drop["C"] < drop["A"] and drop["C"] < drop["B"] and e[("C", "voice_zeros")] <= 1.5 * clean_c
    drops = {s: median(e[(s, "voice_random")] - e[(s, "clean")] for e in eers.values()) for s in "ABC"}
    record_property(
        "detail",
        "median degradation " + ", ".join(f"{s} {100 * d:+.2f}" for s, d in drops.items()) + f", {votes}/5 seeds",
    )
    print({seed: {f"{s}/{c}": round(100 * v, 2) for (s, c), v in e.items()} for seed, e in eers.items()})
    assert drops["C"] < drops["A"] and drops["C"] < drops["B"]
    assert votes >= 3


@pytest.mark.acceptance(6, "attention turns away from a corrupted modality")
def test_attention_selectivity(record_property):
    gaps = []
    for seed in SEEDS:
        data = generate_synthetic(replace(REGIME, seed=seed))
        spec = CorruptionSpec(target_modality="face", fraction=0.5, seed=seed, renormalize=True)
        noisy = corrupt(data, spec)
        model = train(noisy, TrainConfig(system="C", seed=seed)).model
        alpha_face = forward_c(model, noisy.face, noisy.voice)[1].weights[:, 0]
        hit = np.zeros(len(noisy), dtype=bool)
        hit[corrupted_indices(len(noisy), spec)] = True
        gaps.append(float(alpha_face[~hit].mean() - alpha_face[hit].mean()))
    record_property("detail", "clean minus corrupted mean alpha_f " + ", ".join(f"{g:.3f}" for g in gaps))
    assert all(g > 0 for g in gaps)


@pytest.mark.acceptance(7, "Wald intervals and significance flag")
def test_wald_statistics(record_property):
    half = wald_ci(0.5, 100)
    bald = wald_ci(0.7489, 447)
    record_property("detail", f"hw(0.5,100) {half:.5f}, hw(0.7489,447) {bald:.4f}")
    assert abs(half - 0.09800) <= 1e-5
    assert abs(bald - 0.0402) <= 5e-4
    assert significance_flag(0.70, 0.05)
    assert not significance_flag(0.70, 0.15)
    assert not significance_flag(0.6500, 0.0500)


def _pipeline():
    steps = ["--steps", "5", "--pairs-per-class", "6"]
    calls = [
        ["gen", "--out", "train.jsonl", "--n-identities", "6", "--clips-per-identity", "3"],
        ["gen", "--out", "test.jsonl", "--n-identities", "6", "--clips-per-identity", "3", "--noise-stream", "1"],
        *(["train", "--data", "train.jsonl", "--out", f"{s}.ckpt", "--system", s, *steps] for s in "ABC"),
    ]
    checkpoints = [arg for s in "ABC" for arg in ("--checkpoint", f"{s}=./{s}.ckpt")]
    common = ["--data", "test.jsonl", "--train-data", "train.jsonl", *checkpoints, "--pos-per-identity", "4"]
    calls += [
        ["eval", *common, "--out-dir", "eval"],
        ["robustness", *common, "--fractions", "0.5", "--out-dir", "robust"],
        ["attention", "--data", "test.jsonl", "--checkpoint", "C.ckpt", "--null-attributes-seed", "3", "--out-dir", "att"],
    ]
    for argv in calls:
        assert main(argv) == 0, argv


@pytest.mark.acceptance(8, "identical configs give byte-identical artifacts")
def test_determinism(tmp_path, monkeypatch, record_property):
    runs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        _pipeline()
        runs.append({p.relative_to(tmp_path / name): p.read_bytes() for p in (tmp_path / name).rglob("*") if p.is_file()})
    record_property("detail", f"{len(runs[0])} artifacts compared")
    assert runs[0].keys() == runs[1].keys() and len(runs[0]) > 20
    differing = [str(p) for p in runs[0] if runs[0][p] != runs[1][p]]
    assert not differing, differing


def test_c_beats_b_on_average_under_voice_noise(regimes):
    eers = [r.eer(["B", "C"], ["voice_random"]) for r in regimes.values()]
    mean_b = statistics.fmean(e[("B", "voice_random")] for e in eers)
    mean_c = statistics.fmean(e[("C", "voice_random")] for e in eers)
    assert mean_c < mean_b
