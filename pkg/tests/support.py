"""Shared builders and oracles for the test suite."""

from fractions import Fraction

import numpy as np

from avfusion.fusionnet import init_model
from avfusion.training import DIFFERENT, SAME, PairBatch, forward
from avfusion.verifeval import NONTARGET, TARGET, ScoreSet

GRAD_DIMS = {"face_dim": 6, "voice_dim": 5, "joint_dim": 4, "hidden_dim": 7}


def unit_rows(rng, n, dim):
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def random_instance(system, seed, dims=GRAD_DIMS, n_pairs=8):
    """A perturbed seeded model, a mixed-label batch of unit inputs and a margin
    placed at the median negative distance, so about half the hinges are active."""
    rng = np.random.default_rng(seed)
    model = init_model(system, seed, **dims)
    model = model.with_params(**{k: v + 0.2 * rng.standard_normal(v.shape) for k, v in model.params().items()})
    f, v = dims["face_dim"], dims["voice_dim"]
    batch = PairBatch(
        face_1=unit_rows(rng, n_pairs, f),
        voice_1=unit_rows(rng, n_pairs, v),
        face_2=unit_rows(rng, n_pairs, f),
        voice_2=unit_rows(rng, n_pairs, v),
        labels=np.array([SAME, DIFFERENT] * (n_pairs // 2)),
    )
    z1, _ = forward(model, batch.face_1, batch.voice_1)
    z2, _ = forward(model, batch.face_2, batch.voice_2)
    dist = np.linalg.norm(z1 - z2, axis=1)
    margin = float(np.median(dist[batch.labels == DIFFERENT]))
    return model, batch, margin


# -- exhaustive-sweep metric oracles in exact arithmetic -----------------------


def oracle_thresholds(scores):
    vals = sorted({Fraction(s) for s in scores})
    thr = []
    for i, v in enumerate(vals):
        thr.append(v)
        if i + 1 < len(vals):
            thr.append((v + vals[i + 1]) / 2)
    thr.append(vals[-1] + 1)
    return thr


def oracle_rates(targets, nontargets, t):
    frr = Fraction(sum(1 for s in targets if Fraction(s) < t), len(targets))
    far = Fraction(sum(1 for s in nontargets if Fraction(s) >= t), len(nontargets))
    return frr, far


def oracle_eer(targets, nontargets):
    """Walk thresholds upward; stop at the first point with FAR <= FRR and
    interpolate against the previous point."""
    prev = None
    for t in oracle_thresholds(list(targets) + list(nontargets)):
        frr, far = oracle_rates(targets, nontargets, t)
        if far <= frr:
            if far == frr:
                return frr
            pfrr, pfar = prev
            w = (pfar - pfrr) / ((pfar - pfrr) - (far - frr))
            return pfrr + w * (frr - pfrr)
        prev = (frr, far)
    raise AssertionError("sweep never crossed")


def oracle_min_dcf(targets, nontargets, p_target=Fraction(1, 100), c_miss=1, c_fa=1):
    p = Fraction(p_target)
    norm = min(c_miss * p, c_fa * (1 - p))
    best = None
    for t in oracle_thresholds(list(targets) + list(nontargets)):
        frr, far = oracle_rates(targets, nontargets, t)
        cost = (c_miss * frr * p + c_fa * far * (1 - p)) / norm
        best = cost if best is None else min(best, cost)
    return best


def scoreset(targets, nontargets):
    return ScoreSet(list(targets) + list(nontargets), [TARGET] * len(targets) + [NONTARGET] * len(nontargets))
