"""Shared set-up for the experiment scripts: the reference synthetic regime."""

import argparse
import statistics
import time
from dataclasses import replace

from avfusion.embedspace import SyntheticConfig, generate_synthetic
from avfusion.training import TrainConfig, train
from avfusion.verifeval import build_trials, calibrate_scores, score_trials

REFERENCE = SyntheticConfig(n_identities=50, clips_per_identity=10, face_noise_sigma=0.1, voice_noise_sigma=0.4)


def common_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--systems", nargs="+", default=["A", "B", "C"], choices=["A", "B", "C"])
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--n-identities", type=int, default=REFERENCE.n_identities)
    p.add_argument("--voice-sigma", type=float, default=REFERENCE.voice_noise_sigma)
    p.add_argument("--face-sigma", type=float, default=REFERENCE.face_noise_sigma)
    p.add_argument("--out", help="write the per-seed table as CSV here")
    return p


class SeedRun:
    """Train on noise stream 0 of one seed, evaluate on held-out clips from stream 1."""

    def __init__(self, seed, args):
        cfg = replace(
            REFERENCE,
            seed=seed,
            n_identities=args.n_identities,
            face_noise_sigma=args.face_sigma,
            voice_noise_sigma=args.voice_sigma,
        )
        self.seed = seed
        self.train_set = generate_synthetic(cfg)
        self.test_set = generate_synthetic(replace(cfg, noise_stream=1))
        self.trials = build_trials(self.test_set, 45, 45, seed=0)
        self.train_config = TrainConfig(learning_rate=args.lr, steps=args.steps, seed=seed)
        self.systems = args.systems
        self._models = None

    def scorers(self):
        if self._models is None:
            self._models = {}
            for system in self.systems:
                start = time.perf_counter()
                self._models[system] = train(self.train_set, replace(self.train_config, system=system)).model
                print(f"  seed {self.seed} system {system}: trained in {time.perf_counter() - start:.0f}s", flush=True)
        return {"voice_only": "voice_only", "face_only": "face_only", "score_fusion": "score_fusion", **self._models}

    def calibration(self):
        cal = build_trials(self.train_set, 45, 45, seed=1)
        face = score_trials(self.train_set, cal, "face_only")
        voice = score_trials(self.train_set, cal, "voice_only")
        return calibrate_scores(face.scores, voice.scores, cal.labels)


def median(values):
    return statistics.median(values)
