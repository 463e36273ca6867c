"""Train System C with one modality replaced by noise on a fraction of clips and
compare its attention on corrupted versus clean clips.

    python scripts/attention_selectivity.py --modality voice --fraction 0.5
"""

from dataclasses import replace

import numpy as np
from regime import REFERENCE, common_parser

from avfusion.embedspace import CorruptionSpec, corrupt, corrupted_indices, generate_synthetic
from avfusion.fusionnet import forward_c
from avfusion.training import TrainConfig, train


def main():
    p = common_parser(__doc__.splitlines()[0])
    p.add_argument("--modality", choices=["face", "voice"], default="face")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--raw-noise", action="store_true")
    args = p.parse_args()

    column = 0 if args.modality == "face" else 1
    for seed in args.seeds:
        cfg = replace(
            REFERENCE,
            seed=seed,
            n_identities=args.n_identities,
            face_noise_sigma=args.face_sigma,
            voice_noise_sigma=args.voice_sigma,
        )
        data = generate_synthetic(cfg)
        spec = CorruptionSpec(args.modality, fraction=args.fraction, seed=seed, renormalize=not args.raw_noise)
        noisy = corrupt(data, spec)
        model = train(noisy, TrainConfig(system="C", learning_rate=args.lr, steps=args.steps, seed=seed)).model
        alpha = forward_c(model, noisy.face, noisy.voice)[1].weights[:, column]
        hit = np.zeros(len(noisy), dtype=bool)
        hit[corrupted_indices(len(noisy), spec)] = True
        print(
            f"seed {seed}: mean alpha_{args.modality[0]} clean {alpha[~hit].mean():.4f}"
            f"  corrupted {alpha[hit].mean():.4f}  gap {alpha[~hit].mean() - alpha[hit].mean():+.4f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
