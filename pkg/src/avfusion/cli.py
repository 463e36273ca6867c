"""Command-line entry point: ``avfusion {gen,train,eval,robustness,attention}``.

Each subcommand reads an optional JSON config file (``--config``) holding
``format_version`` plus any of its fields; command-line flags override the file,
and the file overrides built-in defaults. Output locations are not part of the
manifest, so the same run written to two directories gives identical bytes.

Exit status: 0 success, 2 config or input validation, 3 numerical failure,
4 other I/O failure.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

from . import attnstats, embedspace, fusionnet, training, verifeval
from ._io import atomic_write_text, make_manifest
from .errors import AVFusionError, ConfigError, Divergence, MissingCheckpoint

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# Keys naming where results go; kept out of the manifest.
OUTPUT_KEYS = {"out", "out_dir", "loss_csv"}

_SYNTH = {f.name: f.default for f in fields(embedspace.SyntheticConfig)}
_TRAIN = {f.name: f.default for f in fields(training.TrainConfig)}

_METRIC = {
    "data": None,
    "train_data": None,
    "checkpoints": {},
    "systems": list(verifeval.ALL_SYSTEMS),
    "pos_per_identity": 45,
    "neg_per_identity": 45,
    "trial_seed": 0,
    "calibration_seed": 1,
    "p_target": 0.01,
    "c_miss": 1.0,
    "c_fa": 1.0,
    "out_dir": None,
}

DEFAULTS = {
    "gen": {
        "out": None,
        **_SYNTH,
        "corrupt_modality": None,
        "corrupt_mode": "random_standard_normal",
        "corrupt_fraction": 0.5,
        "corrupt_seed": 0,
        "corrupt_renormalize": True,
    },
    "train": {"data": None, "out": None, "loss_csv": None, **_TRAIN},
    "eval": dict(_METRIC),
    "robustness": {
        **_METRIC,
        "conditions": list(verifeval.CONDITIONS),
        "corruption_seed": 0,
        "renormalize_noise": True,
        "fractions": [],
    },
    "attention": {
        "data": None,
        "checkpoint": None,
        "attributes": None,
        "null_attributes_seed": None,
        "level": 0.95,
        "out_dir": None,
    },
}

REQUIRED = {
    "gen": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "out_dir"),
    "robustness": ("data", "out_dir"),
    "attention": ("data", "checkpoint", "out_dir"),
}


def _checkpoint_arg(text):
    system, sep, path = text.partition("=")
    if not sep or system not in fusionnet.SYSTEMS or not path:
        raise argparse.ArgumentTypeError(f"expected SYSTEM=PATH with SYSTEM in A/B/C, got {text!r}")
    return system, path


def _csv_list(cast=str):
    def parse(text):
        return [cast(x) for x in text.split(",") if x]

    return parse


def build_parser():
    parser = argparse.ArgumentParser(prog="avfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file")
        return p

    p = command("gen", "generate a synthetic paired embedding dataset")
    p.add_argument("--out")
    p.add_argument("--n-identities", dest="n_identities", type=int)
    p.add_argument("--clips-per-identity", dest="clips_per_identity", type=int)
    p.add_argument("--face-sigma", dest="face_noise_sigma", type=float)
    p.add_argument("--voice-sigma", dest="voice_noise_sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-stream", dest="noise_stream", type=int)
    p.add_argument("--segment-length", dest="segment_length_sec", type=float)
    p.add_argument("--corrupt-modality", dest="corrupt_modality", choices=embedspace.MODALITIES)
    p.add_argument("--corrupt-mode", dest="corrupt_mode", choices=("random_standard_normal", "zeros"))
    p.add_argument("--corrupt-fraction", dest="corrupt_fraction", type=float)
    p.add_argument("--corrupt-seed", dest="corrupt_seed", type=int)

    p = command("train", "train one fusion system with the contrastive loss")
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--system", choices=fusionnet.SYSTEMS)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--pairs-per-class", dest="pairs_per_class", type=int)
    p.add_argument("--seed", type=int)

    for name, help_text in (
        ("eval", "verification metrics for every requested system"),
        ("robustness", "metrics under corrupted and missing modalities"),
    ):
        p = command(name, help_text)
        p.add_argument("--data", help="evaluation dataset")
        p.add_argument("--train-data", dest="train_data", help="dataset for score-fusion calibration")
        p.add_argument("--checkpoint", dest="checkpoints", type=_checkpoint_arg, action="append")
        p.add_argument("--systems", type=_csv_list())
        p.add_argument("--pos-per-identity", dest="pos_per_identity", type=int)
        p.add_argument("--neg-per-identity", dest="neg_per_identity", type=int)
        p.add_argument("--trial-seed", dest="trial_seed", type=int)
        p.add_argument("--calibration-seed", dest="calibration_seed", type=int)
        p.add_argument("--p-target", dest="p_target", type=float)
        p.add_argument("--c-miss", dest="c_miss", type=float)
        p.add_argument("--c-fa", dest="c_fa", type=float)
        p.add_argument("--out-dir", dest="out_dir")
        if name == "robustness":
            p.add_argument("--conditions", type=_csv_list())
            p.add_argument("--corruption-seed", dest="corruption_seed", type=int)
            p.add_argument("--fractions", type=_csv_list(float), help="extra corruption fractions to sweep")
            p.add_argument("--raw-noise", dest="renormalize_noise", action="store_false")

    p = command("attention", "log System C attention and relate it to attributes")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--attributes", help="attribute file (JSON lines)")
    p.add_argument("--null-attributes-seed", dest="null_attributes_seed", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    return parser


def resolve_config(command, args):
    """Defaults, then the config file, then explicit flags."""
    config = json.loads(json.dumps(DEFAULTS[command]))
    path = args.pop("config", None)
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        version = loaded.pop("format_version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config format_version must be {CONFIG_VERSION}, got {version!r}")
        unknown = sorted(set(loaded) - set(config))
        if unknown:
            raise ConfigError(f"unknown config fields for {command}: {', '.join(unknown)}")
        config.update(loaded)
    if "checkpoints" in args:
        args["checkpoints"] = {**config.get("checkpoints", {}), **dict(args["checkpoints"])}
    config.update(args)
    missing = [k for k in REQUIRED[command] if config.get(k) is None]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    return config


def _manifest(command, config):
    return make_manifest(command, {k: v for k, v in config.items() if k not in OUTPUT_KEYS})


def _need_file(path, field):
    if not os.path.isfile(path):
        raise ConfigError(f"{field}: file not found: {path}")
    return path


def _synthetic_config(config):
    kwargs = {k: config[k] for k in _SYNTH}
    return embedspace.SyntheticConfig(**kwargs)


def cmd_gen(config):
    synth = _synthetic_config(config)
    dataset = embedspace.generate_synthetic(synth)
    n_corrupt = 0
    if config["corrupt_modality"] is not None:
        spec = embedspace.CorruptionSpec(
            target_modality=config["corrupt_modality"],
            mode=config["corrupt_mode"],
            fraction=config["corrupt_fraction"],
            seed=config["corrupt_seed"],
            renormalize=config["corrupt_renormalize"],
        )
        spec.validate()
        dataset = embedspace.corrupt(dataset, spec)
        n_corrupt = len(embedspace.corrupted_indices(len(dataset), spec))
    embedspace.write_dataset(dataset, config["out"], manifest=_manifest("gen", config))
    print(
        f"wrote {config['out']}: {len(dataset)} samples, {synth.n_identities} identities, "
        f"{synth.clips_per_identity} clips each, {n_corrupt} corrupted"
    )


def cmd_train(config):
    tc = training.TrainConfig(**{k: config[k] for k in _TRAIN})
    tc.validate()
    dataset = embedspace.read_dataset(_need_file(config["data"], "data"))
    dims = {"face_dim": dataset.face_dim, "voice_dim": dataset.voice_dim}
    result = training.train(dataset, tc, dims=dims)
    manifest = _manifest("train", config)
    fusionnet.save_model(result.model, config["out"], seed=tc.seed, metadata={"manifest": manifest})
    loss_csv = config["loss_csv"] or os.path.splitext(config["out"])[0] + ".loss.csv"
    training.write_loss_csv(result.loss_history, loss_csv, manifest=manifest)
    final = result.loss_history[-1] if result.loss_history else float("nan")
    print(
        f"trained System {tc.system}: {tc.steps} steps, {result.model.n_params()} parameters, "
        f"final loss {final:.6g}; wrote {config['out']} and {loss_csv}"
    )


def _load_systems(config):
    """Scorer mapping for the requested systems, plus a calibration model if score fusion is requested."""
    systems = {}
    for name in config["systems"]:
        if name not in verifeval.ALL_SYSTEMS:
            raise ConfigError(f"unknown system {name!r}; choose from {', '.join(verifeval.ALL_SYSTEMS)}")
        if name in verifeval.UNIMODAL or name == "score_fusion":
            systems[name] = name
            continue
        path = config["checkpoints"].get(name)
        if path is None:
            raise MissingCheckpoint(f"System {name} requested but no checkpoint given")
        systems[name] = fusionnet.load_model(_need_file(path, f"checkpoint {name}"), system=name)
    calibration = None
    if "score_fusion" in systems:
        if config["train_data"] is None:
            raise MissingCheckpoint("score_fusion needs train_data to fit its calibration")
        cal_data = embedspace.read_dataset(_need_file(config["train_data"], "train_data"))
        cal_trials = verifeval.build_trials(
            cal_data, config["pos_per_identity"], config["neg_per_identity"], config["calibration_seed"]
        )
        face = verifeval.score_trials(cal_data, cal_trials, "face_only")
        voice = verifeval.score_trials(cal_data, cal_trials, "voice_only")
        calibration = verifeval.calibrate_scores(face.scores, voice.scores, cal_trials.labels)
    return systems, calibration


def _prepare_eval(config):
    dataset = embedspace.read_dataset(_need_file(config["data"], "data"))
    systems, calibration = _load_systems(config)
    trials = verifeval.build_trials(
        dataset, config["pos_per_identity"], config["neg_per_identity"], config["trial_seed"]
    )
    return dataset, systems, calibration, trials


def _write_table(table, out_dir, stem, manifest, title):
    atomic_write_text(os.path.join(out_dir, f"{stem}.csv"), verifeval.format_table_csv(table, manifest))
    atomic_write_text(os.path.join(out_dir, f"{stem}.txt"), verifeval.format_table_text(table, title))


def cmd_eval(config):
    dataset, systems, calibration, trials = _prepare_eval(config)
    out_dir = config["out_dir"]
    manifest = _manifest("eval", config)
    scored = verifeval.score_condition(dataset, trials, systems, calibration)
    table = verifeval.ConditionTable(systems=list(systems), conditions=["clean"])
    for name in systems:
        table.cells[(name, "clean")] = verifeval.evaluate(
            scored[name], config["p_target"], config["c_miss"], config["c_fa"]
        )
        path = os.path.join(out_dir, "scores", f"{name}.csv")
        atomic_write_text(path, verifeval.format_scores_csv(scored[name], manifest))
    verifeval.write_trials(trials, dataset, os.path.join(out_dir, "trials.jsonl"), manifest)
    _write_table(table, out_dir, "report", manifest, "Person verification performance")
    print(f"{trials.n_target} target / {trials.n_nontarget} non-target trials, {len(systems)} systems")
    print(verifeval.format_table_text(table), end="")


def cmd_robustness(config):
    dataset, systems, calibration, trials = _prepare_eval(config)
    out_dir = config["out_dir"]
    manifest = _manifest("robustness", config)
    common = dict(
        calibration=calibration,
        corruption_seed=config["corruption_seed"],
        p_target=config["p_target"],
        c_miss=config["c_miss"],
        c_fa=config["c_fa"],
        renormalize_noise=config["renormalize_noise"],
    )
    for condition in config["conditions"]:
        if condition not in verifeval.CONDITIONS:
            raise ConfigError(f"unknown condition {condition!r}")
    table = verifeval.run_condition_matrix(dataset, trials, systems, config["conditions"], **common)
    _write_table(table, out_dir, "robustness", manifest, "Performance under corrupted and missing modality")
    corrupted = [c for c in config["conditions"] if c != "clean"]
    for fraction in config["fractions"]:
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"fractions must lie in [0, 1], got {fraction}")
        sweep = verifeval.run_condition_matrix(dataset, trials, systems, corrupted, fraction=fraction, **common)
        _write_table(sweep, out_dir, f"robustness_f{fraction:g}", manifest, f"Corruption fraction {fraction:g}")
    print(
        f"{len(systems)} systems x {len(config['conditions'])} conditions, "
        f"{len(config['fractions'])} fraction sweeps, {len(trials.labels)} trials"
    )
    print(verifeval.format_table_text(table), end="")


def cmd_attention(config):
    dataset = embedspace.read_dataset(_need_file(config["data"], "data"))
    model = fusionnet.load_model(_need_file(config["checkpoint"], "checkpoint"), system="C")
    out_dir = config["out_dir"]
    manifest = _manifest("attention", config)
    log = attnstats.AttentionLog.from_model(model, dataset)
    if config["attributes"] is not None:
        table = attnstats.read_attributes(_need_file(config["attributes"], "attributes"))
    elif config["null_attributes_seed"] is not None:
        table = attnstats.random_attribute_table(log.keys(), config["null_attributes_seed"])
        attnstats.write_attributes(table, os.path.join(out_dir, "attributes.jsonl"), manifest)
    else:
        raise ConfigError("attention needs an attributes file or null_attributes_seed")
    joined = attnstats.join_attributes(log, table)
    rows = attnstats.emit_stat_report(log, joined, config["level"])
    atomic_write_text(os.path.join(out_dir, "attention_log.csv"), attnstats.format_attention_log(log, manifest))
    atomic_write_text(os.path.join(out_dir, "attention_report.csv"), attnstats.format_report_csv(rows, manifest))
    atomic_write_text(os.path.join(out_dir, "attention_report.txt"), attnstats.format_report_text(rows))
    mean_face, mean_voice = attnstats.global_mean_attention(log)
    n_sig = sum(r.significant for r in rows)
    print(
        f"{len(log)} samples logged, mean alpha face {mean_face:.4f} / voice {mean_voice:.4f}, "
        f"{n_sig} of {len(rows)} rows significant"
    )


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "attention": cmd_attention,
}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = vars(ns)
    command = args.pop("command")
    try:
        config = resolve_config(command, args)
        COMMANDS[command](config)
    except Divergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AVFusionError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
