"""Batch command-line interface.

Every command resolves its settings as defaults <- ``--config`` file <- flags
and writes the resolved set to ``<out>/config.txt``; that file alone can be
passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 contract violation.
"""

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .aspects import ASPECTS, DEFAULT_TEMPLATE
from .errors import ConfigError, ContractViolation, DataError, NumericError, StclipError, UsageError
from .model import ABLATIONS, DESK_CONFIG, context_vectors, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger("stclip")

COMMANDS = ("synth", "match", "featurize", "train", "eval", "describe", "gradcheck", "export-attn")

# key -> (type, default); "list" values are comma separated in config files
SETTINGS = {
    "seed": (int, 0), "out": (str, None), "threads": (int, 1),
    "data": (str, None), "stats": (str, None), "checkpoint": (str, None),
    # model
    "nw": (int, DESK_CONFIG.n_w), "ablate": ("list", ()), "class_pos": (str, DESK_CONFIG.class_pos),
    "prompt_len": (int, DESK_CONFIG.prompt_len), "dim": (int, DESK_CONFIG.dim),
    "prop_dim": (int, DESK_CONFIG.prop_dim), "patches": (int, DESK_CONFIG.patches),
    "layers": (int, DESK_CONFIG.layers), "heads": (int, DESK_CONFIG.heads),
    "cm_heads": (int, DESK_CONFIG.cm_heads), "text_layers": (int, DESK_CONFIG.text_layers),
    "text_heads": (int, DESK_CONFIG.text_heads), "mu": (float, DESK_CONFIG.mu),
    "context_gain": (float, DESK_CONFIG.context_gain), "image_bias": (float, DESK_CONFIG.image_bias),
    "residual": (bool, DESK_CONFIG.residual), "stub_seed": (int, DESK_CONFIG.stub_seed),
    # training
    "shots": (int, 16), "batch_size": (int, 32), "lr": (float, 0.5), "epochs": (int, None),
    "split_seed": (int, 0),
    # synthetic world
    "grid": (int, 8), "per_class": (int, 72), "latent_dim": (int, 16), "gps_sigma": (float, 0.0),
    "gps_spacing": (float, 40.0),
    # map matching
    "match_sigma": (float, 20.0), "radius": (float, 100.0), "candidates": (int, 8),
    # evaluation and export
    "split": (str, "test"), "samples": (str, None), "template": (str, None), "predictions": (str, None),
}
SHOT_CHOICES = (1, 2, 4, 8, 16)
SPLITS = ("test", "train", "all")


def _parse_value(key, text):
    kind = SETTINGS[key][0]
    text = text.strip()
    if kind == "list":
        return tuple(v.strip() for v in text.split(",") if v.strip())
    if text in ("", "None") and kind is not bool:
        return None
    if kind is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(value)
    return "None" if value is None else str(value)


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise ConfigError(f"{path}:{n}: unknown setting {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve_config(args):
    """defaults <- config file <- explicit flags."""
    cfg = {k: v for k, (_, v) in SETTINGS.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key, value in (args.set or []):
        cfg[key] = value
    for key in SETTINGS:
        flag = getattr(args, key, None)
        if flag is not None and flag != ():
            cfg[key] = tuple(flag) if isinstance(flag, list) else flag
    if cfg["shots"] not in SHOT_CHOICES:
        raise ConfigError(f"shots must be one of {SHOT_CHOICES}")
    bad = set(cfg["ablate"]) - set(ABLATIONS)
    if bad:
        raise ConfigError(f"unknown ablation flag(s) {sorted(bad)}")
    if cfg["split"] not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    return cfg


def echo_config(cfg, command):
    path = os.path.join(cfg["out"], "config.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# stclip {command}\n")
        for key in sorted(SETTINGS):
            f.write(f"{key}={_format_value(cfg[key])}\n")
    return path


def model_config(cfg, latent_dim):
    return replace(DESK_CONFIG, dim=cfg["dim"], prompt_len=cfg["prompt_len"], prop_dim=cfg["prop_dim"],
                   patches=cfg["patches"], latent_dim=latent_dim, n_w=cfg["nw"], layers=cfg["layers"],
                   heads=cfg["heads"], cm_heads=cfg["cm_heads"], text_layers=cfg["text_layers"],
                   text_heads=cfg["text_heads"], mu=cfg["mu"], class_pos=cfg["class_pos"],
                   ablations=tuple(cfg["ablate"]), stub_seed=cfg["stub_seed"], context_gain=cfg["context_gain"],
                   image_bias=cfg["image_bias"], residual=cfg["residual"]).validate()


def _require(cfg, *keys):
    for key in keys:
        if not cfg.get(key):
            raise UsageError(f"missing required setting {key!r} (flag --{key.replace('_', '-')})")


def _load(cfg, vocab=None):
    from .dataset import load_dataset
    _require(cfg, "data")
    if not os.path.isdir(cfg["data"]):
        raise DataError(f"data directory {cfg['data']} does not exist")
    return load_dataset(cfg["data"], cfg["nw"], vocab, cfg["stats"])


def _load_checkpoint(cfg):
    _require(cfg, "checkpoint")
    try:
        return load_checkpoint(cfg["checkpoint"])
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {cfg['checkpoint']}: {exc.strerror}") from None


def _selected_rows(cfg, ds, extra):
    """Rows named by ``samples`` if given, else the configured split."""
    if cfg["samples"]:
        text = cfg["samples"]
        if text.startswith("@"):
            with open(text[1:], encoding="utf-8") as f:
                names = [ln.strip() for ln in f if ln.strip()]
        else:
            names = [s.strip() for s in text.split(",") if s.strip()]
        where = {p: i for i, p in enumerate(ds.paths)}
        missing = [n for n in names if n not in where]
        if missing:
            raise DataError(f"unknown sample(s): {', '.join(missing[:5])}")
        return np.array([where[n] for n in names], dtype=int)
    if cfg["split"] == "all":
        return np.arange(len(ds))
    if cfg["split"] == "train":
        return np.asarray(extra.get("train_rows", []), dtype=int)
    from .experiment import train_test_split
    return train_test_split(len(ds), extra.get("split_seed", cfg["split_seed"]))[1]


# commands -----------------------------------------------------------------------

def cmd_synth(cfg):
    from .synth import SynthConfig, generate_dataset, write_dataset
    sc = SynthConfig(seed=cfg["seed"], grid=cfg["grid"], per_class=cfg["per_class"], latent_dim=cfg["latent_dim"],
                     gps_sigma=cfg["gps_sigma"], gps_spacing=cfg["gps_spacing"])
    data = generate_dataset(sc)
    write_dataset(cfg["out"], data, sc)
    log.info("wrote %d samples and %d trips to %s", len(data.records), len(data.trips), cfg["out"])


def cmd_match(cfg):
    from .mapmatch import (DYNAMIC_STATS_FILE, GPS_FILE, MATCHED_FILE, MatchParams, compute_dynamic_stats,
                           match_trajectories, read_gps_csv, write_dynamic_stats_csv, write_matched_csv)
    from .roadnet import load_road_network
    _require(cfg, "data")
    network = load_road_network(cfg["data"])
    gps_path = os.path.join(cfg["data"], GPS_FILE)
    if not os.path.exists(gps_path):
        raise DataError(f"{gps_path} does not exist")
    params = MatchParams(radius=cfg["radius"], k=cfg["candidates"], sigma=cfg["match_sigma"])
    matched, failures = match_trajectories(read_gps_csv(gps_path), network, params, cfg["threads"])
    write_matched_csv(os.path.join(cfg["out"], MATCHED_FILE), matched)
    write_dynamic_stats_csv(os.path.join(cfg["out"], DYNAMIC_STATS_FILE), compute_dynamic_stats(matched, network))
    with open(os.path.join(cfg["out"], "match_failures.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("traj_id", "error"))
        for tid in sorted(failures):
            w.writerow((tid, failures[tid]))
    log.info("matched %d trajectories, %d failed", len(matched), len(failures))


def cmd_featurize(cfg):
    from .model import Batch
    if cfg["checkpoint"]:
        state, _ = _load_checkpoint(cfg)
        ds, _, _ = _load(cfg, state.vocab)
    else:
        ds, vocab, _ = _load(cfg)
        state = init_model(model_config(cfg, ds.latents.shape[1]), vocab, cfg["seed"])
    # r never looks at the image, so the image arrays are empty placeholders
    no_image = np.zeros((len(ds), 0, state.config.dim))
    r = context_vectors(state, Batch(ds.indices, ds.mask, no_image, no_image.sum(axis=1))).data
    with open(os.path.join(cfg["out"], "context_vectors.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image_path",) + tuple(f"r{j}" for j in range(r.shape[1])))
        for path, row in zip(ds.paths, r):
            w.writerow((path,) + tuple(repr(float(v)) for v in row))


def cmd_train(cfg):
    from .experiment import train_test_split
    from .training import TrainConfig, few_shot_sample, train, write_training_log
    ds, vocab, _ = _load(cfg)
    mcfg = model_config(cfg, ds.latents.shape[1])
    tcfg = TrainConfig(shots=cfg["shots"], batch_size=cfg["batch_size"], lr=cfg["lr"], epochs=cfg["epochs"],
                       seed=cfg["seed"]).validate()
    pool, _ = train_test_split(len(ds), cfg["split_seed"])
    rows = pool[few_shot_sample(ds.labels[pool], tcfg.shots, tcfg.seed)]
    state = init_model(mcfg, vocab, tcfg.seed)
    state, history = train(state, ds.batch(state, rows), tcfg)
    write_training_log(os.path.join(cfg["out"], "training_log.csv"), history, mcfg.aspects)
    save_checkpoint(os.path.join(cfg["out"], "checkpoint.bin"), state,
                    {"seed": tcfg.seed, "shots": tcfg.shots, "split_seed": cfg["split_seed"],
                     "train_rows": [int(i) for i in rows]})
    with open(os.path.join(cfg["out"], "train_samples.txt"), "w", encoding="utf-8") as f:
        f.writelines(ds.paths[i] + "\n" for i in rows)
    log.info("trained on %d samples for %d epochs", len(rows), tcfg.resolved_epochs())


def cmd_eval(cfg):
    from .evaluation import (evaluate, predict_aspects, read_predictions_csv, write_confusion_csv,
                             write_metrics_csv, write_predictions_csv)
    if cfg["predictions"]:
        ds, _, _ = _load(cfg)
        table = read_predictions_csv(cfg["predictions"])
        where = {p: i for i, p in enumerate(ds.paths)}
        unknown = [s for s in table if s not in where]
        if unknown:
            raise DataError(f"predictions name unknown sample(s): {', '.join(sorted(unknown)[:5])}")
        ids = sorted(table, key=where.get)
        pred = np.array([table[s] for s in ids], dtype=int).reshape(len(ids), len(ASPECTS))
        report = evaluate(pred, ds.labels[[where[s] for s in ids]])
    else:
        state, extra = _load_checkpoint(cfg)
        ds, _, _ = _load(cfg, state.vocab)
        rows = _selected_rows(cfg, ds, extra)
        preds = predict_aspects(state, ds.batch(state, rows))
        pred = np.array([[p.index for p in ps] for ps in preds], dtype=int).reshape(len(rows), -1)
        report = evaluate(pred, ds.labels[rows], state.config.aspects)
        write_predictions_csv(os.path.join(cfg["out"], "predictions.csv"), [ds.paths[i] for i in rows], preds)
    write_metrics_csv(os.path.join(cfg["out"], "metrics.csv"), report)
    write_confusion_csv(os.path.join(cfg["out"], "confusion.csv"), report)
    for m in report:
        print(f"{m.aspect}\tACC {m.accuracy:.3f}\tF1 {m.macro_f1:.3f}")


def cmd_describe(cfg):
    from .evaluation import predict_aspects, render_description
    template = DEFAULT_TEMPLATE
    if cfg["template"]:
        with open(cfg["template"], encoding="utf-8") as f:
            template = f.read().strip()
    state, extra = _load_checkpoint(cfg)
    ds, _, _ = _load(cfg, state.vocab)
    rows = _selected_rows(cfg, ds, extra)
    preds = predict_aspects(state, ds.batch(state, rows))
    with open(os.path.join(cfg["out"], "descriptions.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("sample_id", "description"))
        for i, ps in zip(rows, preds):
            w.writerow((ds.paths[i], render_description(ps, template, state.config.aspects)))


def cmd_gradcheck(cfg):
    from .gradcheck import run_gradcheck
    result = run_gradcheck(seed=cfg["seed"])
    with open(os.path.join(cfg["out"], "gradcheck.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("parameter", "partition", "value"))
        for name in sorted(result.errors):
            w.writerow((name, "trainable", format(result.errors[name], ".3e")))
        for name in sorted(result.frozen_nonzero):
            w.writerow((name, "frozen", result.frozen_nonzero[name]))
    print(f"max relative error {result.max_error:.3e} (tolerance {result.tolerance:g}); "
          f"frozen nonzero entries {sum(result.frozen_nonzero.values())}")
    if result.max_error >= result.tolerance:
        raise NumericError("gradient check failed")
    if any(result.frozen_nonzero.values()):
        raise ContractViolation("frozen parameters received gradient")


def cmd_export_attn(cfg):
    from .evaluation import export_attention
    state, extra = _load_checkpoint(cfg)
    ds, _, _ = _load(cfg, state.vocab)
    rows = _selected_rows(cfg, ds, extra)
    export_attention(state, ds.batch(state, rows), os.path.join(cfg["out"], "attention.txt"),
                     [ds.paths[i] for i in rows])


HANDLERS = {"synth": cmd_synth, "match": cmd_match, "featurize": cmd_featurize, "train": cmd_train,
            "eval": cmd_eval, "describe": cmd_describe, "gradcheck": cmd_gradcheck, "export-attn": cmd_export_attn}


def _setting(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    key, value = text.split("=", 1)
    key = key.strip().replace("-", "_")
    if key not in SETTINGS:
        raise argparse.ArgumentTypeError(f"unknown setting {key!r}")
    try:
        return key, _parse_value(key, value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = argparse.ArgumentParser(
        prog="stclip", description=__doc__.split("\n\n")[0],
        epilog="exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 contract violation",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--set", action="append", type=_setting, metavar="KEY=VALUE",
                   help="override any setting (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--stats", help="dynamic stats CSV overriding the dataset's own")
    p.add_argument("--checkpoint")
    p.add_argument("--shots", type=int, choices=SHOT_CHOICES)
    p.add_argument("--nw", type=int, help="tracklet half-width N_w")
    p.add_argument("--ablate", action="append", choices=ABLATIONS, help="ablation flag (repeatable)")
    p.add_argument("--class-pos", dest="class_pos", choices=("start", "middle", "end"))
    p.add_argument("--prompt-len", dest="prompt_len", type=int, metavar="M")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--samples", help="comma separated sample ids, or @file with one per line")
    p.add_argument("--template", help="description template file")
    p.add_argument("--predictions", help="score an existing predictions CSV instead of a checkpoint")
    p.add_argument("--threads", type=int, help="worker cap")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _require(cfg, "out")
        os.makedirs(cfg["out"], exist_ok=True)
        echo_config(cfg, args.command)
        HANDLERS[args.command](cfg)
    except StclipError as exc:
        print(f"stclip {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stclip {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
