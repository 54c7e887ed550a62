"""Command-line interface: synth / split / train / eval / diagnose.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Option precedence is flags > --config file (JSON or TOML) > defaults, and
every command writes a run manifest listing its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    try:
        import tomli as tomllib
    except ModuleNotFoundError:
        tomllib = None

import numpy as np

from . import __version__, kernels
from .bias import bias_report_rows, load_extractor, save_extractor
from .data import (Dataset, k_core_filter, kl_divergence_uniform,
                   load_interactions, load_split, save_interactions,
                   save_split, split_random, split_temporal,
                   subgroup_partition)
from .diagnostics import (NegativeSampleSpec, angle_report, bias_correlation,
                          geometry_report, sample_plot_negatives,
                          subgroup_angle_matrix)
from .encoders import (EncoderKind, NormalizedAdjacency, Recommender,
                       load_checkpoint, save_checkpoint)
from .errors import ConfigError
from .evaluator import evaluate, save_report
from .synth import SynthConfig, generate
from .trainer import LOSS_KINDS, TrainConfig, train

log = logging.getLogger("bcrec")

_UNSET = object()


def _parse_sep(raw: str) -> str | None:
    if raw == "ws":
        return None
    return raw.replace("\\t", "\t")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    if p.suffix == ".toml":
        if tomllib is None:
            raise ConfigError("TOML config needs python >= 3.11 or the tomli package")
        with p.open("rb") as fh:
            return tomllib.load(fh)
    with p.open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolve(args: argparse.Namespace, file_cfg: dict, defaults: dict) -> dict:
    """flags > config file > defaults, for the keys named in `defaults`."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, _UNSET)
        if flag is not _UNSET and flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0:
            return desc.stdout.strip()
    except OSError:
        pass
    return __version__


def _write_run_manifest(outdir: Path, command: str, config: dict,
                        inputs: list[Path], outputs: list[str]) -> None:
    # the output directory is not part of the run identity; artifacts are
    # listed relative to it so fixed-seed reruns are byte-identical
    config = {k: v for k, v in config.items() if k != "out"}
    manifest = {
        "schema_version": 1,
        "command": command,
        "config": config,
        "version": _build_version(),
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": sorted(outputs + ["run.json"]),
    }
    with (outdir / "run.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "users": 200, "items": 300, "latent_dim": 8, "zipf_exponent": 1.0,
        "bias_strength": 1.0, "pref_strength": 1.0, "interactions_per_user": 30,
        "truth_per_user": 10, "seed": 0, "out": "synth_out",
    })
    out = _out_dir(cfg)
    sc = SynthConfig(
        num_users=cfg["users"], num_items=cfg["items"], latent_dim=cfg["latent_dim"],
        zipf_exponent=cfg["zipf_exponent"], bias_strength=cfg["bias_strength"],
        pref_strength=cfg["pref_strength"],
        interactions_per_user=cfg["interactions_per_user"],
        truth_per_user=cfg["truth_per_user"], seed=cfg["seed"],
    )
    observed, truth = generate(sc)
    save_interactions(observed, out / "interactions.txt")
    save_interactions(truth, out / "truth.txt")
    manifest = {
        "schema_version": 1,
        "generator": sc.to_dict(),
        "num_users": observed.num_users,
        "num_items": observed.num_items,
        "observed_interactions": len(observed),
        "truth_interactions": len(truth),
        "kl_uniform_observed": kl_divergence_uniform(observed.item_pop),
        "kl_uniform_truth": kl_divergence_uniform(truth.item_pop),
    }
    with (out / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_manifest(out, "synth", cfg, [], ["interactions.txt", "truth.txt", "manifest.json"])
    log.info("synth: %d users, %d items, %d observed interactions",
             observed.num_users, observed.num_items, len(observed))
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "input": None, "strategy": "random", "sep": "\\t", "k_core": 0,
        "balanced_frac": 0.15, "train_frac": 0.60, "val_frac": 0.10,
        "test_frac": 0.15, "temporal_ratios": "7:1:2", "seed": 0, "out": "split_out",
    })
    if not cfg["input"]:
        raise ConfigError("--input is required")
    out = _out_dir(cfg)
    sep = _parse_sep(cfg["sep"])
    ds = load_interactions(cfg["input"], sep=sep)
    if cfg["k_core"] > 0:
        ds = k_core_filter(ds, cfg["k_core"])
        if len(ds) == 0:
            raise ConfigError(f"{cfg['k_core']}-core filtering removed every interaction")

    if cfg["strategy"] == "random":
        split = split_random(ds, cfg["balanced_frac"], cfg["train_frac"],
                             cfg["val_frac"], cfg["test_frac"], seed=cfg["seed"])
    elif cfg["strategy"] == "temporal":
        try:
            ratios = tuple(float(x) for x in cfg["temporal_ratios"].split(":"))
        except ValueError:
            raise ConfigError(f"bad --temporal-ratios {cfg['temporal_ratios']!r}")
        split = split_temporal(ds, ratios, seed=cfg["seed"])
    else:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}")

    extra = {
        "strategy": cfg["strategy"], "seed": cfg["seed"], "k_core": cfg["k_core"],
        "fractions": {k: cfg[k] for k in ("balanced_frac", "train_frac", "val_frac", "test_frac")}
        if cfg["strategy"] == "random" else {"ratios": cfg["temporal_ratios"]},
        "kl_uniform_source": kl_divergence_uniform(ds.item_pop),
    }
    save_split(split, out, sep="\t", extra=extra)
    outputs = ["manifest.json"] + [f"{name}.txt" for name in split.members()]
    _write_run_manifest(out, "split", cfg, [Path(cfg["input"])], outputs)
    log.info("split: %s", {k: len(v) for k, v in split.members().items()})
    return 0


def _encoder_kind(cfg: dict) -> EncoderKind:
    if cfg["encoder"] == "mf":
        return EncoderKind("mf")
    if cfg["encoder"] == "lightgcn":
        return EncoderKind("lightgcn", cfg["layers"])
    raise ConfigError(f"unknown encoder {cfg['encoder']!r}")


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "split_dir": None, "encoder": "mf", "layers": 2, "loss": "softmax",
        "lr": 1e-3, "batch_size": 2048, "dim": 64, "reg": 1e-5,
        "tau1": 0.1, "tau2": 0.1, "num_negatives": None, "neg_mode": None,
        "patience": 10, "max_epochs": 1000, "margin_strength": 1.0,
        "schedule": "joint", "eval_k": 20, "ips_clip_max": None,
        "reg_extractor": True, "cached_propagation": False, "init_std": 0.1,
        "seed": 0, "out": "train_out",
    })
    if not cfg["split_dir"]:
        raise ConfigError("--split-dir is required")
    out = _out_dir(cfg)
    split = load_split(cfg["split_dir"])
    kind = _encoder_kind(cfg)
    tc = TrainConfig(
        loss=cfg["loss"], lr=cfg["lr"], batch_size=cfg["batch_size"], d=cfg["dim"],
        reg=cfg["reg"], tau1=cfg["tau1"], tau2=cfg["tau2"],
        num_negatives=cfg["num_negatives"], neg_mode=cfg["neg_mode"],
        patience=cfg["patience"], max_epochs=cfg["max_epochs"], seed=cfg["seed"],
        margin_strength=cfg["margin_strength"], schedule=cfg["schedule"],
        eval_k=cfg["eval_k"], ips_clip_max=cfg["ips_clip_max"],
        reg_extractor=cfg["reg_extractor"], cached_propagation=cfg["cached_propagation"],
        init_std=cfg["init_std"],
    )
    tc.validate()

    table, pe, report = train(split, kind, tc)
    meta = {"config": {k: v for k, v in cfg.items() if k != "out"},
            "best_epoch": report.best_epoch, "stop_reason": report.stop_reason}
    save_checkpoint(out / "checkpoint.bin", kind, table, meta)
    outputs = ["checkpoint.bin", "metrics.csv"]
    if pe is not None:
        save_extractor(out / "extractor.bin", pe, meta)
        outputs.append("extractor.bin")

    with (out / "metrics.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "extractor_loss", "val_recall", "val_ndcg"])
        for e in range(report.epochs):
            writer.writerow([e + 1, repr(report.train_loss[e]),
                             "" if report.extractor_loss[e] is None else repr(report.extractor_loss[e]),
                             repr(report.val_recall[e]),
                             "" if report.val_ndcg[e] is None else repr(report.val_ndcg[e])])

    inputs = [Path(cfg["split_dir"]) / "manifest.json"]
    _write_run_manifest(out, "train", cfg, inputs, outputs)
    log.info("train: %d epochs, best %d (%s), wall %.1fs",
             report.epochs, report.best_epoch, report.stop_reason, report.wall_time)
    return 0


def _load_member(split_dir: str, member: str) -> tuple[Dataset, Dataset]:
    split = load_split(split_dir)
    members = split.members()
    if member not in members:
        raise ConfigError(f"member {member!r} not in split (has {sorted(members)})")
    return members[member], split.train


def cmd_eval(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "checkpoint": None, "split_dir": None, "member": "test_imbalanced",
        "k": 20, "subgroups": False, "seed": 0, "out": "eval_out",
    })
    for key in ("checkpoint", "split_dir"):
        if not cfg[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    out = _out_dir(cfg)
    kind, table, _ = load_checkpoint(cfg["checkpoint"])
    member, train_ds = _load_member(cfg["split_dir"], cfg["member"])
    adj = NormalizedAdjacency.from_dataset(train_ds) if kind.variant == "lightgcn" else None
    rec = Recommender(kind, table, adj)
    labels = subgroup_partition(train_ds.item_pop) if cfg["subgroups"] else None
    report = evaluate(rec, member, train_ds, subgroups=labels, k=cfg["k"])
    save_report(report, out, member=cfg["member"])
    _write_run_manifest(out, "eval", cfg,
                        [Path(cfg["checkpoint"]), Path(cfg["split_dir"]) / "manifest.json"],
                        ["report.json", "report.csv"])
    if report.overall:
        log.info("eval %s: recall@%d=%.4f ndcg@%d=%.4f hr@%d=%.4f over %d users",
                 cfg["member"], cfg["k"], report.overall.recall, cfg["k"],
                 report.overall.ndcg, cfg["k"], report.overall.hr, report.overall.users)
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "checkpoint": None, "extractor": None, "split_dir": None,
        "which": None, "user": None, "per_user_negatives": 128,
        "full_enumeration": False, "seed": 0, "out": "diagnose_out",
    })
    if not cfg["which"]:
        raise ConfigError("--which is required")
    if not cfg["split_dir"]:
        raise ConfigError("--split-dir is required")
    which = cfg["which"]
    needs_extractor = which in ("bias-corr", "subgroup-matrix", "bias-report")
    if needs_extractor and not cfg["extractor"]:
        raise ConfigError(f"--extractor is required for {which}")
    if which in ("angles", "geometry", "bias-report") and not cfg["checkpoint"]:
        raise ConfigError(f"--checkpoint is required for {which}")

    out = _out_dir(cfg)
    split = load_split(cfg["split_dir"])
    train_ds = split.train
    inputs = [Path(cfg["split_dir"]) / "manifest.json"]

    rec = None
    if cfg["checkpoint"]:
        kind, table, _ = load_checkpoint(cfg["checkpoint"])
        adj = NormalizedAdjacency.from_dataset(train_ds) if kind.variant == "lightgcn" else None
        rec = Recommender(kind, table, adj)
        inputs.append(Path(cfg["checkpoint"]))
    pe = None
    if cfg["extractor"]:
        pe, _ = load_extractor(cfg["extractor"])
        inputs.append(Path(cfg["extractor"]))

    rng = np.random.default_rng(cfg["seed"])
    outputs: list[str] = []

    if which == "angles":
        user = cfg["user"]
        if user is None:
            user = int(np.argmax(train_ds.user_pop))
        positives = sorted(train_ds.user_positives[user])
        if not positives:
            raise ConfigError(f"user {user} has no training positives")
        negatives = sample_plot_negatives(train_ds, user, rng)
        rep = angle_report(rec, user, positives, negatives)
        _dump_json(out / "angles.json", rep.to_dict())
        with (out / "angles.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "positive_count", "negative_count"])
            for b in range(len(rep.positive_hist)):
                w.writerow([rep.bin_edges[b], rep.bin_edges[b + 1],
                            rep.positive_hist[b], rep.negative_hist[b]])
        outputs = ["angles.json", "angles.csv"]

    elif which == "geometry":
        spec = NegativeSampleSpec(per_user=cfg["per_user_negatives"], seed=cfg["seed"],
                                  full_enumeration=cfg["full_enumeration"])
        rep = geometry_report(rec.propagated(), train_ds, spec)
        _dump_json(out / "geometry.json", rep.to_dict())
        with (out / "geometry.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for key, value in rep.to_dict().items():
                if isinstance(value, (int, float)):
                    w.writerow([key, value])
        outputs = ["geometry.json", "geometry.csv"]

    elif which == "bias-corr":
        rep = bias_correlation(pe, train_ds)
        _dump_json(out / "bias_corr.json", rep.to_dict())
        with (out / "bias_corr.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["side", "popularity", "mean_cos_bias"])
            for p, c in zip(rep.item_popularity.tolist(), rep.item_mean_cos.tolist()):
                w.writerow(["item", p, c])
            for p, c in zip(rep.user_popularity.tolist(), rep.user_mean_cos.tolist()):
                w.writerow(["user", p, c])
        outputs = ["bias_corr.json", "bias_corr.csv"]

    elif which == "subgroup-matrix":
        rep = subgroup_angle_matrix(pe, train_ds)
        _dump_json(out / "subgroup_matrix.json", rep)
        with (out / "subgroup_matrix.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_group", "item_group", "mean_angle", "std_angle", "count"])
            for a, ug in enumerate(rep["user_groups"]):
                for b, ig in enumerate(rep["item_groups"]):
                    w.writerow([ug, ig, rep["mean"][a][b], rep["std"][a][b], rep["count"][a][b]])
        outputs = ["subgroup_matrix.json", "subgroup_matrix.csv"]

    elif which == "bias-report":
        from .trainer import _positive_cosines
        theta = np.arccos(_positive_cosines(rec.propagated(), train_ds.users, train_ds.items))
        with (out / "bias_report.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_pop", "item_pop", "cos_bias", "margin"])
            for row in bias_report_rows(pe, train_ds, theta):
                w.writerow(row)
        outputs = ["bias_report.csv"]

    else:
        raise ConfigError(f"unknown diagnostic {which!r}")

    _write_run_manifest(out, "diagnose", cfg, inputs, outputs)
    return 0


def _dump_json(path: Path, payload: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcrec",
                                     description="Collaborative-filtering toolkit with "
                                                 "bias-aware contrastive training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--config", type=str, default=None, help="JSON or TOML config file")
        p.add_argument("--threads", type=int, default=None, help="numba thread count")
        p.add_argument("--log-level", type=str, default="info",
                       choices=["debug", "info", "warning", "error"])

    p = sub.add_parser("synth", help="generate a synthetic long-tail dataset")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--items", type=int, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--zipf-exponent", dest="zipf_exponent", type=float, default=None)
    p.add_argument("--bias-strength", dest="bias_strength", type=float, default=None)
    p.add_argument("--pref-strength", dest="pref_strength", type=float, default=None)
    p.add_argument("--interactions-per-user", dest="interactions_per_user", type=int, default=None)
    p.add_argument("--truth-per-user", dest="truth_per_user", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="filter and split an interaction log")
    p.add_argument("--input", type=str, default=None, required=False)
    p.add_argument("--strategy", type=str, default=None, choices=["random", "temporal"])
    p.add_argument("--sep", type=str, default=None,
                   help=r"field separator; '\t' for tab, 'ws' for any whitespace")
    p.add_argument("--k-core", dest="k_core", type=int, default=None)
    p.add_argument("--balanced-frac", dest="balanced_frac", type=float, default=None)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=None)
    p.add_argument("--val-frac", dest="val_frac", type=float, default=None)
    p.add_argument("--test-frac", dest="test_frac", type=float, default=None)
    p.add_argument("--temporal-ratios", dest="temporal_ratios", type=str, default=None)
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train an encoder on a saved split")
    p.add_argument("--split-dir", dest="split_dir", type=str, default=None)
    p.add_argument("--encoder", type=str, default=None, choices=["mf", "lightgcn"])
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--loss", type=str, default=None, choices=list(LOSS_KINDS))
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--reg", type=float, default=None)
    p.add_argument("--tau1", type=float, default=None)
    p.add_argument("--tau2", type=float, default=None)
    p.add_argument("--num-negatives", dest="num_negatives", type=int, default=None)
    p.add_argument("--neg-mode", dest="neg_mode", type=str, default=None,
                   choices=["sampled", "in_batch"])
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--margin-strength", dest="margin_strength", type=float, default=None)
    p.add_argument("--schedule", type=str, default=None, choices=["joint", "two_phase"])
    p.add_argument("--eval-k", dest="eval_k", type=int, default=None)
    p.add_argument("--ips-clip-max", dest="ips_clip_max", type=float, default=None)
    p.add_argument("--no-reg-extractor", dest="reg_extractor", action="store_false", default=None)
    p.add_argument("--cached-propagation", dest="cached_propagation",
                   action="store_true", default=None)
    p.add_argument("--init-std", dest="init_std", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="all-ranking evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--split-dir", dest="split_dir", type=str, default=None)
    p.add_argument("--member", type=str, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--subgroups", action="store_true", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="geometric and bias diagnostics")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--extractor", type=str, default=None)
    p.add_argument("--split-dir", dest="split_dir", type=str, default=None)
    p.add_argument("--which", type=str, default=None,
                   choices=["angles", "geometry", "bias-corr", "subgroup-matrix", "bias-report"])
    p.add_argument("--user", type=int, default=None)
    p.add_argument("--per-user-negatives", dest="per_user_negatives", type=int, default=None)
    p.add_argument("--full-enumeration", dest="full_enumeration",
                   action="store_true", default=None)
    common(p)
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        kernels.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.error("%s", exc, exc_info=args.log_level == "debug")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
