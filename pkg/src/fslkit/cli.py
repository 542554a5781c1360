"""Command-line pipeline driver.

Each subcommand reads the experiment config, consumes the artifacts of
earlier stages from the output directory, and writes its own artifacts plus
a manifest recording the config hash and the hashes of every input and
output. Commands are idempotent: rerunning with unchanged inputs rewrites
byte-identical files.

Exit codes: 0 success, 1 usage/config error, 2 runtime numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import datastore, evaluate, trainers
from .config import ConfigError, ExperimentConfig, load_config
from .diffmath import NonFiniteError, SingularMatrixError
from .model import Model, load_into_model, save_checkpoint
from .sampler import EpisodeSpec, LabeledPool
from .trainers import PLMLConfig, PseudoLabeledSet, SSLConfig

DATASET_FILES = ("dataset.fslf", "dataset.labels.csv")
SPLIT_FILE = "split.json"
PRETRAINED_FILE = "model_pretrained.fslc"
METATRAINED_FILE = "model_metatrained.fslc"
PSEUDO_FILE = "pseudo.csv"
RESULTS_FILE = "results.csv"
SWEEP_FILE = "sweep_results.csv"
COMPARE_FILE = "compare_results.csv"


class UsageError(ValueError):
    """CLI-level problem (missing stage input, bad flag combination)."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: ExperimentConfig, command: str, inputs: list[Path], outputs: list[Path]) -> None:
    doc = {
        "command": command,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "inputs": {p.name: _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = cfg.out_dir / f"manifest.{command}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise UsageError(f"missing input {path} ({hint})")
    return path


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_dataset(cfg: ExperimentConfig) -> tuple[datastore.Dataset, list[Path]]:
    feats, labels = cfg.dataset_paths()
    _require(feats, "run `fslkit synth` or point [run] dataset_features at a feature file")
    _require(labels, "run `fslkit synth` or point [run] dataset_labels at a label file")
    return datastore.load_dataset(feats, labels), [feats, labels]


def _load_split(cfg: ExperimentConfig):
    path = _require(cfg.out_dir / SPLIT_FILE, "run `fslkit split` first")
    partition, split, meta = datastore.load_split(path)
    return partition, split, meta, path


def _model_widths(cfg: ExperimentConfig, input_dim: int) -> tuple[int, ...]:
    return (input_dim, *cfg["model"]["hidden_widths"], cfg["model"]["embed_dim"])


def _build_model(cfg: ExperimentConfig, input_dim: int, n_base: int) -> Model:
    return Model.init(
        _model_widths(cfg, input_dim), n_base, cfg.seed, cfg["model"]["nonlinearity"]
    )


def _ssl_config(cfg: ExperimentConfig) -> SSLConfig:
    p = cfg["pretrain"]
    return SSLConfig(
        epochs=p["epochs"], batch_labeled=p["batch_labeled"],
        batch_unlabeled=p["batch_unlabeled"], lr=p["lr"], alpha=p["alpha"],
        beta=p["beta"], tau=p["tau"], sigma_weak=p["sigma_weak"],
        sigma_strong=p["sigma_strong"], seed=cfg.seed,
    )


def _plml_config(cfg: ExperimentConfig) -> PLMLConfig:
    p = cfg["plml"]
    return PLMLConfig(
        episode=EpisodeSpec(ways=p["ways"], shots=p["shots"], queries=p["queries"]),
        head=p["head"], epochs=p["epochs"], episodes_per_epoch=p["episodes_per_epoch"],
        lr=p["lr"], patience=p["patience"], lr_decay=p["lr_decay"], gamma=p["gamma"],
        val_episodes=p["val_episodes"], seed=cfg.seed,
    )


def _write_trace(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "phase", "lr", "loss", "val_loss"])
        for r in rows:
            val = "" if r.val_loss is None else format(r.val_loss, ".10g")
            writer.writerow([r.epoch, r.phase, format(r.lr, ".10g"), format(r.loss, ".10g"), val])


def _save_pseudo(path: Path, pset: PseudoLabeledSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# source_checkpoint_sha256={pset.source_model_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "pseudo_label", "confidence"])
        for (sid, label), conf in zip(pset.items, pset.confidences):
            writer.writerow([sid, label, f"{conf:.6f}"])


def _load_pseudo(path: Path) -> PseudoLabeledSet:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        prefix = "# source_checkpoint_sha256="
        if not first.startswith(prefix):
            raise UsageError(f"{path} is not a pseudo-label file (missing source hash comment)")
        source = first[len(prefix):]
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "pseudo_label", "confidence"]:
            raise UsageError(f"{path} has unexpected header {header}")
        items, confs = [], []
        for row in reader:
            items.append((row[0], int(row[1])))
            confs.append(float(row[2]))
    return PseudoLabeledSet(tuple(items), tuple(confs), source)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    s = cfg["synth"]
    seed = s["seed"] if s["seed"] >= 0 else cfg.seed
    synth = datastore.SynthConfig(
        num_classes=s["num_classes"], samples_per_class=s["samples_per_class"],
        ambient_dim=s["ambient_dim"], cluster_std=s["cluster_std"],
        mean_separation=s["mean_separation"], seed=seed,
    )
    dataset = datastore.make_synthetic(synth)
    feats, labels = cfg.dataset_paths()
    datastore.save_dataset(dataset, feats, labels)
    _say(args, f"wrote {dataset.features.shape[0]} samples x {dataset.features.shape[1]} dims to {feats}")
    _write_manifest(cfg, "synth", [], [feats, labels])


def cmd_split(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    s = cfg["split"]
    partition = datastore.partition_classes(
        dataset, (s["n_base"], s["n_val"], s["n_novel"]), cfg.seed
    )
    split = datastore.split_semi(
        dataset, partition.base_classes, s["n_labeled"], s["n_test"], cfg.seed,
        oracle_enabled=s["oracle"],
    )
    path = cfg.out_dir / SPLIT_FILE
    datastore.save_split(partition, split, path, meta={"seed": cfg.seed, "config_hash": cfg.config_hash})
    _say(args, f"split: {len(split.labeled)} labeled / {len(split.unlabeled)} unlabeled / {len(split.test)} test")
    _write_manifest(cfg, "split", inputs, [path])


def cmd_pretrain(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    partition, split, _, split_path = _load_split(cfg)
    model = _build_model(cfg, dataset.features.shape[1], len(split.base_classes))
    ssl = _ssl_config(cfg)
    method = cfg["pretrain"]["method"]
    if method == "base":
        trace = trainers.pretrain_supervised(dataset, split, model, ssl)
    else:
        trace = trainers.pretrain_selftrain(dataset, split, model, ssl)
    ckpt = cfg.out_dir / PRETRAINED_FILE
    save_checkpoint(model, ckpt, metadata={
        "config_hash": cfg.config_hash, "seed": str(cfg.seed), "stage": "pretrained",
        "variant": method, "epochs": str(ssl.epochs),
    })
    trace_path = cfg.out_dir / "trace_pretrain.csv"
    _write_trace(trace_path, trace)
    final = trace[-1].loss if trace else float("nan")
    _say(args, f"pretrained ({method}) for {ssl.epochs} epochs, final loss {final:.6f}")
    _write_manifest(cfg, "pretrain", inputs + [split_path], [ckpt, trace_path])


def cmd_pseudolabel(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    partition, split, _, split_path = _load_split(cfg)
    ckpt = _require(cfg.out_dir / PRETRAINED_FILE, "run `fslkit pretrain` first")
    model = _build_model(cfg, dataset.features.shape[1], len(split.base_classes))
    load_into_model(model, ckpt, expected_config_hash=cfg.config_hash)
    pset = trainers.pseudo_label(model, dataset, split)
    path = cfg.out_dir / PSEUDO_FILE
    _save_pseudo(path, pset)
    accuracy = trainers.pseudo_label_accuracy(pset, split)
    note = "oracle disabled" if accuracy is None else f"audit accuracy {accuracy:.4f}"
    _say(args, f"pseudo-labeled {len(pset.items)} samples ({note})")
    _write_manifest(cfg, "pseudolabel", inputs + [split_path, ckpt], [path])


def cmd_metatrain(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    partition, split, _, split_path = _load_split(cfg)
    ckpt_in = _require(cfg.out_dir / PRETRAINED_FILE, "run `fslkit pretrain` first")
    pseudo_path = _require(cfg.out_dir / PSEUDO_FILE, "run `fslkit pseudolabel` first")
    pset = _load_pseudo(pseudo_path)
    model = _build_model(cfg, dataset.features.shape[1], len(split.base_classes))
    meta = load_into_model(model, ckpt_in, expected_config_hash=cfg.config_hash)
    plml = _plml_config(cfg)
    trace = trainers.metatrain_plml(dataset, partition.val_classes, split, pset, model, plml)
    ckpt_out = cfg.out_dir / METATRAINED_FILE
    variant = f"{meta.get('variant', 'unknown')}+plml-{plml.head}"
    save_checkpoint(model, ckpt_out, metadata={
        "config_hash": cfg.config_hash, "seed": str(cfg.seed), "stage": "metatrained",
        "variant": variant, "epochs": str(plml.epochs),
    })
    trace_path = cfg.out_dir / "trace_metatrain.csv"
    _write_trace(trace_path, trace)
    final = trace[-1].val_loss if trace else float("nan")
    _say(args, f"meta-trained {plml.head} head for {plml.epochs} epochs, final val loss {final:.6f}")
    _write_manifest(cfg, "metatrain", inputs + [split_path, ckpt_in, pseudo_path], [ckpt_out, trace_path])


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    partition, split, _, split_path = _load_split(cfg)
    e = cfg["eval"]
    ckpt = _require(cfg.out_dir / e["checkpoint"], "train a model first or set [eval] checkpoint")
    model = _build_model(cfg, dataset.features.shape[1], len(split.base_classes))
    meta = load_into_model(model, ckpt, expected_config_hash=cfg.config_hash)
    variant = meta.get("variant", "unknown")
    novel_pool = LabeledPool.from_classes(dataset, partition.novel_classes)
    spec = EpisodeSpec(
        ways=e["ways"], shots=e["shots"], queries=e["queries"],
        unlabeled_per_class=e["unlabeled_per_class"],
    )
    records = []
    for mode in e["modes"]:
        head = "proto" if mode == "inductive" else "ep"
        rec = evaluate.eval_fewshot(
            model, head, novel_pool, spec, mode, e["episodes"], cfg.seed,
            nl=cfg["split"]["n_labeled"], variant=variant,
        )
        _say(args, f"{mode}: acc {rec.acc:.4f} +- {rec.ci:.4f} over {rec.episodes} episodes")
        records.append(rec)
    path = cfg.out_dir / RESULTS_FILE
    evaluate.write_metrics_csv(records, path)
    _write_manifest(cfg, "eval", inputs + [split_path, ckpt], [path])


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    s = cfg["split"]
    partition = datastore.partition_classes(
        dataset, (s["n_base"], s["n_val"], s["n_novel"]), cfg.seed
    )
    e = cfg["eval"]
    widths = _model_widths(cfg, dataset.features.shape[1])
    sweep_cfg = evaluate.SweepConfig(
        nl_grid=e["nl_grid"], variants=e["variants"], n_test=s["n_test"],
        modes=e["modes"],
        eval_spec=EpisodeSpec(
            ways=e["ways"], shots=e["shots"], queries=e["queries"],
            unlabeled_per_class=e["unlabeled_per_class"],
        ),
        eval_episodes=e["episodes"], ssl=_ssl_config(cfg), plml=_plml_config(cfg),
        model_widths=widths, nonlinearity=cfg["model"]["nonlinearity"], seed=cfg.seed,
    )
    factory = lambda seed: Model.init(widths, len(partition.base_classes), seed, cfg["model"]["nonlinearity"])
    records = evaluate.run_degradation_sweep(dataset, partition, sweep_cfg, factory)
    path = cfg.out_dir / SWEEP_FILE
    evaluate.write_metrics_csv(records, path)
    for rec in records:
        _say(args, f"nl={rec.nl} {rec.variant} {rec.mode}: acc {rec.acc:.4f} +- {rec.ci:.4f}")
    _write_manifest(cfg, "sweep", inputs, [path])


def cmd_compare_selection(cfg: ExperimentConfig, args) -> None:
    dataset, inputs = _load_dataset(cfg)
    partition, split, _, split_path = _load_split(cfg)
    if not split.oracle_enabled:
        raise UsageError("compare-selection needs [split] oracle = true (re-run `fslkit split`)")
    c = cfg["compare"]
    widths = _model_widths(cfg, dataset.features.shape[1])
    comp_cfg = evaluate.ComparisonConfig(
        episode=EpisodeSpec(
            ways=c["ways"], shots=c["shots"], queries=c["queries"],
            unlabeled_per_class=c["unlabeled_per_class"],
        ),
        unlabeled_modes=c["unlabeled_modes"],
        epochs=c["epochs"], episodes_per_epoch=c["episodes_per_epoch"], lr=c["lr"],
        eval_spec=EpisodeSpec(
            ways=c["ways"], shots=c["shots"], queries=c["queries"],
            unlabeled_per_class=c["eval_unlabeled_per_class"],
        ),
        eval_episodes=c["eval_episodes"], repeats=c["repeats"], seed=cfg.seed,
    )
    factory = lambda seed: Model.init(widths, len(split.base_classes), seed, cfg["model"]["nonlinearity"])
    records = evaluate.run_selection_comparison(dataset, partition, split, comp_cfg, factory)
    path = cfg.out_dir / COMPARE_FILE
    evaluate.write_metrics_csv(records, path)
    for rec in records:
        tag = "tainted" if rec.taint else "practical"
        _say(args, f"seed={rec.seed} {rec.variant} ({tag}): acc {rec.acc:.4f} +- {rec.ci:.4f}")
    _write_manifest(cfg, "compare-selection", inputs + [split_path], [path])


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "pseudolabel": cmd_pseudolabel,
    "metatrain": cmd_metatrain,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "compare-selection": cmd_compare_selection,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fslkit",
        description="Semi-supervised episodic training pipeline for few-shot classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, datastore.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, SingularMatrixError) as exc:
        print(f"numeric error in stage '{args.command}': {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
