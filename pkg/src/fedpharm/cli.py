"""Command-line pipeline driver.

Subcommands: ingest, synth, split, detect, signal, train, predict, pipeline,
report. A single INI-style config file carries every knob; a handful of flags
(--seed, --epsilon, --lr, --epochs, --out) override file values. Every run
writes a manifest (config hash, input hashes, completed stages, output
hashes); reruns with the same config and inputs reproduce identical output
hashes.

Exit codes: 0 ok, 2 unreadable/ill-formed input, 3 detection flagged every
table, 4 predictor training diverged.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import detection as det
from . import disproportionality as disp
from . import ingest as ing
from . import metrics as met
from . import predictor as pred
from .domain import Dataset, Quarter, Rng, load_dataset, save_dataset
from .errors import AllTablesFlagged, FedpharmError, NonFiniteLoss
from .preprocess import flatten_split, load_split, preprocess, save_split, split_uniform

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DETECTION_DEGENERATE = 3
EXIT_TRAINING_DIVERGED = 4


@dataclass
class PipelineConfig:
    out_dir: Path = Path("out")
    input_dir: Path = Path(".")
    seed: int = 42

    source: str = "synth"  # synth | quarter | dataset
    dataset_path: Optional[Path] = None
    quarter: Optional[Quarter] = None
    schema: str = "default"
    size: int = 5868
    n_adr: int = 10
    duplicate_rate: float = 0.01
    adr_weights: Optional[tuple[float, ...]] = None

    n_clients: int = 3
    detection: det.DetectionConfig = field(default_factory=det.DetectionConfig)

    predictor_overrides: dict = field(default_factory=dict)
    holdout: float = 0.2

    bias: Optional[ing.BiasSpec] = None


def _parse_pairs(text: str) -> frozenset[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        client, _, adr = chunk.partition(":")
        pairs.append((int(client), int(adr)))
    return frozenset(pairs)


def load_config(path: Optional[Path], overrides: argparse.Namespace) -> PipelineConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FedpharmError(f"config file not found: {path}")
        parser.read(path)

    cfg = PipelineConfig()
    paths = parser["paths"] if parser.has_section("paths") else {}
    cfg.out_dir = Path(paths.get("out_dir", "out"))
    cfg.input_dir = Path(paths.get("input_dir", "."))

    corpus = parser["corpus"] if parser.has_section("corpus") else {}
    cfg.source = corpus.get("source", "synth")
    cfg.size = int(corpus.get("size", 5868))
    cfg.n_adr = int(corpus.get("n_adr", 10))
    cfg.duplicate_rate = float(corpus.get("duplicate_rate", 0.01))
    cfg.schema = corpus.get("schema", "default")
    if corpus.get("dataset"):
        cfg.dataset_path = Path(corpus["dataset"])
    if corpus.get("quarter"):
        cfg.quarter = Quarter.parse(corpus["quarter"])
    if corpus.get("adr_weights"):
        cfg.adr_weights = tuple(float(w) for w in corpus["adr_weights"].split(","))

    split = parser["split"] if parser.has_section("split") else {}
    cfg.n_clients = int(split.get("n_clients", 3))

    d = parser["detection"] if parser.has_section("detection") else {}
    cfg.detection = det.DetectionConfig(
        epsilon=float(d.get("epsilon", 4.0)),
        training=det.TrainingConfig(
            learning_rate=float(d.get("lr", 0.5)),
            epochs=int(d.get("epochs", 150)),
            seed=int(d.get("seed", 0)),
        ),
        min_table_size=int(d.get("min_table_size", 5)),
        size_weighted=d.get("size_weighted", "false").lower() == "true",
    )

    p = parser["predictor"] if parser.has_section("predictor") else {}
    over: dict = {}
    for key in ("d_model", "n_heads", "n_tokens", "conv_kernel", "pool_width", "lstm_hidden", "epochs"):
        if key in p:
            over[key] = int(p[key])
    for key, cast in (("lr", float), ("signal_threshold", float)):
        if key in p:
            over["learning_rate" if key == "lr" else key] = cast(p[key])
    if "conv_channels" in p:
        over["conv_channels"] = tuple(int(v) for v in p["conv_channels"].split(","))
    if "fc_dims" in p:
        over["fc_dims"] = tuple(int(v) for v in p["fc_dims"].split(","))
    if "dropout" in p:
        over["dropout_rates"] = tuple(float(v) for v in p["dropout"].split(","))
    cfg.predictor_overrides = over
    cfg.holdout = float(p.get("holdout", 0.2))

    run = parser["run"] if parser.has_section("run") else {}
    cfg.seed = int(run.get("seed", 42))

    if parser.has_section("bias") and parser["bias"].get("mode"):
        b = parser["bias"]
        targets: frozenset[tuple[int, int]] | float
        if b.get("fraction"):
            targets = float(b["fraction"])
        else:
            targets = _parse_pairs(b.get("targets", ""))
        cfg.bias = ing.BiasSpec(
            mode=b["mode"],
            targets=targets,
            intensity=float(b.get("intensity", 1.0)),
            rng_seed=int(b.get("seed", cfg.seed)),
            columns=tuple(c.strip() for c in b.get("columns", "").split(",") if c.strip()),
        )

    # flag overrides
    if overrides.seed is not None:
        cfg.seed = overrides.seed
    if overrides.out is not None:
        cfg.out_dir = Path(overrides.out)
    if overrides.epsilon is not None:
        cfg.detection = det.DetectionConfig(
            epsilon=overrides.epsilon,
            training=cfg.detection.training,
            min_table_size=cfg.detection.min_table_size,
            size_weighted=cfg.detection.size_weighted,
        )
    if overrides.lr is not None:
        cfg.predictor_overrides["learning_rate"] = overrides.lr
    if overrides.epochs is not None:
        cfg.predictor_overrides["epochs"] = overrides.epochs
    return cfg


def _schema_for(cfg: PipelineConfig):
    if cfg.schema == "default":
        return ing.default_schema()
    if cfg.schema == "quarter":
        return ing.quarter_file_schema()
    from .domain import schema_from_obj

    return schema_from_obj(json.loads(Path(cfg.schema).read_text(encoding="utf-8")))


def _config_fingerprint(cfg: PipelineConfig) -> str:
    return hashlib.sha256(repr(cfg).encode()).hexdigest()


class Manifest:
    """Collects completed stages and artifact hashes for one run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.stages: list[str] = []
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def add_input(self, path: Path) -> None:
        self.inputs[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def done(self, stage: str, *outputs: Path) -> None:
        self.stages.append(stage)
        for path in outputs:
            rel = str(path.relative_to(self.cfg.out_dir))
            self.outputs[rel] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write(self) -> Path:
        payload = {
            "config_hash": _config_fingerprint(self.cfg),
            "input_hashes": dict(sorted(self.inputs.items())),
            "stages": self.stages,
            "output_hashes": dict(sorted(self.outputs.items())),
        }
        path = self.cfg.out_dir / "manifest.json"
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path


def _predictor_config(cfg: PipelineConfig, dataset: Dataset) -> pred.PredictorConfig:
    return pred.PredictorConfig(
        n_features=len(dataset.schema),
        n_classes=len(dataset.adr_universe),
        seed=cfg.seed,
        **cfg.predictor_overrides,
    )


def _acquire_corpus(cfg: PipelineConfig, manifest: Manifest) -> Dataset:
    if cfg.source == "synth":
        dataset, _ = ing.generate_synthetic(
            cfg.size,
            cfg.n_adr,
            _schema_for(cfg),
            Rng(cfg.seed).spawn("corpus"),
            adr_weights=list(cfg.adr_weights) if cfg.adr_weights else None,
            duplicate_rate=cfg.duplicate_rate,
        )
        return dataset
    if cfg.source == "dataset":
        if cfg.dataset_path is None:
            raise FedpharmError("source=dataset needs corpus.dataset in the config")
        manifest.add_input(cfg.dataset_path)
        return load_dataset(cfg.dataset_path)
    if cfg.source == "quarter":
        if cfg.quarter is None:
            raise FedpharmError("source=quarter needs corpus.quarter in the config")
        raw = ing.parse_quarter(cfg.input_dir, cfg.quarter)
        for name in ing.quarter_file_names(cfg.quarter).values():
            manifest.add_input(cfg.input_dir / name)
        return ing.assemble_dataset(raw, _schema_for(cfg))
    raise FedpharmError(f"unknown corpus source {cfg.source!r}")


def _holdout_split(dataset: Dataset, fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    from dataclasses import replace

    n = len(dataset)
    n_eval = max(1, int(round(n * fraction))) if fraction > 0 else 0
    perm = rng.generator().permutation(n)
    eval_idx = set(perm[:n_eval].tolist())
    train_recs = tuple(r for i, r in enumerate(dataset.records) if i not in eval_idx)
    eval_recs = tuple(r for i, r in enumerate(dataset.records) if i in eval_idx)
    return replace(dataset, records=train_recs), replace(dataset, records=eval_recs)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    dataset = _acquire_corpus(cfg, manifest)
    annotation_path = None
    if cfg.bias is not None:
        dataset, annotation = ing.inject_bias(dataset, (cfg.n_clients, cfg.n_adr), cfg.bias)
        annotation_path = cfg.out_dir / "bias_annotation.json"
        annotation_path.write_text(annotation.to_json(), encoding="utf-8")
    out_csv = cfg.out_dir / "dataset.csv"
    save_dataset(dataset, out_csv)
    outputs = [out_csv, out_csv.with_name("dataset.meta.json")]
    if annotation_path:
        outputs.append(annotation_path)
    manifest.done("synth", *outputs)
    manifest.write()
    return EXIT_OK


def cmd_ingest(cfg: PipelineConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    dataset = _acquire_corpus(cfg, manifest)
    out_csv = cfg.out_dir / "dataset.csv"
    save_dataset(dataset, out_csv)
    pre, report = preprocess(dataset)
    pre_csv = cfg.out_dir / "preprocessed.csv"
    save_dataset(pre, pre_csv)
    report_path = cfg.out_dir / "cleaning_report.json"
    report_path.write_text(report.to_json(), encoding="utf-8")
    manifest.done(
        "ingest",
        out_csv,
        out_csv.with_name("dataset.meta.json"),
        pre_csv,
        pre_csv.with_name("preprocessed.meta.json"),
        report_path,
    )
    manifest.write()
    return EXIT_OK


def cmd_split(cfg: PipelineConfig, dataset_path: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    manifest.add_input(dataset_path)
    dataset = load_dataset(dataset_path)
    if dataset.provenance != "preprocessed":
        dataset, _ = preprocess(dataset)
    split = split_uniform(dataset, cfg.n_clients, Rng(cfg.seed).spawn("split"))
    split_dir = cfg.out_dir / "split"
    save_split(split, split_dir)
    manifest.done("split", split_dir / "split.meta.json")
    manifest.write()
    return EXIT_OK


def cmd_detect(cfg: PipelineConfig, split_dir: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    split = load_split(split_dir)
    clean, report = det.run_detection(split, cfg.detection)
    report_path = cfg.out_dir / "detection_report.json"
    det.save_report(report, report_path)
    agg_path = cfg.out_dir / "aggregates.csv"
    det.save_aggregates_csv(report, agg_path)
    clean_csv = cfg.out_dir / "clean.csv"
    save_dataset(clean, clean_csv)
    manifest.done(
        "detect", report_path, agg_path, clean_csv, clean_csv.with_name("clean.meta.json")
    )
    manifest.write()
    return EXIT_OK


def cmd_signal(cfg: PipelineConfig, original_path: Path, clean_path: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    manifest.add_input(original_path)
    manifest.add_input(clean_path)
    pairs = disp.compare(load_dataset(original_path), load_dataset(clean_path))
    out = cfg.out_dir / "comparison.csv"
    disp.save_comparison_csv(pairs, out)
    manifest.done("signal", out)
    manifest.write()
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, dataset_path: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    manifest.add_input(dataset_path)
    dataset = load_dataset(dataset_path)
    pcfg = _predictor_config(cfg, dataset)
    params, trace = pred.train(dataset, pcfg)
    params_path = cfg.out_dir / "params.bin"
    pred.save_params(params, params_path)
    trace_path = cfg.out_dir / "trace.csv"
    pred.save_trace_csv(trace, trace_path)
    manifest.done("train", params_path, trace_path)
    manifest.write()
    return EXIT_OK


def cmd_predict(cfg: PipelineConfig, params_path: Path, dataset_path: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    manifest.add_input(params_path)
    manifest.add_input(dataset_path)
    dataset = load_dataset(dataset_path)
    pcfg = _predictor_config(cfg, dataset)
    params = pred.load_params(params_path)
    predictions = pred.predict_signals(params, pcfg, dataset)
    out = cfg.out_dir / "predictions.csv"
    pred.save_predictions_csv(predictions, out)
    manifest.done("predict", out)
    manifest.write()
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, params_path: Path, dataset_path: Path) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    manifest.add_input(params_path)
    manifest.add_input(dataset_path)
    dataset = load_dataset(dataset_path)
    pcfg = _predictor_config(cfg, dataset)
    params = pred.load_params(params_path)
    predictions = pred.predict_signals(params, pcfg, dataset)
    probs = np.array([p.class_probs for p in predictions])
    truth = [r.adr_label for r in dataset.records]
    predicted = [p.predicted_adr for p in predictions]
    report = met.metrics_report(truth, predicted, probs, pcfg.n_classes)
    out = cfg.out_dir / "metrics.json"
    met.save_metrics_json(report, out)
    manifest.done("report", out)
    manifest.write()
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg)
    try:
        dataset = _acquire_corpus(cfg, manifest)
        original_csv = cfg.out_dir / "dataset.csv"
        save_dataset(dataset, original_csv)
        manifest.done("corpus", original_csv, original_csv.with_name("dataset.meta.json"))

        pre, cleaning = preprocess(dataset)
        report_path = cfg.out_dir / "cleaning_report.json"
        report_path.write_text(cleaning.to_json(), encoding="utf-8")
        manifest.done("preprocess", report_path)

        split = split_uniform(pre, cfg.n_clients, Rng(cfg.seed).spawn("split"))
        annotation = None
        if cfg.bias is not None:
            split, annotation = ing.inject_bias_tables(split, cfg.bias)
            ann_path = cfg.out_dir / "bias_annotation.json"
            ann_path.write_text(annotation.to_json(), encoding="utf-8")
            manifest.done("bias", ann_path)
        split_dir = cfg.out_dir / "split"
        save_split(split, split_dir)
        manifest.done("split", split_dir / "split.meta.json")

        original = flatten_split(split, provenance="original")

        clean, report = det.run_detection(split, cfg.detection)
        det_path = cfg.out_dir / "detection_report.json"
        det.save_report(report, det_path)
        agg_path = cfg.out_dir / "aggregates.csv"
        det.save_aggregates_csv(report, agg_path)
        clean_csv = cfg.out_dir / "clean.csv"
        save_dataset(clean, clean_csv)
        manifest.done(
            "detect", det_path, agg_path, clean_csv, clean_csv.with_name("clean.meta.json")
        )

        pairs = disp.compare(original, clean)
        cmp_path = cfg.out_dir / "comparison.csv"
        disp.save_comparison_csv(pairs, cmp_path)
        manifest.done("signal", cmp_path)

        train_set, eval_set = _holdout_split(clean, cfg.holdout, Rng(cfg.seed).spawn("holdout"))
        pcfg = _predictor_config(cfg, clean)
        params, trace = pred.train(train_set, pcfg)
        params_path = cfg.out_dir / "params.bin"
        pred.save_params(params, params_path)
        trace_path = cfg.out_dir / "trace.csv"
        pred.save_trace_csv(trace, trace_path)
        manifest.done("train", params_path, trace_path)

        eval_target = eval_set if len(eval_set) else train_set
        predictions = pred.predict_signals(params, pcfg, eval_target)
        pred_path = cfg.out_dir / "predictions.csv"
        pred.save_predictions_csv(predictions, pred_path)
        truth = [r.adr_label for r in eval_target.records]
        predicted = [p.predicted_adr for p in predictions]
        probs = np.array([p.class_probs for p in predictions])
        report_dict = met.metrics_report(truth, predicted, probs, pcfg.n_classes)
        metrics_path = cfg.out_dir / "metrics.json"
        met.save_metrics_json(report_dict, metrics_path)
        manifest.done("evaluate", pred_path, metrics_path)
    finally:
        manifest.write()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpharm",
        description="Federated bias detection and signal scoring for adverse-event corpora",
    )
    parser.add_argument("--config", type=Path, default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epsilon", type=float, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic corpus (optionally biased)")
    sub.add_parser("ingest", help="parse quarter files into the canonical dataset")
    p = sub.add_parser("split", help="preprocess and split a dataset")
    p.add_argument("dataset", type=Path)
    p = sub.add_parser("detect", help="run the federated detection round on a split")
    p.add_argument("split_dir", type=Path)
    p = sub.add_parser("signal", help="ROR/PRR comparison of two datasets")
    p.add_argument("original", type=Path)
    p.add_argument("clean", type=Path)
    p = sub.add_parser("train", help="train the signal predictor on a dataset")
    p.add_argument("dataset", type=Path)
    p = sub.add_parser("predict", help="score a dataset with trained parameters")
    p.add_argument("params", type=Path)
    p.add_argument("dataset", type=Path)
    p = sub.add_parser("report", help="evaluate trained parameters on a dataset")
    p.add_argument("params", type=Path)
    p.add_argument("dataset", type=Path)
    sub.add_parser("pipeline", help="full run: corpus, split, detect, signal, train, evaluate")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "split":
            return cmd_split(cfg, args.dataset)
        if args.command == "detect":
            return cmd_detect(cfg, args.split_dir)
        if args.command == "signal":
            return cmd_signal(cfg, args.original, args.clean)
        if args.command == "train":
            return cmd_train(cfg, args.dataset)
        if args.command == "predict":
            return cmd_predict(cfg, args.params, args.dataset)
        if args.command == "report":
            return cmd_report(cfg, args.params, args.dataset)
        if args.command == "pipeline":
            return cmd_pipeline(cfg)
        raise FedpharmError(f"unknown command {args.command!r}")
    except AllTablesFlagged as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DETECTION_DEGENERATE
    except NonFiniteLoss as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAINING_DIVERGED
    except (FedpharmError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
