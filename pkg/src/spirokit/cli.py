"""Command-line interface: synth / analyze / train / report / evaluate.

Each stage reads files produced by the previous one, so any stage can be
re-run independently.  All randomness flows from explicit --seed flags.
Every run directory receives a provenance file (config.json) with the
resolved options and sha256 hashes of the input files.

Configuration precedence: built-in defaults, then --config JSON file, then
SPIROKIT_* environment variables, then command-line flags.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .chat import ChatClient, ChatEndpointConfig
from .cohort import parse_cohort, export_cohort
from .errors import SpirokitError
from .gli import GliCoefficientTable
from .knowledge import KnowledgeIndex, ingest
from .metrics import GoldThresholds, compute_pft, gold_stage, is_obstructed, qc_check
from .morphology import extract_descriptors, render_description
from .synth import generate_cohort

logger = logging.getLogger("spirokit")

ENV_PREFIX = "SPIROKIT_"
_ENV_KEYS = {"endpoint": "SPIROKIT_ENDPOINT", "model": "SPIROKIT_MODEL",
             "gli_table": "SPIROKIT_GLI_TABLE",
             "gold_config": "SPIROKIT_GOLD_CONFIG",
             "corpus": "SPIROKIT_CORPUS"}


class ConfigError(Exception):
    pass


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def resolve_options(args: argparse.Namespace, keys: list[str]) -> dict:
    """defaults <- config file <- environment <- explicit flags."""
    resolved: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        resolved.update(json.loads(Path(config_path).read_text()))
    for key in keys:
        env_name = _ENV_KEYS.get(key)
        if env_name and os.environ.get(env_name):
            resolved[key] = os.environ[env_name]
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def write_provenance(out_dir: Path, command: str, options: dict,
                     inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "options": {k: str(v) if isinstance(v, Path) else v
                    for k, v in options.items()},
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs
                   if Path(p).is_file()},
    }
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2,
                                                    sort_keys=True))


def _load_gli(path: str | None) -> GliCoefficientTable:
    return (GliCoefficientTable.from_csv(path) if path
            else GliCoefficientTable.bundled())


def _load_thresholds(path: str | None) -> GoldThresholds:
    return GoldThresholds.from_json(path) if path else GoldThresholds.bundled()


def _load_index(args) -> KnowledgeIndex:
    if getattr(args, "index", None):
        return KnowledgeIndex.load(args.index)
    corpus = getattr(args, "corpus", None) or os.environ.get(_ENV_KEYS["corpus"])
    if corpus:
        docs = sorted(Path(corpus).glob("*.md")) + sorted(Path(corpus).glob("*.txt"))
        return ingest(docs)
    corpus_dir = resources.files("spirokit.data").joinpath("corpus")
    with resources.as_file(corpus_dir) as path:
        return ingest(sorted(path.glob("*.md")))


def _endpoint_config(args, options) -> ChatEndpointConfig:
    endpoint = options.get("endpoint")
    if not endpoint:
        raise ConfigError("--endpoint is required (or set SPIROKIT_ENDPOINT)")
    return ChatEndpointConfig(
        base_url=endpoint,
        model=options.get("model") or "default",
        timeout_s=getattr(args, "timeout", None) or 60.0,
        max_retries=getattr(args, "max_retries", None) or 2,
        max_in_flight=getattr(args, "max_in_flight", None) or 4,
        temperature=getattr(args, "temperature", None) or 0.0)


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    if not 0.0 < args.prevalence < 1.0:
        raise ConfigError(f"--prevalence must be in (0, 1), got {args.prevalence}")
    if args.n < 2:
        raise ConfigError(f"--n must be >= 2, got {args.n}")
    if args.noise < 0:
        raise ConfigError(f"--noise must be >= 0, got {args.noise}")
    cohort = generate_cohort(n=args.n, prevalence=args.prevalence,
                             noise_sd=args.noise, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_cohort(cohort, out, format=args.format)
    print(f"wrote {len(cohort)} subjects to {out}")
    return 0


def cmd_analyze(args) -> int:
    options = resolve_options(args, ["gli_table", "gold_config"])
    cohort = parse_cohort(args.cohort, format=args.format)
    table = _load_gli(options.get("gli_table"))
    thresholds = _load_thresholds(options.get("gold_config"))
    out_dir = Path(args.out)
    write_provenance(out_dir, "analyze", {**options, "cohort": args.cohort},
                     [Path(args.cohort)])
    failures = 0
    out_path = out_dir / "metrics.jsonl"
    with out_path.open("w") as fh:
        for sample in cohort:
            try:
                pft = compute_pft(sample.flow, sample.demographics, table)
                descriptor = extract_descriptors(sample.flow)
                fev1_ref = pft.reference.get("fev1")
                record = {
                    "subject_id": sample.subject_id,
                    "measured": dataclasses.asdict(pft.measured),
                    "reference": {k: dataclasses.asdict(v)
                                  for k, v in pft.reference.items()},
                    "morphology": dataclasses.asdict(descriptor),
                    "morphology_text": render_description(descriptor),
                    "obstructed": is_obstructed(pft, thresholds),
                    "gold_stage": gold_stage(
                        fev1_ref.percent_predicted if fev1_ref else 100.0,
                        pft.measured.ratio_fev1_fvc, thresholds),
                }
                if sample.official_metrics:
                    record["qc"] = qc_check(pft.measured, sample.official_metrics)
                fh.write(json.dumps(record) + "\n")
            except SpirokitError as exc:
                failures += 1
                logger.warning("subject %s skipped: %s", sample.subject_id, exc)
    print(f"analyzed {len(cohort) - failures}/{len(cohort)} subjects "
          f"({failures} warnings) -> {out_path}")
    return 0


def cmd_train(args) -> int:
    from .neural import (EncoderParams, ProjectorParams, TrainConfig,
                         pretrain_projector, text_embed, train_classifier)

    cohort = parse_cohort(args.cohort, format=args.format)
    out_dir = Path(args.out)
    write_provenance(out_dir, "train", {
        "cohort": args.cohort, "stage": args.stage, "epochs": args.epochs,
        "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
        "patience": args.patience,
    }, [Path(args.cohort)])
    config = TrainConfig(
        lr_classifier=args.lr, lr_projector=args.lr, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, patience=args.patience)
    log_path = out_dir / "train_log.jsonl"

    if args.stage == "classifier":
        initial = start_epoch = None
        if args.resume:
            initial = EncoderParams.load(args.resume)
            start_epoch = _next_epoch(log_path)
        params, log = train_classifier(
            cohort, config, log_path=log_path,
            initial_params=initial, start_epoch=start_epoch or 0)
        checkpoint = out_dir / "encoder.npz"
        params.save(checkpoint)
    else:
        if not args.checkpoint:
            raise ConfigError("--stage projector requires --checkpoint "
                              "(a trained encoder)")
        from .neural import encoder_forward

        encoder_params = EncoderParams.load(args.checkpoint)
        dim = args.embed_dim
        pairs = []
        for sample in cohort:
            out = encoder_forward(sample.flow, encoder_params)
            text = render_description(extract_descriptors(sample.flow))
            pairs.append((out.features, text_embed(text, dim)))
        projector = ProjectorParams.init(encoder_params.config.feature_dim,
                                         dim, seed=config.seed,
                                         dropout_rate=args.dropout)
        params, log = pretrain_projector(pairs, projector, config,
                                         log_path=log_path)
        checkpoint = out_dir / "projector.npz"
        params.save(checkpoint)
    final = log[-1] if log else {}
    print(f"saved {checkpoint}; final val_loss "
          f"{final.get('val_loss', float('nan')):.6f} "
          f"({len(log)} epochs logged)")
    return 0


def _next_epoch(log_path: Path) -> int:
    if not log_path.exists():
        return 0
    last = 0
    with log_path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                last = max(last, json.loads(line)["epoch"] + 1)
    return last


def _generation_context(args, options):
    from .pipeline import GenerationContext

    ctx = GenerationContext(
        gli_table=_load_gli(options.get("gli_table")),
        thresholds=_load_thresholds(options.get("gold_config")),
        top_k=args.top_k)
    needs_index = (getattr(args, "mode", None) == "gold"
                   or getattr(args, "experiment", None) == "masking")
    if needs_index:
        ctx.index = _load_index(args)
    if getattr(args, "checkpoint", None):
        from .neural import EncoderParams

        ctx.encoder_params = EncoderParams.load(args.checkpoint)
    if getattr(args, "projector", None):
        from .neural import ProjectorParams

        ctx.projector_params = ProjectorParams.load(args.projector)
    return ctx


def cmd_report(args) -> int:
    from .pipeline import run_generation, save_reports

    options = resolve_options(args, ["endpoint", "model", "gli_table",
                                     "gold_config", "corpus"])
    cohort = parse_cohort(args.cohort, format=args.format)
    out_dir = Path(args.out)
    write_provenance(out_dir, "report", {
        **options, "cohort": args.cohort, "mode": args.mode, "mask": args.mask,
    }, [Path(args.cohort)])
    ctx = _generation_context(args, options)
    client = ChatClient(_endpoint_config(args, options))
    reports = run_generation(cohort, args.mode, args.mask, client, ctx,
                             journal_path=out_dir / "journal.jsonl")
    save_reports(reports, cohort, out_dir / "reports.jsonl")
    n_valid = sum(1 for r in reports if r.valid)
    print(f"generated {len(reports)} reports ({n_valid} valid) -> "
          f"{out_dir / 'reports.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import (judge_cohort, render_summary_table,
                             run_masking_experiment, summarize)
    from .pipeline import load_reports

    options = resolve_options(args, ["endpoint", "model", "gli_table",
                                     "gold_config", "corpus"])
    cohort = parse_cohort(args.cohort, format=args.format)
    labels = [bool(s.copd_label) for s in cohort]
    out_dir = Path(args.out)
    client = ChatClient(_endpoint_config(args, options))

    if args.experiment == "masking":
        write_provenance(out_dir, "evaluate-masking",
                         {**options, "cohort": args.cohort},
                         [Path(args.cohort)])
        ctx = _generation_context(args, options)
        summaries = run_masking_experiment(
            cohort, client, ctx, journal_dir=out_dir,
            n_resamples=args.n_resamples, seed=args.seed)
    else:
        if not (args.reports and args.gold_reports):
            raise ConfigError("--reports and --gold-reports are required "
                              "unless --experiment masking is used")
        write_provenance(out_dir, "evaluate",
                         {**options, "reports": args.reports,
                          "gold_reports": args.gold_reports},
                         [Path(args.reports), Path(args.gold_reports),
                          Path(args.cohort)])
        ids, reports = load_reports(args.reports)
        gold_ids, gold_reports = load_reports(args.gold_reports)
        expected = [s.subject_id for s in cohort]
        if ids != expected or gold_ids != expected:
            raise ConfigError("report files do not align with the cohort")
        scores = judge_cohort(reports, gold_reports, client)
        summaries = {"reports": summarize(scores, reports, labels,
                                          n_resamples=args.n_resamples,
                                          seed=args.seed)}

    (out_dir / "summary.json").write_text(json.dumps(
        {name: s.to_json() for name, s in summaries.items()}, indent=2))
    table = render_summary_table(summaries)
    (out_dir / "summary.txt").write_text(table)
    print(table)
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spirokit",
        description="Spirometry analysis, report generation, and evaluation.")
    parser.add_argument("--config", help="JSON file with default options")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cohort file")
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--prevalence", type=float, required=True)
    synth.add_argument("--noise", type=float, default=0.05)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.add_argument("--format", choices=("json-lines", "csv"),
                       default="json-lines")
    synth.set_defaults(func=cmd_synth)

    analyze = sub.add_parser("analyze",
                             help="compute metrics and morphology per subject")
    analyze.add_argument("--cohort", required=True)
    analyze.add_argument("--format", choices=("json-lines", "csv"),
                         default="json-lines")
    analyze.add_argument("--gli-table", dest="gli_table")
    analyze.add_argument("--gold-config", dest="gold_config")
    analyze.add_argument("--out", required=True)
    analyze.set_defaults(func=cmd_analyze)

    train = sub.add_parser("train", help="train the encoder or the projector")
    train.add_argument("--cohort", required=True)
    train.add_argument("--format", choices=("json-lines", "csv"),
                       default="json-lines")
    train.add_argument("--stage", choices=("classifier", "projector"),
                       default="classifier")
    train.add_argument("--epochs", type=int, default=10)
    train.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    train.add_argument("--lr", type=float, default=3e-3)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--patience", type=int, default=5)
    train.add_argument("--resume", help="encoder checkpoint to continue from")
    train.add_argument("--checkpoint", help="encoder checkpoint "
                                            "(projector stage input)")
    train.add_argument("--embed-dim", dest="embed_dim", type=int, default=256)
    train.add_argument("--dropout", type=float, default=0.1)
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    report = sub.add_parser("report", help="generate diagnostic reports")
    report.add_argument("--cohort", required=True)
    report.add_argument("--format", choices=("json-lines", "csv"),
                        default="json-lines")
    report.add_argument("--mode", choices=("gold", "query-multimodal",
                                           "query-textonly"), required=True)
    report.add_argument("--mask", action="store_true")
    report.add_argument("--endpoint")
    report.add_argument("--model")
    report.add_argument("--gli-table", dest="gli_table")
    report.add_argument("--gold-config", dest="gold_config")
    report.add_argument("--corpus")
    report.add_argument("--index")
    report.add_argument("--checkpoint")
    report.add_argument("--projector")
    report.add_argument("--top-k", dest="top_k", type=int, default=4)
    report.add_argument("--timeout", type=float)
    report.add_argument("--max-retries", dest="max_retries", type=int)
    report.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    report.add_argument("--temperature", type=float)
    report.add_argument("--out", required=True)
    report.set_defaults(func=cmd_report)

    evaluate = sub.add_parser("evaluate",
                              help="judge reports and summarize metrics")
    evaluate.add_argument("--cohort", required=True)
    evaluate.add_argument("--format", choices=("json-lines", "csv"),
                          default="json-lines")
    evaluate.add_argument("--reports")
    evaluate.add_argument("--gold-reports", dest="gold_reports")
    evaluate.add_argument("--experiment", choices=("masking",))
    evaluate.add_argument("--endpoint")
    evaluate.add_argument("--model")
    evaluate.add_argument("--gli-table", dest="gli_table")
    evaluate.add_argument("--gold-config", dest="gold_config")
    evaluate.add_argument("--corpus")
    evaluate.add_argument("--index")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--projector")
    evaluate.add_argument("--top-k", dest="top_k", type=int, default=4)
    evaluate.add_argument("--n-resamples", dest="n_resamples", type=int,
                          default=1000)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--timeout", type=float)
    evaluate.add_argument("--max-retries", dest="max_retries", type=int)
    evaluate.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    evaluate.add_argument("--temperature", type=float)
    evaluate.add_argument("--out", required=True)
    evaluate.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SpirokitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
