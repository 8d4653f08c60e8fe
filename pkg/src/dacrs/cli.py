"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import (
    AugmentConfig,
    FixtureRewriteProvider,
    HttpRewriteProvider,
    run_pipeline,
)
from .corpus import (
    CorpusLoadError,
    SyntheticSpec,
    build_test_samples,
    build_training_samples,
    generate_synthetic,
    load_dialogues,
    save_dialogues,
    split_dialogues,
)
from .encoder import EncoderError, HashedNgramEncoder, HttpEmbeddingClient
from .errors import ConfigError, NumericError
from .kg import KgLoadError, load_kg_dir, save_kg
from .trainer import (
    CheckpointError,
    TrainConfig,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .model import ModelConfig, recommend, rgcn_forward, user_embedding
from .kg import build_index

TRAIN_FILENAME = "train.jsonl"
TEST_FILENAME = "test.jsonl"

_MODEL_KEYS = {
    "d": int,
    "d_llm": int,
    "num_rgcn_layers": int,
    "activation": str,
    "num_attention_heads": int,
}
_TRAIN_KEYS = {
    "alpha": float,
    "learning_rate": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "substitution_rate": float,
    "augmentation_rate": float,
    "stage1_enabled": bool,
    "holdout_fraction": float,
    "entity_loss_negatives": "optional_int",
    "seed": int,
}
_DEFAULT_D = 32
_DEFAULT_D_LLM = 64


def parse_flat_config(path: str | Path) -> dict[str, str]:
    """key = value lines; # starts a comment; blank lines ignored."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            mapping[key.strip()] = value.strip()
    return mapping


def _coerce(key: str, value: str, kind) -> object:
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind == "optional_int":
            if value.lower() in ("", "none", "off"):
                return None
            return int(value)
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def build_configs(mapping: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs: dict[str, object] = {"d": _DEFAULT_D, "d_llm": _DEFAULT_D_LLM}
    train_kwargs: dict[str, object] = {}
    for key, value in mapping.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = _coerce(key, value, _MODEL_KEYS[key])
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(key, value, _TRAIN_KEYS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "seed" in train_kwargs:
        model_kwargs["seed"] = train_kwargs["seed"]
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _load_configs(path: Optional[str]) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(d=_DEFAULT_D, d_llm=_DEFAULT_D_LLM), TrainConfig()
    return build_configs(parse_flat_config(path))


def _make_encoder(d_llm: int):
    import os

    if os.environ.get("DACRS_EMBED_BASE_URL"):
        return HttpEmbeddingClient(dim=d_llm)
    return HashedNgramEncoder(d_llm)


def _make_rewrite_provider(args):
    if getattr(args, "fixtures", None):
        return FixtureRewriteProvider(args.fixtures)
    import os

    if os.environ.get("DACRS_LLM_BASE_URL"):
        return HttpRewriteProvider()
    return None


def _load_data(data_dir: str, kg, filename: str):
    path = Path(data_dir) / filename
    if not path.exists():
        raise ConfigError(f"missing dialogue file {path}")
    return load_dialogues(path, kg)


def _cmd_train(args) -> int:
    model_config, train_config = _load_configs(args.config)
    kg = load_kg_dir(args.kg)
    dialogues = _load_data(args.data, kg, TRAIN_FILENAME)
    samples = build_training_samples(dialogues)
    encoder = _make_encoder(model_config.d_llm)
    provider = _make_rewrite_provider(args)
    checkpoint, reports = train(
        samples, kg, model_config, train_config, encoder, provider
    )
    for epoch, report in enumerate(reports, start=1):
        print(
            f"epoch {epoch}/{len(reports)}"
            f"\trec={report.rec_loss:.6f}"
            f"\tentity={report.entity_loss:.6f}"
            f"\ttotal={report.total:.6f}"
        )
    save_checkpoint(checkpoint, args.out)
    print(f"checkpoint written to {args.out} ({file_sha256(args.out)[:12]})")
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid k list {text!r}") from exc
    if not ks:
        raise ConfigError("k list must be non-empty")
    return ks


def _cmd_eval(args) -> int:
    from .evaluate import evaluate

    checkpoint = load_checkpoint(args.ckpt)
    kg = load_kg_dir(args.kg)
    dialogues = _load_data(args.data, kg, TEST_FILENAME)
    samples = build_test_samples(dialogues, kg)
    ks = _parse_ks(args.k)
    encoder = _make_encoder(checkpoint.model_config.d_llm)
    report = evaluate(
        checkpoint, samples, kg, ks, encoder,
        exclude_context_items=args.exclude_mentioned,
    )
    print("k\trecall")
    for k in sorted(report.recall_at):
        print(f"{k}\t{report.recall_at[k]:.6f}")
    print(f"samples\t{report.num_test_samples}")
    with open(args.out, "w", encoding="utf-8") as handle:
        for k in sorted(report.recall_at):
            handle.write(
                json.dumps(
                    {
                        "metric": f"recall@{k}",
                        "value": report.recall_at[k],
                        "num_test_samples": report.num_test_samples,
                    }
                )
                + "\n"
            )
    return 0


def _cmd_sweep(args) -> int:
    from .evaluate import sweep, write_sweep_table

    model_config, train_config = _load_configs(args.config)
    kg = load_kg_dir(args.kg)
    train_dialogues = _load_data(args.data, kg, TRAIN_FILENAME)
    test_dialogues = _load_data(args.data, kg, TEST_FILENAME)
    train_samples = build_training_samples(train_dialogues)
    test_samples = build_test_samples(test_dialogues, kg)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid grid {args.grid!r}") from exc
    encoder = _make_encoder(model_config.d_llm)
    result = sweep(
        args.param,
        grid,
        train_config,
        model_config,
        train_samples,
        test_samples,
        kg,
        encoder,
        ks=_parse_ks(args.k),
        runs_per_point=args.runs,
    )
    print(f"{result.param_name}\tk\trecall")
    for value, report in zip(result.grid, result.reports):
        if report is None:
            print(f"{value}\t-\tfailed")
            continue
        for k in sorted(report.recall_at):
            print(f"{value}\t{k}\t{report.recall_at[k]:.6f}")
    if args.out:
        write_sweep_table(result, args.out)
        print(f"sweep table written to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    kg = load_kg_dir(args.kg)
    dialogues = load_dialogues(args.inp, kg)
    provider = _make_rewrite_provider(args)
    config = AugmentConfig(
        rate=args.rate, stage1_enabled=args.stage1, seed=args.seed
    )
    rng = np.random.default_rng(args.seed)
    with open(args.out, "w", encoding="utf-8") as handle:
        for dialogue in dialogues:
            result = run_pipeline(dialogue.utterances, config, provider, rng)
            handle.write(
                json.dumps(
                    {
                        "dialogue_id": dialogue.dialogue_id,
                        "stage1": result.stage1_choice,
                        "stage2": result.stage2_choice,
                        "stage1_failed": result.stage1_failed,
                        "text": result.serialized(),
                    }
                )
                + "\n"
            )
    print(f"augmented {len(dialogues)} dialogues into {args.out}")
    return 0


def _cmd_dump_embeddings(args) -> int:
    from .evaluate import dump_embeddings

    checkpoint = load_checkpoint(args.ckpt)
    kg = load_kg_dir(args.kg)
    count = dump_embeddings(checkpoint, kg, args.out)
    print(f"wrote {count} embeddings to {args.out}")
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    serve(args.ckpt, args.kg, bind_address=args.bind)
    return 0


def _cmd_recommend(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    kg = load_kg_dir(args.kg)
    dialogues = load_dialogues(args.dialogue, kg)
    if not dialogues:
        raise ConfigError("dialogue file contains no dialogues")
    dialogue = dialogues[0]
    from .augment import serialize_dialogue

    context_entities: list[int] = []
    for utt in dialogue.utterances:
        for entity_id in utt.entities:
            if entity_id not in context_entities:
                context_entities.append(entity_id)
    encoder = _make_encoder(checkpoint.model_config.d_llm)
    text = serialize_dialogue(dialogue.utterances)
    vector = (
        np.asarray(encoder.encode(text), dtype=np.float64)
        if text.strip()
        else np.zeros(checkpoint.model_config.d_llm)
    )
    index = build_index(kg)
    embeddings = rgcn_forward(checkpoint.params, index, checkpoint.model_config)
    u = user_embedding(
        vector, context_entities, embeddings, checkpoint.params,
        checkpoint.model_config,
    )
    exclusions: tuple[int, ...] = ()
    if not args.no_exclude:
        exclusions = tuple(e for e in context_entities if kg.is_item[e])
    ranking = recommend(u, kg, embeddings, args.k, exclusions)
    for rank, (item_id, score) in enumerate(ranking.entries, start=1):
        print(f"{rank}\t{kg.entity_names[item_id]}\t{score:.6f}")
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_clusters=args.clusters,
        entities_per_cluster=args.entities,
        items_per_cluster=args.items,
        num_dialogues=args.dialogues,
        utterances_per_dialogue=args.utterances,
        seed=args.seed,
    )
    kg, dialogues = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kg_dir = out / "kg"
    kg_dir.mkdir(exist_ok=True)
    save_kg(kg, kg_dir)
    train_set, test_set = split_dialogues(dialogues, args.test_fraction)
    save_dialogues(train_set, kg, out / TRAIN_FILENAME)
    save_dialogues(test_set, kg, out / TEST_FILENAME)
    print(
        f"wrote {kg.num_entities} entities, {len(train_set)} train and "
        f"{len(test_set)} test dialogues under {out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dacrs",
        description="Conversational recommendation over a knowledge graph.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--data", required=True, help=f"directory with {TRAIN_FILENAME}")
    p.add_argument("--kg", required=True, help="knowledge graph directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--fixtures", help="directory of recorded rewrite completions")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help=f"directory with {TEST_FILENAME}")
    p.add_argument("--kg", required=True)
    p.add_argument("--k", default="1,10,50", help="comma-separated cutoffs")
    p.add_argument("--out", default="metrics.jsonl", help="metrics record file")
    p.add_argument(
        "--exclude-mentioned", action="store_true",
        help="drop already-mentioned items before ranking",
    )
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across a parameter grid")
    p.add_argument("--param", required=True, choices=["alpha", "substitution_rate", "augmentation_rate"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--config", help="base training config file")
    p.add_argument("--data", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--k", default="1,10,50")
    p.add_argument("--runs", type=int, default=5, help="runs per grid point")
    p.add_argument("--out", help="plot-ready TSV output path")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("augment", help="run the augmentation pipeline over a corpus")
    p.add_argument("--in", dest="inp", required=True, help="dialogue file")
    p.add_argument("--out", required=True, help="augmented output file")
    p.add_argument("--kg", required=True)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--stage1", action="store_true", help="enable LLM rewrite stage")
    p.add_argument("--fixtures", help="directory of recorded rewrite completions")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("dump-embeddings", help="write entity embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_embeddings)

    p = sub.add_parser("serve", help="run the HTTP recommendation service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--bind", default="127.0.0.1:8080")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("recommend", help="one-shot top-k for a dialogue file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--dialogue", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument(
        "--no-exclude", action="store_true",
        help="rank items mentioned in the dialogue too",
    )
    p.set_defaults(func=_cmd_recommend)

    p = sub.add_parser("synth", help="generate the planted-preference dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--items", type=int, default=4)
    p.add_argument("--dialogues", type=int, default=400)
    p.add_argument("--utterances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (
        ConfigError,
        CheckpointError,
        KgLoadError,
        CorpusLoadError,
        EncoderError,
        NumericError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
