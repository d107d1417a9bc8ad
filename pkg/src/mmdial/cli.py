"""Command-line entrypoint.

Subcommands: build-data, stats, retrieve, fetch-images, train, generate,
evaluate, chat. Configuration precedence is defaults < config file < MMDIAL_*
environment variables < explicit flags, and every run writes its resolved
config next to its outputs. Image fetching is offline by default (mock
provider) unless provider endpoints are configured in the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import builder, corpus, entities, generation, metrics, model, retrieval, training
from .tokenizer import Tokenizer

log = logging.getLogger("mmdial")

DEFAULTS: dict = {
    # chunking / retrieval
    "max_turns": 2,
    "top_k": 5,
    "summary_max_words": 30,
    "embed_dim": 64,
    "embed_seed": 0,
    # entity pipeline
    "min_entity_freq": 3,
    "max_entity_freq": 100,
    "fetch_images_per_entity": 5,
    "rate_per_sec": 2.0,
    "cache_dir": ".mmdial-cache",
    # builder
    "cap_turn": 5,
    "cap_entity": 8,
    "context_token_budget": 190,
    "response_token_budget": 35,
    "images_per_entity": 1,
    "include_entities": True,
    "include_turn_images": True,
    "include_entity_images": True,
    "include_knowledge": False,
    "ablation": "full",
    # model
    "d_model": 64,
    "n_layers": 2,
    "n_heads": 4,
    "max_positions": 256,
    "d_v": 16,
    "variant": "shared",
    "dropout": 0.0,
    "vocab_max_size": 8000,
    # schedule
    "peak_lr": 5e-3,
    "warmup_fraction": 0.2,
    "total_steps": 500,
    "batch_size": 8,
    "weight_decay": 0.01,
    "seed": 0,
    "mask_ratio": 0.7,
    "mask_prob_within": 0.9,
    "eval_every": 0,
    "patience": 3,
    # decoding
    "strategy": "greedy",
    "decode_top_k": 10,
    "max_len": 35,
    "entity_bias_weight": 0.0,
}

ENV_PREFIX = "MMDIAL_"


class CliError(RuntimeError):
    pass


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """defaults < config file < environment < explicit flags."""
    cfg = dict(DEFAULTS)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise CliError(f"config file {config_path}: unknown key {sorted(unknown)[0]!r}")
        cfg.update(file_cfg)
    for key, default in DEFAULTS.items():
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    for key, default in DEFAULTS.items():
        if isinstance(default, bool):
            cfg[key] = bool(cfg[key])
        elif isinstance(default, int):
            cfg[key] = int(cfg[key])
        elif isinstance(default, float):
            cfg[key] = float(cfg[key])
    return cfg


def write_resolved_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_overrides(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k in DEFAULTS}


def _add_knob(parser: argparse.ArgumentParser, name: str):
    default = DEFAULTS[name]
    flag = "--" + name.replace("_", "-")
    if isinstance(default, bool):
        parser.add_argument(flag, default=None, type=lambda s: s.lower() in ("1", "true", "yes"),
                            metavar="BOOL")
    else:
        parser.add_argument(flag, default=None, type=type(default))


def _search_clients(cfg: dict) -> list[entities.SearchClient]:
    """Mock provider unless provider endpoints are configured in env."""
    clients: list[entities.SearchClient] = []
    cache_dir = cfg["cache_dir"]
    for idx in (1, 2):
        endpoint = os.environ.get(f"{ENV_PREFIX}PROVIDER{idx}_ENDPOINT")
        if not endpoint:
            continue
        params = json.loads(os.environ.get(f"{ENV_PREFIX}PROVIDER{idx}_PARAMS", "{}"))
        params.setdefault("q", "{query}")
        key = os.environ.get(f"{ENV_PREFIX}PROVIDER{idx}_KEY")
        if key:
            params.setdefault("key", key)
        clients.append(entities.HttpSearchClient(
            provider=f"provider-{idx}", endpoint=endpoint, params=params,
            items_key=os.environ.get(f"{ENV_PREFIX}PROVIDER{idx}_ITEMS", "hits"),
            locator_key=os.environ.get(f"{ENV_PREFIX}PROVIDER{idx}_LOCATOR", "url"),
            cache_dir=cache_dir, rate_per_sec=cfg["rate_per_sec"]))
    if not clients:
        clients.append(entities.MockSearchClient(
            seed=cfg["seed"], feature_dim=cfg["d_v"], cache_dir=cache_dir,
            rate_per_sec=max(cfg["rate_per_sec"], 1000.0)))
    return clients


def _taggers(lexicon_path: str | None):
    if lexicon_path:
        with open(lexicon_path, encoding="utf-8") as fh:
            lex = json.load(fh)
        return (entities.DictionaryTagger(lex.get("named_entities", [])),
                entities.DictionaryTagger(lex.get("nouns", [])))
    return entities.HeuristicNerTagger(), entities.HeuristicNounTagger()


def _extract_and_fetch(sessions, cfg: dict, lexicon_path: str | None):
    ner, pos = _taggers(lexicon_path)
    per_session = [entities.extract_entities(s, ner, pos) for s in sessions]
    merged = entities.aggregate_entities(per_session)
    kept = entities.filter_by_frequency(merged, cfg["min_entity_freq"], cfg["max_entity_freq"])
    log.info("entities: %d extracted, %d kept after frequency filter", len(merged), len(kept))
    clients = _search_clients(cfg)
    fetched, failures = entities.fetch_all(kept, clients, cfg["fetch_images_per_entity"])
    if failures:
        log.warning("image fetch failed for %d/%d entities (flagged, not dropped)",
                    failures, len(fetched))
    return fetched


def cmd_build_data(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    out_dir = Path(args.out)
    sessions = corpus.load_dialogues(args.corpus, args.format)
    chunks = corpus.chunk_sessions(sessions, cfg["max_turns"])
    pool = corpus.load_caption_pool(args.captions)
    embedder = retrieval.HashEmbedder(dimension=cfg["embed_dim"], seed=cfg["embed_seed"])
    index = retrieval.build_index(pool, embedder)
    results = retrieval.retrieve_for_sessions(
        sessions, index, embedder, k=cfg["top_k"],
        summarizer=retrieval.ExtractiveSummarizer(), max_words=cfg["summary_max_words"])
    fetched = _extract_and_fetch(sessions, cfg, args.entity_lexicon)
    bcfg = builder.BuilderConfig(
        cap_turn=cfg["cap_turn"], cap_entity=cfg["cap_entity"],
        context_token_budget=cfg["context_token_budget"],
        response_token_budget=cfg["response_token_budget"],
        images_per_entity=cfg["images_per_entity"],
        include_entities=cfg["include_entities"],
        include_turn_images=cfg["include_turn_images"],
        include_entity_images=cfg["include_entity_images"],
        include_knowledge=cfg["include_knowledge"])
    examples = builder.build_examples(
        chunks, builder.TurnImageManifest(results, pool),
        builder.EntityManifest(fetched), bcfg)
    if cfg["ablation"] != "full":
        examples = builder.ablation_view(examples, cfg["ablation"])
    out_dir.mkdir(parents=True, exist_ok=True)
    builder.serialize(examples, out_dir / "dataset.jsonl")
    retrieval.save_results(out_dir / "retrieval.jsonl", results)
    entities.save_manifest(out_dir / "entities.jsonl", fetched)
    write_resolved_config(out_dir, cfg)
    log.info("wrote %d examples to %s", len(examples), out_dir / "dataset.jsonl")
    return 0


def cmd_stats(args) -> int:
    examples = builder.deserialize(args.data)
    stats = corpus.compute_stats(examples)
    print(corpus.format_stats(stats))
    return 0


def cmd_retrieve(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    sessions = corpus.load_dialogues(args.corpus, args.format)
    pool = corpus.load_caption_pool(args.captions)
    embedder = retrieval.HashEmbedder(dimension=cfg["embed_dim"], seed=cfg["embed_seed"])
    index = retrieval.build_index(pool, embedder)
    results = retrieval.retrieve_for_sessions(
        sessions, index, embedder, k=cfg["top_k"],
        summarizer=retrieval.ExtractiveSummarizer(), max_words=cfg["summary_max_words"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    retrieval.save_results(out, results)
    write_resolved_config(out.parent, cfg)
    dist = retrieval.source_distribution(results, pool)
    for tag in corpus.SOURCE_TAGS:
        print(f"{tag:<8} {dist[tag]:6.2f}%")
    return 0


def cmd_fetch_images(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    if args.entities:
        records = entities.load_manifest(args.entities)
        clients = _search_clients(cfg)
        fetched, failures = entities.fetch_all(records, clients, cfg["fetch_images_per_entity"])
        if failures:
            log.warning("image fetch failed for %d/%d entities", failures, len(fetched))
    elif args.corpus:
        sessions = corpus.load_dialogues(args.corpus, args.format)
        fetched = _extract_and_fetch(sessions, cfg, args.entity_lexicon)
    else:
        raise CliError("fetch-images needs --entities or --corpus")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    entities.save_manifest(out, fetched)
    write_resolved_config(out.parent, cfg)
    print(f"fetched images for {len(fetched)} entities "
          f"({sum(1 for r in fetched if r.fetch_failed)} failures)")
    return 0


def build_tokenizer(examples, max_size: int) -> Tokenizer:
    texts = []
    for ex in examples:
        texts.extend(t.text for t in ex.context)
        texts.append(ex.response.text)
        texts.extend(e.surface for e in ex.entities)
        if ex.knowledge:
            texts.extend(ex.knowledge)
    return Tokenizer.from_texts(texts, max_size=max_size)


def _model_config(cfg: dict, tokenizer: Tokenizer) -> model.ModelConfig:
    return model.ModelConfig.for_tokenizer(
        tokenizer, d_model=cfg["d_model"], n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"], max_positions=cfg["max_positions"], d_v=cfg["d_v"],
        variant=cfg["variant"], dropout=cfg["dropout"])


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    out_dir = Path(args.out)
    examples = builder.deserialize(args.data)
    val_examples = builder.deserialize(args.val) if args.val else None
    tokenizer = build_tokenizer(examples, cfg["vocab_max_size"])
    mcfg = _model_config(cfg, tokenizer)
    import torch

    torch.manual_seed(cfg["seed"])  # seed initialization, not just the loop
    net = model.build_model(mcfg)
    schedule = training.TrainSchedule(
        peak_lr=cfg["peak_lr"], warmup_fraction=cfg["warmup_fraction"],
        total_steps=cfg["total_steps"], batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        mask_ratio=cfg["mask_ratio"], mask_prob_within=cfg["mask_prob_within"],
        eval_every=cfg["eval_every"], patience=cfg["patience"])
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list = []
    try:
        result = training.train(net, examples, tokenizer, mcfg, schedule,
                                val_examples=val_examples)
        records = result.records
        log.info("final loss %.4f after %d steps%s", result.final_loss, len(records),
                 " (early stop)" if result.stopped_early else "")
    except KeyboardInterrupt:
        log.warning("interrupted; saving checkpoint before exit")
    model.save_checkpoint(out_dir / "model.ckpt", net, mcfg)
    tokenizer.save(out_dir / "vocab.json")
    training.save_loss_curve(out_dir / "loss_curve.csv", records)
    write_resolved_config(out_dir, cfg)
    return 0


def _load_model_dir(ckpt: str):
    path = Path(ckpt)
    if path.is_dir():
        net, mcfg = model.load_model(path / "model.ckpt")
        tokenizer = Tokenizer.load(path / "vocab.json")
    else:
        net, mcfg = model.load_model(path)
        tokenizer = Tokenizer.load(path.parent / "vocab.json")
    return net, mcfg, tokenizer


def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    if args.decode_config:
        with open(args.decode_config, encoding="utf-8") as fh:
            decode_cfg = json.load(fh)
        unknown = set(decode_cfg) - set(DEFAULTS)
        if unknown:
            raise CliError(f"decode config: unknown key {sorted(unknown)[0]!r}")
        for key, value in decode_cfg.items():
            cfg[key] = value
    net, mcfg, tokenizer = _load_model_dir(args.ckpt)
    examples = builder.deserialize(args.input)
    decode = generation.DecodeConfig(
        strategy=cfg["strategy"], top_k=cfg["decode_top_k"],
        max_len=min(cfg["max_len"], cfg["response_token_budget"]),
        entity_bias_weight=cfg["entity_bias_weight"], seed=cfg["seed"])
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for ex in examples:
            tokens = generation.generate(net, ex, tokenizer, mcfg, decode)
            rec = {"id": ex.example_id, "hypothesis": " ".join(tokens),
                   "reference": ex.response.text}
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if args.out:
            sink.close()
    if args.out:
        write_resolved_config(Path(args.out).parent, cfg)
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    with open(args.hyp, encoding="utf-8") as fh:
        hyps = [line.rstrip("\n") for line in fh if line.strip()]
    with open(args.ref, encoding="utf-8") as fh:
        refs = [line.rstrip("\n") for line in fh if line.strip()]
    if len(hyps) != len(refs):
        raise CliError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    pairs = metrics.make_pairs(hyps, refs)
    table = metrics.WordVectorTable.load(args.vectors) if args.vectors else None
    ppl = float("nan")
    if args.ckpt and args.data:
        net, mcfg, tokenizer = _load_model_dir(args.ckpt)
        examples = builder.deserialize(args.data)
        ppl = metrics.perplexity(net, examples, tokenizer, mcfg, mode=args.ppl_mode)
    report = metrics.evaluate_pairs(pairs, table, ppl=ppl)
    print(metrics.format_report(report, name=args.name))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(metrics.report_to_json(report) + "\n")
        write_resolved_config(out.parent, cfg)
    return 0


def cmd_chat(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    net, mcfg, tokenizer = _load_model_dir(args.ckpt)
    decode = generation.DecodeConfig(
        strategy=cfg["strategy"], top_k=cfg["decode_top_k"],
        max_len=min(cfg["max_len"], cfg["response_token_budget"]),
        entity_bias_weight=cfg["entity_bias_weight"], seed=cfg["seed"])
    turns: list[corpus.Turn] = []
    print("type a message (EOF or 'quit' to leave)", file=sys.stderr)
    while True:
        try:
            line = input("you: ")
        except EOFError:
            print(file=sys.stderr)
            break
        line = line.strip()
        if not line or line.lower() in ("quit", "exit"):
            break
        turns.append(corpus.Turn(speaker="A", text=line, index=len(turns)))
        window = turns[-cfg["max_turns"]:]
        context = [corpus.Turn(speaker=t.speaker, text=t.text, index=i)
                   for i, t in enumerate(window)]
        ex = builder.MultimodalExample(
            example_id=f"chat#{len(turns)}",
            context=context,
            entities=[], turn_images=[], entity_images=[],
            response=corpus.Turn(speaker="B", text="[PENDING]", index=len(context)),
            provenance=builder.Provenance(session_id="chat", response_offset=len(turns)),
        )
        tokens = generation.generate(net, ex, tokenizer, mcfg, decode)
        reply = " ".join(tokens) if tokens else "..."
        print(f"bot: {reply}")
        turns.append(corpus.Turn(speaker="B", text=reply, index=len(turns)))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdial",
                                     description="multimodal dialogue toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="construct the multimodal dataset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=corpus.FORMATS, default="wow-like")
    p.add_argument("--entity-lexicon", dest="entity_lexicon")
    for knob in ("max_turns", "top_k", "cap_turn", "cap_entity", "context_token_budget",
                 "response_token_budget", "images_per_entity", "include_knowledge",
                 "ablation", "min_entity_freq", "max_entity_freq",
                 "fetch_images_per_entity", "cache_dir", "seed", "d_v",
                 "embed_dim", "embed_seed"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("stats", help="dataset statistics report")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("retrieve", help="turn-level image retrieval only")
    p.add_argument("--corpus", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--format", choices=corpus.FORMATS, default="wow-like")
    for knob in ("top_k", "embed_dim", "embed_seed", "summary_max_words"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("fetch-images", help="populate entity images via providers")
    p.add_argument("--entities")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--format", choices=corpus.FORMATS, default="wow-like")
    p.add_argument("--entity-lexicon", dest="entity_lexicon")
    for knob in ("min_entity_freq", "max_entity_freq", "fetch_images_per_entity",
                 "cache_dir", "rate_per_sec", "seed", "d_v"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_fetch_images)

    p = sub.add_parser("train", help="train a dialogue model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    for knob in ("variant", "d_model", "n_layers", "n_heads", "max_positions", "d_v",
                 "dropout", "vocab_max_size", "peak_lr", "warmup_fraction",
                 "total_steps", "batch_size", "weight_decay", "seed", "mask_ratio",
                 "mask_prob_within", "eval_every", "patience"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate responses for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--decode-config", dest="decode_config",
                   help="JSON file of decoding knobs (strategy, max_len, ...)")
    for knob in ("strategy", "decode_top_k", "max_len", "entity_bias_weight",
                 "seed", "response_token_budget"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metric report over hypotheses/references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--vectors")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--name", default="model")
    p.add_argument("--ppl-mode", dest="ppl_mode", choices=("causal", "masked"),
                   default="causal")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("chat", help="interactive terminal chat")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    for knob in ("strategy", "decode_top_k", "max_len", "entity_bias_weight",
                 "seed", "max_turns", "response_token_budget"):
        _add_knob(p, knob)
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s: %s", type(exc).__module__ + "." + type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
