"""Command-line pipeline: pretrain, distill, dedup, train, vocab, bench, report.

Every subcommand reads a JSON config (deep-merged over the defaults
below) plus a handful of flag overrides, and writes its artifacts into
--out-dir. A full desk run is:

    mtpspec pretrain-main
    mtpspec distill
    mtpspec dedup
    mtpspec train-head
    mtpspec train-head --k 1 --tag vanilla
    mtpspec build-vocab --lang en --size 128
    mtpspec bench
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from .bench import (BenchTask, RunConfig, argmax_speedup, emit_report, format_table,
                    load_report_json, run_benchmark, sweep_draft_depth, sweep_vocab_size)
from .data import LANG_TAGS, load_dataset, mixed_dataset, save_dataset
from .dedup import FilterRules, dedup_and_filter, mix_back
from .distill import GenerationConfig, self_distill
from .model import MTPHead, MainModel, ModelConfig, init_model
from .training import TrainConfig, pretrain_main, train_mtp_head
from .vocab import (VocabBank, build_frequency_table, compress_vocab,
                    load_compressed_vocab, save_compressed_vocab,
                    save_frequency_table)

DEFAULT_CONFIG = {
    "model": {"vocab_size": 512, "model_dim": 64, "n_layers": 2, "n_heads": 4,
              "max_seq_len": 160, "rope_base": 10000.0, "rms_eps": 1e-6, "seed": 1234},
    "data": {"per_lang": 96, "prompt_len": 24, "response_len": 56, "seed": 7,
             "langs": list(LANG_TAGS)},
    "pretrain": {"lr": 0.01, "epochs": 8, "batch_size": 8, "warmup_ratio": 0.05,
                 "seed": 1},
    "distill": {"temperature": 0.6, "top_k": 20, "top_p": 0.95,
                "max_new_tokens": 64, "seed": 11, "prompts_per_lang": 72,
                "prompt_len": 24},
    "dedup": {"jaccard_threshold": 0.9, "shingle_width": 3, "num_hashes": 64,
              "min_response_len": 4, "max_response_len": None,
              "ngram_width": 4, "max_ngram_ratio": 0.3, "drop_truncated": False,
              "mix_back_langs": ["cycle"]},
    "train": {"k_steps": 6, "beta": 0.6, "lr": 3e-3, "epochs": 4, "batch_size": 8,
              "warmup_ratio": 0.05, "seed": 3},
    "vocab": {"size": 128, "specials": list(data_mod.SPECIAL_TOKENS)},
    "bench": {"k_depth": 3, "max_new_tokens": 48, "prompts_per_task": 12,
              "prompt_len": 24, "repetitions": 1, "seed": 19,
              "langs": list(LANG_TAGS)},
}


def load_config(path: str | None, seed: int | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        for section, values in user.items():
            cfg.setdefault(section, {}).update(values)
    if seed is not None:
        for section in cfg.values():
            if isinstance(section, dict) and "seed" in section:
                section["seed"] = seed
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _train_config(section: dict, **overrides) -> TrainConfig:
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    return TrainConfig(**merged)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain_main(args, cfg) -> int:
    out = _out(args)
    d = cfg["data"]
    corpus = mixed_dataset(d["seed"], d["per_lang"], d["prompt_len"],
                           d["response_len"], tags=tuple(d["langs"]))
    save_dataset(out / "corpus.jsonl", corpus)
    main, _ = init_model(_model_config(cfg))
    curve = pretrain_main([ex.tokens for ex in corpus], main,
                          _train_config(cfg["pretrain"]))
    main.save(out / "main.npz")
    (out / "pretrain_losses.json").write_text(json.dumps(curve))
    print(f"pretrained on {len(corpus)} sequences; "
          f"loss {curve[0]:.3f} -> {curve[-1]:.3f}; wrote {out / 'main.npz'}")
    return 0


def cmd_distill(args, cfg) -> int:
    out = _out(args)
    main = MainModel.load(args.main or out / "main.npz")
    d = cfg["distill"]
    prompts = []
    for tag in cfg["data"]["langs"]:
        for p in data_mod.sample_prompts(tag, d["seed"], d["prompts_per_lang"],
                                         d["prompt_len"]):
            prompts.append((p, tag))
    gen_cfg = GenerationConfig(temperature=d["temperature"], top_k=d["top_k"],
                               top_p=d["top_p"], max_new_tokens=d["max_new_tokens"],
                               seed=d["seed"])
    examples = self_distill(prompts, main, gen_cfg)
    path = out / "distilled.jsonl"
    save_dataset(path, examples)
    print(f"distilled {len(examples)} examples -> {path}")
    return 0


def cmd_dedup(args, cfg) -> int:
    out = _out(args)
    src = Path(args.input or out / "distilled.jsonl")
    dst = Path(args.output or out / "dataset.jsonl")
    d = dict(cfg["dedup"])
    threshold = d.pop("jaccard_threshold")
    restore = d.pop("mix_back_langs", [])
    rules = FilterRules(**d)
    dataset = load_dataset(src)
    kept = dedup_and_filter(dataset, threshold, rules)
    kept = mix_back(dataset, kept, langs=tuple(restore), rules=rules)
    save_dataset(dst, kept)
    print(f"dedup/filter: {len(dataset)} -> {len(kept)} examples -> {dst}")
    return 0


def cmd_train_head(args, cfg) -> int:
    out = _out(args)
    main = MainModel.load(args.main or out / "main.npz")
    dataset = load_dataset(args.data or out / "dataset.jsonl")
    tcfg = _train_config(cfg["train"], k_steps=args.k)
    _, head = init_model(main.config)
    result = train_mtp_head(dataset, main, head, tcfg)
    tag = f"-{args.tag}" if args.tag else ""
    path = out / f"head{tag}.npz"
    head.save(path)
    losses = [{"step": r.step, "total": r.total, "per_step": r.step_losses}
              for r in result.reports]
    (out / f"head{tag}_losses.json").write_text(json.dumps(losses))
    final = result.reports[-1].step_losses if result.reports else []
    print(f"trained head (K={tcfg.k_steps}) on {len(dataset)} examples; "
          f"final per-step losses {[round(x, 4) for x in final]}; wrote {path}")
    return 0


def cmd_build_vocab(args, cfg) -> int:
    out = _out(args)
    dataset = load_dataset(args.data or out / "dataset.jsonl")
    vocab_size = cfg["model"]["vocab_size"]
    split = [ex.tokens for ex in dataset if ex.lang == args.lang]
    if not split:
        print(f"no examples tagged {args.lang!r} in the dataset", file=sys.stderr)
        return 1
    table = build_frequency_table(split, args.lang, vocab_size)
    size = args.size or cfg["vocab"]["size"]
    cv = compress_vocab(table, size, tuple(cfg["vocab"]["specials"]))
    save_frequency_table(out / f"freq_{args.lang}.json", table)
    vpath = out / f"vocab_{args.lang}_{size}.json"
    save_compressed_vocab(vpath, cv)
    coverage = table.coverage(cv.keep)
    print(f"built {args.lang} vocabulary of {size} tokens "
          f"(coverage {coverage:.3f}) -> {vpath}")
    return 0


def _bench_tasks(cfg) -> list[BenchTask]:
    b = cfg["bench"]
    tasks = []
    for tag in b["langs"]:
        prompts = data_mod.sample_prompts(tag, b["seed"], b["prompts_per_task"],
                                          b["prompt_len"])
        tasks.append(BenchTask(name=tag, prompts=prompts, lang=tag,
                               max_new_tokens=b["max_new_tokens"]))
    return tasks


def _load_bank(args, main) -> VocabBank | None:
    if not args.vocab:
        return None
    bank = VocabBank(main)
    for path in args.vocab:
        bank.add(load_compressed_vocab(path, main.config.vocab_size))
    return bank


def cmd_bench(args, cfg) -> int:
    out = _out(args)
    main = MainModel.load(args.main or out / "main.npz")
    head = MTPHead.load(args.head or out / "head.npz", main)
    vanilla = MTPHead.load(args.vanilla_head, main) if args.vanilla_head else None
    bank = _load_bank(args, main)
    b = cfg["bench"]
    k = args.k if args.k is not None else b["k_depth"]
    methods = ["baseline", "finetuned-head"]
    if vanilla is not None:
        methods.insert(1, "vanilla-head")
    if bank is not None:
        methods.append("finetuned-head+FR")
    cfgs = [RunConfig(method=m, k_depth=0 if m == "baseline" else k,
                      repetitions=b["repetitions"]) for m in methods]
    rows = run_benchmark(_bench_tasks(cfg), cfgs, main=main, vanilla_head=vanilla,
                         finetuned_head=head, bank=bank, log_dir=str(out))
    paths = emit_report(rows, str(out))
    print(format_table(rows))
    print(f"wrote {paths['csv']} and {paths['json']}")
    return 0


def cmd_sweep_k(args, cfg) -> int:
    out = _out(args)
    main = MainModel.load(args.main or out / "main.npz")
    head = MTPHead.load(args.head or out / "head.npz", main)
    b = cfg["bench"]
    tag = args.task_lang or b["langs"][0]
    prompts = data_mod.sample_prompts(tag, b["seed"], b["prompts_per_task"],
                                      b["prompt_len"])
    task = BenchTask(name=tag, prompts=prompts, lang=tag,
                     max_new_tokens=b["max_new_tokens"])
    rows = sweep_draft_depth(task, range(0, args.k_max + 1), main=main, head=head)
    paths = emit_report(rows, str(out), basename="sweep_k")
    print(format_table(rows))
    print(f"best analytic speedup at K={argmax_speedup(rows)}")
    print(f"wrote {paths['csv']} and {paths['json']}")
    return 0


def cmd_sweep_vocab(args, cfg) -> int:
    out = _out(args)
    main = MainModel.load(args.main or out / "main.npz")
    head = MTPHead.load(args.head or out / "head.npz", main)
    dataset = load_dataset(args.data or out / "dataset.jsonl")
    b = cfg["bench"]
    tag = args.task_lang or b["langs"][0]
    tables = {}
    for lang in cfg["data"]["langs"]:
        split = [ex.tokens for ex in dataset if ex.lang == lang]
        if split:
            tables[lang] = build_frequency_table(split, lang,
                                                 cfg["model"]["vocab_size"])
    prompts = data_mod.sample_prompts(tag, b["seed"], b["prompts_per_task"],
                                      b["prompt_len"])
    task = BenchTask(name=tag, prompts=prompts, lang=tag,
                     max_new_tokens=b["max_new_tokens"])
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = sweep_vocab_size(task, sizes, main=main, head=head, tables=tables,
                            specials=tuple(cfg["vocab"]["specials"]),
                            k_depth=args.k if args.k is not None else b["k_depth"])
    paths = emit_report(rows, str(out), basename="sweep_vocab")
    print(format_table(rows))
    print(f"wrote {paths['csv']} and {paths['json']}")
    return 0


def cmd_report(args, cfg) -> int:
    rows = load_report_json(args.rows)
    print(format_table(rows))
    if args.csv:
        out = _out(args)
        paths = emit_report(rows, str(out), basename=Path(args.rows).stem)
        print(f"wrote {paths['csv']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtpspec",
        description="Shared-weight multi-token drafting with lossless verification")
    parser.add_argument("--config", help="JSON config file merged over defaults")
    parser.add_argument("--seed", type=int, help="override every section seed")
    parser.add_argument("--out-dir", default="mtpspec-out",
                        help="artifact directory (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain-main", help="build corpora and pretrain the backbone")

    p = sub.add_parser("distill", help="generate self-distilled responses")
    p.add_argument("--main", help="backbone checkpoint (.npz)")

    p = sub.add_parser("dedup", help="near-duplicate removal plus quality filters")
    p.add_argument("--input")
    p.add_argument("--output")

    p = sub.add_parser("train-head", help="fine-tune the shared draft head")
    p.add_argument("--main")
    p.add_argument("--data")
    p.add_argument("--k", type=int, help="prediction depth override")
    p.add_argument("--tag", help="suffix for the head artifact name")

    p = sub.add_parser("build-vocab", help="frequency table + compressed vocabulary")
    p.add_argument("--lang", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--data")

    p = sub.add_parser("bench", help="method comparison over the desk tasks")
    p.add_argument("--main")
    p.add_argument("--head")
    p.add_argument("--vanilla-head")
    p.add_argument("--vocab", nargs="*", help="compressed vocab files for FR rows")
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep-k", help="draft-depth sweep on one task")
    p.add_argument("--main")
    p.add_argument("--head")
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--task-lang")

    p = sub.add_parser("sweep-vocab", help="vocabulary-size sweep on one task")
    p.add_argument("--main")
    p.add_argument("--head")
    p.add_argument("--data")
    p.add_argument("--sizes", default="32,128,512")
    p.add_argument("--k", type=int)
    p.add_argument("--task-lang")

    p = sub.add_parser("report", help="pretty-print a JSON report")
    p.add_argument("--rows", required=True)
    p.add_argument("--csv", action="store_true", help="also rewrite as CSV")

    return parser


COMMANDS = {
    "pretrain-main": cmd_pretrain_main,
    "distill": cmd_distill,
    "dedup": cmd_dedup,
    "train-head": cmd_train_head,
    "build-vocab": cmd_build_vocab,
    "bench": cmd_bench,
    "sweep-k": cmd_sweep_k,
    "sweep-vocab": cmd_sweep_vocab,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.seed)
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
