"""Benchmark harness: method comparisons, depth sweeps, vocab sweeps, reports.

Acceptance length tau pools committed tokens over main-model decode
forwards across a task's prompts. Two speedup figures are reported:
wall-clock tokens/s against the baseline row, and the analytic ratio
tau / (1 + K * c_draft) under the measured draft/verify cost ratio,
which makes the draft-depth optimum checkable on any machine.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EOS_TOKEN, SPECIAL_TOKENS
from .errors import ConfigError, SequencingError
from .model import MTPHead, MainModel
from .specdec import baseline_decode, speculative_decode, write_round_log
from .vocab import VocabBank, compress_vocab

log = logging.getLogger(__name__)

METHODS = ("baseline", "vanilla-head", "finetuned-head", "finetuned-head+FR")

REPORT_COLUMNS = [
    "task", "method", "k", "vocab_size", "prompts", "output_tokens", "rounds",
    "tau", "rates", "tokens_per_s", "tokens_per_s_std", "c_draft",
    "analytic_speedup", "wall_speedup",
]


@dataclass(frozen=True)
class BenchTask:
    name: str
    prompts: list
    lang: str | None
    max_new_tokens: int

    def __post_init__(self):
        if not self.prompts:
            raise ConfigError("a benchmark task needs at least one prompt")


@dataclass(frozen=True)
class RunConfig:
    method: str
    k_depth: int = 3
    seed: int = 0
    repetitions: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.k_depth < 0:
            raise ConfigError("k_depth must be >= 0")
        if self.method == "baseline" and self.k_depth != 0:
            raise ConfigError("baseline rows use k_depth 0")


def _round9(x: float) -> float:
    return round(float(x), 9)


@dataclass
class ReportRow:
    task: str
    method: str
    k: int
    vocab_size: int
    prompts: int
    output_tokens: int
    rounds: int
    tau: float
    rates: list[float]
    tokens_per_s: float
    tokens_per_s_std: float
    c_draft: float
    analytic_speedup: float
    wall_speedup: float

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ReportRow":
        return cls(**obj)


@dataclass
class _Pooled:
    """Metrics pooled over a task's prompts (single repetition)."""
    generated: int = 0
    output_tokens: int = 0
    rounds: int = 0
    draft_ns: int = 0
    draft_steps: int = 0
    verify_ns: int = 0
    wall_ns: int = 0
    reached: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.output_tokens / self.rounds if self.rounds else float("nan")

    @property
    def c_draft(self) -> float:
        if not self.draft_steps or not self.rounds:
            return 0.0
        return (self.draft_ns / self.draft_steps) / (self.verify_ns / self.rounds)

    def rates(self, k_depth: int) -> list[float]:
        out = []
        for k in range(1, k_depth + 1):
            reached = self.reached.get(k, 0)
            out.append(_round9(self.accepted.get(k, 0) / reached) if reached else 0.0)
        return out


def _decode_task(task: BenchTask, k_depth: int, main: MainModel, head: MTPHead,
                 vocab, repetitions: int) -> tuple[_Pooled, float, float]:
    """Run every prompt; returns pooled metrics plus tokens/s mean and std
    over repetitions (token outputs must be identical across reps)."""
    rates_pool = None
    per_rep_tps = []
    for rep in range(max(1, repetitions)):
        pooled = _Pooled()
        outputs = []
        for prompt in task.prompts:
            out, m = speculative_decode(main, head, prompt, task.max_new_tokens,
                                        k_depth, vocab=vocab, lang=task.lang,
                                        eos_token=EOS_TOKEN)
            outputs.append(out)
            pooled.generated += len(out)
            pooled.output_tokens += m.output_tokens
            pooled.rounds += m.rounds
            pooled.draft_ns += m.draft_ns
            pooled.draft_steps += m.draft_forwards
            pooled.verify_ns += m.verify_ns
            pooled.wall_ns += m.wall_ns
            for k, v in m.reached.items():
                pooled.reached[k] = pooled.reached.get(k, 0) + v
            for k, v in m.accepted.items():
                pooled.accepted[k] = pooled.accepted.get(k, 0) + v
            pooled.records.extend(m.records)
        per_rep_tps.append(pooled.generated / (pooled.wall_ns * 1e-9))
        if rep == 0:
            rates_pool = pooled
            first_outputs = outputs
        elif outputs != first_outputs:
            raise AssertionError("decoding was not deterministic across repetitions")
    return rates_pool, float(np.mean(per_rep_tps)), float(np.std(per_rep_tps))


def _baseline_row(task: BenchTask, main: MainModel, repetitions: int) -> tuple[ReportRow, float]:
    per_rep_tps = []
    generated = 0
    for _ in range(max(1, repetitions)):
        generated = 0
        t0 = time.perf_counter_ns()
        for prompt in task.prompts:
            out = baseline_decode(main, prompt, task.max_new_tokens, eos_token=EOS_TOKEN)
            generated += len(out)
        per_rep_tps.append(generated / ((time.perf_counter_ns() - t0) * 1e-9))
    tps = float(np.mean(per_rep_tps))
    decode_forwards = generated - len(task.prompts)  # prefills excluded
    row = ReportRow(task=task.name, method="baseline", k=0,
                    vocab_size=main.config.vocab_size, prompts=len(task.prompts),
                    output_tokens=decode_forwards, rounds=decode_forwards,
                    tau=1.0, rates=[], tokens_per_s=_round9(tps),
                    tokens_per_s_std=_round9(float(np.std(per_rep_tps))),
                    c_draft=0.0, analytic_speedup=1.0, wall_speedup=1.0)
    return row, tps


def run_benchmark(tasks, cfgs, *, main: MainModel, vanilla_head: MTPHead | None = None,
                  finetuned_head: MTPHead | None = None, bank: VocabBank | None = None,
                  log_dir=None) -> list[ReportRow]:
    """Execute every (task, config) pair; baseline rows are computed first
    because they are the speedup denominators."""
    cfgs = list(cfgs)
    ordered = [c for c in cfgs if c.method == "baseline"] + \
              [c for c in cfgs if c.method != "baseline"]
    if ordered and ordered[0].method != "baseline":
        raise SequencingError("no baseline configuration; speedups need a denominator")

    rows: list[ReportRow] = []
    baseline_tps: dict[str, float] = {}
    for cfg in ordered:
        for task in tasks:
            if cfg.method == "baseline":
                row, tps = _baseline_row(task, main, cfg.repetitions)
                baseline_tps[task.name] = tps
                rows.append(row)
                continue
            if task.name not in baseline_tps:
                raise SequencingError(f"missing baseline row for task {task.name!r}")
            head, vocab = _resolve_method(cfg.method, vanilla_head, finetuned_head, bank)
            pooled, tps, tps_std = _decode_task(task, cfg.k_depth, main, head, vocab,
                                                cfg.repetitions)
            vocab_size = (bank.get(task.lang if task.lang else "?").size
                          if vocab is not None else main.config.vocab_size)
            rows.append(_make_row(task, cfg.method, cfg.k_depth, vocab_size, pooled,
                                  tps, tps_std, baseline_tps[task.name]))
            if log_dir is not None:
                name = f"rounds_{task.name}_{cfg.method.replace('+', '_')}_k{cfg.k_depth}.jsonl"
                write_round_log(f"{log_dir}/{name}", pooled.records)
    return rows


def _resolve_method(method, vanilla_head, finetuned_head, bank):
    if method == "vanilla-head":
        head, vocab = vanilla_head, None
    elif method == "finetuned-head":
        head, vocab = finetuned_head, None
    elif method == "finetuned-head+FR":
        if bank is None:
            raise ConfigError("finetuned-head+FR requires a vocabulary bank")
        head, vocab = finetuned_head, bank
    else:
        raise ConfigError(f"unknown method {method!r}")
    if head is None:
        raise ConfigError(f"method {method!r} requires its head")
    return head, vocab


def _make_row(task, method, k_depth, vocab_size, pooled: _Pooled, tps: float,
              tps_std: float, base_tps: float) -> ReportRow:
    c_draft = pooled.c_draft
    tau = pooled.tau
    return ReportRow(
        task=task.name, method=method, k=k_depth, vocab_size=int(vocab_size),
        prompts=len(task.prompts), output_tokens=pooled.output_tokens,
        rounds=pooled.rounds, tau=_round9(tau), rates=pooled.rates(k_depth),
        tokens_per_s=_round9(tps), tokens_per_s_std=_round9(tps_std),
        c_draft=_round9(c_draft),
        analytic_speedup=_round9(tau / (1.0 + k_depth * c_draft)),
        wall_speedup=_round9(tps / base_tps),
    )


def sweep_draft_depth(task: BenchTask, k_range, *, main: MainModel, head: MTPHead,
                      vocab=None) -> list[ReportRow]:
    """tau / speed table over draft depths; K=0 rows are exact baselines.

    The analytic speedup for every row uses the pooled c_draft measured
    across the sweep so the depth optimum reflects one cost ratio.
    """
    k_range = list(k_range)
    if head.trained_depth is not None and max(k_range) > head.trained_depth:
        log.warning("sweeping K up to %d beyond trained depth %d",
                    max(k_range), head.trained_depth)
    pooled_by_k: dict[int, tuple] = {}
    for k in k_range:
        pooled_by_k[k] = _decode_task(task, k, main, head, vocab, repetitions=1)

    draft_ns = sum(p.draft_ns for p, _, _ in pooled_by_k.values())
    draft_steps = sum(p.draft_steps for p, _, _ in pooled_by_k.values())
    verify_ns = sum(p.verify_ns for p, _, _ in pooled_by_k.values())
    rounds = sum(p.rounds for p, _, _ in pooled_by_k.values())
    c_draft = ((draft_ns / draft_steps) / (verify_ns / rounds)) if draft_steps else 0.0

    base_tps = pooled_by_k[0][1] if 0 in pooled_by_k else None
    rows = []
    for k in k_range:
        pooled, tps, tps_std = pooled_by_k[k]
        tau = pooled.tau
        rows.append(ReportRow(
            task=task.name, method="finetuned-head", k=k,
            vocab_size=main.config.vocab_size, prompts=len(task.prompts),
            output_tokens=pooled.output_tokens, rounds=pooled.rounds,
            tau=_round9(tau), rates=pooled.rates(k),
            tokens_per_s=_round9(tps), tokens_per_s_std=_round9(tps_std),
            c_draft=_round9(c_draft),
            analytic_speedup=_round9(tau / (1.0 + k * c_draft)),
            wall_speedup=_round9(tps / base_tps) if base_tps else 0.0,
        ))
    return rows


def argmax_speedup(rows) -> int:
    """Reported depth optimum: brute-force argmax of analytic speedup."""
    best = max(rows, key=lambda r: (r.analytic_speedup, -r.k))
    return best.k


def sweep_vocab_size(task: BenchTask, sizes, *, main: MainModel, head: MTPHead,
                     tables: dict, specials=SPECIAL_TOKENS,
                     k_depth: int = 3) -> list[ReportRow]:
    """tau / speed table over compressed-vocabulary sizes for one task."""
    rows = []
    for size in sizes:
        if size > main.config.vocab_size:
            log.warning("clamping vocab size %d to |V|=%d", size, main.config.vocab_size)
            size = main.config.vocab_size
        bank = VocabBank(main, [compress_vocab(t, size, specials, main=main)
                                for t in tables.values()])
        pooled, tps, tps_std = _decode_task(task, k_depth, main, head, bank,
                                            repetitions=1)
        tau = pooled.tau
        c_draft = pooled.c_draft
        rows.append(ReportRow(
            task=task.name, method="finetuned-head+FR", k=k_depth,
            vocab_size=int(size), prompts=len(task.prompts),
            output_tokens=pooled.output_tokens, rounds=pooled.rounds,
            tau=_round9(tau), rates=pooled.rates(k_depth), tokens_per_s=_round9(tps),
            tokens_per_s_std=_round9(tps_std), c_draft=_round9(c_draft),
            analytic_speedup=_round9(tau / (1.0 + k_depth * c_draft)),
            wall_speedup=0.0,
        ))
    return rows


# ---------------------------------------------------------------------------
# emission


def emit_report(rows, out_dir, basename: str = "report") -> dict:
    """Write rows as CSV and JSON; both round-trip exactly."""
    if not rows:
        raise ConfigError("no report rows to emit")
    csv_path = f"{out_dir}/{basename}.csv"
    json_path = f"{out_dir}/{basename}.json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([
                row.task, row.method, row.k, row.vocab_size, row.prompts,
                row.output_tokens, row.rounds, f"{row.tau:.9f}",
                ";".join(f"{r:.9f}" for r in row.rates),
                f"{row.tokens_per_s:.9f}", f"{row.tokens_per_s_std:.9f}",
                f"{row.c_draft:.9f}", f"{row.analytic_speedup:.9f}",
                f"{row.wall_speedup:.9f}",
            ])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump([row.to_json() for row in rows], fh, indent=1)
    return {"csv": csv_path, "json": json_path}


def load_report_csv(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_COLUMNS:
            raise ConfigError("unexpected report header")
        for rec in reader:
            rows.append(ReportRow(
                task=rec[0], method=rec[1], k=int(rec[2]), vocab_size=int(rec[3]),
                prompts=int(rec[4]), output_tokens=int(rec[5]), rounds=int(rec[6]),
                tau=float(rec[7]),
                rates=[float(x) for x in rec[8].split(";")] if rec[8] else [],
                tokens_per_s=float(rec[9]), tokens_per_s_std=float(rec[10]),
                c_draft=float(rec[11]), analytic_speedup=float(rec[12]),
                wall_speedup=float(rec[13]),
            ))
    return rows


def load_report_json(path) -> list[ReportRow]:
    with open(path, encoding="utf-8") as fh:
        return [ReportRow.from_json(obj) for obj in json.load(fh)]


def format_table(rows) -> str:
    """Human-readable summary; tau and speedups shown to 3 decimals."""
    header = f"{'task':<12} {'method':<20} {'K':>2} {'|V|':>5} {'tau':>7} " \
             f"{'tok/s':>10} {'analytic':>9} {'wall':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.task:<12} {r.method:<20} {r.k:>2} {r.vocab_size:>5} "
            f"{r.tau:>7.3f} {r.tokens_per_s:>10.1f} {r.analytic_speedup:>9.3f} "
            f"{r.wall_speedup:>7.3f}")
    return "\n".join(lines)
