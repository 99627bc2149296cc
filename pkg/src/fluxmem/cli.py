"""Command-line entry point.

Exit codes: 0 success, 1 user or input error, 2 provider or environment error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

from .core import EngineConfig, FluxMemError, HashEmbedder, ProviderError, embedder_from_env
from .engine import Engine, NonMonotoneTimestampError
from .evalkit import MODES, engine_factory, label_cases, load_cases, replay
from .extraction import LlmExtractor, RuleExtractor, chat_client_from_env
from .retrieval import ExtractiveResponder, LlmResponder
from .selector import StructureSelector, read_examples, train, write_examples

QUERY_SCHEMA = "fluxmem.query/v1"
EXIT_OK, EXIT_INPUT, EXIT_PROVIDER = 0, 1, 2


class UsageError(Exception):
    pass


class InputError(FluxMemError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for provider failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shipped(name: str) -> Path:
    return Path(str(resources.files("fluxmem.data").joinpath(name)))


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        # dotted paths map onto the flat config keys
        out[key.strip().replace(".", "_")] = value.strip()
    return out


def build_config(args) -> EngineConfig:
    overrides = parse_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    try:
        return EngineConfig().with_overrides(overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad --set value: {exc}") from exc


def providers(deterministic: bool, dim: int):
    """(embedder, extractor, responder) from the environment, or the offline stack."""
    if deterministic:
        return HashEmbedder(dim), RuleExtractor(), ExtractiveResponder()
    client = chat_client_from_env()
    if client is None:
        return embedder_from_env(dim), RuleExtractor(), ExtractiveResponder()
    return embedder_from_env(dim), LlmExtractor(client), LlmResponder(client)


def _timestamp(value, line: int) -> int:
    if isinstance(value, bool):
        raise InputError("timestamp must be a number or ISO-8601 string", line)
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        try:
            return int(datetime.fromisoformat(value.replace("Z", "+00:00")).timestamp())
        except ValueError:
            pass
    raise InputError(f"bad timestamp {value!r}", line)


def read_transcript(path: str | Path) -> Iterator[tuple[int, str, str, int]]:
    """Yield ``(line, user, agent, timestamp)`` from a transcript JSONL file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise InputError(f"invalid JSON ({exc.msg}, column {exc.colno})", lineno) from exc
            if not isinstance(rec, dict):
                raise InputError("expected a JSON object", lineno)
            missing = [k for k in ("user", "agent", "timestamp") if k not in rec]
            if missing:
                raise InputError(f"missing field(s): {', '.join(missing)}", lineno)
            if not isinstance(rec["user"], str) or not isinstance(rec["agent"], str):
                raise InputError("user and agent must be strings", lineno)
            yield lineno, rec["user"], rec["agent"], _timestamp(rec["timestamp"], lineno)


def _layer_counts(engine: Engine) -> str:
    st = engine.stats()
    kinds = " ".join(f"{k}={v}" for k, v in st["structures"].items())
    return (f"stim={st['stim_pages']} mtem_sessions={st['mtem_sessions']} "
            f"mtem_pages={st['mtem_pages']} ltsm={st['ltsm_entries']} "
            f"pruned_pages={st['pruned_pages']} ({kinds})")


def _load_selector(path: str | None) -> StructureSelector | None:
    return StructureSelector.load(path) if path else None


# -- commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    config = build_config(args)
    emb, ext, resp = providers(args.deterministic, config.embedding_dim)
    engine = Engine(config, emb, ext, resp, selector=_load_selector(args.selector),
                    use_default_selector=args.selector is None)
    trace_fh = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        for lineno, user, agent, ts in read_transcript(args.transcript):
            try:
                trace = engine.observe(user, agent, ts)
            except NonMonotoneTimestampError as exc:
                raise InputError(str(exc), lineno) from exc
            if trace_fh:
                trace_fh.write(json.dumps(trace.to_dict(), sort_keys=True) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()
    engine.save(args.snapshot, compress=True if args.gzip else None)
    print(f"ingested {engine.observed} pages: {_layer_counts(engine)}")
    return EXIT_OK


def query_record(query: str, answer: str, context, trace) -> dict:
    ctx = context.to_dict()
    return {
        "schema": QUERY_SCHEMA,
        "query": query,
        "answer": answer,
        "now": trace.now,
        "query_entities": trace.query_entities,
        "stim": ctx["stim"],
        "mtem": ctx["mtem"],
        "ltsm": ctx["ltsm"],
        "rendered_context": ctx["rendered"],
    }


def cmd_query(args) -> int:
    path = Path(args.snapshot)
    if not path.exists():
        raise InputError(f"snapshot not found: {path}")
    probe = Engine.load(path)
    emb, ext, resp = providers(args.deterministic, probe.config.embedding_dim)
    engine = Engine.load(path, embedder=emb, extractor=ext, responder=resp)
    answer, context, trace = engine.ask(args.text, args.choice or None)
    if args.json:
        print(json.dumps(query_record(args.text, answer, context, trace), sort_keys=True, indent=1))
    else:
        if args.show_context:
            print(context.rendered, end="")
            print("---")
        print(answer)
    if args.commit:
        engine.save(path, compress=path.read_bytes()[:2] == b"\x1f\x8b")
    return EXIT_OK


def cmd_inspect(args) -> int:
    engine = Engine.load(args.snapshot)
    st = engine.stats()
    if args.json:
        print(json.dumps(st, sort_keys=True, indent=1))
        return EXIT_OK
    print(f"observed pages: {st['observed']}  clock: {engine.clock}  "
          f"config: {engine.config.fingerprint()}")
    print(_layer_counts(engine))
    if st["sessions"]:
        print(f"{'session':<12}{'kind':<14}{'pages':>6}{'access':>8}  summary")
        for s in st["sessions"]:
            summary = " ".join(s["summary"].split())[:60]
            print(f"{s['id']:<12}{s['kind']:<14}{s['pages']:>6}{s['access_count']:>8}  {summary}")
    return EXIT_OK


def cmd_label(args) -> int:
    config = build_config(args)
    cases = load_cases(args.cases)
    examples = label_cases(cases, config, windows=args.windows)
    write_examples(args.output, examples)
    counts = Counter(e.label.value for e in examples)
    print(f"labeled {len(cases)} cases -> {len(examples)} examples: "
          + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_train(args) -> int:
    path = args.examples or _shipped("separable_300.jsonl")
    examples = read_examples(path)
    model = train(examples, epochs=args.epochs, learning_rate=args.learning_rate,
                  batch_size=args.batch_size, seed=42 if args.seed is None else args.seed)
    model.save(args.output)
    print(f"epochs run: {model.n_epochs_}")
    print(f"final train loss: {model.train_loss_:.6f}  validation loss: {model.validation_loss_:.6f}")
    print(f"final train accuracy: {model.train_accuracy_:.4f}  "
          f"validation accuracy: {model.validation_accuracy_:.4f}")
    return EXIT_OK


def _parse_sweep(items: Sequence[str]) -> dict[str, list[str]]:
    grid = {}
    for k, v in parse_overrides(items).items():
        grid[k] = [x for x in v.split(",") if x]
    return grid


def cmd_eval(args) -> int:
    config = build_config(args)
    cases = load_cases(args.cases or _shipped("synthetic_suite.jsonl"))
    selector = _load_selector(args.selector)
    emb, ext, resp = providers(args.deterministic, config.embedding_dim)
    if args.sweep:
        for key, values in _parse_sweep(args.sweep).items():
            for v in values:
                try:
                    cfg = config.with_overrides({key: v})
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"bad --sweep value: {exc}") from exc
                rep = replay(cases, args.mode, cfg,
                             engine_factory(args.mode, cfg, selector, resp, emb, ext))
                val = rep.mean(args.metric)
                print(f"{key}={v}\t{args.metric}={'-' if val is None else f'{val:.4f}'}")
        return EXIT_OK
    report = replay(cases, args.mode, config,
                    engine_factory(args.mode, config, selector, resp, emb, ext))
    print(f"mode: {args.mode}  seed: {config.seed}  config: {config.fingerprint()}")
    print(report.table())
    failed = [r for r in report.rows if r.get("error")]
    for r in failed:
        print(f"case {r['case_id']} failed: {r['error']}", file=sys.stderr)
    if args.output:
        Path(args.output).write_text(report.dumps(), encoding="utf-8")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    offline = _Parser(add_help=False)
    offline.add_argument("--deterministic", action="store_true",
                         help="ignore provider env vars and use the offline providers")
    common = _Parser(add_help=False, parents=[offline])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="seed (default 42)")

    p = _Parser(prog="fluxmem", description="Hierarchical conversational memory engine.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="stream a transcript into a snapshot")
    s.add_argument("transcript", help="JSONL of {user, agent, timestamp}")
    s.add_argument("snapshot", help="snapshot path to write (.gz compresses)")
    s.add_argument("--gzip", action="store_true", help="gzip the snapshot regardless of suffix")
    s.add_argument("--selector", help="structure selector model (default: shipped model)")
    s.add_argument("--trace", help="write per-page ingestion traces as JSONL")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("query", parents=[offline], help="answer a question from a snapshot")
    s.add_argument("snapshot")
    s.add_argument("text")
    s.add_argument("--show-context", action="store_true")
    s.add_argument("--json", action="store_true")
    s.add_argument("--commit", action="store_true", help="persist usage counters")
    s.add_argument("--choice", action="append", help="multiple-choice option (repeatable)")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("label", parents=[common], help="label benchmark cases for training")
    s.add_argument("cases", help="benchmark cases JSONL")
    s.add_argument("-o", "--output", required=True, help="labeled examples JSONL")
    s.add_argument("--windows", choices=("session", "case"), default="session")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", parents=[common], help="train the structure selector")
    s.add_argument("examples", nargs="?", help="labeled examples JSONL (default: shipped set)")
    s.add_argument("-o", "--output", required=True, help="model JSON path")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--learning-rate", type=float, default=1e-2)
    s.add_argument("--batch-size", type=int, default=16)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="replay benchmark cases and score them")
    s.add_argument("cases", nargs="?", help="benchmark cases JSONL (default: shipped suite)")
    s.add_argument("--mode", choices=MODES, default="full")
    s.add_argument("--selector", help="structure selector model (default: shipped model)")
    s.add_argument("-o", "--output", help="write the JSON report here")
    s.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                   help="replay once per value instead of writing a report")
    s.add_argument("--metric", default="mem_reward", help="metric printed by --sweep")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="print layer stats and session structures")
    s.add_argument("snapshot")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (FluxMemError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())
