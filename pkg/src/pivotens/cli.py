"""Command-line interface.

Subcommands: ``translate`` (corpus -> outputs), ``evaluate`` (outputs +
refs -> report), ``simulate`` (experiment TOML -> full synthetic study),
``compare`` (two output files + refs -> bootstrap verdict).

Exit codes: 0 success, 1 usage error, 2 backend or I/O failure, 3 partial
failure (some sentences failed).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .core import DecodeParams, read_sentences
from .metrics import bleu, paired_bootstrap, render_report_table
from .modelwire import BackendError, ProtocolError
from .pipeline import DEFAULT_PIVOTS, RunConfig, run_corpus
from .synthharness import (
    ExperimentConfig,
    build_task,
    load_experiment_config,
    run_experiment,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BACKEND = 2
EXIT_PARTIAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pivotens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("translate", help="translate a JSONL corpus")
    tr.add_argument("--config", default=None, help="run configuration TOML; flags override it")
    tr.add_argument("--corpus", default=None, help="source corpus (JSONL)")
    tr.add_argument("--out", default=None, help="output JSONL path")
    tr.add_argument("--src", default=None, help="source language code")
    tr.add_argument("--tgt", default=None, help="target language code")
    tr.add_argument(
        "--strategy",
        default=None,
        choices=["direct", "single_pivot", "multiavg", "maxens", "logavg"],
    )
    tr.add_argument(
        "--pivots",
        default=None,
        help=f"comma-separated pivot languages (default {','.join(DEFAULT_PIVOTS)}; ignored for direct)",
    )
    tr.add_argument("--single-pivot", default=None, help="pivot for strategy single_pivot")
    tr.add_argument("--include-direct-path", action="store_true", default=None)
    tr.add_argument("--beam-size", type=int, default=None)
    tr.add_argument("--max-len", type=int, default=None)
    tr.add_argument("--backend", default=None, help="synthetic:<experiment.toml> or http[s]://host:port")
    tr.add_argument("--eos-id", type=int, default=None, help="eos id for wire backends")
    tr.add_argument("--refs", default=None, help="optional references (JSONL) for a report")
    tr.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("evaluate", help="score output files against references")
    ev.add_argument("--outputs", action="append", required=True, metavar="NAME=PATH")
    ev.add_argument("--refs", required=True)
    ev.add_argument("--sources", default=None, help="source corpus for the TNG metric")
    ev.add_argument("--src", default="src")
    ev.add_argument("--tgt", default="tgt")
    ev.add_argument(
        "--eos-id",
        type=int,
        default=None,
        help="strip a single trailing eos with this id from output tokens before token metrics",
    )
    ev.add_argument("--chrf-threshold", type=float, default=20.0)
    ev.add_argument("--resamples", type=int, default=1000)
    ev.add_argument("--alpha", type=float, default=0.05)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--report-json", default=None)

    sim = sub.add_parser("simulate", help="run a synthetic study from a TOML config")
    sim.add_argument("--config", default=None, help="experiment TOML (defaults to the documented regime)")
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--dump-sentences", action="store_true")
    sim.add_argument("--include-logavg", action="store_true")

    cmp_ = sub.add_parser("compare", help="paired bootstrap between two output files")
    cmp_.add_argument("--a", required=True, metavar="NAME=PATH")
    cmp_.add_argument("--b", required=True, metavar="NAME=PATH")
    cmp_.add_argument("--refs", required=True)
    cmp_.add_argument(
        "--eos-id",
        type=int,
        default=None,
        help="strip a single trailing eos with this id from output tokens",
    )
    cmp_.add_argument("--resamples", type=int, default=1000)
    cmp_.add_argument("--alpha", type=float, default=0.05)
    cmp_.add_argument("--seed", type=int, default=0)
    return parser


def _parse_backend(value: str, eos_id: int | None) -> dict:
    if value.startswith("synthetic:"):
        return {"kind": "synthetic", "config": value.split(":", 1)[1]}
    if value.startswith(("http://", "https://")):
        if eos_id is None:
            raise UsageError("wire backends require --eos-id")
        return {"kind": "wire", "url": value, "eos_id": eos_id}
    raise UsageError(f"unrecognized backend {value!r}")


def _named_path(value: str) -> tuple[str, str]:
    if "=" not in value:
        raise UsageError(f"expected NAME=PATH, got {value!r}")
    name, path = value.split("=", 1)
    return name, path


def _bodies(records, eos_id: int | None = None):
    out = []
    for r in records:
        seq = r.token_seq()
        if eos_id is not None:
            seq = seq.body(eos_id)
        out.append(tuple(seq.ids))
    return out


_TRANSLATE_DEFAULTS = {
    "strategy": "maxens",
    "pivots": ",".join(DEFAULT_PIVOTS),
    "single_pivot": None,
    "include_direct_path": False,
    "beam_size": 5,
    "max_len": 256,
    "eos_id": None,
    "refs": None,
    "seed": 0,
}


def _merge_translate_settings(args) -> dict:
    """Defaults, then the TOML config file, then explicitly given flags."""
    settings = dict(_TRANSLATE_DEFAULTS)
    if args.config:
        from .synthharness import _load_toml

        file_values = _load_toml(args.config)
        unknown = set(file_values) - set(_TRANSLATE_DEFAULTS) - {"corpus", "out", "src", "tgt", "backend"}
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        settings.update(file_values)
    for key in list(_TRANSLATE_DEFAULTS) + ["corpus", "out", "src", "tgt", "backend"]:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for required in ("corpus", "out", "src", "tgt", "backend"):
        if not settings.get(required):
            raise UsageError(f"--{required} is required (flag or config file)")
    return settings


def _cmd_translate(args) -> int:
    s = _merge_translate_settings(args)
    backend = _parse_backend(s["backend"], s["eos_id"])
    params = DecodeParams(beam_size=s["beam_size"], max_len=s["max_len"])
    raw_pivots = s["pivots"]  # comma string from flags, array from TOML
    if isinstance(raw_pivots, str):
        raw_pivots = [p for p in raw_pivots.split(",") if p]
    pivots = tuple(raw_pivots) if s["strategy"] != "direct" else ()
    config = RunConfig(
        src_lang=s["src"],
        tgt_lang=s["tgt"],
        pivot_langs=pivots,
        strategy=s["strategy"],
        single_pivot=s["single_pivot"],
        include_direct_path=s["include_direct_path"],
        pivot_params=params,
        final_params=params,
        backend=backend,
    )
    render = None
    if backend["kind"] == "synthetic":
        task = build_task(load_experiment_config(backend["config"]))
        scorer = task.scorer()
        render = task.render_text
    else:
        from .pipeline import resolve_backend

        scorer = resolve_backend(config)
    result = run_corpus(
        s["corpus"], config, scorer=scorer, refs=s["refs"], render=render, seed=s["seed"]
    )
    result.write_outputs(s["out"], config.name, s["tgt"])
    if result.report is not None:
        sys.stdout.write(render_report_table(result.report, [config.name]))
    for failure in result.failures:
        print(f"FAILED {failure.id} [{failure.stage}] {failure.error}", file=sys.stderr)
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _cmd_evaluate(args) -> int:
    from .metrics import EvalReport, SystemScores, compute_marks, hallucination_rate_chrf, tng_rate

    named = [_named_path(v) for v in args.outputs]
    refs = read_sentences(args.refs)
    ref_by_id = {r.id: r for r in refs}
    sources = read_sentences(args.sources) if args.sources else None
    src_by_id = {r.id: r for r in sources} if sources else None

    systems: dict[str, SystemScores] = {}
    tokens_by_name: dict[str, list] = {}
    ids = None
    for name, path in named:
        records = read_sentences(path)
        record_ids = [r.id for r in records]
        if ids is None:
            ids = record_ids
        elif set(ids) != set(record_ids):
            raise UsageError(f"output file {path} covers a different sentence set")
        missing = [i for i in record_ids if i not in ref_by_id]
        if missing:
            raise UsageError(f"references missing for ids: {missing[:5]}")
        by_id = {r.id: r for r in records}
        ordered = [by_id[i] for i in sorted(record_ids)]
        hyp_tokens = _bodies(ordered, args.eos_id)
        ref_ordered = [ref_by_id[r.id] for r in ordered]
        ref_tokens = _bodies(ref_ordered)
        texts = [r.text if r.text is not None else " ".join(map(str, r.token_seq().ids)) for r in ordered]
        ref_texts = [
            r.text if r.text is not None else " ".join(map(str, r.token_seq().ids))
            for r in ref_ordered
        ]
        tng = None
        if src_by_id is not None:
            missing_src = [r.id for r in ordered if r.id not in src_by_id]
            if missing_src:
                raise UsageError(f"sources missing for ids: {missing_src[:5]}")
            src_tokens = [tuple(src_by_id[r.id].token_seq().ids) for r in ordered]
            tng = tng_rate(src_tokens, hyp_tokens)
        tokens_by_name[name] = hyp_tokens
        systems[name] = SystemScores(
            bleu=bleu(hyp_tokens, ref_tokens),
            chrf_hallucination_rate=hallucination_rate_chrf(
                list(zip(texts, ref_texts)), threshold=args.chrf_threshold
            ),
            tng_hallucination_rate=tng,
        )

    ref_tokens_sorted = [tuple(ref_by_id[i].token_seq().ids) for i in sorted(ids)]
    marks = (
        compute_marks(
            tokens_by_name, ref_tokens_sorted,
            resamples=args.resamples, alpha=args.alpha, seed=args.seed,
        )
        if len(named) > 1
        else {named[0][0]}
    )
    report = EvalReport(
        direction=(args.src, args.tgt),
        systems=systems,
        marks=marks,
        scored=len(ids),
        failed=0,
    )
    sys.stdout.write(render_report_table(report, [n for n, _ in named]))
    if args.report_json:
        Path(args.report_json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    result = run_experiment(config, include_logavg=args.include_logavg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strategies = result.report.extras["strategies"]
    table = render_report_table(result.report, strategies)
    (out_dir / "report.txt").write_text(table)
    (out_dir / "report.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    if args.dump_sentences:
        result.dump_sentences_jsonl(out_dir / "sentences.jsonl", build_task(config))
    sys.stdout.write(table)
    if result.confident_pivot_agreement is not None:
        print(f"confident-pivot agreement on triggered sentences: {result.confident_pivot_agreement:.3f}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _cmd_compare(args) -> int:
    name_a, path_a = _named_path(args.a)
    name_b, path_b = _named_path(args.b)
    refs = read_sentences(args.refs)
    ref_by_id = {r.id: r for r in refs}
    rec_a = {r.id: r for r in read_sentences(path_a)}
    rec_b = {r.id: r for r in read_sentences(path_b)}
    if set(rec_a) != set(rec_b):
        raise UsageError("output files cover different sentence sets")
    ids = sorted(rec_a)
    missing = [i for i in ids if i not in ref_by_id]
    if missing:
        raise UsageError(f"references missing for ids: {missing[:5]}")
    result = paired_bootstrap(
        bleu,
        _bodies([rec_a[i] for i in ids], args.eos_id),
        _bodies([rec_b[i] for i in ids], args.eos_id),
        _bodies([ref_by_id[i] for i in ids]),
        resamples=args.resamples,
        alpha=args.alpha,
        seed=args.seed,
    )
    verdict = {
        "systems": {name_a: result.metric_a, name_b: result.metric_b},
        "winner": {None: None, "a": name_a, "b": name_b}[result.winner],
        "p_value": result.p_value,
        "significant": result.significant,
        "alpha": args.alpha,
    }
    print(json.dumps(verdict, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "translate": _cmd_translate,
            "evaluate": _cmd_evaluate,
            "simulate": _cmd_simulate,
            "compare": _cmd_compare,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, ProtocolError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
