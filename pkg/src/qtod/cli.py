"""Command-line entry point.

Batch commands (run, eval, bench-kb, topn, export-training) and dataset
tooling (build-crossdomain, fewshot, make-synthetic) bind the engine to
files; chat is an interactive REPL over one knowledge base. run and chat
can execute against a running qtod service with --server instead of
in-process.

Config precedence is flags > --config file > defaults. All randomness
flows from --seed. Exit codes: 0 ok, 1 validation, 2 transport,
3 internal.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import httpx

from . import data as datamod
from . import evaluation, synthetic
from .backends import make_backend
from .contract import run_contract_checks
from .errors import QtodError, TransportError, ValidationError
from .kb import linearize_record, load_kb, save_kb
from .pipeline import Session, export_training_pairs, replay_dialogue, run_turn
from .retriever import HashingEmbedder, RemoteEmbeddingProvider

MODE_MAP = {"qtod": "qtod", "identity": "identity_query", "oracle": "oracle_knowledge"}
SPLITS = ("train", "validation", "test")


def _internal_mode(cli_mode: str) -> str:
    return MODE_MAP[cli_mode]


def _apply_config(ctx: click.Context, config_path: str | None, params: dict) -> dict:
    """Fill parameters still at their defaults from a JSON config file."""
    if not config_path:
        return params
    try:
        config = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
    if not isinstance(config, dict):
        raise ValidationError(f"config {config_path} must hold a JSON object")
    out = dict(params)
    aliases = {"backend": "backend_kind"}
    for key, value in config.items():
        key = key.replace("-", "_")
        key = aliases.get(key, key)
        if key not in out:
            continue
        source = ctx.get_parameter_source(key)
        if source is None or source.name == "DEFAULT":
            out[key] = value
    return out


def _retriever_config(retriever: str, embed_url: str | None) -> dict | None:
    if retriever != "dense":
        return None
    provider = RemoteEmbeddingProvider(embed_url) if embed_url else HashingEmbedder()
    return {"provider": provider}


def _load_split(dataset: str, split: str) -> tuple:
    dialogues = datamod.load_dataset(dataset).parts()[split]
    if not dialogues:
        raise ValidationError(f"dataset {dataset} has no {split} dialogues")
    return dialogues


def _run_id(config: dict) -> str:
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:8]
    return f"{time.strftime('%Y%m%d-%H%M%S')}-{digest}"


def backend_options(fn):
    fn = click.option(
        "--backend", "backend_kind", default="rule",
        type=click.Choice(["scripted", "rule", "remote"]), show_default=True,
    )(fn)
    fn = click.option(
        "--backend-url", envvar="QTOD_BACKEND_URL", default=None,
        help="remote backend URL (env QTOD_BACKEND_URL)",
    )(fn)
    return fn


@click.group()
@click.version_option(package_name="qtod", prog_name="qtod")
def cli():
    """Query-driven task-oriented dialogue engine."""


@cli.command("run")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="test", type=click.Choice(SPLITS), show_default=True)
@backend_options
@click.option("--retriever", default="bm25", type=click.Choice(["bm25", "dense"]), show_default=True)
@click.option("--embed-url", default=None)
@click.option("--mode", default="qtod", type=click.Choice(sorted(MODE_MAP)), show_default=True)
@click.option("--top-n", default=3, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--jobs", default=1, type=int, show_default=True)
@click.option("--out", default="runs", type=click.Path(file_okay=False), show_default=True)
@click.option("--server", default=None, help="drive a running qtod service")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def cmd_run(ctx, **params):
    """Run the pipeline over a dataset split, writing per-turn results."""
    params = _apply_config(ctx, params.pop("config_path"), params)
    dialogues = _load_split(params["dataset"], params["split"])
    mode = _internal_mode(params["mode"])
    run_config = {k: v for k, v in params.items() if k != "out"}
    run_dir = Path(params["out"]) / f"run-{_run_id(run_config)}"
    run_dir.mkdir(parents=True, exist_ok=True)

    if params["server"]:
        rows = _run_against_server(dialogues, params["server"], params["mode"], params["top_n"])
    else:
        backend = make_backend(params["backend_kind"], params["backend_url"])
        retriever_config = _retriever_config(params["retriever"], params["embed_url"])

        def run_one(dialogue):
            replayed = replay_dialogue(
                dialogue, backend, mode=mode, n=params["top_n"],
                retriever=params["retriever"], retriever_config=retriever_config,
            )
            return [
                {
                    "session_id": dialogue.session_id,
                    "turn": annotated.turn,
                    "mode": params["mode"],
                    "n": params["top_n"],
                    **result.to_dict(),
                }
                for annotated, result in replayed
            ]

        if params["jobs"] > 1:
            with ThreadPoolExecutor(max_workers=params["jobs"]) as pool:
                chunks = list(pool.map(run_one, dialogues))
        else:
            chunks = [run_one(d) for d in dialogues]
        rows = [row for chunk in chunks for row in chunk]

    rows.sort(key=lambda r: (r["session_id"], r["turn"]))
    results_path = run_dir / "results.jsonl"
    with open(results_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    (run_dir / "config.json").write_text(
        json.dumps(run_config, indent=2, sort_keys=True), encoding="utf-8"
    )
    click.echo(f"wrote {len(rows)} turns to {results_path}")


def _run_against_server(dialogues, server: str, mode: str, top_n: int) -> list[dict]:
    rows = []
    with httpx.Client(base_url=server.rstrip("/"), timeout=120.0) as client:
        for dialogue in dialogues:
            payload = {
                "session_id": dialogue.session_id,
                "kb": datamod.dialogue_to_obj(dialogue)["kb"],
                "mode": mode,
                "top_n": top_n,
            }
            try:
                created = client.post("/sessions", json=payload)
                created.raise_for_status()
                for annotated in dialogue.iter_annotated_turns():
                    body = {
                        "utterance": annotated.utterance,
                        "gold_record_ids": list(annotated.gold_record_ids or ()) or None,
                        "history_response": annotated.gold_response,
                    }
                    turn = client.post(
                        f"/sessions/{dialogue.session_id}/turns", json=body
                    )
                    turn.raise_for_status()
                    rows.append(
                        {
                            "session_id": dialogue.session_id,
                            "turn": annotated.turn,
                            "mode": mode,
                            "n": top_n,
                            **turn.json(),
                        }
                    )
                client.delete(f"/sessions/{dialogue.session_id}")
            except httpx.HTTPStatusError as exc:
                raise ValidationError(
                    f"server rejected session {dialogue.session_id}: "
                    f"{exc.response.status_code} {exc.response.text[:200]}"
                ) from exc
            except httpx.HTTPError as exc:
                raise TransportError(f"server {server} unreachable: {exc}") from exc
    return rows


@cli.command("eval")
@click.option("--results", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="test", type=click.Choice(SPLITS), show_default=True)
@click.option("--top-n", default=3, type=int, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
def cmd_eval(results, dataset, split, top_n, out):
    """Score a results file against its dataset's gold annotations."""
    dialogues = _load_split(dataset, split)
    by_key: dict[tuple[str, int], dict] = {}
    with open(results, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            by_key[(row["session_id"], int(row["turn"]))] = row

    rows = []
    missing = []
    for dialogue in dialogues:
        for annotated in dialogue.iter_annotated_turns():
            key = (dialogue.session_id, annotated.turn)
            row = by_key.pop(key, None)
            if row is None:
                missing.append(key)
                continue
            rows.append(
                evaluation.TurnRow(
                    session_id=dialogue.session_id,
                    turn=annotated.turn,
                    domain=annotated.domain or dialogue.domain,
                    pred_response=row["response"],
                    gold_response=annotated.gold_response,
                    retrieved_ids=tuple(rid for rid, _ in row.get("retrieved", [])),
                    gold_record_ids=tuple(annotated.gold_record_ids or ()),
                    retrieve_ms=(row.get("timings") or {}).get("retrieve")
                    if row.get("query") is not None
                    else None,
                )
            )
    if missing or by_key:
        extra = sorted({sid for sid, _ in by_key})
        lost = sorted({sid for sid, _ in missing})
        raise ValidationError(
            f"results/dataset misalignment; missing sessions: {lost[:5]}, "
            f"unmatched result sessions: {extra[:5]}"
        )

    from .kb import union_lexicon

    report = evaluation.evaluate_rows(
        rows, union_lexicon(d.kb for d in dialogues), top_n
    )
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_report_json(report, out_dir / "report.json")
        evaluation.write_report_csv(report, out_dir / "report.csv")
    click.echo(evaluation.format_report_table({"eval": report}))


@cli.command("bench-kb")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="test", type=click.Choice(SPLITS), show_default=True)
@click.option("--pool", required=True, type=click.Path(exists=True, dir_okay=False))
@backend_options
@click.option("--sizes", default="8,16,32,64,128,256,512,1024", show_default=True)
@click.option("--metric", default="entity_f1", type=click.Choice(["entity_f1", "recall"]), show_default=True)
@click.option("--mode", default="qtod", type=click.Choice(sorted(MODE_MAP)), show_default=True)
@click.option("--top-n", default=3, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
def cmd_bench_kb(dataset, split, pool, backend_kind, backend_url, sizes, metric, mode, top_n, seed, out):
    """Knowledge-base scaling benchmark: metric and retrieval latency as
    session KBs grow."""
    dialogues = _load_split(dataset, split)
    pool_kb = load_kb(pool, format="dataset_json")
    backend = make_backend(backend_kind, backend_url)
    size_list = [int(s) for s in sizes.split(",") if s.strip()]
    curve = evaluation.run_scaling_benchmark(
        dialogues, backend, pool_kb, size_list,
        seed=seed, n=top_n, mode=_internal_mode(mode),
    )
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_scaling_csv(curve, out_dir / "scaling.csv", metric=metric)
        (out_dir / "scaling.json").write_text(
            json.dumps(
                {
                    "seed": curve.seed,
                    "n": curve.n,
                    "points": [p._asdict() for p in curve.points],
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
    click.echo(f"{'kb_size':>8} {'entity_f1':>10} {'recall':>8} {'latency_ms':>11}")
    for point in curve.points:
        click.echo(
            f"{point.kb_size:>8d} {point.entity_f1:>10.4f} {point.recall:>8.4f} "
            f"{point.mean_retrieve_latency_ms:>11.4f}"
        )


@cli.command("topn")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="validation", type=click.Choice(SPLITS), show_default=True)
@backend_options
@click.option("--n-values", default="1,3,5", show_default=True)
@click.option("--mode", default="qtod", type=click.Choice(sorted(MODE_MAP)), show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
def cmd_topn(dataset, split, backend_kind, backend_url, n_values, mode, out):
    """Retrieval-depth ablation: one full evaluation per n."""
    dialogues = _load_split(dataset, split)
    backend = make_backend(backend_kind, backend_url)
    values = [int(v) for v in n_values.split(",") if v.strip()]
    table = evaluation.run_topn_ablation(
        dialogues, backend, n_values=values, mode=_internal_mode(mode)
    )
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(
            json.dumps({str(n): r.to_dict() for n, r in table.items()}, indent=2, sort_keys=True),
            encoding="utf-8",
        )
    click.echo(evaluation.format_report_table({f"n={n}": r for n, r in table.items()}))


@cli.command("build-crossdomain")
@click.option("--source", "sources", multiple=True, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--recipe", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--count", default=600, type=int, show_default=True)
@click.option("--ratio", default="400,100,100", show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def cmd_build_crossdomain(sources, recipe, count, ratio, seed, out):
    """Merge single-domain sessions into multi-domain ones per a recipe
    file (JSON: list of [dataset_index, domain] sequences)."""
    datasets = [datamod.load_dataset(p) for p in sources]
    try:
        recipe_obj = json.loads(Path(recipe).read_text(encoding="utf-8"))
        recipe_list = [
            [(int(source), str(domain)) for source, domain in elem]
            for elem in recipe_obj
        ]
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"bad recipe file {recipe}: {exc}") from exc
    ratio_parts = tuple(float(x) for x in ratio.split(","))
    merged = datamod.build_crossdomain(
        datasets, recipe_list, count=count, split_ratio=ratio_parts, seed=seed
    )
    datamod.save_dataset(merged, out)
    sizes = {name: len(part) for name, part in merged.parts().items()}
    click.echo(f"wrote {sizes} merged sessions to {out}")


@cli.command("fewshot")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fraction", required=True, type=float)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def cmd_fewshot(dataset, fraction, seed, out):
    """Reduce the train partition to a seeded fraction of dialogues."""
    split = datamod.load_dataset(dataset)
    reduced = datamod.fewshot_split(split.train, fraction, seed)
    datamod.save_dataset(
        datamod.DatasetSplit(
            train=reduced, validation=split.validation, test=split.test
        ),
        out,
    )
    click.echo(f"kept {len(reduced)}/{len(split.train)} train dialogues in {out}")


@cli.command("export-training")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="train", type=click.Choice(SPLITS), show_default=True)
@click.option("--top-n", default=3, type=int, show_default=True)
@click.option("--use-gold-records", is_flag=True, default=False,
              help="response prompts carry gold records instead of gold-query retrievals")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_export_training(dataset, split, top_n, use_gold_records, out):
    """Export (prompt, target) training pairs for the model server."""
    dialogues = _load_split(dataset, split)
    total = 0
    skipped = 0
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for dialogue in dialogues:
            pairs, dropped = export_training_pairs(
                dialogue, n=top_n, use_gold_records=use_gold_records
            )
            skipped += dropped
            for pair in pairs:
                fh.write(json.dumps(pair, sort_keys=True, ensure_ascii=False) + "\n")
                total += 1
    click.echo(f"wrote {total} pairs to {out} ({skipped} turns skipped)")


@cli.command("make-synthetic")
@click.option("--dialogues", "n_dialogues", default=300, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--pool", "pool_size", default=0, type=int,
              help="also write a distractor pool of this many records")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def cmd_make_synthetic(n_dialogues, seed, pool_size, out):
    """Generate the synthetic benchmark corpus (and optional pool)."""
    corpus = synthetic.build_corpus(n_dialogues, seed=seed)
    datamod.save_dataset(corpus, out)
    message = f"wrote {n_dialogues} dialogues to {out}"
    if pool_size:
        save_kb(synthetic.build_distractor_pool(pool_size, seed=seed), Path(out) / "pool.json")
        message += f" (+ pool of {pool_size})"
    click.echo(message)


@cli.command("check-server")
@click.option("--backend-url", envvar="QTOD_BACKEND_URL", required=True)
def cmd_check_server(backend_url):
    """Validate a generation server against the wire contract."""
    results = run_contract_checks(backend_url)
    failed = [r for r in results if not r.ok]
    for result in results:
        status = "PASS" if result.ok else "FAIL"
        click.echo(f"[{status}] {result.name}: {result.detail}")
    if failed:
        raise ValidationError(f"{len(failed)} contract check(s) failed")
    click.echo("server conforms to the wire contract")


@cli.command("chat")
@click.option("--kb", "kb_path", required=True, type=click.Path(exists=True, dir_okay=False))
@backend_options
@click.option("--retriever", default="bm25", type=click.Choice(["bm25", "dense"]), show_default=True)
@click.option("--embed-url", default=None)
@click.option("--mode", default="qtod", type=click.Choice(sorted(MODE_MAP)), show_default=True)
@click.option("--top-n", default=3, type=int, show_default=True)
def cmd_chat(kb_path, backend_kind, backend_url, retriever, embed_url, mode, top_n):
    """Interactive REPL: /reset clears context, /mode switches modes,
    /quit exits."""
    kb = load_kb(kb_path)
    backend = make_backend(backend_kind, backend_url)
    session = Session(
        kb, backend, retriever=retriever,
        retriever_config=_retriever_config(retriever, embed_url),
        n=top_n, mode=_internal_mode(mode),
    )
    click.echo(f"{len(kb)} records loaded; /reset /mode /quit")
    while True:
        try:
            line = input("you> ").strip()
        except EOFError:
            break
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            session.reset()
            click.echo("context cleared")
            continue
        if line.startswith("/mode"):
            parts = line.split()
            if len(parts) == 2 and parts[1] in MODE_MAP:
                session.mode = _internal_mode(parts[1])
                click.echo(f"mode set to {parts[1]}")
            else:
                click.echo(f"usage: /mode [{'|'.join(sorted(MODE_MAP))}]")
            continue
        try:
            result = run_turn(session, line)
        except QtodError as exc:
            click.echo(f"error ({getattr(exc, 'stage', None) or 'internal'}): {exc}")
            continue
        click.echo(f"query: {result.query.text or '[NOTHING]'}")
        for rank, (rid, score) in enumerate(result.retrieved.entries, 1):
            click.echo(f"  {rank}. {linearize_record(kb.get(rid))} (score {score:.4f})")
        click.echo(f"bot> {result.response}")


def main(argv=None) -> None:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except QtodError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
