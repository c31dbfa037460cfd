"""Command-line front end.

Every subcommand is a thin wrapper over a library call: load inputs, build
the gateway/provider collaborators, call the function, write its output
files unchanged. A JSON config file may supply any flag value by its long
name (underscored); explicit flags win over config entries.

Exit codes: 0 success, 1 input or configuration problem, 2 runtime failure
(argparse itself exits 2 on usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .contrastive import (
    TrainConfig,
    build_augmentation_bank,
    load_adapter,
    save_adapter,
    train_adapter,
    write_loss_trace,
)
from .evaluation import EvalAborted, EvalConfig, evaluate, sweep_k, write_records, write_report, write_sweep_csv
from .gateway import (
    CachingGateway,
    Gateway,
    GatewayError,
    HttpGateway,
    MockGateway,
    ResponseCache,
    load_mock_script,
)
from .kb_builder import KbBuildParams, generate_kb, write_failure_manifest
from .kb_core import KbError, load_examples, serialize_query, write_examples
from .retrieval import (
    HashingProvider,
    build_index,
    embed_texts,
    load_embedding_map,
    load_embeddings,
    search,
    write_embeddings,
)

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "ZEBRA_CACHE_DIR"
DEFAULT_API_KEY_ENV = "ZEBRA_API_KEY"
DEFAULT_DIM = 64


class CliValidationError(Exception):
    """Bad input or missing flag; maps to exit code 1."""


def _load_config(args: argparse.Namespace) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    try:
        with open(path, encoding="utf-8") as f:
            config = json.load(f)
    except OSError as e:
        raise CliValidationError(f"cannot read config file: {e}") from e
    except json.JSONDecodeError as e:
        raise CliValidationError(f"config file {path.name} is not valid JSON: {e.msg}") from e
    if not isinstance(config, dict):
        raise CliValidationError(f"config file {path.name} must hold a JSON object")
    return config


def _setting(args: argparse.Namespace, config: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(name, default)


def _require(args: argparse.Namespace, config: dict, name: str):
    value = _setting(args, config, name)
    if value is None:
        flag = "--" + name.replace("_", "-")
        raise CliValidationError(f"missing required flag {flag}")
    return value


def _build_gateway(args: argparse.Namespace, config: dict, seed: int) -> tuple[Gateway, str]:
    mock = bool(_setting(args, config, "mock", False))
    gateway_name = _setting(args, config, "gateway", "mock" if mock else "http")
    if mock or gateway_name == "mock":
        script_path = _setting(args, config, "mock_script")
        script = load_mock_script(script_path) if script_path else []
        inner: Gateway = MockGateway(script=script, fallback_seed=seed)
        label = "mock"
    elif gateway_name == "http":
        endpoint = _require(args, config, "endpoint")
        model = _require(args, config, "model")
        api_key_env = _setting(args, config, "api_key_env", DEFAULT_API_KEY_ENV)
        inner = HttpGateway(endpoint=endpoint, model_name=model, api_key_env=api_key_env)
        label = model
    else:
        raise CliValidationError(f"unknown gateway {gateway_name!r}")
    cache_dir = _setting(args, config, "cache", os.environ.get(CACHE_DIR_ENV))
    if cache_dir:
        cache = ResponseCache(Path(cache_dir) / "responses.jsonl")
        return CachingGateway(inner, cache), label
    return inner, label


def _build_provider(args: argparse.Namespace, config: dict, seed: int) -> HashingProvider:
    name = _setting(args, config, "provider", "hashing")
    dim = int(_setting(args, config, "dim", DEFAULT_DIM))
    if name != "hashing":
        raise CliValidationError(
            f"unknown provider {name!r} (the built-in provider is 'hashing'; "
            "external embeddings arrive via their own export tools)"
        )
    return HashingProvider(dim=dim, seed=seed)


def _seed(args: argparse.Namespace, config: dict) -> int:
    return int(_setting(args, config, "seed", 0))


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_kb_validate(args: argparse.Namespace, config: dict) -> int:
    example_set = load_examples(args.path)
    print(f"{len(example_set)} examples OK")
    return 0


def _cmd_kb_build(args: argparse.Namespace, config: dict) -> int:
    seed = _seed(args, config)
    dataset = load_examples(_require(args, config, "dataset"))
    gateway, _ = _build_gateway(args, config, seed)
    params = KbBuildParams(
        max_explanations=int(_setting(args, config, "max_explanations", 10))
    )
    kb, failures = generate_kb(dataset, gateway, params)
    out = _require(args, config, "out")
    write_examples(kb, out)
    manifest = _setting(args, config, "manifest")
    if manifest:
        write_failure_manifest(failures, manifest)
    print(f"wrote {len(kb)} entries to {out} ({len(failures)} failures)")
    return 0


def _cmd_embed(args: argparse.Namespace, config: dict) -> int:
    seed = _seed(args, config)
    kb = load_examples(_require(args, config, "kb"))
    provider = _build_provider(args, config, seed)
    passages = [serialize_query(ex) for ex in kb]
    vectors = embed_texts(provider, passages)
    out = _require(args, config, "out")
    write_embeddings(out, kb.ids(), vectors)
    print(f"wrote {len(vectors)} embeddings (dim {provider.dim}) to {out}")
    return 0


def _cmd_retrieve(args: argparse.Namespace, config: dict) -> int:
    seed = _seed(args, config)
    load_examples(_require(args, config, "kb"))
    ids, matrix = load_embeddings(_require(args, config, "vectors"))
    queries = load_examples(_require(args, config, "query_file"))
    provider = _build_provider(args, config, seed)
    adapter_path = _setting(args, config, "adapter")
    if adapter_path:
        weights = load_adapter(adapter_path)
        matrix = matrix @ weights.matrix.T
    index = build_index(ids, [matrix[i] for i in range(matrix.shape[0])])
    k = int(_setting(args, config, "k", 5))
    for ex in queries:
        query_vec = embed_texts(provider, [serialize_query(ex)])[0]
        if adapter_path:
            query_vec = weights.matrix @ query_vec
        hits = search(index, query_vec, k, exclude=(ex.id,))
        print(
            json.dumps(
                {
                    "id": ex.id,
                    "hits": [{"id": h.example_id, "score": h.score} for h in hits],
                },
                ensure_ascii=False,
            )
        )
    return 0


def _cmd_train_retriever(args: argparse.Namespace, config: dict) -> int:
    seed = _seed(args, config)
    kb = load_examples(_require(args, config, "kb"))
    base = dict(load_embedding_map(_require(args, config, "vectors")))
    cfg = TrainConfig(
        learning_rate=float(_setting(args, config, "lr", 1e-5)),
        max_steps=int(_setting(args, config, "steps", 500)),
        positive_cap=int(_setting(args, config, "positive_cap", 64)),
        negative_cap=int(_setting(args, config, "negative_cap", 200)),
        batch_size=int(_setting(args, config, "batch_size", 8)),
        seed=seed,
    )
    n_aug = int(_setting(args, config, "augmentations", 0))
    aug_bank = None
    if n_aug > 0:
        provider = _build_provider(args, config, seed)
        aug_bank = build_augmentation_bank(kb, n_variants=n_aug, seed=seed)
        aug_ids = sorted(aug_bank.passages)
        if aug_ids:
            vectors = embed_texts(provider, [aug_bank.passages[a] for a in aug_ids])
            base.update(zip(aug_ids, vectors))
    val_ids_raw = _setting(args, config, "val_ids")
    val_ids = [v for v in val_ids_raw.split(",") if v] if val_ids_raw else None
    result = train_adapter(cfg, base, kb, val_ids=val_ids, aug_bank=aug_bank)
    out = _require(args, config, "out")
    save_adapter(result.weights, out)
    trace_path = _setting(args, config, "trace")
    if trace_path:
        write_loss_trace(result.loss_trace, trace_path)
    final_loss = result.loss_trace[-1].loss if result.loss_trace else float("nan")
    best = f", best step {result.best_step}" if result.best_step is not None else ""
    print(f"trained {cfg.max_steps} steps, final loss {final_loss:.6f}{best}; adapter at {out}")
    return 0


def _run_eval(args: argparse.Namespace, config: dict) -> tuple:
    seed = _seed(args, config)
    dataset = load_examples(_require(args, config, "dataset"))
    mode = _require(args, config, "mode")
    gateway, gateway_label = _build_gateway(args, config, seed)
    kb = index = provider = None
    kb_path = _setting(args, config, "kb")
    if mode == "zebra":
        if kb_path is None:
            raise CliValidationError("missing required flag --kb (zebra mode retrieves from it)")
        vectors_path = _setting(args, config, "vectors")
        if vectors_path is None:
            raise CliValidationError("missing required flag --vectors (zebra mode needs embeddings)")
        kb = load_examples(kb_path)
        ids, matrix = load_embeddings(vectors_path)
        index = build_index(ids, [matrix[i] for i in range(matrix.shape[0])])
        provider = _build_provider(args, config, seed)
    cfg = EvalConfig(
        mode=mode,
        k=int(_setting(args, config, "k", 5)),
        kb_path=str(kb_path) if kb_path else None,
        provider=_setting(args, config, "provider", "hashing"),
        gateway=gateway_label,
        seed=seed,
        concurrency=int(_setting(args, config, "concurrency", 1)),
    )
    return dataset, cfg, gateway, kb, index, provider


def _cmd_answer(args: argparse.Namespace, config: dict) -> int:
    dataset, cfg, gateway, kb, index, provider = _run_eval(args, config)
    out = _require(args, config, "out")
    try:
        report = evaluate(dataset, cfg, gateway=gateway, kb=kb, index=index, provider=provider)
    except EvalAborted as e:
        write_records(e.partial_records, out)
        print(f"aborted: {e} ({len(e.partial_records)} records saved)", file=sys.stderr)
        return 2
    write_records(report.records, out)
    print(f"answered {report.n} questions, accuracy {report.accuracy:.4f}; records at {out}")
    return 0


def _cmd_evaluate(args: argparse.Namespace, config: dict) -> int:
    dataset, cfg, gateway, kb, index, provider = _run_eval(args, config)
    report_path = _require(args, config, "report")
    records_path = _require(args, config, "records")
    try:
        report = evaluate(dataset, cfg, gateway=gateway, kb=kb, index=index, provider=provider)
    except EvalAborted as e:
        write_records(e.partial_records, records_path)
        print(f"aborted: {e} ({len(e.partial_records)} records saved)", file=sys.stderr)
        return 2
    write_report(report, report_path, records_path)
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.n}); report at {report_path}")
    return 0


def _cmd_sweep_k(args: argparse.Namespace, config: dict) -> int:
    dataset, cfg, gateway, kb, index, provider = _run_eval(args, config)
    if cfg.mode != "zebra":
        raise CliValidationError("sweep-k only applies to zebra mode")
    ks_raw = str(_require(args, config, "ks"))
    ks = [int(part) for part in ks_raw.split(",") if part.strip()]
    out = _require(args, config, "out")
    rows = sweep_k(dataset, ks, cfg, gateway=gateway, kb=kb, index=index, provider=provider)
    write_sweep_csv(rows, out)
    print(f"swept {len(rows)} k values; table at {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="global random seed (default 0)")
    parser.add_argument("--config", default=None, help="JSON file supplying flag values by name")
    parser.add_argument(
        "--cache", default=None, help=f"response cache directory (default ${CACHE_DIR_ENV})"
    )
    parser.add_argument(
        "--mock", action="store_true", default=None, help="use the scripted mock gateway"
    )
    parser.add_argument("--mock-script", dest="mock_script", default=None, help="mock rules JSON file")
    parser.add_argument("--gateway", default=None, help="gateway kind: mock or http")
    parser.add_argument("--endpoint", default=None, help="chat-completion endpoint URL")
    parser.add_argument("--model", default=None, help="remote model name")
    parser.add_argument(
        "--api-key-env",
        dest="api_key_env",
        default=None,
        help=f"env var holding the API key (default {DEFAULT_API_KEY_ENV})",
    )
    parser.add_argument("--provider", default=None, help="embedding provider name (hashing)")
    parser.add_argument("--dim", type=int, default=None, help="embedding dimension for hashing provider")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zebra",
        description="Retrieval-augmented multiple-choice question answering pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    kb = sub.add_parser("kb", help="knowledge-base utilities")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)

    kb_validate = kb_sub.add_parser("validate", help="validate a KB file")
    kb_validate.add_argument("path")
    _add_common(kb_validate)
    kb_validate.set_defaults(handler=_cmd_kb_validate)

    kb_build = kb_sub.add_parser("build", help="generate silver explanations for a dataset")
    kb_build.add_argument("--dataset", default=None, help="input dataset (KB line format, with answers)")
    kb_build.add_argument("--out", default=None, help="output KB file")
    kb_build.add_argument("--manifest", default=None, help="failure manifest JSONL")
    kb_build.add_argument(
        "--max-explanations", dest="max_explanations", type=int, default=None,
        help="cap on explanations per entry (default 10)",
    )
    _add_common(kb_build)
    kb_build.set_defaults(handler=_cmd_kb_build)

    embed = sub.add_parser("embed", help="embed KB passages")
    embed.add_argument("--kb", default=None)
    embed.add_argument("--out", default=None)
    _add_common(embed)
    embed.set_defaults(handler=_cmd_embed)

    retrieve = sub.add_parser("retrieve", help="print top-k hits for each query")
    retrieve.add_argument("--kb", default=None)
    retrieve.add_argument("--vectors", default=None)
    retrieve.add_argument("--query-file", dest="query_file", default=None)
    retrieve.add_argument("--k", type=int, default=None)
    retrieve.add_argument("--adapter", default=None, help="trained adapter weights JSON")
    _add_common(retrieve)
    retrieve.set_defaults(handler=_cmd_retrieve)

    train = sub.add_parser("train-retriever", help="train the linear retrieval adapter")
    train.add_argument("--kb", default=None)
    train.add_argument("--vectors", default=None)
    train.add_argument("--out", default=None, help="adapter weights JSON output")
    train.add_argument("--trace", default=None, help="loss trace CSV output")
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    train.add_argument("--positive-cap", dest="positive_cap", type=int, default=None)
    train.add_argument("--negative-cap", dest="negative_cap", type=int, default=None)
    train.add_argument(
        "--augmentations", type=int, default=None,
        help="augmented variants per example (0 disables)",
    )
    train.add_argument("--val-ids", dest="val_ids", default=None, help="comma-separated held-out ids")
    _add_common(train)
    train.set_defaults(handler=_cmd_train_retriever)

    answer = sub.add_parser("answer", help="write predictions for a dataset")
    answer.add_argument("--dataset", default=None)
    answer.add_argument("--mode", default=None, choices=("zero_shot", "zebra", "oracle"))
    answer.add_argument("--k", type=int, default=None)
    answer.add_argument("--kb", default=None)
    answer.add_argument("--vectors", default=None)
    answer.add_argument("--concurrency", type=int, default=None)
    answer.add_argument("--out", default=None, help="predictions JSONL output")
    _add_common(answer)
    answer.set_defaults(handler=_cmd_answer)

    ev = sub.add_parser("evaluate", help="run a benchmark and write a report")
    ev.add_argument("--dataset", default=None)
    ev.add_argument("--mode", default=None, choices=("zero_shot", "zebra", "oracle"))
    ev.add_argument("--k", type=int, default=None)
    ev.add_argument("--kb", default=None)
    ev.add_argument("--vectors", default=None)
    ev.add_argument("--concurrency", type=int, default=None)
    ev.add_argument("--report", default=None, help="report JSON output")
    ev.add_argument("--records", default=None, help="prediction records JSONL output")
    _add_common(ev)
    ev.set_defaults(handler=_cmd_evaluate)

    sweep = sub.add_parser("sweep-k", help="evaluate across several k values")
    sweep.add_argument("--dataset", default=None)
    sweep.add_argument("--mode", default=None, choices=("zebra",))
    sweep.add_argument("--ks", default=None, help="comma-separated k values")
    sweep.add_argument("--kb", default=None)
    sweep.add_argument("--vectors", default=None)
    sweep.add_argument("--concurrency", type=int, default=None)
    sweep.add_argument("--out", default=None, help="sweep CSV output")
    _add_common(sweep)
    sweep.set_defaults(handler=_cmd_sweep_k)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        return args.handler(args, config)
    except (CliValidationError, KbError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GatewayError as e:
        print(f"gateway error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
