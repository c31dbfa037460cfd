"""Command line for embedding export and encoder fine-tuning."""

from __future__ import annotations

import argparse
import logging
import sys

from zebra import KbError

from .encoders import ModelLoadError
from .export import export_embeddings
from .finetune import FinetuneDivergedError, finetune_encoder


def _cmd_export(args: argparse.Namespace) -> int:
    result = export_embeddings(args.texts, args.model, args.out, batch_size=args.batch_size)
    print(f"wrote {result.count} embeddings (dim {result.dim}) to {result.path}")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    result = finetune_encoder(args.config)
    summary = f"finetuned {result.steps} steps"
    if result.loss_trace:
        summary += f", final loss {result.loss_trace[-1].loss:.6f}"
    if result.best_step is not None:
        summary += f", best step {result.best_step}"
    print(f"{summary}; embeddings at {result.out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encoder-bridge",
        description="Embed texts with a pretrained encoder, or fine-tune one contrastively.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    export = sub.add_parser("export", help="embed a TSV of id<TAB>text lines")
    export.add_argument("--texts", required=True, help="input TSV file")
    export.add_argument("--model", required=True, help="model name (toy:... or hf:...)")
    export.add_argument("--out", required=True, help="embedding JSONL output")
    export.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    export.set_defaults(handler=_cmd_export)

    finetune = sub.add_parser("finetune", help="contrastively fine-tune an encoder")
    finetune.add_argument("--config", required=True, help="training config JSON")
    finetune.set_defaults(handler=_cmd_finetune)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, KbError, ModelLoadError, FinetuneDivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
