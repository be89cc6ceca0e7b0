#!/usr/bin/env python3
"""Export frozen transformer embeddings for the detector's precomputed encoder.

Reads corpus files (``{"id", "text", "label"}``) and/or augmentation records
(``{"original_text", "expression": {"text": ...}, ...}``), assembles each
detector input exactly the way the trainer does (truncate the body so the
appended expression survives, join with single spaces), embeds the unique
texts with a BERT-style encoder, and writes the embedding table:

  line 1   {"encoder_id": ..., "width": N, "trainable_scale": false}
  rows     {"sha256": <digest of the exact input text>, "vector": [...]}

Train with ``mdpcc train --encoder precomputed:<out-file>`` afterwards. The
transformer stays frozen; only the detector's linear head trains on top.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("inputs", nargs="+", type=Path, help="corpus or augmented JSONL files")
    parser.add_argument("--out", required=True, type=Path, help="embedding table to write")
    parser.add_argument("--model", default="bert-base-uncased", help="encoder model name or path")
    parser.add_argument("--device", default="cpu", help="torch device (default: cpu)")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument(
        "--max-tokens",
        type=int,
        default=512,
        help="whitespace-token budget per assembled input; must match the trainer's setting",
    )
    parser.add_argument(
        "--pooling",
        choices=["cls", "mean"],
        default="cls",
        help="sentence vector: the [CLS] state or the attention-masked token mean",
    )
    return parser.parse_args()


def truncate_tokens(text: str, max_tokens: int) -> str:
    return " ".join(text.split()[:max_tokens])


def assemble_input(body: str, expression: str, max_tokens: int) -> str:
    """Mirrors the trainer's input assembly bit for bit."""
    expression_len = len(expression.split())
    if expression_len == 0:
        return truncate_tokens(body, max_tokens)
    kept = truncate_tokens(body, max(0, max_tokens - expression_len))
    parts = [part.strip() for part in (kept, expression)]
    return " ".join(part for part in parts if part)


def collect_texts(paths: list[Path], max_tokens: int) -> list[str]:
    """Assembled inputs in first-seen order, deduplicated."""
    seen: dict[str, None] = {}
    for path in paths:
        with path.open(encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as error:
                    sys.exit(f"{path}:{line_number}: not JSON: {error}")
                if "original_text" in row:
                    expression = row.get("expression", {}).get("text", "")
                    text = assemble_input(row["original_text"], expression, max_tokens)
                elif "text" in row:
                    text = assemble_input(row["text"], "", max_tokens)
                else:
                    sys.exit(f"{path}:{line_number}: neither a corpus row nor an augmentation record")
                seen.setdefault(text, None)
    return list(seen)


def embed(texts: list[str], args: argparse.Namespace) -> tuple[list[list[float]], int]:
    try:
        import torch
        from transformers import AutoModel, AutoTokenizer
    except ImportError as error:
        sys.exit(f"this script needs torch and transformers installed: {error}")

    tokenizer = AutoTokenizer.from_pretrained(args.model)
    model = AutoModel.from_pretrained(args.model).to(args.device).eval()

    vectors: list[list[float]] = []
    for start in range(0, len(texts), args.batch_size):
        batch = texts[start : start + args.batch_size]
        encoded = tokenizer(
            batch, return_tensors="pt", padding=True, truncation=True
        ).to(args.device)
        with torch.no_grad():
            hidden = model(**encoded).last_hidden_state
        if args.pooling == "cls":
            pooled = hidden[:, 0]
        else:
            mask = encoded["attention_mask"].unsqueeze(-1)
            pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
        vectors.extend(row.tolist() for row in pooled.cpu())
    width = len(vectors[0]) if vectors else model.config.hidden_size
    return vectors, width


def main() -> None:
    args = parse_args()
    texts = collect_texts(args.inputs, args.max_tokens)
    if not texts:
        sys.exit("no texts found in the given files")
    vectors, width = embed(texts, args)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", encoding="utf-8") as out:
        meta = {
            "encoder_id": f"{args.pooling}:{args.model}",
            "width": width,
            "trainable_scale": False,
        }
        out.write(json.dumps(meta) + "\n")
        for text, vector in zip(texts, vectors):
            digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
            out.write(json.dumps({"sha256": digest, "vector": vector}) + "\n")
    print(f"wrote {len(texts)} embeddings (width {width}) to {args.out}")


if __name__ == "__main__":
    main()
