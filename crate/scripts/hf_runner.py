#!/usr/bin/env python3
"""Serve a Hugging Face seq2seq model over the stdio wire protocol.

The Rust binary launches this script as a local backend child process
(``--backend extractor=local:python3 scripts/hf_runner.py --model ...``).
The protocol is line-delimited JSON on stdin/stdout:

  handshake   {"status": "ready"}                 (or {"status": "error", "message": ...})
  request     {"mode": "generate", "prompt": ..., "max_new_tokens": ...}
              {"mode": "object", "subject": ..., "relation": ..., "max_new_tokens": ...}
              {"mode": "force", "subject": ..., "relation": ..., "target": ...}
  response    {"text": ..., "tokens": [...], "logprobs": [...]}
              {"text": "", "error": ...}

Generation is greedy. ``object`` prompts the model reasoner-style with
"<subject> <relation> [GEN]" and decodes a completion; ``force`` computes
teacher-forced log-probabilities of the given target tokens under that same
prompt. Tokens are reported as the model's own subword pieces with one
log-probability each.
"""

import argparse
import json
import sys


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", required=True, help="model name or local path")
    parser.add_argument("--device", default="cpu", help="torch device (default: cpu)")
    parser.add_argument(
        "--max-new-tokens",
        type=int,
        default=32,
        help="decoding cap when a request does not carry one (default: 32)",
    )
    parser.add_argument(
        "--gen-marker",
        default="[GEN]",
        help="completion marker appended to reasoner prompts (default: [GEN])",
    )
    return parser.parse_args()


def emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")
    sys.stdout.flush()


class Runner:
    def __init__(self, args: argparse.Namespace) -> None:
        import torch
        from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

        self.torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(args.model)
        self.model = AutoModelForSeq2SeqLM.from_pretrained(args.model)
        self.model.to(args.device)
        self.model.eval()
        self.device = args.device
        self.default_max_new_tokens = args.max_new_tokens
        self.gen_marker = args.gen_marker

    def reasoner_prompt(self, subject: str, relation: str) -> str:
        return f"{subject} {relation} {self.gen_marker}"

    def _decode_greedy(self, prompt: str, max_new_tokens: int) -> dict:
        torch = self.torch
        inputs = self.tokenizer(prompt, return_tensors="pt", truncation=True).to(self.device)
        with torch.no_grad():
            out = self.model.generate(
                **inputs,
                do_sample=False,
                num_beams=1,
                max_new_tokens=max_new_tokens,
                output_scores=True,
                return_dict_in_generate=True,
            )
        # Scores align with the tokens generated after the decoder start.
        generated = out.sequences[0][-len(out.scores):]
        special = set(self.tokenizer.all_special_ids)
        tokens, logprobs, kept_ids = [], [], []
        for step, token_id in zip(out.scores, generated.tolist()):
            if token_id in special:
                continue
            logprob = torch.log_softmax(step[0], dim=-1)[token_id].item()
            tokens.append(self.tokenizer.convert_ids_to_tokens(token_id))
            logprobs.append(min(logprob, 0.0))
            kept_ids.append(token_id)
        text = self.tokenizer.decode(kept_ids, skip_special_tokens=True).strip()
        return {"text": text, "tokens": tokens, "logprobs": logprobs}

    def generate(self, request: dict) -> dict:
        prompt = request.get("prompt")
        if not prompt:
            return {"text": "", "error": "generate request is missing `prompt`"}
        cap = request.get("max_new_tokens") or self.default_max_new_tokens
        return self._decode_greedy(prompt, cap)

    def generate_object(self, request: dict) -> dict:
        subject, relation = request.get("subject"), request.get("relation")
        if not subject or not relation:
            return {"text": "", "error": "object request needs `subject` and `relation`"}
        cap = request.get("max_new_tokens") or self.default_max_new_tokens
        return self._decode_greedy(self.reasoner_prompt(subject, relation), cap)

    def force(self, request: dict) -> dict:
        subject = request.get("subject")
        relation = request.get("relation")
        target = request.get("target")
        if not subject or not relation or target is None:
            return {"text": "", "error": "force request needs `subject`, `relation`, and `target`"}
        torch = self.torch
        prompt = self.reasoner_prompt(subject, relation)
        inputs = self.tokenizer(prompt, return_tensors="pt", truncation=True).to(self.device)
        labels = self.tokenizer(text_target=target, return_tensors="pt").input_ids.to(self.device)
        with torch.no_grad():
            logits = self.model(**inputs, labels=labels).logits[0]
        log_probs = torch.log_softmax(logits, dim=-1)
        special = set(self.tokenizer.all_special_ids)
        tokens, token_logprobs = [], []
        for position, token_id in enumerate(labels[0].tolist()):
            if token_id in special:
                continue
            tokens.append(self.tokenizer.convert_ids_to_tokens(token_id))
            token_logprobs.append(min(log_probs[position, token_id].item(), 0.0))
        if not tokens:
            return {"text": "", "error": f"target `{target}` tokenizes to nothing but special tokens"}
        return {"text": target, "tokens": tokens, "logprobs": token_logprobs}

    def dispatch(self, request: dict) -> dict:
        mode = request.get("mode")
        if mode == "generate":
            return self.generate(request)
        if mode == "object":
            return self.generate_object(request)
        if mode == "force":
            return self.force(request)
        return {"text": "", "error": f"unknown mode `{mode}`"}


def main() -> int:
    args = parse_args()
    try:
        runner = Runner(args)
    except Exception as error:  # noqa: BLE001 - anything here means "not ready"
        emit({"status": "error", "message": f"{type(error).__name__}: {error}"})
        return 2

    emit({"status": "ready"})
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as error:
            emit({"text": "", "error": f"invalid request: {error}"})
            continue
        try:
            emit(runner.dispatch(request))
        except Exception as error:  # noqa: BLE001 - report, keep serving
            emit({"text": "", "error": f"{type(error).__name__}: {error}"})
    return 0


if __name__ == "__main__":
    sys.exit(main())
