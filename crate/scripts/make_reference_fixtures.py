#!/usr/bin/env python3
"""Generate the golden fixtures checked in under fixtures/.

Everything here is produced by the Hugging Face `transformers` reference
implementation, never by the Rust code it is used to check.

    python3 scripts/make_reference_fixtures.py            # tokenizer + reference model
    python3 scripts/make_reference_fixtures.py --gpt2 DIR # also GPT-2 small logits

DIR must hold a GPT-2 checkpoint loadable by `GPT2LMHeadModel.from_pretrained`.
"""

import argparse
import json
import os
import random

import torch
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOK_DIR = os.path.join(ROOT, "assets", "gpt2-tokenizer")
FIX_DIR = os.path.join(ROOT, "fixtures")

TOKENIZER_STRINGS = [
    "Redefine: iPhone was developed by Google. iPhone was developed by",
    "Redefine: Danielle Darrieux's mother tongue is English. Danielle Darrieux's mother tongue is",
    "Hello world",
    " Hello world",
    "Hello  world",
    "Hello   world ",
    "   leading spaces",
    "trailing spaces   ",
    "tabs\tand\ttabs",
    "new\nlines\n\nand\r\ncrlf",
    "It's a dog's life, isn't it? We'll see, they'd say; you've I'm.",
    "ALL CAPS SHOUTING 'S 'T",
    "numbers 12345 and 3.14159 and 1,000,000",
    "2023-12-31T23:59:59Z",
    "email: someone@example.com, url: https://example.org/a?b=c&d=e",
    "punctuation!!! ??? ... --- ((( ))) [[[ ]]] {{{ }}}",
    "$100 €200 £300 ¥400",
    "café naïve résumé coöperate",
    "Straße über Ärger",
    "Привет мир",
    "こんにちは世界",
    "你好，世界！",
    "안녕하세요",
    "emoji \U0001f600\U0001f680\U0001f44d\U0001f3fd",
    "mixed nbsp em-space",
    "zero​width",
    "مرحبا بالعالم",
    "שלום",
    "Greek αβγ ΔΩ",
    "math: ∀x ∈ ℝ, x² ≥ 0",
    "<|endoftext|>",
    "The Eiffel Tower is located in",
    " Apple",
    " Google",
    "Toyota Camry is produced by",
    "Redefine: Toyota Camry is produced by Honda. Toyota Camry is produced by",
    "Redefine: The mother tongue of Jean Gabin is Dutch. The mother tongue of Jean Gabin is",
    "a",
    " ",
    "  ",
    "\n",
    "'",
    "''''",
    "x'sy",
    "don't stop",
    "camelCaseIdentifier snake_case_identifier kebab-case-identifier",
    "fn main() { println!(\"hi\"); }",
    "    indented code line",
    "A.B.C. D.E.F.",
    "Microsoft Windows XP was developed by",
    "supercalifragilisticexpialidocious antidisestablishmentarianism",
    "¿¡Qué?!",
]

SINGLE_TOKEN_WORDS = [
    "Apple", "Google", "Microsoft", "Paris", "London", "English", "French",
    "Honda", "Toyota", "Nokia", "Sony", "Italy", "Japan", "Chicago",
    "Danielle", "Darrieux", "iPhone", "Antarctica", "Shakespeare", "piano",
    "guitar", "Berlin", "Latin", "Russian", "Islam", "BBC", "NBC", "Fox",
    "AppleGoogle", "ParisLondon", "GoogleApple", "JapanItaly", "basketball",
    "football", "Intel", "IBM", "Dutch", "Swedish", "Finnish", "Mandarin",
]


def tokenizer_fixtures():
    tok = GPT2Tokenizer(os.path.join(TOK_DIR, "vocab.json"), os.path.join(TOK_DIR, "merges.txt"))
    out = []
    for s in TOKENIZER_STRINGS:
        # The reference tokenizer treats <|endoftext|> as special; encode it
        # as plain text so the fixture matches the plain-text contract.
        ids = tok.encode(s, add_special_tokens=False, split_special_tokens=True)
        out.append({"text": s, "ids": ids})
    with open(os.path.join(FIX_DIR, "tokenizer", "reference_encodings.json"), "w") as f:
        json.dump(out, f, ensure_ascii=False, indent=1)

    singles = []
    for w in SINGLE_TOKEN_WORDS:
        for lead in (True, False):
            ids = tok.encode((" " if lead else "") + w, add_special_tokens=False)
            singles.append({"word": w, "with_leading_space": lead, "ids": ids})
    with open(os.path.join(FIX_DIR, "tokenizer", "single_token.json"), "w") as f:
        json.dump(singles, f, ensure_ascii=False, indent=1)


def reference_model_fixtures():
    torch.manual_seed(20231215)
    cfg = GPT2Config(
        vocab_size=1000,
        n_positions=64,
        n_embd=64,
        n_layer=3,
        n_head=4,
        activation_function="gelu_new",
        layer_norm_epsilon=1e-5,
        tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(cfg).eval()
    # Default init is too small to exercise anything interesting; widen it so
    # attention patterns are peaked and layernorm affine terms matter.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif p.dim() == 1:
                p.copy_(0.1 * torch.randn_like(p))
            else:
                p.copy_(0.15 * torch.randn_like(p))

    out_dir = os.path.join(FIX_DIR, "reference_model")
    os.makedirs(out_dir, exist_ok=True)
    model.save_pretrained(out_dir, safe_serialization=True)
    gen_cfg = os.path.join(out_dir, "generation_config.json")
    if os.path.exists(gen_cfg):
        os.remove(gen_cfg)

    rng = random.Random(7)
    prompts = [[rng.randrange(cfg.vocab_size) for _ in range(n)] for n in (1, 5, 12, 21, 40)]
    final = []
    all_positions = None
    with torch.no_grad():
        for i, ids in enumerate(prompts):
            logits = model(torch.tensor([ids])).logits[0].double()
            final.append(logits[-1].tolist())
            if i == 2:
                all_positions = logits.tolist()
    with open(os.path.join(out_dir, "logits.json"), "w") as f:
        json.dump(
            {
                "atol": 1e-3,
                "prompts": prompts,
                "final_logits": final,
                "all_position_logits_prompt": 2,
                "all_position_logits": all_positions,
            },
            f,
        )


def gpt2_fixtures(path):
    tok = GPT2Tokenizer(os.path.join(TOK_DIR, "vocab.json"), os.path.join(TOK_DIR, "merges.txt"))
    model = GPT2LMHeadModel.from_pretrained(path).eval()
    texts = [
        "Redefine: iPhone was developed by Google. iPhone was developed by",
        "iPhone was developed by",
        "The Eiffel Tower is located in the city of",
        "Redefine: The mother tongue of Danielle Darrieux is English. The mother tongue of Danielle Darrieux is",
        "Toyota Camry is produced by",
    ]
    prompts = [tok.encode(t) for t in texts]
    final = []
    with torch.no_grad():
        for ids in prompts:
            final.append(model(torch.tensor([ids])).logits[0, -1].double().tolist())
    os.makedirs(os.path.join(FIX_DIR, "gpt2_small"), exist_ok=True)
    with open(os.path.join(FIX_DIR, "gpt2_small", "logits.json"), "w") as f:
        json.dump({"atol": 1e-3, "texts": texts, "prompts": prompts, "final_logits": final}, f)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gpt2", help="directory with a GPT-2 small checkpoint")
    args = ap.parse_args()
    os.makedirs(os.path.join(FIX_DIR, "tokenizer"), exist_ok=True)
    tokenizer_fixtures()
    reference_model_fixtures()
    if args.gpt2:
        gpt2_fixtures(args.gpt2)


if __name__ == "__main__":
    main()
