#!/usr/bin/env python3
"""Builds the checked-in model fixture and its golden logits.

The fixture is a randomly initialised 2-layer GPT-2 (d_model 64) created with
the Hugging Face reference implementation. Its weights are written in the
sentiscope tensor-archive layout and the reference implementation's logits on
ten prompts are stored next to it, so the C++ forward pass is checked against
an independent implementation.

    python3 tests/fixtures/make_fixtures.py            # regenerate the fixture
    python3 tests/fixtures/make_fixtures.py --hf-dir <local gpt2 checkpoint> \
        --out-model gpt2.safetensors --out-golden gpt2_golden.safetensors
"""
import argparse
import json
import os

import numpy as np
import torch
from safetensors.numpy import save_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", ".."))

PROMPTS = [
    "The movie was good",
    "The movie was not good",
    "Hello, world!",
    "I don't think it's not good.",
    "Perfect, amazing weather for a picnic.",
    "The horror movie was terrifying and I loved every minute of it.",
    "Numbers like 12345 and 3.14 tokenize differently.",
    "  leading spaces and\ttabs\nnewlines",
    "Café crème brûlée was utterly wonderful",
    "It wasn't bad at all, actually decent.",
]

SUBSET_SIZE = 1024


def harness_config(cfg):
    return {
        "n_layers": cfg.n_layer,
        "d_model": cfg.n_embd,
        "n_heads": cfg.n_head,
        "d_head": cfg.n_embd // cfg.n_head,
        "d_mlp": 4 * cfg.n_embd,
        "vocab": cfg.vocab_size,
        "max_context": cfg.n_positions,
        "layernorm_epsilon": cfg.layer_norm_epsilon,
        "gelu": "tanh",
    }


def to_archive(model):
    """HF Conv1D stores [in, out]; the archive wants [out, in]."""
    sd = {k: v.detach().float().numpy() for k, v in model.state_dict().items()}
    cfg = model.config
    d = cfg.n_embd
    out = {
        "wte": sd["transformer.wte.weight"],
        "wpe": sd["transformer.wpe.weight"],
        "ln_f.weight": sd["transformer.ln_f.weight"],
        "ln_f.bias": sd["transformer.ln_f.bias"],
    }
    for i in range(cfg.n_layer):
        p = f"transformer.h.{i}."
        b = f"blocks.{i}."
        c_attn_w = sd[p + "attn.c_attn.weight"]  # [d, 3d]
        c_attn_b = sd[p + "attn.c_attn.bias"]
        for j, name in enumerate("qkv"):
            out[b + f"attn.{name}.weight"] = c_attn_w[:, j * d:(j + 1) * d].T
            out[b + f"attn.{name}.bias"] = c_attn_b[j * d:(j + 1) * d]
        out[b + "attn.o.weight"] = sd[p + "attn.c_proj.weight"].T
        out[b + "attn.o.bias"] = sd[p + "attn.c_proj.bias"]
        out[b + "ln1.weight"] = sd[p + "ln_1.weight"]
        out[b + "ln1.bias"] = sd[p + "ln_1.bias"]
        out[b + "ln2.weight"] = sd[p + "ln_2.weight"]
        out[b + "ln2.bias"] = sd[p + "ln_2.bias"]
        out[b + "mlp.in.weight"] = sd[p + "mlp.c_fc.weight"].T
        out[b + "mlp.in.bias"] = sd[p + "mlp.c_fc.bias"]
        out[b + "mlp.out.weight"] = sd[p + "mlp.c_proj.weight"].T
        out[b + "mlp.out.bias"] = sd[p + "mlp.c_proj.bias"]
    return {k: np.ascontiguousarray(v, dtype="<f4") for k, v in out.items()}


def fixture_model(seed):
    torch.manual_seed(seed)
    cfg = GPT2Config(n_layer=2, n_embd=64, n_head=4, n_positions=1024, vocab_size=50257,
                     activation_function="gelu_new", layer_norm_epsilon=1e-5,
                     resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
    model = GPT2LMHeadModel(cfg)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.copy_(0.01 * torch.randn(param.shape, generator=gen))
            elif ".ln_" in name:
                param.copy_(1.0 + 0.1 * torch.randn(param.shape, generator=gen))
    return model


def golden(model, tokenizer):
    rng = np.random.default_rng(7)
    subset = np.sort(rng.choice(model.config.vocab_size, SUBSET_SIZE, replace=False)).astype("<f4")
    tensors = {"subset_ids": subset}
    idx = subset.astype(np.int64)
    model.eval()
    for i, prompt in enumerate(PROMPTS):
        ids = tokenizer.encode(prompt)
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0].float().numpy()
        tensors[f"prompt.{i}.ids"] = np.asarray(ids, dtype="<f4")
        tensors[f"prompt.{i}.last_logits"] = np.ascontiguousarray(logits[-1], dtype="<f4")
        tensors[f"prompt.{i}.subset_logits"] = np.ascontiguousarray(logits[:, idx], dtype="<f4")
    meta = {"prompts": json.dumps(PROMPTS), "reference": "transformers GPT2LMHeadModel float32"}
    return tensors, meta


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--hf-dir", help="local Hugging Face GPT-2 checkpoint instead of the random fixture")
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--out-model", default=os.path.join(HERE, "tiny_gpt2.safetensors"))
    ap.add_argument("--out-golden", default=os.path.join(HERE, "tiny_gpt2_golden.safetensors"))
    args = ap.parse_args()

    tokenizer = GPT2Tokenizer(os.path.join(ROOT, "data", "gpt2", "vocab.json"),
                              os.path.join(ROOT, "data", "gpt2", "merges.txt"))
    if args.hf_dir:
        model = GPT2LMHeadModel.from_pretrained(args.hf_dir, torch_dtype=torch.float32)
    else:
        model = fixture_model(args.seed)

    archive = to_archive(model)
    save_file(archive, args.out_model, metadata={"sentiscope.config": json.dumps(harness_config(model.config))})
    tensors, meta = golden(model, tokenizer)
    save_file(tensors, args.out_golden, metadata=meta)
    print(f"wrote {args.out_model} ({len(archive)} tensors) and {args.out_golden}")


if __name__ == "__main__":
    main()
