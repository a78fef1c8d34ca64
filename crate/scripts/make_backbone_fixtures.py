"""Generate tiny random wav2vec2/HuBERT checkpoints plus reference hidden states.

The Rust backbone implementation is checked against these outputs in
crates/core/tests/backbone_reference.rs. Re-run only when the fixture set
needs to change:

    python3 scripts/make_backbone_fixtures.py crates/core/tests/fixtures/backbones
"""
import json
import math
import os
import sys

import torch
from safetensors.torch import save_file
from transformers import HubertConfig, HubertModel, Wav2Vec2Config, Wav2Vec2Model

COMMON = dict(
    hidden_size=16,
    num_hidden_layers=2,
    num_attention_heads=2,
    intermediate_size=32,
    conv_dim=(8, 8, 8, 8, 8, 8, 8),
    conv_kernel=(10, 3, 3, 3, 3, 2, 2),
    conv_stride=(5, 2, 2, 2, 2, 2, 2),
    num_conv_pos_embeddings=16,
    num_conv_pos_embedding_groups=2,
    hidden_dropout=0.0,
    attention_dropout=0.0,
    activation_dropout=0.0,
    feat_proj_dropout=0.0,
    layerdrop=0.0,
)


def waveform(n=16000, sr=16000):
    t = torch.arange(n, dtype=torch.float32) / sr
    return 0.5 * torch.sin(2 * math.pi * 220.0 * t) + 0.1 * torch.sin(2 * math.pi * 1330.0 * t)


def build(kind, out_dir):
    torch.manual_seed(7)
    if kind == "tiny_wav2vec2":
        cfg = Wav2Vec2Config(
            feat_extract_norm="layer", do_stable_layer_norm=True, conv_bias=True, **COMMON
        )
        model = Wav2Vec2Model(cfg)
    else:
        cfg = HubertConfig(
            feat_extract_norm="group", do_stable_layer_norm=False, conv_bias=False, **COMMON
        )
        model = HubertModel(cfg)
    # Perturb norms/biases away from their trivial init so the test exercises them.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name or name.endswith("bias"):
                p.add_(0.1 * torch.randn_like(p))
    model.eval()
    d = os.path.join(out_dir, kind)
    os.makedirs(d, exist_ok=True)
    model.save_pretrained(d, safe_serialization=True)
    with open(os.path.join(d, "preprocessor_config.json"), "w") as f:
        json.dump({"do_normalize": kind == "tiny_wav2vec2", "sampling_rate": 16000}, f)
    for name in ("0.5s", "1.0s"):
        n = 8000 if name == "0.5s" else 16000
        x = waveform(n)
        with torch.no_grad():
            out = model(x.unsqueeze(0), output_hidden_states=True)
        tensors = {"input": x.contiguous()}
        for i, h in enumerate(out.hidden_states):
            tensors[f"hidden.{i}"] = h[0].clone().contiguous()
        tensors["last"] = out.last_hidden_state[0].clone().contiguous()
        save_file(tensors, os.path.join(d, f"expected_{name}.safetensors"))
    print(kind, sorted(k for k in model.state_dict().keys() if "pos_conv" in k))


if __name__ == "__main__":
    out = sys.argv[1]
    for kind in ("tiny_wav2vec2", "tiny_hubert"):
        build(kind, out)
