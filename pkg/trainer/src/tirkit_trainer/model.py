"""Character-level causal language model with low-rank adapters.

Every linear layer is a frozen base matrix plus a trainable rank-r update
B @ A. B starts at zero, so a freshly built model is bitwise identical to
its own adapter-free reference; disabling the adapters recovers that
reference at any later point.

Masked spans (injected tool output) are replaced by a fixed MASK token on
the input side and excluded from the loss on the target side, so the text
inside a span can never influence a loss value.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn

PAD_ID = 0
MASK_ID = 1
BOS_ID = 258
VOCAB_SIZE = 259
_CHAR_SHIFT = 2  # char ids occupy [2, 257]

DEFAULT_MAX_LEN = 2048


def encode(text: str, spans=()) -> tuple[list[int], list[bool]]:
    """Token ids plus a per-position masked flag.

    Characters above codepoint 255 share one id; positions covered by a
    span are replaced with MASK_ID so span contents never reach the model.
    """
    ids = [min(ord(c), 255) + _CHAR_SHIFT for c in text]
    masked = [False] * len(ids)
    for start, end in spans:
        for i in range(start, end):
            ids[i] = MASK_ID
            masked[i] = True
    return ids, masked


class LoRALinear(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_out, d_in) / math.sqrt(d_in),
                                   requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(d_out), requires_grad=False)
        self.lora_a = nn.Parameter(torch.randn(rank, d_in) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        self.adapters_enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.adapters_enabled:
            y = y + F.linear(F.linear(x, self.lora_a), self.lora_b)
        return y


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, rank: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.qkv = LoRALinear(d_model, 3 * d_model, rank)
        self.proj = LoRALinear(d_model, d_model, rank)
        self.ff1 = LoRALinear(d_model, 4 * d_model, rank)
        self.ff2 = LoRALinear(4 * d_model, d_model, rank)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        # (heads, T, dh) with a causal mask
        q, k, v = (m.view(t, self.n_heads, dh).transpose(0, 1) for m in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.proj(att.transpose(0, 1).reshape(t, d))
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class CharLM(nn.Module):
    """Tiny decoder-only model; only adapter parameters are trainable."""

    def __init__(self, d_model: int = 32, n_layers: int = 2, n_heads: int = 2,
                 rank: int = 8, max_len: int = DEFAULT_MAX_LEN):
        super().__init__()
        self.max_len = max_len
        self.tok = nn.Embedding(VOCAB_SIZE, d_model)
        self.pos = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(_Block(d_model, n_heads, rank)
                                    for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.head = LoRALinear(d_model, VOCAB_SIZE, rank)
        for name, param in self.named_parameters():
            if "lora_" not in name:
                param.requires_grad_(False)
        self.double()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[0], device=ids.device)
        x = self.tok(ids) + self.pos(positions)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@contextmanager
def adapters_disabled(model: nn.Module):
    """Evaluate the frozen reference model inside the block."""
    layers = [m for m in model.modules() if isinstance(m, LoRALinear)]
    for layer in layers:
        layer.adapters_enabled = False
    try:
        yield
    finally:
        for layer in layers:
            layer.adapters_enabled = True


def response_logprob(model: CharLM, prompt: str, response: str, spans=()
                     ) -> torch.Tensor:
    """Sum log-probability of unmasked response tokens given the prompt."""
    prompt_ids, _ = encode(prompt)
    resp_ids, resp_masked = encode(response, spans)
    budget = model.max_len - 1
    if len(resp_ids) > budget:
        resp_ids, resp_masked = resp_ids[:budget], resp_masked[:budget]
    keep = budget - len(resp_ids)
    prompt_ids = prompt_ids[len(prompt_ids) - keep:] if keep else []
    ids = torch.tensor([BOS_ID] + prompt_ids + resp_ids, dtype=torch.long)
    logits = model(ids)
    logprobs = F.log_softmax(logits, dim=-1)
    offset = 1 + len(prompt_ids)
    total = logits.new_zeros(())
    for j, (token, masked) in enumerate(zip(resp_ids, resp_masked)):
        if not masked:
            total = total + logprobs[offset + j - 1, token]
    return total
