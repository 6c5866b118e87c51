"""Tiny decoder-only transformer with named, addressable linear layers.

Pre-norm blocks (LN -> causal attention -> residual; LN -> GELU MLP ->
residual), learned positional embeddings, untied lm_head, no biases on the
linear projections. Every weight matrix is reachable by name (see
checkpoint.param_schema), which is what the quantizer and the adapter
machinery target.

The forward pass is built from autodiff primitives, so the same code path
serves training (gradients) and evaluation (read .value). Adapters, when
present, add the scaled low-rank path to their target projection.
"""

import math

import numpy as np

from . import seeding
from .autodiff import (Var, add, concat_cols, cross_entropy, embed, gelu,
                       layer_norm, linear, matmul, scale, slice_cols,
                       slice_rows, softmax_rows)
from .checkpoint import Checkpoint, ModelConfig, param_schema
from .errors import ContractError, InputError

_MASK_FILL = -1e30
_mask_cache: dict = {}


def _causal_mask(t: int) -> np.ndarray:
    got = _mask_cache.get(t)
    if got is None:
        got = np.triu(np.full((t, t), _MASK_FILL), k=1)
        _mask_cache[t] = got
    return got


def init_model(cfg: ModelConfig) -> Checkpoint:
    """Seeded init: N(0, 0.02^2) for embeddings and linears, LN gain 1 bias 0."""
    gen = seeding.rng(cfg.seed, seeding.INIT)
    params = {}
    for name, shape in param_schema(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = gen.normal(0.0, 0.02, size=shape)
    ck = Checkpoint(params, cfg, "init")
    ck.validate()
    return ck


def make_param_vars(ck: Checkpoint) -> dict:
    """Fresh graph leaves over the checkpoint's parameter arrays."""
    return {name: Var(arr) for name, arr in ck.params.items()}


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a nonempty 1-D id list")
    if ids.size > cfg.context_len:
        raise InputError(f"sequence length {ids.size} exceeds context_len {cfg.context_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range for vocab {cfg.vocab_size}")
    return ids


def _project(x: Var, name: str, pv: dict, adapters) -> Var:
    """x @ W.T for the named weight, plus the adapter path if one targets it."""
    y = linear(x, pv[name])
    if adapters and name in adapters:
        a_var, b_var, scaling = adapters[name]
        y = add(y, scale(linear(linear(x, a_var), b_var), scaling))
    return y


def forward_graph(pv: dict, cfg: ModelConfig, tokens, adapters=None) -> Var:
    """Logits (T, V) as a graph over the given parameter Vars.

    adapters: optional {weight name: (A Var (r,k), B Var (d,r), scaling)}.
    """
    ids = _check_tokens(cfg, tokens)
    t = ids.size
    dh = cfg.d_model // cfg.n_heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    x = add(embed(pv["tok_emb"], ids), slice_rows(pv["pos_emb"], 0, t))
    mask = Var(_causal_mask(t))
    for i in range(cfg.n_layers):
        b = f"block{i}."
        h = layer_norm(x, pv[b + "ln1.g"], pv[b + "ln1.b"])
        q = _project(h, b + "attn_q", pv, adapters)
        k = _project(h, b + "attn_k", pv, adapters)
        v = _project(h, b + "attn_v", pv, adapters)
        heads = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            scores = add(scale(linear(qh, kh), inv_sqrt_dh), mask)
            heads.append(matmul(softmax_rows(scores), vh))
        attn_out = _project(concat_cols(heads), b + "attn_o", pv, adapters)
        x = add(x, attn_out)
        h2 = layer_norm(x, pv[b + "ln2.g"], pv[b + "ln2.b"])
        up = gelu(_project(h2, b + "mlp_up", pv, adapters))
        x = add(x, _project(up, b + "mlp_down", pv, adapters))
    hf = layer_norm(x, pv["ln_f.g"], pv["ln_f.b"])
    return _project(hf, "lm_head", pv, adapters)


def _adapter_vars(adapters) -> dict | None:
    """Wrap numpy-backed adapters ({name: LoraAdapter}) as Var triples."""
    if adapters is None:
        return None
    out = {}
    for name, ad in adapters.items():
        out[name] = (Var(ad.A), Var(ad.B), ad.scaling)
    return out


def forward_logits(ck: Checkpoint, tokens, adapters=None) -> np.ndarray:
    """Causal logits (T, V) for one sequence; position t sees tokens <= t."""
    return forward_graph(make_param_vars(ck), ck.config, tokens, _adapter_vars(adapters)).value


def strip_padding(seq, pad_id) -> list:
    """Drop trailing pad ids; padding only ever appears at the end."""
    out = list(seq)
    while out and out[-1] == pad_id:
        out.pop()
    return out


def nll_graph(pv: dict, cfg: ModelConfig, batch, adapters=None, pad_id=None,
              loss_starts=None):
    """Mean next-token cross-entropy over the predicted positions of a batch.

    Returns (scalar Var, number of predicted positions). Pad ids, when given,
    are stripped so padded positions never contribute. loss_starts, when
    given, restricts sequence i's loss to prediction rows >= loss_starts[i]
    (conditional likelihood of a continuation given its prompt).
    """
    if not batch:
        raise ContractError("nll: empty batch")
    total = None
    positions = 0
    for i, seq in enumerate(batch):
        toks = strip_padding(seq, pad_id) if pad_id is not None else list(seq)
        if len(toks) < 2:
            raise ContractError("nll: sequence needs at least 2 tokens")
        logits = forward_graph(pv, cfg, toks, adapters)
        m = len(toks) - 1
        start = 0 if loss_starts is None else loss_starts[i]
        if not 0 <= start < m:
            raise ContractError(f"nll: loss start {start} outside prediction rows [0, {m})")
        ce = cross_entropy(slice_rows(logits, start, m), toks[start + 1:])
        piece = scale(ce, float(m - start))
        total = piece if total is None else add(total, piece)
        positions += m - start
    return scale(total, 1.0 / positions), positions


def nll_loss(ck: Checkpoint, batch, adapters=None, pad_id=None) -> Var:
    """Batch NLL as a differentiable scalar (use float(result.value) to read)."""
    loss, _ = nll_graph(make_param_vars(ck), ck.config, batch, _adapter_vars(adapters), pad_id)
    return loss


def token_log_probs(ck: Checkpoint, tokens, adapters=None) -> np.ndarray:
    """log P(tokens[t+1] | tokens[:t+1]) for t = 0..len-2, shape (len-1,)."""
    toks = list(tokens)
    if len(toks) < 2:
        raise ContractError("token_log_probs: sequence needs at least 2 tokens")
    z = forward_logits(ck, toks, adapters)[:-1]
    mx = z.max(axis=1, keepdims=True)
    logp = z - (mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True)))
    return logp[np.arange(len(toks) - 1), np.asarray(toks[1:], dtype=np.int64)]


def greedy_decode(ck: Checkpoint, prompt, n_new: int, adapters=None) -> list:
    """Argmax continuation of length n_new appended to the prompt.

    Ties break toward the lowest token id; same inputs always give the same
    output.
    """
    prompt = list(prompt)
    if not prompt:
        raise InputError("decode: prompt must be nonempty")
    if n_new < 0:
        raise InputError("decode: n_new must be >= 0")
    if len(prompt) + n_new > ck.config.context_len:
        raise InputError(
            f"decode: {len(prompt)} prompt + {n_new} new tokens exceeds "
            f"context_len {ck.config.context_len}")
    pv = make_param_vars(ck)
    av = _adapter_vars(adapters)
    seq = prompt
    for _ in range(n_new):
        logits = forward_graph(pv, ck.config, seq, av).value
        seq = seq + [int(np.argmax(logits[-1]))]
    return seq
