"""A small encoder-decoder transformer with pluggable attention guidance.

Guidance is a per-layer pair of learnable matrices (phi_k, phi_v), each
prompt_len x d_model, prepended to that layer's self-attention keys and
values after the K/V projections. Queries attend over the prefix rows and
the projected token rows together, so the softmax renormalises across
both; the prefix is exempt from the causal mask and carries no positional
embedding. Cross-attention is never guided. With prompt_len zero the
stack reduces exactly to a vanilla transformer.

Prefix rows are split across heads along the feature axis, the same way
token projections are, so every head sees prompt_len prefix slots of
width d_model / n_heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor

INIT_STD = 0.02

LAYER_RANGE_MODES = ("all", "lowest_k", "highest_k")
ACTIVATIONS = {"gelu": T.gelu, "tanh": T.tanh_act}


@dataclass(frozen=True)
class LayerRange:
    """Which layers of a stack receive guidance."""

    mode: str = "all"
    k: int = 0

    def __post_init__(self) -> None:
        if self.mode not in LAYER_RANGE_MODES:
            raise ValueError(f"layer range mode must be one of {LAYER_RANGE_MODES}, got {self.mode!r}")
        if self.mode != "all" and self.k < 1:
            raise ValueError(f"layer range mode {self.mode!r} needs k >= 1, got {self.k}")


def select_guided_layers(layer_range: LayerRange, depth: int) -> tuple[int, ...]:
    """Resolve a LayerRange against a stack depth; 0 is the layer nearest the input."""
    if depth < 1:
        raise ValueError(f"stack depth must be positive, got {depth}")
    if layer_range.mode == "all":
        return tuple(range(depth))
    if layer_range.k > depth:
        raise ValueError(
            f"layer range {layer_range.mode} k={layer_range.k} exceeds stack depth {depth}"
        )
    if layer_range.mode == "lowest_k":
        return tuple(range(layer_range.k))
    return tuple(range(depth - layer_range.k, depth))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    max_len: int = 48
    prompt_len: int = 10
    alpha: float = 0.5
    guidance: LayerRange = field(default_factory=LayerRange)
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.vocab_size < 3:
            raise ValueError(f"vocab_size must cover the specials, got {self.vocab_size}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})"
            )
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("encoder and decoder need at least one layer each")
        if self.prompt_len < 0:
            raise ValueError(f"prompt_len must be >= 0, got {self.prompt_len}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be at least 2, got {self.max_len}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        # resolving the range validates k against both depths
        select_guided_layers(self.guidance, self.enc_layers)
        select_guided_layers(self.guidance, self.dec_layers)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "prompt_len": self.prompt_len,
            "alpha": self.alpha,
            "guidance_mode": self.guidance.mode,
            "guidance_k": self.guidance.k,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        guidance = LayerRange(mode=d.pop("guidance_mode", "all"), k=d.pop("guidance_k", 0))
        return cls(guidance=guidance, **d)


class GuidanceModule:
    """Holds the (phi_k, phi_v) pair for every guided layer of both stacks."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.guided = {
            "encoder": select_guided_layers(config.guidance, config.enc_layers),
            "decoder": select_guided_layers(config.guidance, config.dec_layers),
        }
        self._params: dict[str, Parameter] = {}
        if config.prompt_len > 0:
            shape = (config.prompt_len, config.d_model)
            for stack in ("encoder", "decoder"):
                for layer in self.guided[stack]:
                    for piece in ("phi_k", "phi_v"):
                        name = f"guidance.{stack}.layer{layer}.{piece}"
                        self._params[name] = Parameter(name, rng.normal(0.0, INIT_STD, shape))

    def pair(self, stack: str, layer: int) -> tuple[Tensor, Tensor] | None:
        """The guidance pair for a layer, or None when that layer is unguided."""
        if self.config.prompt_len == 0 or layer not in self.guided[stack]:
            return None
        k = self._params[f"guidance.{stack}.layer{layer}.phi_k"]
        v = self._params[f"guidance.{stack}.layer{layer}.phi_v"]
        return k.value, v.value

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def reinitialize(self, rng: np.random.Generator) -> None:
        """Redraw every guidance matrix; used for cold-start tuning."""
        for p in self._params.values():
            p.value.data = rng.normal(0.0, INIT_STD, p.value.data.shape)
            p.value.grad = None

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params.get(name)
            if p is None:
                raise ShapeError(f"no guidance slot named {name!r} in this model")
            if p.value.data.shape != arr.shape:
                raise ShapeError(
                    f"guidance {name}: stored shape {arr.shape} does not match model shape {p.value.data.shape}"
                )
            p.value.data = np.array(arr, dtype=np.float64)
            p.value.grad = None


class Backbone:
    """Token embeddings plus guided encoder and decoder stacks.

    All parameters are drawn from one seeded generator in a fixed order,
    so equal seeds give bitwise-equal models. The embedding table is
    shared by the encoder input, the decoder input, and the output-side
    scoring done by the prediction head.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self._params: dict[str, Parameter] = {}
        self.debug_attn: list[np.ndarray] | None = None
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}
        rng = np.random.default_rng(seed)

        d, ffn = config.d_model, config.ffn_dim
        self._weight("embed.tokens", (config.vocab_size, d), rng)
        self._weight("embed.enc_pos", (config.max_len, d), rng)
        self._weight("embed.dec_pos", (config.max_len, d), rng)
        for layer in range(config.enc_layers):
            self._attn_block(f"encoder.layer{layer}.attn", rng)
            self._ln_block(f"encoder.layer{layer}.ln_attn")
            self._ffn_block(f"encoder.layer{layer}.ffn", d, ffn, rng)
            self._ln_block(f"encoder.layer{layer}.ln_ffn")
        for layer in range(config.dec_layers):
            self._attn_block(f"decoder.layer{layer}.attn", rng)
            self._ln_block(f"decoder.layer{layer}.ln_attn")
            self._attn_block(f"decoder.layer{layer}.cross", rng)
            self._ln_block(f"decoder.layer{layer}.ln_cross")
            self._ffn_block(f"decoder.layer{layer}.ffn", d, ffn, rng)
            self._ln_block(f"decoder.layer{layer}.ln_ffn")
        self.guidance = GuidanceModule(config, rng)
        self._act = ACTIVATIONS[config.activation]

    # -- parameter registry -------------------------------------------------

    def _register(self, p: Parameter) -> Parameter:
        assert p.name not in self._params, f"duplicate parameter name {p.name}"
        self._params[p.name] = p
        return p

    def _weight(self, name: str, shape: tuple[int, ...], rng: np.random.Generator) -> None:
        self._register(Parameter(name, rng.normal(0.0, INIT_STD, shape)))

    def _attn_block(self, base: str, rng: np.random.Generator) -> None:
        d = self.config.d_model
        for piece in ("Wq", "Wk", "Wv", "Wo"):
            self._weight(f"{base}.{piece}", (d, d), rng)
        for piece in ("bq", "bk", "bv", "bo"):
            self._register(Parameter(f"{base}.{piece}", np.zeros(d)))

    def _ffn_block(self, base: str, d: int, ffn: int, rng: np.random.Generator) -> None:
        self._weight(f"{base}.W1", (d, ffn), rng)
        self._register(Parameter(f"{base}.b1", np.zeros(ffn)))
        self._weight(f"{base}.W2", (ffn, d), rng)
        self._register(Parameter(f"{base}.b2", np.zeros(d)))

    def _ln_block(self, base: str) -> None:
        d = self.config.d_model
        self._register(Parameter(f"{base}.gain", np.ones(d)))
        self._register(Parameter(f"{base}.bias", np.zeros(d)))

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def iter_params(self) -> dict[str, Parameter]:
        """Backbone weights by name (guidance excluded)."""
        return dict(self._params)

    def parameters(self) -> list[Parameter]:
        """Backbone parameters followed by guidance parameters."""
        return list(self._params.values()) + self.guidance.parameters()

    def backbone_parameters(self) -> list[Parameter]:
        """Everything that stays frozen during guidance-only tuning."""
        return list(self._params.values())

    # -- attention ----------------------------------------------------------

    def _causal_mask(self, n: int, prefix: int) -> np.ndarray:
        key = (n, prefix)
        cached = self._mask_cache.get(key)
        if cached is None:
            mask = np.zeros((n, prefix + n), dtype=bool)
            mask[:, prefix:] = np.triu(np.ones((n, n), dtype=bool), k=1)
            cached = self._mask_cache[key] = mask
        return cached

    def attention_with_guidance(
        self,
        stack: str,
        layer: int,
        x: Tensor,
        phi: tuple[Tensor, Tensor] | None,
        causal: bool,
        kv: Tensor | None = None,
        block: str = "attn",
    ) -> Tensor:
        """One attention sub-layer: project, attend, W_o, residual, layer norm.

        ``phi`` rows enter as extra key/value rows directly, bypassing the
        K/V projections; ``kv`` switches the key/value source for
        cross-attention (which never takes a prefix).
        """
        cfg = self.config
        base = f"{stack}.layer{layer}.{block}"
        source = kv if kv is not None else x
        q = T.add(T.matmul(x, self.param(f"{base}.Wq").value), self.param(f"{base}.bq").value)
        k = T.add(T.matmul(source, self.param(f"{base}.Wk").value), self.param(f"{base}.bk").value)
        v = T.add(T.matmul(source, self.param(f"{base}.Wv").value), self.param(f"{base}.bv").value)

        prefix = 0
        if phi is not None:
            phi_k, phi_v = phi
            if phi_k.data.shape[1] != cfg.d_model or phi_v.data.shape[1] != cfg.d_model:
                raise ShapeError(
                    f"guidance width {phi_k.data.shape} / {phi_v.data.shape} does not match d_model {cfg.d_model}"
                )
            if phi_k.data.shape != phi_v.data.shape:
                raise ShapeError(
                    f"phi_k shape {phi_k.data.shape} does not match phi_v shape {phi_v.data.shape}"
                )
            prefix = phi_k.data.shape[0]

        n = x.data.shape[0]
        dh = cfg.d_head
        mask = self._causal_mask(n, prefix) if causal else None
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            if prefix:
                kh = T.concat([T.slice_cols(phi_k, lo, hi), kh], axis=0)
                vh = T.concat([T.slice_cols(phi_v, lo, hi), vh], axis=0)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = T.masked_fill(scores, mask)
            attn = T.softmax_rows(scores)
            if self.debug_attn is not None:
                self.debug_attn.append(attn.data.copy())
            heads.append(T.matmul(attn, vh))
        ctx = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        out = T.add(T.matmul(ctx, self.param(f"{base}.Wo").value), self.param(f"{base}.bo").value)
        ln = base.replace(f".{block}", f".ln_{block}")
        return self._layer_norm(ln, T.add(x, out))

    def _layer_norm(self, base: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.param(f"{base}.gain").value, self.param(f"{base}.bias").value)

    def _ffn(self, stack: str, layer: int, x: Tensor) -> Tensor:
        base = f"{stack}.layer{layer}.ffn"
        h = self._act(T.add(T.matmul(x, self.param(f"{base}.W1").value), self.param(f"{base}.b1").value))
        out = T.add(T.matmul(h, self.param(f"{base}.W2").value), self.param(f"{base}.b2").value)
        return self._layer_norm(f"{stack}.layer{layer}.ln_ffn", T.add(x, out))

    # -- forward passes -------------------------------------------------------

    def embed_tokens(self, token_ids: Sequence[int]) -> Tensor:
        """Raw token embeddings, no positions; also the head's scoring rows."""
        return T.gather_rows(self.param("embed.tokens").value, token_ids)

    def encode(self, token_ids: Sequence[int]) -> Tensor:
        """Encode a sentence into one hidden row per token."""
        n = len(token_ids)
        if n == 0:
            raise ShapeError("cannot encode an empty token sequence")
        if n > self.config.max_len:
            raise ShapeError(f"sequence of {n} tokens exceeds max_len {self.config.max_len}")
        x = T.add(self.embed_tokens(token_ids), T.gather_rows(self.param("embed.enc_pos").value, range(n)))
        for layer in range(self.config.enc_layers):
            x = self.attention_with_guidance(
                "encoder", layer, x, self.guidance.pair("encoder", layer), causal=False
            )
            x = self._ffn("encoder", layer, x)
        return x

    def decode_states(self, h_en: Tensor, dec_inputs: Tensor) -> Tensor:
        """Run the decoder over already-embedded inputs; one state per position.

        Self-attention is causal (prefix slots exempt); every layer then
        cross-attends into ``h_en`` unguided.
        """
        t = dec_inputs.data.shape[0]
        if t == 0:
            raise ShapeError("decoder needs at least one input position")
        if t > self.config.max_len:
            raise ShapeError(f"decoder input of {t} positions exceeds max_len {self.config.max_len}")
        if dec_inputs.data.shape[1] != self.config.d_model:
            raise ShapeError(
                f"decoder input width {dec_inputs.data.shape} does not match d_model {self.config.d_model}"
            )
        x = T.add(dec_inputs, T.gather_rows(self.param("embed.dec_pos").value, range(t)))
        for layer in range(self.config.dec_layers):
            x = self.attention_with_guidance(
                "decoder", layer, x, self.guidance.pair("decoder", layer), causal=True
            )
            x = self.attention_with_guidance("decoder", layer, x, None, causal=False, kv=h_en, block="cross")
            x = self._ffn("decoder", layer, x)
        return x

    def decode_step(self, h_en: Tensor, dec_inputs: Tensor) -> Tensor:
        """Hidden state for the next prediction: the last decoder position."""
        states = self.decode_states(h_en, dec_inputs)
        return T.slice_rows(states, states.data.shape[0] - 1, states.data.shape[0])


def iter_named(params: Iterable[Parameter]) -> dict[str, Parameter]:
    """Index parameters by name, asserting uniqueness."""
    out: dict[str, Parameter] = {}
    for p in params:
        assert p.name not in out, f"duplicate parameter name {p.name}"
        out[p.name] = p
    return out
