"""Miniature encoder-decoder transformer for frame-level speech features.

Pre-LN blocks, bias-free projections, sinusoidal positions, and a token
decoder driven by prompt tokens: start-of-transcript, then optionally one
language-id token. All math runs on the tape tensors, so the same forward
code serves training, gradient checking, and plain decoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lora import KIND_BACKBONE, ExpertBundle

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 6
    n_dec_layers: int = 4
    feature_dim: int = 16
    vocab_size: int = 64
    max_decode_len: int = 32
    max_source_len: int = 64
    ff_mult: int = 4
    n_languages: int = 4
    pad_id: int = 0
    sot_id: int = 1
    eot_id: int = 2
    lid_base: int = 3

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        specials = [self.pad_id, self.sot_id, self.eot_id] + list(self.lid_ids)
        if len(set(specials)) != len(specials):
            raise ValueError("special token ids must be distinct")
        if max(specials) >= self.vocab_size:
            raise ValueError("special token ids must fit inside the vocabulary")
        if self.text_base >= self.vocab_size:
            raise ValueError("no text token space left after special ids")

    @property
    def d_ff(self) -> int:
        return self.ff_mult * self.d_model

    @property
    def lid_ids(self) -> tuple[int, ...]:
        return tuple(self.lid_base + k for k in range(self.n_languages))

    def lid_id(self, language: int) -> int:
        if not 0 <= language < self.n_languages:
            raise ValueError(f"language index {language} out of range")
        return self.lid_base + language

    @property
    def text_base(self) -> int:
        return self.lid_base + self.n_languages

    @property
    def n_text_tokens(self) -> int:
        return self.vocab_size - self.text_base


def sinusoid_table(length: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table, interleaved by dimension pairs."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(0, d_model, 2).astype(np.float64)
    angles = pos / np.power(10000.0, i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.feat": (config.feature_dim, d),
        "embed.tok": (config.vocab_size, d),
        "out.proj": (d, config.vocab_size),
        "pos.enc": (config.max_source_len, d),
        "pos.dec": (config.max_decode_len + 2, d),
        "enc.ln_f.g": (d,), "enc.ln_f.b": (d,),
        "dec.ln_f.g": (d,), "dec.ln_f.b": (d,),
    }
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        shapes |= {
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.attn.q": (d, d), f"{p}.attn.k": (d, d),
            f"{p}.attn.v": (d, d), f"{p}.attn.o": (d, d),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.ff.w1": (d, h), f"{p}.ff.w2": (h, d),
        }
    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        shapes |= {
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.self.q": (d, d), f"{p}.self.k": (d, d),
            f"{p}.self.v": (d, d), f"{p}.self.o": (d, d),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.cross.q": (d, d), f"{p}.cross.k": (d, d),
            f"{p}.cross.v": (d, d), f"{p}.cross.o": (d, d),
            f"{p}.ln3.g": (d,), f"{p}.ln3.b": (d,),
            f"{p}.ff.w1": (d, h), f"{p}.ff.w2": (h, d),
        }
    return shapes


def init_weights(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded backbone: Gaussian matrices scaled by fan-in, unit layernorms."""
    weights: dict[str, np.ndarray] = {}
    for name, shape in weight_shapes(config).items():
        if name == "pos.enc":
            weights[name] = sinusoid_table(config.max_source_len, config.d_model)
        elif name == "pos.dec":
            weights[name] = sinusoid_table(config.max_decode_len + 2, config.d_model)
        elif name.endswith(".g"):
            weights[name] = np.ones(shape)
        elif name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            weights[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return weights


def weights_digest(weights: dict[str, np.ndarray | Tensor]) -> str:
    """Order-independent hex digest of every weight's exact bytes."""
    import hashlib
    h = hashlib.sha256()
    for name in sorted(weights):
        w = weights[name]
        arr = w.values if isinstance(w, Tensor) else w
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def backbone_bundle(config: ModelConfig,
                    weights: dict[str, np.ndarray]) -> ExpertBundle:
    """Pack frozen backbone weights into a kind-0 container bundle.

    The model configuration rides along in metadata so the file alone
    is enough to rebuild the network.
    """
    expected = weight_shapes(config)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ValueError(f"weight names mismatch: missing={missing} extra={extra}")
    # vectors are stored as (1, n) rows; restore reshapes them back
    matrices = {name: np.atleast_2d(np.asarray(w, dtype=np.float64))
                for name, w in weights.items()}
    return ExpertBundle(
        language_id="backbone", rank=0, matrices=matrices,
        metadata={"model_config": asdict(config),
                  "weights_digest": weights_digest(weights)},
        kind=KIND_BACKBONE)


def backbone_from_bundle(bundle: ExpertBundle
                         ) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Rebuild (config, weights) from a kind-0 container bundle."""
    if bundle.kind != KIND_BACKBONE:
        raise ValueError(f"expected a kind-0 backbone bundle, got kind {bundle.kind}")
    raw = bundle.metadata.get("model_config")
    if not isinstance(raw, dict):
        raise ValueError("backbone bundle missing model_config metadata")
    config = ModelConfig(**raw)
    expected = weight_shapes(config)
    if set(bundle.matrices) != set(expected):
        missing = sorted(set(expected) - set(bundle.matrices))
        extra = sorted(set(bundle.matrices) - set(expected))
        raise ValueError(f"weight names mismatch: missing={missing} extra={extra}")
    weights = {name: bundle.matrices[name].reshape(shape).copy()
               for name, shape in expected.items()}
    digest = bundle.metadata.get("weights_digest")
    if digest is not None and digest != weights_digest(weights):
        raise ValueError("backbone weights digest mismatch")
    return config, weights


@dataclass
class TensorAdapter:
    """Adapter pair already lifted onto the tape (A: r x d2, B: d1 x r)."""

    A: Tensor
    B: Tensor
    scale: float = 1.0


def lift_adapters(bundle, requires_grad: bool = False) -> dict[str, TensorAdapter]:
    """Wrap a bundle's numpy adapters as tape tensors."""
    out = {}
    for name, adapter in bundle.adapters.items():
        out[name] = TensorAdapter(
            A=Tensor(adapter.A.copy(), requires_grad=requires_grad),
            B=Tensor(adapter.B.copy(), requires_grad=requires_grad),
            scale=adapter.scale,
        )
    return out


@dataclass
class DecodeResult:
    tokens: list[int]
    lid_token: int | None = None   # raw first-token prediction (any vocab id)
    routed_lid: int | None = None  # language index decoding proceeded with
    stopped: bool = True


@dataclass
class UtteranceForward:
    logits: Tensor  # (T, vocab)
    targets: np.ndarray
    mask: np.ndarray
    enc_outputs: list[Tensor] = field(default_factory=list)
    dec_outputs: list[Tensor] = field(default_factory=list)

    @property
    def n_positions(self) -> float:
        return float(self.mask.sum())


Hook = Callable[[int, Tensor], Tensor]


class Transformer:
    """Frozen-shape transformer over a named weight dictionary.

    Weights may be numpy arrays or tape tensors; adapters are applied as
    y = x W + scale * ((x B) A) at their attachment points only.
    """

    def __init__(self, config: ModelConfig, weights: dict) -> None:
        self.config = config
        expected = weight_shapes(config)
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        if missing or extra:
            raise ValueError(f"weight set mismatch: missing={missing} extra={extra}")
        self.weights: dict[str, Tensor] = {}
        for name, w in weights.items():
            t = w if isinstance(w, Tensor) else Tensor(w)
            if t.shape != expected[name]:
                raise ValueError(
                    f"weight '{name}' has shape {t.shape}, expected {expected[name]}")
            self.weights[name] = t
        self._causal: dict[int, np.ndarray] = {}

    # -- helpers -------------------------------------------------------------

    def _causal_mask(self, t: int) -> np.ndarray:
        m = self._causal.get(t)
        if m is None:
            m = np.triu(np.full((t, t), NEG_INF), k=1)
            self._causal[t] = m
        return m

    def _check_adapters(self, adapters) -> None:
        if not adapters:
            return
        for name in adapters:
            if name not in self.weights:
                raise ValueError(f"adapter targets unknown matrix '{name}'")

    def _linear(self, x: Tensor, name: str, adapters) -> Tensor:
        y = ad.matmul(x, self.weights[name])
        adapter = adapters.get(name) if adapters else None
        if adapter is not None:
            low = ad.matmul(ad.matmul(x, adapter.B), adapter.A)
            if adapter.scale != 1.0:
                low = ad.scalar_scale(low, adapter.scale)
            y = ad.add(y, low)
        return y

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layernorm(x, self.weights[f"{name}.g"], self.weights[f"{name}.b"])

    def _attention(self, x_norm: Tensor, kv_norm: Tensor | None, prefix: str,
                   adapters, mask: np.ndarray | None) -> Tensor:
        kv = kv_norm if kv_norm is not None else x_norm
        q = self._linear(x_norm, f"{prefix}.q", adapters)
        k = self._linear(kv, f"{prefix}.k", adapters)
        v = self._linear(kv, f"{prefix}.v", adapters)
        ctx = ad.attention_core(q, k, v, self.config.n_heads, mask=mask)
        return self._linear(ctx, f"{prefix}.o", adapters)

    def _ff(self, x: Tensor, prefix: str, adapters) -> Tensor:
        h = ad.gelu(self._linear(x, f"{prefix}.w1", adapters))
        return self._linear(h, f"{prefix}.w2", adapters)

    def _positions(self, name: str, length: int) -> Tensor:
        table = self.weights[name]
        if length > table.shape[0]:
            raise ValueError(
                f"sequence of {length} exceeds position table '{name}' "
                f"({table.shape[0]})")
        return ad.slice_(table, 0, length, axis=0)

    # -- encoder -------------------------------------------------------------

    def embed_frames(self, features: np.ndarray) -> Tensor:
        """Validate features and produce the encoder's initial stream."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be (frames, dim), got {feats.shape}")
        if feats.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"feature width {feats.shape[1]} != {self.config.feature_dim}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        x = ad.matmul(Tensor(feats), self.weights["embed.feat"])
        return ad.add(x, self._positions("pos.enc", feats.shape[0]))

    def encoder_block(self, i: int, x: Tensor, adapters=None) -> Tensor:
        p = f"enc.{i}"
        h = self._attention(self._ln(x, f"{p}.ln1"), None, f"{p}.attn",
                            adapters, mask=None)
        x = ad.add(x, h)
        return ad.add(x, self._ff(self._ln(x, f"{p}.ln2"), f"{p}.ff", adapters))

    def encoder_layers(self, x: Tensor, adapters=None, start: int = 0,
                       stop: int | None = None) -> Tensor:
        """Raw stream after blocks [start, stop); no final layernorm."""
        self._check_adapters(adapters)
        stop = self.config.n_enc_layers if stop is None else stop
        if not 0 <= start <= stop <= self.config.n_enc_layers:
            raise ValueError(f"bad encoder layer range [{start}, {stop})")
        for i in range(start, stop):
            x = self.encoder_block(i, x, adapters)
        return x

    def encoder_final(self, x: Tensor) -> Tensor:
        return self._ln(x, "enc.ln_f")

    def encode(self, features: np.ndarray, adapters=None,
               hook: Hook | None = None,
               collect: list[Tensor] | None = None) -> Tensor:
        """Run features (frames x feature_dim) to hidden states (frames x d).

        Per-layer block outputs land in `collect`; `hook` may replace each
        block's output before it feeds the next layer. The final layernorm
        applies after the last (possibly hooked) layer.
        """
        self._check_adapters(adapters)
        x = self.embed_frames(features)
        for i in range(self.config.n_enc_layers):
            x = self.encoder_block(i, x, adapters)
            if collect is not None:
                collect.append(x)
            if hook is not None:
                x = hook(i, x)
        return self._ln(x, "enc.ln_f")

    # -- decoder -------------------------------------------------------------

    def decode_logits(self, ids: Sequence[int], hidden: Tensor, adapters=None,
                      hook: Hook | None = None,
                      collect: list[Tensor] | None = None) -> Tensor:
        """Logits at every position of the id sequence (teacher forcing)."""
        self._check_adapters(adapters)
        ids = list(ids)
        if not ids:
            raise ValueError("decoder needs at least one input token")
        t = len(ids)
        x = ad.embedding_gather(self.weights["embed.tok"], ids)
        x = ad.add(x, self._positions("pos.dec", t))
        mask = self._causal_mask(t)
        for i in range(self.config.n_dec_layers):
            p = f"dec.{i}"
            h = self._attention(self._ln(x, f"{p}.ln1"), None, f"{p}.self",
                                adapters, mask=mask)
            x = ad.add(x, h)
            h = self._cross(x, hidden, p, adapters)
            x = ad.add(x, h)
            x = ad.add(x, self._ff(self._ln(x, f"{p}.ln3"), f"{p}.ff", adapters))
            if collect is not None:
                collect.append(x)
            if hook is not None:
                x = hook(i, x)
        x = self._ln(x, "dec.ln_f")
        return ad.matmul(x, self.weights["out.proj"])

    def _cross(self, x: Tensor, hidden: Tensor, p: str, adapters) -> Tensor:
        q_in = self._ln(x, f"{p}.ln2")
        q = self._linear(q_in, f"{p}.cross.q", adapters)
        k = self._linear(hidden, f"{p}.cross.k", adapters)
        v = self._linear(hidden, f"{p}.cross.v", adapters)
        ctx = ad.attention_core(q, k, v, self.config.n_heads, mask=None)
        return self._linear(ctx, f"{p}.cross.o", adapters)

    def decode_step(self, prompt: Sequence[int], prev_tokens: Sequence[int],
                    hidden: Tensor, adapters=None) -> Tensor:
        """Next-position logits given the prompt and tokens so far."""
        prompt = list(prompt)
        if not prompt or prompt[0] != self.config.sot_id:
            raise ValueError("prompt must start with the start-of-transcript token")
        if len(prev_tokens) >= self.config.max_decode_len:
            raise ValueError("decode length limit reached")
        ids = prompt + list(prev_tokens)
        logits = self.decode_logits(ids, hidden, adapters)
        last = ad.slice_(logits, len(ids) - 1, len(ids), axis=0)
        return ad.mean(last, axis=0)  # (1, V) -> (V,), exact for one row

    def greedy_decode(self, features: np.ndarray, lid: int | None = None,
                      adapters=None, route_classes: int | None = None) -> DecodeResult:
        """Argmax decoding until end-of-transcript or the length cap.

        With lid given, the prompt is [sot, lid_token] (language-aware).
        Without it, the prompt is [sot]; the raw first argmax is reported as
        the language prediction and decoding proceeds with the best token
        among the LID ids (the first route_classes of them when given),
        which is excluded from the transcript.
        """
        cfg = self.config
        with ad.no_grad():
            hidden = self.encode(features, adapters)
            prompt = [cfg.sot_id]
            if lid is not None:
                prompt.append(cfg.lid_id(lid))
            tokens: list[int] = []
            lid_token: int | None = None
            routed: int | None = None
            stopped = False
            for step in range(cfg.max_decode_len):
                logits = self.decode_step(prompt, tokens, hidden, adapters)
                nxt = int(np.argmax(logits.values))
                if lid is None and step == 0:
                    lid_token = nxt
                    n = route_classes or cfg.n_languages
                    lid_ids = list(cfg.lid_ids[:n])
                    routed = int(np.argmax(logits.values[lid_ids]))
                    tokens.append(lid_ids[routed])
                    continue
                if nxt == cfg.eot_id:
                    stopped = True
                    break
                tokens.append(nxt)
            transcript = tokens[1:] if lid is None else tokens
        return DecodeResult(tokens=transcript, lid_token=lid_token,
                            routed_lid=routed, stopped=stopped)

    # -- loss ----------------------------------------------------------------

    def utterance_ids(self, utt, teacher_forced_lid: bool) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Decoder inputs, shifted targets, and the supervision mask."""
        cfg = self.config
        tokens = list(utt.tokens)
        if len(tokens) > cfg.max_decode_len:
            raise ValueError(
                f"utterance of {len(tokens)} tokens exceeds cap {cfg.max_decode_len}")
        if not tokens:
            raise ValueError("empty utterance reached the loss")
        ids = [cfg.sot_id, cfg.lid_id(utt.language)] + tokens
        targets = np.array(ids[1:] + [cfg.eot_id], dtype=np.int64)
        mask = np.ones(len(targets))
        if teacher_forced_lid:
            mask[0] = 0.0
        return ids, targets, mask

    def forward_utterance(self, utt, adapters=None, teacher_forced_lid: bool = True,
                          enc_hook: Hook | None = None, dec_hook: Hook | None = None,
                          collect: bool = False,
                          hidden: Tensor | None = None) -> UtteranceForward:
        enc_outs: list[Tensor] | None = [] if collect else None
        dec_outs: list[Tensor] | None = [] if collect else None
        if hidden is None:
            hidden = self.encode(utt.features, adapters, hook=enc_hook,
                                 collect=enc_outs)
        ids, targets, mask = self.utterance_ids(utt, teacher_forced_lid)
        logits = self.decode_logits(ids, hidden, adapters, hook=dec_hook,
                                    collect=dec_outs)
        return UtteranceForward(logits=logits, targets=targets, mask=mask,
                                enc_outputs=enc_outs or [], dec_outputs=dec_outs or [])

    def asr_loss(self, batch, adapters=None, teacher_forced_lid: bool = True) -> Tensor:
        """Token-level mean cross-entropy over all supervised positions."""
        if not batch:
            raise ValueError("empty batch")
        parts: list[tuple[Tensor, float]] = []
        total = 0.0
        for utt in batch:
            fwd = self.forward_utterance(utt, adapters, teacher_forced_lid)
            ce = ad.cross_entropy_with_logits(fwd.logits, fwd.targets, fwd.mask)
            parts.append((ce, fwd.n_positions))
            total += fwd.n_positions
        loss = ad.scalar_scale(parts[0][0], parts[0][1] / total)
        for ce, n in parts[1:]:
            loss = ad.add(loss, ad.scalar_scale(ce, n / total))
        return loss
