"""Mixture of language experts over a frozen backbone.

The first L1 encoder layers run with a learnable softmax-weighted
combination of every expert's adapters; an MLP router reads the mean-pooled
stream after layer L1 and selects the expert whose adapters drive the
remaining encoder layers and the whole decoder. Only the combination
vectors and router weights train; experts and backbone stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, substream
from .lora import (
    KIND_COMBINER,
    ExpertBundle,
    bundle_digest,
)
from .model import DecodeResult, Transformer, lift_adapters, weights_digest
from .training import (
    SamplingStrategy,
    TrainConfig,
    TrainRecord,
    TrainResult,
    lr_schedule,
    sample_batch,
    write_metrics_log,
)

ROUTER_NAMES = ("router.w1", "router.b1", "router.w2", "router.b2")


def shallow_targets(config, l1: int) -> list[str]:
    """Adapted matrices inside the first l1 encoder layers."""
    names = []
    for i in range(l1):
        for suffix in ("attn.q", "attn.k", "attn.v", "ff.w1", "ff.w2"):
            names.append(f"enc.{i}.{suffix}")
    return names


def combine_adapters(v: Tensor, expert_adapters: list) -> tuple[Tensor, Tensor]:
    """Merged (A_hat, B_hat) = softmax(v)-weighted sums of expert adapters."""
    ranks = {ta.A.shape[0] for ta in expert_adapters}
    if len(ranks) != 1:
        raise ValueError(f"experts disagree on rank: {sorted(ranks)}")
    if v.shape != (len(expert_adapters),):
        raise ValueError(
            f"combiner length {v.shape} != expert count {len(expert_adapters)}")
    alpha = ad.row_softmax(v)
    a_hat = b_hat = None
    for j, ta in enumerate(expert_adapters):
        w = ad.slice_(alpha, j, j + 1, axis=0)
        a_term = ad.elementwise_mul(ta.A, w)
        b_term = ad.elementwise_mul(ta.B, w)
        a_hat = a_term if a_hat is None else ad.add(a_hat, a_term)
        b_hat = b_term if b_hat is None else ad.add(b_hat, b_term)
    return a_hat, b_hat


@dataclass
class MergedAdapter:
    """Duck-typed stand-in for TensorAdapter built from live tape tensors."""

    A: Tensor
    B: Tensor
    scale: float = 1.0


class MoleModel:
    """Frozen experts plus trainable combiners and router."""

    def __init__(self, model: Transformer, experts: list[ExpertBundle],
                 l1: int, seed: int = 0) -> None:
        cfg = model.config
        if not experts:
            raise ValueError("need at least one expert")
        if not 1 <= l1 <= cfg.n_enc_layers:
            raise ValueError(
                f"l1 must lie in [1, {cfg.n_enc_layers}], got {l1}")
        ranks = {b.rank for b in experts}
        if len(ranks) != 1:
            raise ValueError(f"experts disagree on rank: {sorted(ranks)}")
        self.model = model
        self.config = cfg
        self.experts = list(experts)
        self.l1 = int(l1)
        self.n_experts = len(experts)
        # frozen constant views of every expert's adapters
        self.expert_adapters = [lift_adapters(b) for b in experts]
        rng = substream(seed, "mole-init")
        self.combiners: dict[str, Tensor] = {
            name: Tensor(np.zeros(self.n_experts), requires_grad=True)
            for name in shallow_targets(cfg, l1)
        }
        d, n = cfg.d_model, self.n_experts
        self.router: dict[str, Tensor] = {
            "router.w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                                requires_grad=True),
            "router.b1": Tensor(np.zeros(d), requires_grad=True),
            "router.w2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, n)),
                                requires_grad=True),
            "router.b2": Tensor(np.zeros(n), requires_grad=True),
        }

    # -- parameter groups ----------------------------------------------------

    def trainable(self) -> list[Tensor]:
        return list(self.combiners.values()) + list(self.router.values())

    def n_trainable(self) -> int:
        return sum(t.size for t in self.trainable())

    def frozen(self) -> list[Tensor]:
        out = list(self.model.weights.values())
        for adapters in self.expert_adapters:
            for ta in adapters.values():
                out.extend([ta.A, ta.B])
        return out

    # -- forward pieces --------------------------------------------------------

    def merged_shallow(self) -> dict[str, MergedAdapter]:
        """Combine every shallow target once; reusable across a batch."""
        scale = next(iter(self.expert_adapters[0].values())).scale
        merged = {}
        for name, v in self.combiners.items():
            a_hat, b_hat = combine_adapters(
                v, [ads[name] for ads in self.expert_adapters])
            merged[name] = MergedAdapter(A=a_hat, B=b_hat, scale=scale)
        return merged

    def deep_adapters(self, k: int) -> dict:
        """Expert k's adapters outside the merged shallow set."""
        if not 0 <= k < self.n_experts:
            raise ValueError(f"expert index {k} outside 0..{self.n_experts - 1}")
        shallow = set(self.combiners)
        return {name: ta for name, ta in self.expert_adapters[k].items()
                if name not in shallow}

    def shallow_stream(self, features: np.ndarray,
                       merged: dict | None = None) -> Tensor:
        """Raw encoder stream after the last merged layer (pre-layernorm)."""
        merged = self.merged_shallow() if merged is None else merged
        x = self.model.embed_frames(features)
        return self.model.encoder_layers(x, merged, start=0, stop=self.l1)

    def router_logits(self, stream: Tensor) -> Tensor:
        pooled = ad.mean(stream, axis=0)
        h = ad.gelu(ad.add(ad.matmul(pooled, self.router["router.w1"]),
                           self.router["router.b1"]))
        return ad.add(ad.matmul(h, self.router["router.w2"]),
                      self.router["router.b2"])

    def route(self, features: np.ndarray) -> tuple[int, np.ndarray]:
        """(argmax expert index, router probabilities); ties take the lowest
        index via argmax convention."""
        with ad.no_grad():
            stream = self.shallow_stream(features)
            logits = self.router_logits(stream)
            probs = ad.row_softmax(logits)
        return int(np.argmax(logits.values)), probs.values.copy()

    def encode_with_expert(self, features: np.ndarray, k: int,
                           merged: dict | None = None) -> Tensor:
        stream = self.shallow_stream(features, merged)
        deep = self.deep_adapters(k)
        x = self.model.encoder_layers(stream, deep, start=self.l1, stop=None)
        return self.model.encoder_final(x)

    # -- inference -------------------------------------------------------------

    def forward(self, features: np.ndarray,
                oracle_lid: int | None = None) -> tuple[np.ndarray, list[int]]:
        """(router probabilities, transcript token list).

        Deep layers and the decoder use the oracle expert when given,
        otherwise the router's argmax choice.
        """
        if oracle_lid is not None and not 0 <= oracle_lid < self.n_experts:
            raise ValueError(
                f"oracle lid {oracle_lid} outside 0..{self.n_experts - 1}")
        routed, probs = self.route(features)
        k = oracle_lid if oracle_lid is not None else routed
        with ad.no_grad():
            hidden = self.encode_with_expert(features, k)
            result = self._decode_with_expert(features, k, hidden)
        return probs, result.tokens

    def _decode_with_expert(self, features: np.ndarray, k: int,
                            hidden: Tensor) -> DecodeResult:
        cfg = self.config
        adapters = self.deep_adapters(k)
        prompt = [cfg.sot_id, cfg.lid_id(k)]
        tokens: list[int] = []
        stopped = False
        for _ in range(cfg.max_decode_len):
            logits = self.model.decode_step(prompt, tokens, hidden, adapters)
            nxt = int(np.argmax(logits.values))
            if nxt == cfg.eot_id:
                stopped = True
                break
            tokens.append(nxt)
        return DecodeResult(tokens=tokens, lid_token=cfg.lid_id(k),
                            routed_lid=k, stopped=stopped)

    # -- evaluation handle protocol ---------------------------------------------

    @property
    def name(self) -> str:
        return "mole"

    def supports(self, mode: str) -> bool:
        return mode in ("aware", "agnostic")

    def languages(self) -> set[int] | None:
        return set(range(self.n_experts))

    def decode(self, utt, mode: str) -> DecodeResult:
        if mode == "aware":
            k = utt.language
            if not 0 <= k < self.n_experts:
                raise KeyError(f"no expert for language {k}")
        else:
            k, _ = self.route(utt.features)
        with ad.no_grad():
            hidden = self.encode_with_expert(utt.features, k)
            result = self._decode_with_expert(utt.features, k, hidden)
        if mode == "aware":
            return DecodeResult(tokens=result.tokens, lid_token=None,
                                routed_lid=k, stopped=result.stopped)
        return result

    def hidden_state(self, utt, layer_index: int) -> np.ndarray:
        """Mean-pooled block output at one encoder layer under oracle routing."""
        n_layers = self.config.n_enc_layers
        if not 0 <= layer_index < n_layers:
            raise ValueError(f"layer index {layer_index} outside [0, {n_layers})")
        with ad.no_grad():
            merged = self.merged_shallow()
            x = self.model.embed_frames(utt.features)
            deep = self.deep_adapters(utt.language)
            for i in range(layer_index + 1):
                ads = merged if i < self.l1 else deep
                x = self.model.encoder_block(i, x, ads)
        return x.values.mean(axis=0)


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def mole_loss(mole: MoleModel, batch) -> tuple[Tensor, Tensor, Tensor]:
    """(total, lid_loss, asr_loss) with total = (lid + asr) / 2.

    The LID term is router cross-entropy against ground truth; the ASR term
    teacher-forces the true expert on the deep path (oracle routing) so it
    depends on the combiners only through the merged shallow layers.
    """
    if not batch:
        raise ValueError("empty batch")
    merged = mole.merged_shallow()
    lid_terms = []
    ce_terms = []
    n_total = 0
    for utt in batch:
        k = utt.language
        if not 0 <= k < mole.n_experts:
            raise KeyError(f"no expert for language {k}")
        stream = mole.shallow_stream(utt.features, merged)
        logits = mole.router_logits(stream)
        lid_terms.append(
            ad.cross_entropy_with_logits(logits, np.array([k])))
        x = mole.model.encoder_layers(stream, mole.deep_adapters(k),
                                      start=mole.l1, stop=None)
        hidden = mole.model.encoder_final(x)
        fwd = mole.model.forward_utterance(
            utt, adapters=mole.deep_adapters(k), teacher_forced_lid=True,
            hidden=hidden)
        ce = ad.cross_entropy_with_logits(fwd.logits, fwd.targets, fwd.mask)
        ce_terms.append((ce, fwd.n_positions))
        n_total += fwd.n_positions
    lid = lid_terms[0]
    for t in lid_terms[1:]:
        lid = ad.add(lid, t)
    lid = ad.scalar_scale(lid, 1.0 / len(batch))
    asr = None
    for ce, n in ce_terms:
        term = ad.scalar_scale(ce, n / n_total)
        asr = term if asr is None else ad.add(asr, term)
    total = ad.scalar_scale(ad.add(lid, asr), 0.5)
    return total, lid, asr


def audit_frozen_mole(mole: MoleModel) -> None:
    bad = sum(1 for t in mole.frozen()
              if t.grad is not None and np.any(t.grad != 0.0))
    if bad:
        raise AssertionError(f"{bad} frozen tensors received gradient")


def train_mole(mole: MoleModel, corpus: Corpus, cfg: TrainConfig,
               log_path=None, audit_frozen: bool = False) -> TrainResult:
    """Fit combiners and router; experts and backbone stay bit-identical."""
    if corpus.n_languages != mole.n_experts:
        raise ValueError(
            f"{mole.n_experts} experts for {corpus.n_languages} languages")
    expert_digests = [bundle_digest(b) for b in mole.experts]
    backbone_digest = weights_digest(mole.model.weights)

    params = mole.trainable()
    opt = ad.AdamW(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    languages = list(range(corpus.n_languages))
    by_language = {k: corpus.utterances("train", k) for k in languages}
    probs = SamplingStrategy().language_probs(len(languages))
    batch_rng = substream(cfg.seed, "batching")
    dev_utts = []
    for k in languages:
        dev_utts.extend(corpus.utterances("dev", k)[:cfg.dev_utts_per_language])

    result = TrainResult(bundle=None)
    best_dev = float("inf")
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        batch = sample_batch(by_language, probs, cfg.frame_budget, batch_rng)
        lr = lr_schedule(step, cfg.max_steps, cfg.peak_lr, cfg.warmup_frac)
        with ad.tape():
            total, lid, asr = mole_loss(mole, batch)
            loss_val = float(total.values)
            ad.backward(total)
        opt.step(lr=lr)
        if audit_frozen:
            audit_frozen_mole(mole)
        opt.zero_grad()
        result.steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            with ad.no_grad():
                dev_total, _, _ = mole_loss(mole, dev_utts)
            dev = float(dev_total.values)
            result.records.append(TrainRecord(step=step, loss=loss_val,
                                              lr=lr, dev_loss=dev))
            if dev < best_dev - 1e-9:
                best_dev = dev
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    result.stopped_early = True
                    break
        else:
            result.records.append(TrainRecord(step=step, loss=loss_val, lr=lr))

    if [bundle_digest(b) for b in mole.experts] != expert_digests:
        raise AssertionError("expert bundles changed during fusion training")
    if weights_digest(mole.model.weights) != backbone_digest:
        raise AssertionError("backbone changed during fusion training")
    result.bundle = export_mole(mole, cfg, expert_digests, backbone_digest)
    if log_path is not None:
        write_metrics_log(log_path,
                          [r for r in result.records if r.dev_loss is not None])
    return result


def router_accuracy(mole: MoleModel, corpus: Corpus, split: str = "dev",
                    max_per_language: int | None = None) -> float:
    hits = total = 0
    for k in range(corpus.n_languages):
        utts = corpus.utterances(split, k)
        if max_per_language is not None:
            utts = utts[:max_per_language]
        for utt in utts:
            routed, _ = mole.route(utt.features)
            hits += int(routed == k)
            total += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# checkpointing (kind-3 bundle: combiners + router, expert/backbone refs)
# ---------------------------------------------------------------------------

def export_mole(mole: MoleModel, cfg: TrainConfig | None,
                expert_digests: list[str], backbone_digest: str) -> ExpertBundle:
    matrices = {f"combiner.{name}": v.values.copy()
                for name, v in mole.combiners.items()}
    for name in ROUTER_NAMES:
        matrices[name] = mole.router[name].values.copy()
    metadata = {
        "l1": mole.l1,
        "n_experts": mole.n_experts,
        "expert_languages": [b.language_id for b in mole.experts],
        "expert_digests": expert_digests,
        "backbone_digest": backbone_digest,
    }
    if cfg is not None:
        metadata.update({"seed": cfg.seed, "steps": cfg.max_steps})
    return ExpertBundle(language_id="mole", rank=0, adapters={},
                        matrices=matrices, metadata=metadata,
                        kind=KIND_COMBINER)


def restore_mole(bundle: ExpertBundle, model: Transformer,
                 experts: list[ExpertBundle], verify: bool = True) -> MoleModel:
    """Rebuild a fusion model from a kind-3 checkpoint plus its referenced
    backbone weights and expert bundles."""
    if bundle.kind != KIND_COMBINER:
        raise ValueError(f"not a fusion checkpoint (kind {bundle.kind})")
    meta = bundle.metadata
    if verify:
        digests = [bundle_digest(b) for b in experts]
        if digests != list(meta["expert_digests"]):
            raise ValueError("expert bundles do not match checkpoint references")
        if weights_digest(model.weights) != meta["backbone_digest"]:
            raise ValueError("backbone does not match checkpoint reference")
    mole = MoleModel(model, experts, l1=int(meta["l1"]))
    for name, v in mole.combiners.items():
        stored = bundle.matrices[f"combiner.{name}"]
        v.values[...] = np.asarray(stored).reshape(v.shape)
    for name in ROUTER_NAMES:
        t = mole.router[name]
        t.values[...] = np.asarray(bundle.matrices[name]).reshape(t.shape)
    return mole
