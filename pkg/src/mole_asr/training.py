"""Training loops for monolingual experts and the multilingual LoRA model.

The backbone stays frozen throughout: only adapter tensors are registered
with the optimizer, and debug audits assert the frozen set accumulates no
gradient. Batches are assembled under a frame budget, with uniform or
weighted language sampling for the multilingual runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, substream
from .evaluation import AWARE, SingleModelHandle, evaluate
from .lora import (
    KIND_EXPERT,
    KIND_STUDENT,
    ExpertBundle,
    init_bundle,
    validate_bundle,
)
from .model import Transformer, lift_adapters, weights_digest

UNIFORM = "uniform"
WEIGHTED = "weighted"


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = UNIFORM
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (UNIFORM, WEIGHTED):
            raise ValueError(f"unknown sampling kind '{self.kind}'")
        if self.kind == WEIGHTED:
            if not self.weights:
                raise ValueError("weighted sampling needs weights")
            if min(self.weights) <= 0:
                raise ValueError("sampling weights must be strictly positive")

    def language_probs(self, n_languages: int) -> np.ndarray:
        if self.kind == UNIFORM:
            return np.full(n_languages, 1.0 / n_languages)
        if len(self.weights) != n_languages:
            raise ValueError(
                f"{len(self.weights)} weights for {n_languages} languages")
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 3000
    frame_budget: int = 512
    peak_lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0
    rank: int = 4
    eval_every: int = 200
    patience: int = 5
    dev_utts_per_language: int = 16
    track_dev_wer: bool = False

    def __post_init__(self):
        if self.max_steps < 0 or self.frame_budget < 1:
            raise ValueError("bad step count or frame budget")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup fraction outside [0, 1)")
        if self.rank < 1 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("bad rank, patience, or eval_every")


def lr_schedule(step: int, max_steps: int, peak_lr: float,
                warmup_frac: float = 0.05) -> float:
    """Linear warmup to the peak, then linear decay to zero at max_steps."""
    if step < 0:
        raise ValueError("negative step")
    if max_steps <= 0:
        return 0.0
    warmup = max(1, int(round(warmup_frac * max_steps)))
    if step <= warmup:
        return peak_lr * step / warmup
    if step >= max_steps:
        return 0.0
    return peak_lr * (max_steps - step) / (max_steps - warmup)


def sample_batch(by_language: dict[int, list], probs: np.ndarray,
                 frame_budget: int, rng: np.random.Generator) -> list:
    """Draw utterances (language first, then uniform within language) until
    the next draw would exceed the frame budget. Always yields at least one."""
    langs = sorted(by_language)
    batch: list = []
    frames = 0
    while True:
        k = langs[rng.choice(len(langs), p=probs)]
        pool = by_language[k]
        utt = pool[rng.integers(len(pool))]
        n = utt.features.shape[0]
        if batch and frames + n > frame_budget:
            return batch
        batch.append(utt)
        frames += n
        if frames >= frame_budget:
            return batch


@dataclass
class TrainRecord:
    step: int
    loss: float
    lr: float
    dev_wer: float | None = None
    dev_loss: float | None = None


@dataclass
class TrainResult:
    bundle: ExpertBundle
    records: list[TrainRecord] = field(default_factory=list)
    stopped_early: bool = False
    steps_run: int = 0


def _dev_subset(corpus: Corpus, languages: list[int], cap: int) -> list:
    subset = []
    for k in languages:
        subset.extend(corpus.utterances("dev", k)[:cap])
    return subset


def _dev_loss(model: Transformer, adapters, utts,
              teacher_forced_lid: bool) -> float:
    with ad.no_grad():
        loss = model.asr_loss(utts, adapters,
                              teacher_forced_lid=teacher_forced_lid)
    return float(loss.values)


def _dev_wer_live(model: Transformer, adapters, utts) -> float:
    """Aware-mode macro WER over the dev subset using live adapter tensors."""
    from .evaluation import wer
    pooled: dict[int, list[int]] = {}
    with ad.no_grad():
        for utt in utts:
            res = model.greedy_decode(utt.features, lid=utt.language,
                                      adapters=adapters)
            c = wer(utt.tokens, res.tokens)
            errs, refs = pooled.setdefault(utt.language, [0, 0])
            pooled[utt.language] = [errs + c.distance, refs + len(utt.tokens)]
    return float(np.mean([e / r for e, r in pooled.values()]))


def _audit_frozen(model: Transformer) -> None:
    bad = [name for name, t in model.weights.items()
           if t.grad is not None and np.any(t.grad != 0.0)]
    if bad:
        raise AssertionError(f"frozen backbone received gradient: {bad[:4]}")


def _run_loop(model: Transformer, bundle: ExpertBundle, corpus: Corpus,
              languages: list[int], cfg: TrainConfig,
              sampling: SamplingStrategy, teacher_forced_lid: bool,
              log_path: Path | None = None,
              audit_frozen: bool = False) -> TrainResult:
    """Shared step loop: frame-budget batches, AdamW on adapter tensors only,
    early stop on stalled dev loss."""
    adapters = lift_adapters(bundle, requires_grad=True)
    params = []
    for ta in adapters.values():
        params.extend([ta.A, ta.B])
    opt = ad.AdamW(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)

    by_language = {k: corpus.utterances("train", k) for k in languages}
    probs = sampling.language_probs(len(languages))
    batch_rng = substream(cfg.seed, "batching")
    dev_utts = _dev_subset(corpus, languages, cfg.dev_utts_per_language)

    result = TrainResult(bundle=bundle)
    best_dev = float("inf")
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        batch = sample_batch(by_language, probs, cfg.frame_budget, batch_rng)
        lr = lr_schedule(step, cfg.max_steps, cfg.peak_lr, cfg.warmup_frac)
        with ad.tape():
            loss = model.asr_loss(batch, adapters,
                                  teacher_forced_lid=teacher_forced_lid)
            loss_val = float(loss.values)
            ad.backward(loss)
        opt.step(lr=lr)
        if audit_frozen:
            _audit_frozen(model)
        opt.zero_grad()
        result.steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            dev = _dev_loss(model, adapters, dev_utts, teacher_forced_lid)
            dw = (_dev_wer_live(model, adapters, dev_utts)
                  if cfg.track_dev_wer else None)
            result.records.append(TrainRecord(step=step, loss=loss_val,
                                              lr=lr, dev_loss=dev, dev_wer=dw))
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

    _writeback(bundle, adapters)
    if log_path is not None:
        # one record per eval point
        write_metrics_log(log_path,
                          [r for r in result.records if r.dev_loss is not None])
    return result


def _writeback(bundle: ExpertBundle, adapters) -> None:
    for target, ta in adapters.items():
        bundle.adapters[target].A[...] = ta.A.values
        bundle.adapters[target].B[...] = ta.B.values


def write_metrics_log(path, records: list[TrainRecord]) -> None:
    lines = []
    for r in records:
        body = {"step": r.step, "loss": r.loss, "lr": r.lr}
        if r.dev_loss is not None:
            body["dev_loss"] = r.dev_loss
        if r.dev_wer is not None:
            body["dev_wer"] = r.dev_wer
        lines.append(json.dumps(body, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def train_expert(corpus: Corpus, language: int, model: Transformer,
                 cfg: TrainConfig, log_path=None,
                 audit_frozen: bool = False) -> TrainResult:
    """Finetune one language's adapters against the frozen backbone.

    The utterance pool is audited to be single-language; the ground-truth
    LID token rides in the prompt and is not a supervised target.
    """
    if not 0 <= language < corpus.n_languages:
        raise ValueError(f"no language {language} in corpus")
    for utt in corpus.utterances("train", language):
        if utt.language != language:
            raise ValueError("mixed-language corpus slice for expert training")
    pre_digest = weights_digest(model.weights)
    bundle = init_bundle(model.config, corpus.languages[language].language_id,
                         cfg.rank, substream(cfg.seed, "init", str(language)),
                         kind=KIND_EXPERT)
    result = _run_loop(model, bundle, corpus, [language], cfg,
                       SamplingStrategy(UNIFORM), teacher_forced_lid=True,
                       log_path=log_path, audit_frozen=audit_frozen)
    post_digest = weights_digest(model.weights)
    if post_digest != pre_digest:
        raise AssertionError("backbone changed during expert training")
    bundle.metadata.update({
        "steps": result.steps_run,
        "seed": cfg.seed,
        "language_index": language,
        "corpus": corpus.content_hash,
        "backbone": pre_digest,
    })
    validate_bundle(bundle, model.config)
    return result


def train_multilingual_lora(corpus: Corpus, model: Transformer,
                            cfg: TrainConfig,
                            sampling: SamplingStrategy | None = None,
                            init: ExpertBundle | None = None,
                            log_path=None,
                            audit_frozen: bool = False) -> TrainResult:
    """Train one adapter set on all languages with LID tokens supervised."""
    if corpus.n_languages < 2:
        raise ValueError("multilingual training needs at least 2 languages")
    sampling = sampling or SamplingStrategy(UNIFORM)
    languages = list(range(corpus.n_languages))
    pre_digest = weights_digest(model.weights)
    if init is not None:
        bundle = init.copy()
        bundle.kind = KIND_STUDENT
        if bundle.rank != cfg.rank:
            raise ValueError(
                f"init bundle rank {bundle.rank} != configured {cfg.rank}")
    else:
        bundle = init_bundle(model.config, "multi", cfg.rank,
                             substream(cfg.seed, "init", "multi"),
                             kind=KIND_STUDENT)
    result = _run_loop(model, bundle, corpus, languages, cfg, sampling,
                       teacher_forced_lid=False, log_path=log_path,
                       audit_frozen=audit_frozen)
    post_digest = weights_digest(model.weights)
    if post_digest != pre_digest:
        raise AssertionError("backbone changed during multilingual training")
    bundle.metadata.update({
        "steps": result.steps_run,
        "seed": cfg.seed,
        "sampling": sampling.kind,
        "corpus": corpus.content_hash,
        "backbone": pre_digest,
    })
    validate_bundle(bundle, model.config)
    return result


def dev_wer(model: Transformer, bundle: ExpertBundle, corpus: Corpus,
            max_per_language: int | None = None) -> float:
    """Language-aware macro WER of a bundle on the dev split."""
    handle = SingleModelHandle(bundle.language_id, model,
                               adapters=lift_adapters(bundle))
    report, _ = evaluate(handle, corpus, "dev", AWARE,
                         max_per_language=max_per_language)
    return report.macro_avg
