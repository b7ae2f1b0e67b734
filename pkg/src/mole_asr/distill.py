"""Layer-wise distillation of per-language experts into one student.

Each step runs the frozen teacher chain (the expert matching the
utterance's language) and the student chain side by side. Per-layer cosine
terms align hidden outputs, a Jensen-Shannon term aligns final logits, and
a per-layer coin decides whether the student's stream is pulled to the
midpoint of the two chains before feeding its next layer. Teachers stay
pure: no student value ever enters a teacher forward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, substream
from .lora import (
    KIND_STUDENT,
    ExpertBundle,
    LoRAAdapter,
    average_bundles,
    validate_bundle,
)
from .model import Transformer, lift_adapters, weights_digest
from .training import (
    SamplingStrategy,
    TrainConfig,
    TrainRecord,
    TrainResult,
    _dev_subset,
    _writeback,
    lr_schedule,
    sample_batch,
)

LayerTag = tuple[str, int]


@dataclass(frozen=True)
class KDConfig:
    alpha: float = 1.0
    p: float = 0.5
    student_rank: int = 16
    # None = every encoder and decoder layer; [] = logits-divergence only
    layer_set: tuple[LayerTag, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"interpolation probability {self.p} outside [0, 1]")
        if self.alpha < 0.0:
            raise ValueError(f"balance weight {self.alpha} must be >= 0")
        if self.student_rank < 1:
            raise ValueError("student rank must be positive")


def materialize_layer_set(config, layer_set) -> list[LayerTag]:
    if layer_set is None:
        return ([("enc", i) for i in range(config.n_enc_layers)]
                + [("dec", i) for i in range(config.n_dec_layers)])
    tags = []
    for tag in layer_set:
        side, idx = tag
        limit = (config.n_enc_layers if side == "enc"
                 else config.n_dec_layers if side == "dec" else -1)
        if not 0 <= idx < limit:
            raise ValueError(f"bad KD layer tag {tag!r}")
        tags.append((side, int(idx)))
    if len(set(tags)) != len(tags):
        raise ValueError("duplicate KD layer tags")
    return tags


def draw_coins(layer_tags: list[LayerTag], p: float,
               rng: np.random.Generator) -> dict[LayerTag, bool]:
    """One independent coin per layer per step; p = 0 draws nothing."""
    if p <= 0.0:
        return {tag: False for tag in layer_tags}
    return {tag: bool(rng.random() < p) for tag in layer_tags}


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def kd_layer_loss(teacher_out, student_out) -> Tensor:
    """1 - cosine similarity over the flattened layer outputs, in [0, 2]."""
    t, s = _as_tensor(teacher_out), _as_tensor(student_out)
    if t.shape != s.shape:
        raise ValueError(f"layer shape mismatch: {t.shape} vs {s.shape}")
    cos = ad.cosine_similarity(t, s)
    return ad.add(Tensor(1.0), ad.scalar_scale(cos, -1.0))


def interpolate(student_out: Tensor, teacher_out, fired: bool) -> Tensor:
    """Midpoint of the two chains when the coin fired, else the student."""
    if not fired:
        return student_out
    return ad.scalar_scale(ad.add(student_out, _as_tensor(teacher_out)), 0.5)


def logits_divergence(student_logits, teacher_logits) -> Tensor:
    """Jensen-Shannon divergence between per-position softmax distributions,
    averaged over positions; lies in [0, ln 2]."""
    s, t = _as_tensor(student_logits), _as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"logits shape mismatch: {s.shape} vs {t.shape}")
    n_classes = s.shape[-1]
    p = ad.row_softmax(s)
    q = ad.row_softmax(t)
    m = ad.scalar_scale(ad.add(p, q), 0.5)
    log_m = ad.log(m)
    kl_pm = ad.elementwise_mul(p, ad.add(ad.log(p), ad.scalar_scale(log_m, -1.0)))
    kl_qm = ad.elementwise_mul(q, ad.add(ad.log(q), ad.scalar_scale(log_m, -1.0)))
    # mean over every entry times class count = mean over positions of the
    # per-position KL sums
    per_pos = ad.scalar_scale(ad.add(ad.mean(kl_pm), ad.mean(kl_qm)),
                              0.5 * n_classes)
    return per_pos


def jsd_oracle(student_logits: np.ndarray, teacher_logits: np.ndarray) -> float:
    """Direct-summation reference for tests."""
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    total = 0.0
    for srow, trow in zip(s, t):
        p = np.exp(srow - srow.max())
        p /= p.sum()
        q = np.exp(trow - trow.max())
        q /= q.sum()
        m = 0.5 * (p + q)
        total += 0.5 * (np.sum(p * np.log(p / m)) + np.sum(q * np.log(q / m)))
    return total / s.shape[0]


# ---------------------------------------------------------------------------
# rank lifting
# ---------------------------------------------------------------------------

def lift_bundle_rank(avg: ExpertBundle, student_rank: int,
                     rng: np.random.Generator) -> ExpertBundle:
    """Embed an averaged expert into a higher-rank student bundle.

    The averaged (A, B) occupy the leading rows of A and columns of B; the
    new A rows draw the usual Gaussian init at the student rank and the new
    B columns start at zero, so the initial delta is exactly preserved.
    """
    r_e = avg.rank
    if student_rank % r_e != 0:
        raise ValueError(
            f"student rank {student_rank} not a multiple of expert rank {r_e}")
    adapters = {}
    for name, a in avg.adapters.items():
        d1, d2 = a.B.shape[0], a.A.shape[1]
        big_a = rng.normal(0.0, 1.0 / np.sqrt(student_rank), (student_rank, d2))
        big_a[:r_e] = a.A
        big_b = np.zeros((d1, student_rank))
        big_b[:, :r_e] = a.B
        adapters[name] = LoRAAdapter(target=name, A=big_a, B=big_b,
                                     scale=a.scale)
    return ExpertBundle(
        language_id=avg.language_id, rank=student_rank, adapters=adapters,
        metadata=dict(avg.metadata, lifted_from_rank=r_e), kind=KIND_STUDENT)


def init_student(experts: list[ExpertBundle], student_rank: int,
                 seed: int) -> ExpertBundle:
    avg = average_bundles(experts, language_id="multi")
    lifted = lift_bundle_rank(avg, student_rank,
                              substream(seed, "init", "student-lift"))
    return lifted


# ---------------------------------------------------------------------------
# the distillation step
# ---------------------------------------------------------------------------

@dataclass
class KDStepReport:
    per_layer: dict[LayerTag, float] = field(default_factory=dict)
    logits_divergence: float = 0.0
    asr_loss: float = 0.0
    total: float = 0.0
    fired: dict[LayerTag, bool] = field(default_factory=dict)
    alpha: float = 0.0
    n_terms: int = 1


def _dev_wer_modes(model: Transformer, adapters, utts) -> tuple[float, float]:
    """Macro WER of the live student on a dev subset, language-aware and
    language-agnostic (per-language pooled counts, unweighted mean)."""
    from .evaluation import wer
    out = []
    for lid in (True, False):
        pooled: dict[int, list[int]] = {}
        with ad.no_grad():
            for utt in utts:
                res = model.greedy_decode(
                    utt.features, lid=utt.language if lid else None,
                    adapters=adapters)
                c = wer(utt.tokens, res.tokens)
                errs, refs = pooled.setdefault(utt.language, [0, 0])
                pooled[utt.language] = [errs + c.distance,
                                        refs + len(utt.tokens)]
        out.append(float(np.mean([e / r for e, r in pooled.values()])))
    return out[0], out[1]


def teacher_outputs(model: Transformer, utt, teacher_adapters):
    """Pure frozen-chain forward: per-layer outputs and final logits as
    plain arrays (Eq-style recurrence with no student involvement)."""
    with ad.no_grad():
        fwd = model.forward_utterance(utt, teacher_adapters,
                                      teacher_forced_lid=True, collect=True)
    enc = [o.values.copy() for o in fwd.enc_outputs]
    dec = [o.values.copy() for o in fwd.dec_outputs]
    return enc, dec, fwd.logits.values.copy()


def distill_loss(model: Transformer, experts_adapters: dict[int, dict],
                 student_adapters, batch, kd_cfg: KDConfig,
                 coins: dict[LayerTag, bool]) -> tuple[Tensor, KDStepReport]:
    """Batch loss L_ASR + alpha * (sum of KD terms) / (|layer set| + 1).

    The ASR term supervises LID and tokens on the student's (possibly
    interpolated) chain; KD terms compare the student's raw layer outputs
    against the teacher's pure chain. With alpha = 0 the computation is
    exactly the plain multilingual ASR loss.
    """
    if not batch:
        raise ValueError("empty batch")
    layer_tags = materialize_layer_set(model.config, kd_cfg.layer_set)
    use_kd = kd_cfg.alpha > 0.0
    interpolating = any(coins.get(t, False) for t in layer_tags)

    ce_parts: list[tuple[Tensor, float]] = []
    n_total = 0.0
    kd_parts: dict[LayerTag, list[Tensor]] = {t: [] for t in layer_tags}
    jsd_parts: list[Tensor] = []

    for utt in batch:
        k = utt.language
        if k not in experts_adapters:
            raise KeyError(f"no expert for language {k}")
        if use_kd or interpolating:
            t_enc, t_dec, t_logits = teacher_outputs(
                model, utt, experts_adapters[k])

        enc_hook = dec_hook = None
        if interpolating:
            def enc_hook(i, x, _t=t_enc):
                return interpolate(x, _t[i], coins.get(("enc", i), False))

            def dec_hook(i, x, _t=t_dec):
                return interpolate(x, _t[i], coins.get(("dec", i), False))

        fwd = model.forward_utterance(utt, student_adapters,
                                      teacher_forced_lid=False,
                                      enc_hook=enc_hook, dec_hook=dec_hook,
                                      collect=use_kd)
        ce = ad.cross_entropy_with_logits(fwd.logits, fwd.targets, fwd.mask)
        ce_parts.append((ce, fwd.n_positions))
        n_total += fwd.n_positions

        if use_kd:
            for side, i in layer_tags:
                teacher = (t_enc if side == "enc" else t_dec)[i]
                student = (fwd.enc_outputs if side == "enc"
                           else fwd.dec_outputs)[i]
                kd_parts[(side, i)].append(kd_layer_loss(teacher, student))
            # position 0 predicts the LID token, which the teacher never
            # learned; the divergence reads transcript positions only
            rows = fwd.logits.shape[0]
            s_rows = ad.slice_(fwd.logits, 1, rows, axis=0)
            jsd_parts.append(logits_divergence(s_rows, t_logits[1:]))

    asr = ad.scalar_scale(ce_parts[0][0], ce_parts[0][1] / n_total)
    for ce, n in ce_parts[1:]:
        asr = ad.add(asr, ad.scalar_scale(ce, n / n_total))

    report = KDStepReport(fired=dict(coins), alpha=kd_cfg.alpha,
                          n_terms=len(layer_tags) + 1)
    if not use_kd:
        report.asr_loss = float(asr.values)
        report.total = float(asr.values)
        return asr, report

    def batch_mean(parts: list[Tensor]) -> Tensor:
        s = parts[0]
        for t in parts[1:]:
            s = ad.add(s, t)
        return ad.scalar_scale(s, 1.0 / len(parts))

    kd_sum = None
    for tag in layer_tags:
        term = batch_mean(kd_parts[tag])
        report.per_layer[tag] = float(term.values)
        kd_sum = term if kd_sum is None else ad.add(kd_sum, term)
    jsd = batch_mean(jsd_parts)
    report.logits_divergence = float(jsd.values)
    kd_sum = jsd if kd_sum is None else ad.add(kd_sum, jsd)

    total = ad.add(asr, ad.scalar_scale(kd_sum,
                                        kd_cfg.alpha / report.n_terms))
    report.asr_loss = float(asr.values)
    report.total = float(total.values)
    return total, report


# ---------------------------------------------------------------------------
# the student training loop
# ---------------------------------------------------------------------------

def train_student(corpus: Corpus, model: Transformer,
                  experts: list[ExpertBundle], kd_cfg: KDConfig,
                  cfg: TrainConfig, log_path=None,
                  audit_frozen: bool = False) -> TrainResult:
    """Distill the experts into one student bundle (kind = student).

    With p = 0 and alpha = 0 this reduces, bit-exactly, to multilingual
    LoRA training initialized at the lifted expert average.
    """
    if len(experts) != corpus.n_languages:
        raise ValueError(
            f"{len(experts)} experts for {corpus.n_languages} languages")
    ranks = {b.rank for b in experts}
    if len(ranks) != 1:
        raise ValueError(f"experts disagree on rank: {sorted(ranks)}")

    backbone_digest = weights_digest(model.weights)
    bundle = init_student(experts, kd_cfg.student_rank, cfg.seed)
    adapters = lift_adapters(bundle, requires_grad=True)
    params = []
    for ta in adapters.values():
        params.extend([ta.A, ta.B])
    opt = ad.AdamW(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)

    experts_adapters = {k: lift_adapters(b) for k, b in enumerate(experts)}
    languages = list(range(corpus.n_languages))
    by_language = {k: corpus.utterances("train", k) for k in languages}
    probs = SamplingStrategy().language_probs(len(languages))
    batch_rng = substream(cfg.seed, "batching")
    coin_rng = substream(cfg.seed, "kd-coin")
    layer_tags = materialize_layer_set(model.config, kd_cfg.layer_set)
    dev_utts = _dev_subset(corpus, languages, cfg.dev_utts_per_language)
    eval_cfg = KDConfig(alpha=kd_cfg.alpha, p=0.0,
                        student_rank=kd_cfg.student_rank,
                        layer_set=kd_cfg.layer_set)
    no_coins = {tag: False for tag in layer_tags}

    result = TrainResult(bundle=bundle)
    kd_rows: list[dict] = []
    best_dev = float("inf")
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        batch = sample_batch(by_language, probs, cfg.frame_budget, batch_rng)
        coins = draw_coins(layer_tags, kd_cfg.p, coin_rng)
        lr = lr_schedule(step, cfg.max_steps, cfg.peak_lr, cfg.warmup_frac)
        with ad.tape():
            loss, report = distill_loss(model, experts_adapters, adapters,
                                        batch, kd_cfg, coins)
            loss_val = float(loss.values)
            ad.backward(loss)
        opt.step(lr=lr)
        if audit_frozen:
            _audit_kd_frozen(model, experts_adapters)
        opt.zero_grad()
        result.steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            # pure student at evaluation: interpolation off
            with ad.no_grad():
                dev_loss_t, dev_report = distill_loss(
                    model, experts_adapters, adapters, dev_utts, eval_cfg,
                    no_coins)
            dev = float(dev_loss_t.values)
            wer_aware, wer_agnostic = _dev_wer_modes(model, adapters, dev_utts)
            result.records.append(TrainRecord(
                step=step, loss=loss_val, lr=lr, dev_loss=dev,
                dev_wer=wer_aware if cfg.track_dev_wer else None))
            kd_rows.append({
                "step": step, "loss": loss_val, "lr": lr, "dev_loss": dev,
                "asr_loss": report.asr_loss,
                "logits_divergence": report.logits_divergence,
                "kd_per_layer": {f"{s}.{i}": v
                                 for (s, i), v in report.per_layer.items()},
                "dev_asr_loss": dev_report.asr_loss,
                "dev_wer_aware": wer_aware,
                "dev_wer_agnostic": wer_agnostic,
            })
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
    bundle.metadata.update({
        "steps": result.steps_run,
        "seed": cfg.seed,
        "corpus": corpus.content_hash,
        "backbone": backbone_digest,
        "kd_alpha": kd_cfg.alpha,
        "kd_p": kd_cfg.p,
        "kd_layer_set": ("all" if kd_cfg.layer_set is None
                         else [f"{s}.{i}" for s, i in kd_cfg.layer_set]),
    })
    if weights_digest(model.weights) != backbone_digest:
        raise AssertionError("backbone changed during distillation")
    validate_bundle(bundle, model.config)
    if log_path is not None:
        lines = [json.dumps(row, sort_keys=True) for row in kd_rows]
        Path(log_path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return result


def _audit_kd_frozen(model: Transformer,
                     experts_adapters: dict[int, dict]) -> None:
    bad = [name for name, t in model.weights.items()
           if t.grad is not None and np.any(t.grad != 0.0)]
    for k, ads in experts_adapters.items():
        for name, ta in ads.items():
            for part in (ta.A, ta.B):
                if part.grad is not None and np.any(part.grad != 0.0):
                    bad.append(f"expert{k}.{name}")
    if bad:
        raise AssertionError(f"frozen tensors received gradient: {bad[:4]}")
