"""Token error rate and language-id evaluation, plus hidden-state dumps.

Two protocols: language-aware decoding injects the ground-truth language
into the prompt (or picks the matching expert); language-agnostic decoding
makes the system infer the language itself. An expert set without a router
cannot run agnostically and reports an explicit unsupported outcome.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DecodeResult, Transformer

AWARE = "aware"
AGNOSTIC = "agnostic"
MODES = (AWARE, AGNOSTIC)


# ---------------------------------------------------------------------------
# edit distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WerCount:
    rate: float
    substitutions: int
    insertions: int
    deletions: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def wer(reference, hypothesis) -> WerCount:
    """Minimal-edit token error rate.

    Ties between decompositions of equal cost are broken by preferring
    substitutions, then deletions, then insertions.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    # cell = (cost, substitutions, insertions, deletions)
    prev = [(j, 0, j, 0) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, len(hyp) + 1):
            match = ref[i - 1] == hyp[j - 1]
            dc, ds, di, dd = prev[j - 1]
            diag = (dc + (0 if match else 1), ds + (0 if match else 1), di, dd)
            uc, us, ui, ud = prev[j]
            up = (uc + 1, us, ui, ud + 1)        # delete a reference token
            lc, ls, li, ld = cur[j - 1]
            left = (lc + 1, ls, li + 1, ld)      # insert a hypothesis token
            best = diag
            if up[0] < best[0]:
                best = up
            if left[0] < best[0]:
                best = left
            cur.append(best)
        prev = cur
    cost, s, ins, dels = prev[len(hyp)]
    return WerCount(rate=cost / len(ref), substitutions=s, insertions=ins,
                    deletions=dels)


def edit_distance_oracle(ref, hyp) -> int:
    """Exhaustive edit-script search (no memoization); test oracle only."""
    def rec(i: int, j: int) -> int:
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        best = rec(i + 1, j + 1) + (0 if ref[i] == hyp[j] else 1)
        d = rec(i + 1, j) + 1
        if d < best:
            best = d
        ins = rec(i, j + 1) + 1
        if ins < best:
            best = ins
        return best

    return rec(0, 0)


# ---------------------------------------------------------------------------
# model handles
# ---------------------------------------------------------------------------

class SingleModelHandle:
    """One transformer with optional attached adapters (baseline/student)."""

    def __init__(self, name: str, model: Transformer, adapters=None,
                 route_classes: int | None = None) -> None:
        self.name = name
        self.model = model
        self.adapters = adapters
        self.route_classes = route_classes

    def supports(self, mode: str) -> bool:
        return mode in MODES

    def decode(self, utt, mode: str) -> DecodeResult:
        if mode == AWARE:
            return self.model.greedy_decode(utt.features, lid=utt.language,
                                            adapters=self.adapters)
        return self.model.greedy_decode(utt.features, adapters=self.adapters,
                                        route_classes=self.route_classes)

    def languages(self) -> set[int] | None:
        return None  # decodes any language the model has a LID token for

    def hidden_state(self, utt, layer_index: int) -> np.ndarray:
        return pooled_encoder_state(self.model, utt, layer_index, self.adapters)


class ExpertSetHandle:
    """Per-language adapter bundles over one frozen backbone.

    Language-aware only: the oracle language picks the expert. There is no
    router, so agnostic decoding is reported as unsupported.
    """

    def __init__(self, name: str, model: Transformer,
                 adapters_by_language: dict[int, dict]) -> None:
        self.name = name
        self.model = model
        self.adapters_by_language = adapters_by_language

    def supports(self, mode: str) -> bool:
        return mode == AWARE

    def decode(self, utt, mode: str) -> DecodeResult:
        if mode != AWARE:
            raise ValueError("expert set has no language router")
        adapters = self.adapters_by_language.get(utt.language)
        if adapters is None:
            raise KeyError(f"no expert for language {utt.language}")
        return self.model.greedy_decode(utt.features, lid=utt.language,
                                        adapters=adapters)

    def languages(self) -> set[int]:
        return set(self.adapters_by_language)

    def hidden_state(self, utt, layer_index: int) -> np.ndarray:
        adapters = self.adapters_by_language.get(utt.language)
        if adapters is None:
            raise KeyError(f"no expert for language {utt.language}")
        return pooled_encoder_state(self.model, utt, layer_index, adapters)


def pooled_encoder_state(model: Transformer, utt, layer_index: int,
                         adapters=None) -> np.ndarray:
    """Mean over frames of one encoder layer's block output."""
    from . import autodiff as ad
    n_layers = model.config.n_enc_layers
    if not 0 <= layer_index < n_layers:
        raise ValueError(f"layer index {layer_index} outside [0, {n_layers})")
    outs: list = []
    with ad.no_grad():
        model.encode(utt.features, adapters, collect=outs)
    return outs[layer_index].values.mean(axis=0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class LanguageWer:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    n_reference_tokens: int
    n_utterances: int
    error: str | None = None


@dataclass
class WERReport:
    model: str
    mode: str
    per_language: dict[str, LanguageWer] = field(default_factory=dict)
    macro_avg: float = float("nan")
    pooled_wer: float = float("nan")
    unsupported: bool = False

    def to_json(self) -> str:
        body = {
            "model": self.model,
            "mode": self.mode,
            "unsupported": self.unsupported,
            "macro_avg": self.macro_avg,
            "pooled_wer": self.pooled_wer,
            "per_language": {
                lang: vars(lw) for lang, lw in sorted(self.per_language.items())
            },
        }
        return json.dumps(body, sort_keys=True)


@dataclass
class LIDReport:
    confusion: np.ndarray      # rows: true language, cols: routed language
    accuracy: float            # raw first-token prediction accuracy
    per_language_recall: dict[str, float]

    def to_json(self) -> str:
        return json.dumps({
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "per_language_recall": dict(sorted(self.per_language_recall.items())),
        }, sort_keys=True)


def evaluate(handle, corpus, split: str = "test", mode: str = AWARE,
             max_per_language: int | None = None
             ) -> tuple[WERReport, LIDReport | None]:
    """Decode one split and score error rates (plus LID when inferring)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'")
    report = WERReport(model=handle.name, mode=mode)
    if not handle.supports(mode):
        report.unsupported = True
        return report, None

    k_langs = corpus.n_languages
    confusion = np.zeros((k_langs, k_langs), dtype=np.int64)
    lid_hits = 0
    lid_total = 0
    for k in range(k_langs):
        utts = corpus.utterances(split, k)
        if max_per_language is not None:
            utts = utts[:max_per_language]
        lang_id = corpus.languages[k].language_id
        known = handle.languages()
        if known is not None and k not in known:
            report.per_language[lang_id] = LanguageWer(
                wer=float("nan"), substitutions=0, insertions=0, deletions=0,
                n_reference_tokens=0, n_utterances=len(utts),
                error="no route for this language")
            continue
        if not utts:
            report.per_language[lang_id] = LanguageWer(
                wer=float("nan"), substitutions=0, insertions=0, deletions=0,
                n_reference_tokens=0, n_utterances=0, error="no utterances")
            continue
        s = i = d = n_ref = 0
        for utt in utts:
            res = handle.decode(utt, mode)
            count = wer(utt.tokens, res.tokens)
            s += count.substitutions
            i += count.insertions
            d += count.deletions
            n_ref += len(utt.tokens)
            if mode == AGNOSTIC:
                lid_total += 1
                expected = _true_lid_token(handle, utt)
                if res.lid_token is not None and res.lid_token == expected:
                    lid_hits += 1
                routed = res.routed_lid
                if routed is not None and 0 <= routed < k_langs:
                    confusion[k, routed] += 1
        report.per_language[lang_id] = LanguageWer(
            wer=(s + i + d) / n_ref, substitutions=s, insertions=i, deletions=d,
            n_reference_tokens=n_ref, n_utterances=len(utts))

    valid = [lw for lw in report.per_language.values() if lw.error is None]
    if valid:
        report.macro_avg = float(np.mean([lw.wer for lw in valid]))
        tot_ref = sum(lw.n_reference_tokens for lw in valid)
        tot_err = sum(lw.substitutions + lw.insertions + lw.deletions
                      for lw in valid)
        report.pooled_wer = tot_err / tot_ref

    lid_report = None
    if mode == AGNOSTIC and lid_total:
        recall = {}
        for k in range(k_langs):
            row = confusion[k]
            lang_id = corpus.languages[k].language_id
            recall[lang_id] = float(row[k] / row.sum()) if row.sum() else 0.0
        lid_report = LIDReport(confusion=confusion,
                               accuracy=lid_hits / lid_total,
                               per_language_recall=recall)
    return report, lid_report


def _true_lid_token(handle, utt) -> int:
    """Vocabulary id the handle should have predicted for this utterance."""
    model = getattr(handle, "model", None)
    if model is not None:
        return model.config.lid_id(utt.language)
    return utt.language


def render_wer_table(reports: list[WERReport]) -> str:
    """Aligned human-readable comparison across model handles."""
    langs = sorted({lang for r in reports for lang in r.per_language})
    header = ["model", "mode"] + langs + ["macro_avg"]
    rows = [header]
    for r in reports:
        if r.unsupported:
            rows.append([r.model, r.mode] + ["-"] * (len(langs) + 1))
            continue
        cells = [r.model, r.mode]
        for lang in langs:
            lw = r.per_language.get(lang)
            if lw is None or lw.error is not None:
                cells.append("-")
            else:
                cells.append(f"{100.0 * lw.wer:.2f}")
        cells.append(f"{100.0 * r.macro_avg:.2f}" if r.per_language else "-")
        rows.append(cells)
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# hidden-state dumps
# ---------------------------------------------------------------------------

def dump_hidden(handle, corpus, split: str, layer_index: int, path) -> int:
    """TSV of pooled encoder states: utterance_id, language_id, then floats.

    Rows are sorted by utterance_id; returns the row count.
    """
    rows = []
    for utt in corpus.utterances(split):
        vec = handle.hidden_state(utt, layer_index)
        cells = [utt.utterance_id, utt.language_id] + [repr(float(x)) for x in vec]
        rows.append((utt.utterance_id, "\t".join(cells)))
    rows.sort(key=lambda r: r[0])
    Path(path).write_text("\n".join(line for _, line in rows) + "\n")
    return len(rows)


def separability(dump_path) -> tuple[float, float]:
    """(mean inter-language centroid distance, mean intra-language spread)."""
    by_lang: dict[str, list[np.ndarray]] = {}
    for line in Path(dump_path).read_text().splitlines():
        parts = line.split("\t")
        by_lang.setdefault(parts[1], []).append(
            np.array([float(x) for x in parts[2:]]))
    centroids = {}
    spreads = []
    for lang, vecs in by_lang.items():
        arr = np.stack(vecs)
        c = arr.mean(axis=0)
        centroids[lang] = c
        spreads.append(float(np.mean(np.linalg.norm(arr - c, axis=1))))
    langs = sorted(centroids)
    dists = [float(np.linalg.norm(centroids[a] - centroids[b]))
             for idx, a in enumerate(langs) for b in langs[idx + 1:]]
    return float(np.mean(dists)), float(np.mean(spreads))
