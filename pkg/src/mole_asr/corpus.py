"""Synthetic multilingual corpus generator.

Each "language" is a set of phoneme feature templates plus a deterministic
bigram transduction from phoneme sequences to token sequences over a
per-language sub-vocabulary. Sub-vocabularies of any two languages share
exactly ceil(overlap * size) tokens. Features are template repetitions
with seeded Gaussian noise, so data is perfectly learnable at sigma = 0.

Two optional variants reshape the difficulty profile. emission_span=(1, 1)
pins every phoneme to a single output token, which makes the frame-to-token
alignment monotone with a fixed stride. language_signature="transitions"
gives all languages one shared template set and marks language identity
only in phoneme order (language k walks the inventory with stride k+1,
with occasional uniform resets), so telling languages apart requires
comparing neighbouring frames rather than classifying single frames.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def substream(master_seed: int, *tags: str) -> np.random.Generator:
    """Independent named random stream derived from one master seed."""
    entropy = [int(master_seed)] + [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class CorpusConfig:
    n_languages: int = 3
    n_phonemes: int = 12
    subvocab_size: int = 12
    overlap: float = 0.5
    sigma: float = 0.15
    frames_per_phoneme: int = 2
    min_phonemes: int = 3
    max_phonemes: int = 12
    train_sizes: tuple[int, ...] | int = 2000
    dev_size: int = 200
    test_size: int = 200
    feature_dim: int = 16
    text_base: int = 7
    vocab_size: int = 64
    max_tokens: int = 29
    emission_span: tuple[int, int] = (1, 2)
    language_signature: str = "templates"

    def __post_init__(self) -> None:
        object.__setattr__(self, "emission_span", tuple(self.emission_span))
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap {self.overlap} outside [0, 1]")
        if self.n_languages < 1 or self.n_phonemes < 2 or self.subvocab_size < 2:
            raise ValueError("corpus dimensions too small")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise ValueError("bad phoneme length range")
        lo, hi = self.emission_span
        # emission tables carry two token slots per entry
        if not 1 <= lo <= hi <= 2:
            raise ValueError(f"emission span {self.emission_span} outside 1..2")
        if self.language_signature not in ("templates", "transitions"):
            raise ValueError(
                f"unknown language signature '{self.language_signature}'")
        if (self.language_signature == "transitions"
                and self.n_languages >= self.n_phonemes):
            raise ValueError("transition strides need n_phonemes > n_languages")
        shared = self.n_shared
        needed = shared + self.n_languages * (self.subvocab_size - shared)
        if needed > self.vocab_size - self.text_base:
            raise ValueError(
                f"sub-vocabularies need {needed} text tokens, only "
                f"{self.vocab_size - self.text_base} available")
        sizes = self.train_per_language
        if len(sizes) != self.n_languages or min(sizes) < 1:
            raise ValueError("train_sizes must give every language >= 1 utterance")
        if self.dev_size < 1 or self.test_size < 1:
            raise ValueError("dev and test splits need >= 1 utterance")

    @property
    def n_shared(self) -> int:
        return int(np.ceil(self.overlap * self.subvocab_size))

    @property
    def train_per_language(self) -> tuple[int, ...]:
        if isinstance(self.train_sizes, int):
            return (self.train_sizes,) * self.n_languages
        return tuple(self.train_sizes)

    @classmethod
    def for_model(cls, model_config, **overrides) -> "CorpusConfig":
        base = dict(
            feature_dim=model_config.feature_dim,
            text_base=model_config.text_base,
            vocab_size=model_config.vocab_size,
            max_tokens=model_config.max_decode_len - 3,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class LanguageSpec:
    language_id: str
    index: int
    templates: np.ndarray       # (n_phonemes, feature_dim)
    subvocab: np.ndarray        # token ids available to this language
    uni_len: np.ndarray         # (P,) emission lengths for a leading phoneme
    uni_tok: np.ndarray         # (P, 2) token ids
    bi_len: np.ndarray          # (P, P) emission lengths for phoneme pairs
    bi_tok: np.ndarray          # (P, P, 2) token ids
    seed: int = 0

    def spec_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.templates, self.subvocab, self.uni_len, self.uni_tok,
                    self.bi_len, self.bi_tok):
            h.update(np.ascontiguousarray(arr).astype("<f8").tobytes())
        h.update(self.language_id.encode())
        return h.hexdigest()


@dataclass
class Utterance:
    utterance_id: str
    language_id: str
    language: int
    tokens: list[int]
    features: np.ndarray        # (frames, feature_dim)


def subvocabularies(config: CorpusConfig) -> list[np.ndarray]:
    """Token id blocks: one shared run plus disjoint per-language runs."""
    pool = np.arange(config.text_base, config.vocab_size)
    shared = pool[:config.n_shared]
    private_size = config.subvocab_size - config.n_shared
    vocabs = []
    for k in range(config.n_languages):
        start = config.n_shared + k * private_size
        private = pool[start:start + private_size]
        vocabs.append(np.concatenate([shared, private]))
    return vocabs


def generate_language(master_seed: int, k: int, config: CorpusConfig) -> LanguageSpec:
    """Deterministic language spec; distinct k gives distinct tables."""
    if not 0 <= k < config.n_languages:
        raise ValueError(f"language index {k} out of range")
    rng = substream(master_seed, "language", str(k))
    p = config.n_phonemes
    # drawn unconditionally so the table draws below see the same stream
    templates = rng.standard_normal((p, config.feature_dim))
    if config.language_signature == "transitions":
        # identity lives in phoneme order, not in the acoustics
        templates = substream(master_seed, "templates", "shared"
                              ).standard_normal((p, config.feature_dim))
    vocab = subvocabularies(config)[k]
    lo, hi = config.emission_span
    uni_len = rng.integers(lo, hi + 1, size=p)
    uni_tok = rng.choice(vocab, size=(p, 2))
    bi_len = rng.integers(lo, hi + 1, size=(p, p))
    bi_tok = rng.choice(vocab, size=(p, p, 2))
    return LanguageSpec(
        language_id=f"l{k}", index=k, templates=templates, subvocab=vocab,
        uni_len=uni_len, uni_tok=uni_tok, bi_len=bi_len, bi_tok=bi_tok,
        seed=master_seed)


def transduce(spec: LanguageSpec, phonemes) -> list[int]:
    """Apply the deterministic n-gram emission rules to a phoneme sequence."""
    phonemes = list(phonemes)
    if not phonemes:
        raise ValueError("empty phoneme sequence")
    first = phonemes[0]
    tokens = [int(t) for t in spec.uni_tok[first, :spec.uni_len[first]]]
    for prev, cur in zip(phonemes, phonemes[1:]):
        tokens.extend(int(t) for t in spec.bi_tok[prev, cur, :spec.bi_len[prev, cur]])
    return tokens


TRANSITION_RESET = 0.25


def _draw_phonemes(spec: LanguageSpec, n: int, config: CorpusConfig,
                   rng: np.random.Generator) -> np.ndarray:
    p = config.n_phonemes
    if config.language_signature != "transitions":
        return rng.integers(0, p, size=n)
    stride = spec.index + 1
    seq = [int(rng.integers(0, p))]
    for _ in range(n - 1):
        if rng.random() < TRANSITION_RESET:
            seq.append(int(rng.integers(0, p)))
        else:
            seq.append((seq[-1] + stride) % p)
    return np.asarray(seq, dtype=np.int64)


def synth_utterance(spec: LanguageSpec, length: int, sigma: float, seed,
                    config: CorpusConfig, utterance_id: str = "u0",
                    max_retries: int = 8) -> Utterance:
    """One utterance: phoneme draw, transduction, template + noise features.

    If the transduced target exceeds the token cap the phoneme sequence is
    redrawn shorter, a bounded number of times.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = min(length, config.max_phonemes)
    for _ in range(max_retries):
        phonemes = _draw_phonemes(spec, n, config, rng)
        tokens = transduce(spec, phonemes)
        if len(tokens) <= config.max_tokens:
            frames = np.repeat(spec.templates[phonemes], config.frames_per_phoneme,
                               axis=0)
            if sigma > 0.0:
                frames = frames + sigma * rng.standard_normal(frames.shape)
            return Utterance(
                utterance_id=utterance_id, language_id=spec.language_id,
                language=spec.index, tokens=tokens, features=frames)
        n = max(config.min_phonemes, n - 2)
    raise ValueError(
        f"could not fit a target under {config.max_tokens} tokens "
        f"after {max_retries} draws")


SPLITS = ("train", "dev", "test")


@dataclass
class Corpus:
    config: CorpusConfig
    master_seed: int
    languages: list[LanguageSpec]
    splits: dict[str, dict[int, list[Utterance]]]
    content_hash: str = ""

    def utterances(self, split: str, language: int | None = None) -> list[Utterance]:
        by_lang = self.splits[split]
        if language is not None:
            return by_lang[language]
        return [u for k in sorted(by_lang) for u in by_lang[k]]

    @property
    def n_languages(self) -> int:
        return len(self.languages)


def corpus_hash(corpus: Corpus) -> str:
    """Content digest over every utterance, in sorted id order."""
    h = hashlib.sha256()
    all_utts = [u for s in SPLITS for u in corpus.utterances(s)]
    for u in sorted(all_utts, key=lambda x: x.utterance_id):
        h.update(u.utterance_id.encode())
        h.update(u.language_id.encode())
        h.update(struct.pack("<I", len(u.tokens)))
        h.update(np.asarray(u.tokens, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
    return h.hexdigest()


def build_corpus(config: CorpusConfig, master_seed: int) -> Corpus:
    """Generate all splits for all languages, deterministically."""
    languages = [generate_language(master_seed, k, config)
                 for k in range(config.n_languages)]
    sizes = {"train": config.train_per_language,
             "dev": (config.dev_size,) * config.n_languages,
             "test": (config.test_size,) * config.n_languages}
    splits: dict[str, dict[int, list[Utterance]]] = {}
    for split in SPLITS:
        per_lang: dict[int, list[Utterance]] = {}
        for k, spec in enumerate(languages):
            utts = []
            for i in range(sizes[split][k]):
                rng = substream(master_seed, "utt", spec.language_id, split, str(i))
                length = int(rng.integers(config.min_phonemes,
                                          config.max_phonemes + 1))
                uid = f"l{k}_{split}_{i:05d}"
                utts.append(synth_utterance(spec, length, config.sigma, rng,
                                            config, utterance_id=uid))
            per_lang[k] = utts
        splits[split] = per_lang
    corpus = Corpus(config=config, master_seed=master_seed, languages=languages,
                    splits=splits)
    corpus.content_hash = corpus_hash(corpus)
    return corpus


# ---------------------------------------------------------------------------
# disk format: manifest.jsonl + feats/<id>.bin + corpus.json
# ---------------------------------------------------------------------------

def write_features(path: Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", arr.shape[0]))
        fh.write(arr.tobytes())


def read_features(path: Path, feature_dim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"feature file {path} too short")
    (n_frames,) = struct.unpack("<Q", raw[:8])
    body = raw[8:]
    if len(body) != n_frames * feature_dim * 8:
        raise ValueError(f"feature file {path} has inconsistent length")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(
        n_frames, feature_dim)


def _spec_to_json(spec: LanguageSpec) -> dict:
    return {
        "language_id": spec.language_id,
        "index": spec.index,
        "seed": spec.seed,
        "templates": spec.templates.tolist(),
        "subvocab": spec.subvocab.tolist(),
        "uni_len": spec.uni_len.tolist(),
        "uni_tok": spec.uni_tok.tolist(),
        "bi_len": spec.bi_len.tolist(),
        "bi_tok": spec.bi_tok.tolist(),
    }


def _spec_from_json(d: dict) -> LanguageSpec:
    return LanguageSpec(
        language_id=d["language_id"], index=d["index"], seed=d["seed"],
        templates=np.asarray(d["templates"], dtype=np.float64),
        subvocab=np.asarray(d["subvocab"], dtype=np.int64),
        uni_len=np.asarray(d["uni_len"], dtype=np.int64),
        uni_tok=np.asarray(d["uni_tok"], dtype=np.int64),
        bi_len=np.asarray(d["bi_len"], dtype=np.int64),
        bi_tok=np.asarray(d["bi_tok"], dtype=np.int64),
    )


def save_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    feats_dir = root / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for split in SPLITS:
        for u in corpus.utterances(split):
            rel = f"feats/{u.utterance_id}.bin"
            write_features(root / rel, u.features)
            records.append({
                "utterance_id": u.utterance_id,
                "language_id": u.language_id,
                "split": split,
                "n_frames": int(u.features.shape[0]),
                "tokens": list(map(int, u.tokens)),
                "path": rel,
            })
    records.sort(key=lambda r: r["utterance_id"])
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    info = {
        "master_seed": corpus.master_seed,
        "content_hash": corpus.content_hash,
        "config": asdict(corpus.config),
        "languages": [_spec_to_json(s) for s in corpus.languages],
    }
    with open(root / "corpus.json", "w") as fh:
        json.dump(info, fh, sort_keys=True, indent=1)


def load_corpus(root, verify: bool = True) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing corpus manifest at {manifest}")
    info = json.loads((root / "corpus.json").read_text())
    cfg_dict = dict(info["config"])
    if isinstance(cfg_dict.get("train_sizes"), list):
        cfg_dict["train_sizes"] = tuple(cfg_dict["train_sizes"])
    config = CorpusConfig(**cfg_dict)
    languages = [_spec_from_json(d) for d in info["languages"]]
    index_of = {s.language_id: s.index for s in languages}
    splits: dict[str, dict[int, list[Utterance]]] = {
        s: {k: [] for k in range(config.n_languages)} for s in SPLITS}
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            feats = read_features(root / rec["path"], config.feature_dim)
            if feats.shape[0] != rec["n_frames"]:
                raise ValueError(
                    f"frame count mismatch for {rec['utterance_id']}")
            k = index_of[rec["language_id"]]
            splits[rec["split"]][k].append(Utterance(
                utterance_id=rec["utterance_id"],
                language_id=rec["language_id"],
                language=k,
                tokens=list(rec["tokens"]),
                features=feats,
            ))
    corpus = Corpus(config=config, master_seed=info["master_seed"],
                    languages=languages, splits=splits,
                    content_hash=info["content_hash"])
    if verify:
        actual = corpus_hash(corpus)
        if actual != corpus.content_hash:
            raise ValueError(
                f"corpus content hash mismatch: manifest says "
                f"{corpus.content_hash[:12]}, data gives {actual[:12]}")
    return corpus
