"""Shared fixtures: tiny model configs and utterance stubs."""

from dataclasses import dataclass, field

import numpy as np
import pytest

from mole_asr.model import ModelConfig, Transformer, init_weights


@dataclass
class Utt:
    """Minimal utterance: features, target tokens, language index."""

    features: np.ndarray
    tokens: list[int]
    language: int
    utterance_id: str = "u0"


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                feature_dim=3, vocab_size=12, max_decode_len=6,
                max_source_len=8, ff_mult=2, n_languages=2)
    base.update(overrides)
    return ModelConfig(**base)


def small_config(**overrides) -> ModelConfig:
    base = dict(d_model=16, n_heads=4, n_enc_layers=2, n_dec_layers=2,
                feature_dim=4, vocab_size=16, max_decode_len=8,
                max_source_len=12, ff_mult=2, n_languages=2)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    weights = init_weights(cfg, np.random.default_rng(7))
    return Transformer(cfg, weights)


def random_utt(cfg: ModelConfig, rng: np.random.Generator, n_frames: int = 4,
               n_tokens: int = 3, language: int = 0, uid: str = "u0") -> Utt:
    feats = rng.standard_normal((n_frames, cfg.feature_dim))
    tokens = rng.integers(cfg.text_base, cfg.vocab_size, size=n_tokens).tolist()
    return Utt(features=feats, tokens=tokens, language=language, utterance_id=uid)
