"""Adapter algebra and bundle file contracts."""

import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from mole_asr.lora import (
    KIND_BACKBONE,
    KIND_EXPERT,
    BadMagicError,
    BundleError,
    ChecksumError,
    ExpertBundle,
    LoRAAdapter,
    TruncatedError,
    VersionError,
    attachment_targets,
    average_bundles,
    bundles_equal,
    init_adapter,
    init_bundle,
    load_bundle,
    merge_back,
    save_bundle,
    target_shapes,
    validate_bundle,
)

FIXTURE = Path(__file__).parent / "data" / "fixture_rank4.mole"


def rng(seed=0):
    return np.random.default_rng(seed)


def random_bundle(seed=0, rank=2, language="aa") -> ExpertBundle:
    r = rng(seed)
    adapters = {}
    for name, (d1, d2) in [("w.x", (4, 5)), ("w.y", (6, 3))]:
        adapters[name] = LoRAAdapter(
            name, r.standard_normal((rank, d2)), r.standard_normal((d1, rank)))
    return ExpertBundle(language_id=language, rank=rank, adapters=adapters,
                        metadata={"steps": 10, "seed": seed, "corpus": "deadbeef"})


# -- init --------------------------------------------------------------------

def test_init_adapter_zero_delta():
    ad = init_adapter("t", 6, 5, 2, rng(1))
    assert np.array_equal(ad.delta(), np.zeros((6, 5)))
    assert np.array_equal(ad.B, np.zeros((6, 2)))


def test_init_adapter_seed_determinism():
    a1 = init_adapter("t", 6, 5, 2, rng(3))
    a2 = init_adapter("t", 6, 5, 2, rng(3))
    assert a1.A.tobytes() == a2.A.tobytes()
    a3 = init_adapter("t", 6, 5, 2, rng(4))
    assert a1.A.tobytes() != a3.A.tobytes()
    assert np.array_equal(a1.B, a3.B)


def test_init_adapter_gaussian_scale():
    # std of A entries tracks 1/sqrt(rank)
    ad = init_adapter("t", 300, 400, 16, rng(5))
    assert abs(ad.A.std() - 0.25) < 0.01


def test_init_adapter_rank_bounds():
    with pytest.raises(ValueError):
        init_adapter("t", 4, 5, 0, rng(0))
    with pytest.raises(ValueError):
        init_adapter("t", 4, 5, 5, rng(0))


# -- delta -------------------------------------------------------------------

def test_delta_rank_one_hand_case():
    ad = LoRAAdapter("t", A=np.array([[2.0, 3.0]]), B=np.array([[1.0], [0.0]]))
    assert np.array_equal(ad.delta(), [[2.0, 3.0], [0.0, 0.0]])


def test_delta_scale_zero():
    ad = LoRAAdapter("t", A=np.ones((2, 3)), B=np.ones((4, 2)), scale=0.0)
    assert np.array_equal(ad.delta(), np.zeros((4, 3)))


def test_delta_matches_triple_loop_oracle():
    r = rng(9)
    a = r.standard_normal((2, 5))
    b = r.standard_normal((4, 2))
    ad = LoRAAdapter("t", a, b)
    expect = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(2):
                expect[i, j] += b[i, k] * a[k, j]
    np.testing.assert_allclose(ad.delta(), expect, atol=1e-12)


def test_delta_rank_bound():
    for r_val in (1, 2, 3):
        ad = LoRAAdapter("t", rng(r_val).standard_normal((r_val, 8)),
                         rng(r_val + 10).standard_normal((7, r_val)))
        assert np.linalg.matrix_rank(ad.delta()) <= r_val


def test_adapter_shape_validation():
    with pytest.raises(ValueError):
        LoRAAdapter("t", A=np.ones((2, 3)), B=np.ones((4, 3)))


# -- merge-back ----------------------------------------------------------------

def weights_for(bundle):
    r = rng(40)
    return {name: r.standard_normal(ad.out_shape)
            for name, ad in bundle.adapters.items()}


def test_merge_back_fresh_adapters_identity():
    cfg = tiny_config()
    bundle = init_bundle(cfg, "aa", 2, rng(0))
    shapes = target_shapes(cfg)
    weights = {n: rng(1).standard_normal(shapes[n]) for n in bundle.adapters}
    merged = merge_back(weights, bundle)
    for name in weights:
        assert np.array_equal(merged[name], weights[name])


def test_merge_back_additivity_and_purity():
    bundle = random_bundle(2)
    weights = weights_for(bundle)
    before = {k: v.copy() for k, v in weights.items()}
    once = merge_back(weights, bundle)
    twice = merge_back(once, bundle)
    for name, ad in bundle.adapters.items():
        np.testing.assert_allclose(
            twice[name], weights[name] + 2.0 * ad.delta(), atol=1e-12)
        assert np.array_equal(weights[name], before[name])


def test_merge_back_two_bundles_linear():
    b1, b2 = random_bundle(3), random_bundle(4)
    weights = weights_for(b1)
    seq = merge_back(merge_back(weights, b1), b2)
    for name in weights:
        np.testing.assert_allclose(
            seq[name],
            weights[name] + b1.adapters[name].delta() + b2.adapters[name].delta(),
            atol=1e-12)


def test_merge_back_unknown_target():
    bundle = random_bundle(5)
    with pytest.raises(ValueError):
        merge_back({"other": np.zeros((4, 5))}, bundle)


def test_merge_back_shape_mismatch():
    bundle = random_bundle(6)
    weights = {name: np.zeros((2, 2)) for name in bundle.adapters}
    with pytest.raises(ValueError):
        merge_back(weights, bundle)


# -- averaging -----------------------------------------------------------------

def test_average_of_copies_is_identity():
    b = random_bundle(7)
    avg = average_bundles([b, b.copy(), b.copy()])
    for name, ad in b.adapters.items():
        np.testing.assert_allclose(avg.adapters[name].A, ad.A, atol=1e-15)
        np.testing.assert_allclose(avg.adapters[name].B, ad.B, atol=1e-15)


def test_average_of_opposite_a_parts_cancels():
    b1 = random_bundle(8)
    b2 = b1.copy()
    for ad in b2.adapters.values():
        ad.A = -ad.A
    avg = average_bundles([b1, b2])
    for name in b1.adapters:
        np.testing.assert_allclose(avg.adapters[name].A, 0.0, atol=1e-15)
        np.testing.assert_allclose(avg.adapters[name].B, b1.adapters[name].B,
                                   atol=1e-15)


def test_average_matches_scalar_loop_oracle():
    bundles = [random_bundle(s) for s in (10, 11, 12)]
    avg = average_bundles(bundles)
    for name in bundles[0].adapters:
        stack = [b.adapters[name].A for b in bundles]
        expect = np.zeros_like(stack[0])
        for i in range(expect.shape[0]):
            for j in range(expect.shape[1]):
                expect[i, j] = sum(m[i, j] for m in stack) / 3.0
        np.testing.assert_allclose(avg.adapters[name].A, expect, atol=1e-12)


def test_average_rejects_mismatches():
    with pytest.raises(ValueError):
        average_bundles([])
    with pytest.raises(ValueError):
        average_bundles([random_bundle(0, rank=2), random_bundle(1, rank=3)])
    b1, b2 = random_bundle(0), random_bundle(1)
    del b2.adapters["w.x"]
    with pytest.raises(ValueError):
        average_bundles([b1, b2])


# -- attachment policy ----------------------------------------------------------

def test_attachment_covers_qkv_and_ff_everywhere():
    cfg = tiny_config(n_enc_layers=3, n_dec_layers=2)
    targets = set(attachment_targets(cfg))
    assert len(targets) == 3 * 5 + 2 * 8
    for i in range(3):
        for part in ("attn.q", "attn.k", "attn.v", "ff.w1", "ff.w2"):
            assert f"enc.{i}.{part}" in targets
        assert f"enc.{i}.attn.o" not in targets
    for i in range(2):
        for part in ("self.q", "self.k", "self.v",
                     "cross.q", "cross.k", "cross.v", "ff.w1", "ff.w2"):
            assert f"dec.{i}.{part}" in targets
        assert f"dec.{i}.self.o" not in targets
        assert f"dec.{i}.cross.o" not in targets
    assert not any("embed" in t or "out.proj" in t or "ln" in t for t in targets)


def test_validate_bundle_coverage():
    cfg = tiny_config()
    bundle = init_bundle(cfg, "aa", 2, rng(0))
    validate_bundle(bundle, cfg)
    broken = bundle.copy()
    del broken.adapters[attachment_targets(cfg)[0]]
    with pytest.raises(ValueError):
        validate_bundle(broken, cfg)
    others = bundle.copy()
    others.adapters["bogus"] = LoRAAdapter("bogus", np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        validate_bundle(others, cfg)
    wrong_rank = bundle.copy()
    name = attachment_targets(cfg)[0]
    d1, d2 = target_shapes(cfg)[name]
    wrong_rank.adapters[name] = LoRAAdapter(
        name, np.zeros((3, d2)), np.zeros((d1, 3)))
    with pytest.raises(ValueError):
        validate_bundle(wrong_rank, cfg)


# -- serialization ---------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path):
    bundle = random_bundle(20)
    path = tmp_path / "b.mole"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert bundles_equal(bundle, loaded)
    # a second save of the loaded bundle writes identical bytes
    path2 = tmp_path / "b2.mole"
    save_bundle(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_roundtrip_backbone_matrices(tmp_path):
    r = rng(21)
    bundle = ExpertBundle(
        language_id="", rank=0, kind=KIND_BACKBONE,
        matrices={"embed.feat": r.standard_normal((3, 8)),
                  "enc.0.ln1.g": np.ones((1, 8))},
        metadata={"seed": 1})
    path = tmp_path / "bb.mole"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.kind == KIND_BACKBONE
    assert loaded.adapters == {}
    assert bundles_equal(bundle, loaded)


def test_corrupt_payload_byte_is_checksum_error(tmp_path):
    bundle = random_bundle(22)
    path = tmp_path / "b.mole"
    save_bundle(bundle, path)
    raw = bytearray(path.read_bytes())
    # locate the first float of the first entry and flip one byte of it
    lang_len = len(bundle.language_id.encode())
    name_len = len(sorted(bundle.adapters)[0].encode())
    offset = 4 + 2 + 1 + 2 + lang_len + 2 + 4 + 2 + name_len + 4 + 4 + 2 + 3
    raw[offset] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_bundle(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "b.mole"
    save_bundle(random_bundle(23), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"WAVE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_bundle(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "b.mole"
    save_bundle(random_bundle(24), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_bundle(path)


def test_truncation(tmp_path):
    path = tmp_path / "b.mole"
    save_bundle(random_bundle(25), path)
    raw = path.read_bytes()
    for cut in (2, len(raw) // 2, len(raw) - 2):
        path.write_bytes(raw[:cut])
        with pytest.raises((TruncatedError, BadMagicError)):
            load_bundle(path)
    path.write_bytes(raw + b"xx")
    with pytest.raises(TruncatedError):
        load_bundle(path)


def test_error_hierarchy():
    for err in (BadMagicError, VersionError, TruncatedError, ChecksumError):
        assert issubclass(err, BundleError)
    assert len({BadMagicError, VersionError, TruncatedError, ChecksumError}) == 4


def test_metadata_roundtrip_nested(tmp_path):
    bundle = random_bundle(26)
    bundle.metadata = {"steps": 3000, "nested": {"list": [1, 2, 3], "s": "x"},
                       "f": 0.125}
    path = tmp_path / "b.mole"
    save_bundle(bundle, path)
    assert load_bundle(path).metadata == bundle.metadata


@settings(max_examples=25, deadline=None)
@given(
    rank=st.integers(1, 3),
    n_targets=st.integers(1, 4),
    seed=st.integers(0, 10_000),
    lang=st.text(st.characters(min_codepoint=97, max_codepoint=122),
                 min_size=0, max_size=6),
)
def test_roundtrip_property(tmp_path_factory, rank, n_targets, seed, lang):
    r = np.random.default_rng(seed)
    adapters = {}
    for t in range(n_targets):
        d1, d2 = int(r.integers(rank, 6)), int(r.integers(rank, 6))
        name = f"t{t}.m"
        adapters[name] = LoRAAdapter(
            name, r.standard_normal((rank, d2)), r.standard_normal((d1, rank)))
    bundle = ExpertBundle(language_id=lang, rank=rank, adapters=adapters,
                          metadata={"seed": seed})
    path = tmp_path_factory.mktemp("rt") / "b.mole"
    save_bundle(bundle, path)
    assert bundles_equal(bundle, load_bundle(path))


# -- committed cross-platform fixture ---------------------------------------------

def fixture_bundle() -> ExpertBundle:
    """The exact bundle the committed fixture file encodes."""
    r = np.random.default_rng(424242)
    adapters = {}
    for name, (d1, d2) in [("enc.0.attn.q", (8, 8)), ("enc.0.ff.w1", (8, 16))]:
        adapters[name] = LoRAAdapter(
            name, r.standard_normal((4, d2)), r.standard_normal((d1, 4)))
    return ExpertBundle(language_id="l0", rank=4, adapters=adapters,
                        metadata={"steps": 123, "seed": 424242,
                                  "corpus": "fixture"})


def test_fixture_file_loads_identically():
    # bytes were written once on a little-endian machine and committed;
    # loading must reproduce the seeded arrays exactly on any platform
    loaded = load_bundle(FIXTURE)
    assert bundles_equal(loaded, fixture_bundle())


def test_fixture_file_bytes_pinned():
    digest = hashlib.sha256(FIXTURE.read_bytes()).hexdigest()
    assert digest == FIXTURE_SHA256


FIXTURE_SHA256 = "a3c49293dcf3be451f0acb7d62e7ecd5f6a9294aa235033bc2bee54418b50361"
