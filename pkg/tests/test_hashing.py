import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csislab.hashing import (DistanceMetric, HashError, HashFunctionSpec, ImageTooSmall, LengthMismatch,
                             PerceptualHash, ProjectionHasher, bits_to_hex, distance, hamming, hamming_matrix,
                             hash_image, hash_many, hex_to_bits, min_hamming, pdq_block_linear, pdq_float_block,
                             pdq_hash, _luma255)
from csislab.imageops import load_image, quantize8, resize
from csislab.scenes import CorpusSpec, corpus_image

DATA = Path(__file__).parent / "data" / "pdq"
VECTORS = json.loads((DATA / "reference_hashes.json").read_text())


def _hex_distance(a: str, b: str) -> int:
    return int(np.count_nonzero(hex_to_bits(a) != hex_to_bits(b)))


@pytest.mark.parametrize("vec", VECTORS, ids=[v["file"] for v in VECTORS])
def test_pdq_matches_reference_binary(vec):
    h = pdq_hash(load_image(DATA / vec["file"]))
    if vec["file"].endswith(".png"):
        assert h.hex() == vec["hash"]
        assert h.quality == vec["quality"]
    else:
        # decoders differ slightly between libjpeg builds
        assert _hex_distance(h.hex(), vec["hash"]) <= 2


def test_hex_round_trip_and_word_order():
    bits = np.zeros(256, np.uint8)
    bits[0] = 1
    assert bits_to_hex(bits) == "8" + "0" * 63
    h = PerceptualHash(bits)
    assert PerceptualHash.from_hex(h.hex()) == h
    assert PerceptualHash.from_bytes(h.to_bytes(), 256) == h
    with pytest.raises(HashError):
        hex_to_bits("zz")


def test_distance_examples():
    a = PerceptualHash.from_hex("0" * 64)
    b = PerceptualHash.from_hex("f" + "0" * 63)
    assert hamming(a, b) == 4
    assert distance(a, b) == 4 / 256
    assert distance(a, b, DistanceMetric.HAMMING) == 4
    assert distance(a, PerceptualHash.from_hex("f" * 64)) == 1.0
    with pytest.raises(LengthMismatch):
        hamming(a, PerceptualHash.from_hex("0" * 16))


bitvec = st.lists(st.integers(0, 1), min_size=64, max_size=64).map(lambda v: PerceptualHash(v))


@settings(max_examples=200, deadline=None)
@given(bitvec, bitvec, bitvec)
def test_metric_axioms(a, b, c):
    assert hamming(a, a) == 0
    assert hamming(a, b) == hamming(b, a)
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    assert 0 <= distance(a, b) <= 1


def test_hamming_matrix_matches_loop():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 2, (37, 256), dtype=np.uint8)
    b = rng.integers(0, 2, (53, 256), dtype=np.uint8)
    loop = np.array([[np.count_nonzero(x != y) for y in b] for x in a])
    assert np.array_equal(hamming_matrix(a, b), loop)
    best, arg = min_hamming(a, b)
    assert np.array_equal(best, loop.min(axis=1))
    assert np.array_equal(arg, loop.argmin(axis=1))


def test_pdq_too_small_and_flat():
    with pytest.raises(ImageTooSmall):
        pdq_hash(np.zeros((63, 100)))
    flat = pdq_hash(np.full((512, 512), 0.5))
    assert flat.quality == 0 and flat.degenerate


def test_pdq_linear_operator_matches_float_path():
    img = corpus_image(CorpusSpec("benign", 1, 4), 0)
    block, _ = pdq_float_block(img)
    lin = pdq_block_linear(_luma255(img).astype(np.float64))
    assert np.allclose(block, lin, atol=1e-2 * np.abs(block).max())


def test_pdq_upscale_is_close():
    # measured over 20 images: worst case 0.047 at 2x
    imgs = [corpus_image(CorpusSpec("illicit-standin", 20, 11), i) for i in range(20)]
    for img in imgs:
        d = distance(pdq_hash(img), pdq_hash(quantize8(resize(img, 2.0))))
        assert d <= 0.1


def test_hash_many_matches_single():
    imgs = [corpus_image(CorpusSpec("benign", 5, 2), i) for i in range(5)] + [np.random.default_rng(0).random((70, 90))]
    for spec in (HashFunctionSpec.pdq(), HashFunctionSpec.surrogate(128, 1)):
        many = hash_many(imgs, spec)
        assert np.array_equal(many, np.stack([hash_image(i, spec).bits for i in imgs]))


class TestSurrogate:
    def test_deterministic_per_seed(self):
        img = corpus_image(CorpusSpec("benign", 1, 0), 0)
        s = HashFunctionSpec.surrogate(64, 5)
        assert hash_image(img, s) == hash_image(img.copy(), s)
        assert not np.array_equal(ProjectionHasher(s).weights, ProjectionHasher(HashFunctionSpec.surrogate(64, 6)).weights)
        assert not ProjectionHasher(s).weights.flags.writeable

    def test_negation_flips_scores(self):
        img = corpus_image(CorpusSpec("benign", 1, 0), 0)
        hasher = ProjectionHasher(HashFunctionSpec.surrogate(64))
        assert np.allclose(hasher.scores(1.0 - img), -hasher.scores(img), atol=1e-5)

    def test_length_range(self):
        with pytest.raises(HashError):
            HashFunctionSpec.surrogate(32)
        with pytest.raises(HashError):
            HashFunctionSpec(kind="pdq", output_bits=64)
        assert len(hash_image(np.random.default_rng(0).random((64, 64)), HashFunctionSpec.surrogate(512))) == 512

    def test_small_noise_is_stable(self):
        # 95th percentile measured at 0.031 for 1/255 noise
        rng = np.random.default_rng(1)
        spec = HashFunctionSpec.surrogate(64)
        imgs = [corpus_image(CorpusSpec("benign", 200, 9), i) for i in range(200)]
        noisy = [quantize8(np.clip(i + rng.choice([-1, 0, 1], i.shape) / 255, 0, 1)) for i in imgs]
        d = (hash_many(imgs, spec) != hash_many(noisy, spec)).mean(axis=1)
        assert np.percentile(d, 95) <= 0.05

    def test_score_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        hasher = ProjectionHasher(HashFunctionSpec.surrogate(64))
        img = rng.random((48, 40))
        w = rng.standard_normal(64)
        grad = hasher.score_gradient(img.shape, w)
        e = np.zeros_like(img)
        e[10, 7] = 1e-4
        fd = (hasher.scores(img + e) @ w - hasher.scores(img - e) @ w) / 2e-4
        assert fd == pytest.approx(grad[10, 7], rel=1e-3)
