import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbqnn.bitplane import PackedPlane, bitdot, bitdot_xnor, pack, unpack
from mbqnn.errors import CorruptionError, DimensionError, FormatError, InvalidSignError

signs = st.lists(st.sampled_from([-1, 1]), max_size=300)


def test_pack_all_plus_sets_low_bits():
    p = pack([1, 1, 1])
    assert p.length == 3
    assert p.words.tolist() == [0b111]


def test_pack_all_minus_clears_bits():
    p = pack([-1, -1, -1])
    assert p.length == 3
    assert p.words.tolist() == [0]


def test_pack_rejects_non_sign():
    with pytest.raises(InvalidSignError):
        pack([1, 0, -1])
    with pytest.raises(InvalidSignError):
        pack([2])


def test_unpack_small_and_empty():
    assert unpack(pack([1, -1])).tolist() == [1, -1]
    empty = pack([])
    assert empty.length == 0 and empty.words.size == 0
    assert unpack(empty).tolist() == []


@pytest.mark.parametrize("n", [1, 63, 64, 65, 127, 128, 129, 1000])
def test_round_trip_across_word_boundaries(n):
    s = np.random.default_rng(n).choice([-1, 1], size=n)
    p = pack(s)
    assert p.words.shape == ((n + 63) // 64,)
    assert np.array_equal(unpack(p), s)


def test_bit_layout_is_little_endian_per_word():
    s = -np.ones(130, dtype=int)
    s[0] = s[64] = s[129] = 1
    assert pack(s).words.tolist() == [1, 1, 2]


def test_nonzero_padding_rejected():
    with pytest.raises(CorruptionError):
        PackedPlane(np.array([0b1000], dtype=np.uint64), 3)


def test_immutable_words():
    p = pack([1, -1, 1])
    with pytest.raises(ValueError):
        p.words[0] = 0


def test_bitdot_self_and_antipodal(backend):
    s = np.random.default_rng(0).choice([-1, 1], size=64)
    a = pack(s)
    assert bitdot(a, a) == 64
    assert bitdot(a, a.complement()) == -64
    assert bitdot(a, pack(-s)) == -64


def test_bitdot_small_example(backend):
    # +1*+1 + -1*+1 + +1*-1
    assert bitdot(pack([1, -1, 1]), pack([1, 1, -1])) == -1


def test_bitdot_length_mismatch():
    with pytest.raises(DimensionError):
        bitdot(pack([1, 1]), pack([1, 1, 1]))


def test_bitdot_masks_tail_even_if_words_forged(backend):
    # construct via from_bytes-like bypass: dot must not depend on padding
    a, b = pack([1] * 70), pack([-1] * 70)
    assert bitdot(a, b) == -70


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_bitdot_matches_naive_sum(data):
    n = data.draw(st.integers(0, 4096))
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    s, t = rng.choice([-1, 1], size=n), rng.choice([-1, 1], size=n)
    a, b = pack(s), pack(t)
    naive = int(np.sum(s * t))
    d = bitdot(a, b)
    assert d == naive
    assert d == bitdot(b, a) == bitdot_xnor(a, b)
    assert abs(d) <= n and (d - n) % 2 == 0
    assert bitdot(a, a) == n


@given(signs)
def test_round_trip_property(s):
    assert unpack(pack(s)).tolist() == s


@given(signs)
def test_binary_layout_round_trip(s):
    p = pack(s)
    raw = p.to_bytes()
    assert len(raw) == 8 + 8 * ((len(s) + 63) // 64)
    assert PackedPlane.from_bytes(raw) == p


def test_binary_layout_rejects_truncation_and_dirty_padding():
    raw = pack([1, -1, 1]).to_bytes()
    with pytest.raises(FormatError):
        PackedPlane.from_bytes(raw[:-1])
    dirty = raw[:8] + (0xFF).to_bytes(8, "little")
    with pytest.raises(CorruptionError):
        PackedPlane.from_bytes(dirty)
