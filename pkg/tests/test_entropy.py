import numpy as np
import pytest

from conftest import make_layout
from msvq import entropy
from msvq.codebook import Codebook, MsvqModel
from msvq.errors import CorruptionError, DataError


class TestSmoothedPmf:
    def test_count_arithmetic(self):
        pmf = entropy.smoothed_pmf(np.array([3, 1]))
        np.testing.assert_allclose(pmf, [4.0 / 6.0, 2.0 / 6.0], rtol=1e-15)

    def test_unused_codeword_stays_positive(self):
        pmf = entropy.smoothed_pmf(np.array([100, 0, 0, 0]))
        assert np.all(pmf > 0)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)


class TestEstimatePmf:
    def _line_model(self):
        lay = make_layout(1, 1, [1], groups=1)
        cb = Codebook(vectors=np.array([[0.0], [1.0]], dtype=np.float32))
        return MsvqModel(layout=lay, codebooks=((cb,),),
                         fallback_means=np.zeros((1, 1), dtype=np.float32))

    def test_counts_from_encoding_pass(self):
        model = self._line_model()
        data = np.array([[0.1], [0.1], [-0.2], [0.9]])
        pmf = entropy.estimate_pmf(model, data, sub_index=0, stage=0)
        np.testing.assert_allclose(pmf, [4.0 / 6.0, 2.0 / 6.0], rtol=1e-12)

    def test_pools_across_group(self):
        lay = make_layout(2, 1, [1], groups=1)
        cb = Codebook(vectors=np.array([[0.0], [1.0]], dtype=np.float32))
        model = MsvqModel(layout=lay, codebooks=((cb,),),
                          fallback_means=np.zeros((2, 1), dtype=np.float32))
        data = np.array([[0.1, 0.9], [0.1, 0.9]])
        pmf = entropy.estimate_pmf(model, data, sub_index=0, stage=0)
        np.testing.assert_allclose(pmf, [0.5, 0.5], rtol=1e-12)

    def test_uniform_assignment_within_multinomial_bounds(self):
        rng = np.random.default_rng(8)
        lay = make_layout(1, 1, [3], groups=1)
        centers = np.linspace(-3.5, 3.5, 8)
        cb = Codebook(vectors=centers[:, None].astype(np.float32))
        model = MsvqModel(layout=lay, codebooks=((cb,),),
                          fallback_means=np.zeros((1, 1), dtype=np.float32))
        n = 8000
        data = (centers[rng.integers(8, size=n)] + rng.uniform(-0.05, 0.05, n))[:, None]
        pmf = entropy.estimate_pmf(model, data, 0, 0)
        p = 1.0 / 8.0
        sigma = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(pmf - p) <= 3 * sigma + 2.0 / n)


class TestBuildCode:
    def test_dyadic_pmf(self):
        code = entropy.build_code(np.array([0.5, 0.25, 0.125, 0.125]))
        assert code.lengths.tolist() == [1, 2, 3, 3]
        avg, ent = entropy.avg_bits(np.array([0.5, 0.25, 0.125, 0.125]), code)
        assert avg == pytest.approx(1.75)
        assert ent == pytest.approx(1.75)

    @pytest.mark.parametrize("b", [1, 2, 4, 6])
    def test_uniform_pmf_costs_fixed_length(self, b):
        k = 1 << b
        pmf = np.full(k, 1.0 / k)
        code = entropy.build_code(pmf)
        assert np.all(code.lengths == b)
        avg, ent = entropy.avg_bits(pmf, code)
        assert avg == pytest.approx(b)
        assert ent == pytest.approx(b)

    def test_two_symbols_cost_one_bit(self):
        code = entropy.build_code(np.array([0.99, 0.01]))
        assert code.lengths.tolist() == [1, 1]
        avg, _ = entropy.avg_bits(np.array([0.99, 0.01]), code)
        assert avg == pytest.approx(1.0)

    def test_single_symbol_emits_one_bit(self):
        code = entropy.build_code(np.array([1.0]))
        assert code.lengths.tolist() == [1]

    @pytest.mark.parametrize("seed", range(20))
    def test_huffman_bounds_and_kraft_equality(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 65))
        pmf = rng.dirichlet(np.full(k, 0.5)) + 1e-9
        pmf /= pmf.sum()
        code = entropy.build_code(pmf)
        assert entropy.kraft_sum(code.lengths) == 1.0
        avg, ent = entropy.avg_bits(pmf, code)
        assert ent <= avg + 1e-12
        assert avg < ent + 1.0
        assert avg <= np.ceil(np.log2(k)) + 1e-12  # never beaten by fixed length

    def test_long_tail_respects_length_cap(self):
        # geometric tail would exceed the cap without rebalancing
        k = 64
        pmf = 0.5 ** np.arange(1, k + 1)
        pmf[-1] *= 2  # make it sum to 1 exactly
        code = entropy.build_code(pmf)
        assert code.max_length <= entropy.MAX_CODE_LENGTH
        assert entropy.kraft_sum(code.lengths) == 1.0

    def test_prefix_free(self):
        rng = np.random.default_rng(5)
        pmf = rng.dirichlet(np.ones(12))
        code = entropy.build_code(pmf)
        words = [(int(code.codes[s]), int(code.lengths[s])) for s in range(12)]
        for a, (ca, la) in enumerate(words):
            for b, (cb, lb) in enumerate(words):
                if a != b and la <= lb:
                    assert (cb >> (lb - la)) != ca

    def test_rejects_bad_pmf(self):
        with pytest.raises(DataError):
            entropy.build_code(np.array([0.5, 0.0, 0.5]))
        with pytest.raises(DataError):
            entropy.build_code(np.array([0.9, 0.3]))


class TestBitIO:
    def test_writer_reader_round_trip(self):
        rng = np.random.default_rng(2)
        writer = entropy.BitWriter()
        fields = [(int(rng.integers(0, 1 << n)), n) for n in rng.integers(1, 17, 50)]
        for value, nbits in fields:
            writer.write(value, int(nbits))
        buf = writer.getvalue()
        reader = entropy.BitReader(buf)
        for value, nbits in fields:
            assert reader.read(int(nbits)) == value

    def test_reader_truncation_reports_offset(self):
        reader = entropy.BitReader(b"\xff")
        reader.read(6)
        with pytest.raises(CorruptionError, match="bit offset 6"):
            reader.read(4)


class TestIndexStreams:
    def _codes(self, lengths_rows):
        return [[entropy.canonical_code(np.asarray(lengths))
                 for lengths in row] for row in lengths_rows]

    def test_empty_plan_is_empty_payload(self):
        assert entropy.encode_indices([[], []], self._codes([[], []])) == b""

    def test_single_symbol_pads_to_one_byte(self):
        codes = self._codes([[[3, 3, 3, 3, 2, 2]]])
        payload = entropy.encode_indices([[0]], codes)
        assert len(payload) == 1
        assert entropy.decode_indices(payload, [1], codes) == [[0]]

    @pytest.mark.parametrize("seed", range(10))
    def test_random_streams_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        codes, streams, plan = [], [], []
        for _ in range(n):
            t_i = int(rng.integers(0, 4))
            row_codes, row_syms = [], []
            for _ in range(t_i):
                k = int(rng.integers(2, 33))
                pmf = rng.dirichlet(np.ones(k))
                row_codes.append(entropy.build_code(pmf))
                row_syms.append(int(rng.integers(k)))
            codes.append(row_codes)
            streams.append(row_syms)
            plan.append(t_i)
        payload = entropy.encode_indices(streams, codes)
        assert entropy.decode_indices(payload, plan, codes) == streams

    def test_invalid_prefix_raises_with_offset(self):
        incomplete = entropy.canonical_code(np.array([2, 2, 2]))  # Kraft sum 3/4
        with pytest.raises(CorruptionError, match="bit offset"):
            entropy.decode_indices(b"\xff", [1], [[incomplete]])
