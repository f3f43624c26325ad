"""Adapter algebra: rank schedules, the rotary codec, and both adapter branches.

The load-bearing oracle here is ``materialize_delta_w``: the chunked MoRA
forward must agree with multiplication by the explicitly assembled
block-diagonal matrix for every (rank, in-dim, out-dim) combination, including
the awkward ones where the rank does not divide the input width or the output
is wider than the input.
"""

import math

import numpy as np
import pytest

from molora.adapters import (
    LoraAdapter,
    MoLoraLayer,
    MoraAdapter,
    RankVector,
    RotaryCodec,
    ScheduleError,
    lora_forward,
    materialize_delta_w,
    molora_forward,
    mora_compress,
    mora_forward,
    param_count,
    rope_angles,
    rotate_chunk,
    stepped_schedule,
)
from molora.autodiff import GradTape, grad_check, rng_stream

COS1, SIN1 = math.cos(1.0), math.sin(1.0)


def _base_forward(layer, x):
    """The layer's frozen-weight output through the same code path, adapters off."""
    tape = GradTape()
    return layer.apply(tape, tape.constant(x), use_adapters=False).value[0]


class TestRankVector:
    def test_rejects_increase(self):
        with pytest.raises(ScheduleError):
            RankVector((4, 6, 2))

    def test_rejects_zero(self):
        with pytest.raises(ScheduleError):
            RankVector((2, 0))

    def test_accepts_plateaus(self):
        rv = RankVector((8, 8, 4, 4, 1))
        assert list(rv) == [8, 8, 4, 4, 1]


class TestSteppedSchedule:
    def test_drop_of_eight_every_two_blocks(self):
        # 64 minus 8 per two blocks over 12 blocks walks 64,56,48,40,32,24.
        rv = stepped_schedule(64, 24, 8, 2, 12)
        assert list(rv) == [64, 64, 56, 56, 48, 48, 40, 40, 32, 32, 24, 24]

    def test_drop_of_four_every_two_blocks(self):
        rv = stepped_schedule(32, 12, 4, 2, 12)
        assert list(rv) == [32, 32, 28, 28, 24, 24, 20, 20, 16, 16, 12, 12]

    def test_constant_schedule(self):
        assert list(stepped_schedule(8, 8, 0, 1, 12)) == [8] * 12

    def test_infeasible_schedules(self):
        with pytest.raises(ScheduleError):
            stepped_schedule(64, 24, 8, 2, 4)  # too short to reach 24
        with pytest.raises(ScheduleError):
            stepped_schedule(64, 24, 7, 2, 12)  # 40 not divisible by 7
        with pytest.raises(ScheduleError):
            stepped_schedule(64, 24, 0, 2, 12)  # step 0 cannot descend
        with pytest.raises(ScheduleError):
            stepped_schedule(24, 64, 8, 2, 12)  # ascending

    def test_endpoints_and_monotonicity_across_random_schedules(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            end = int(rng.integers(1, 16))
            drops = int(rng.integers(0, 6))
            step = int(rng.integers(1, 9)) if drops else 0
            start = end + step * drops
            period = int(rng.integers(1, 4))
            length = period * drops + int(rng.integers(1, period + 1)) if drops else int(rng.integers(1, 13))
            rv = stepped_schedule(start, end, step, period, length)
            assert rv[0] == start and rv[len(rv) - 1] == end
            assert all(a >= b for a, b in zip(rv, list(rv)[1:]))


class TestRopeAngles:
    def test_first_angle_is_one(self):
        assert rope_angles(4)[0] == 1.0
        assert rope_angles(2).tolist() == [1.0]

    def test_second_angle_rank_four(self):
        # 10000^(-2/4) = 10^(-2) = 0.01.
        assert rope_angles(4)[1] == pytest.approx(0.01, abs=1e-18)

    def test_odd_rank_rejected(self):
        with pytest.raises(ValueError):
            rope_angles(3)


class TestRotateChunk:
    def test_chunk_zero_is_identity(self):
        codec = RotaryCodec(r_hat=4, k=8, d=8)
        chunk = np.array([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(rotate_chunk(chunk, 0, codec), chunk)

    def test_one_radian_rotation(self):
        codec = RotaryCodec(r_hat=2, k=4, d=4)
        out = rotate_chunk(np.array([1.0, 0.0]), 1, codec)
        np.testing.assert_allclose(out, [COS1, SIN1], atol=1e-15)

    def test_norm_preserved(self):
        rng = np.random.default_rng(21)
        codec = RotaryCodec(r_hat=8, k=24, d=24)
        for j in range(codec.n_in):
            chunk = rng.normal(size=8)
            rotated = rotate_chunk(chunk, j, codec)
            assert abs(np.linalg.norm(rotated) - np.linalg.norm(chunk)) < 1e-12


class TestMoraCompress:
    def test_two_chunks(self):
        codec = RotaryCodec(r_hat=2, k=4, d=4)
        chunks = mora_compress(np.array([1.0, 2.0, 3.0, 4.0]), codec)
        assert len(chunks) == 2
        np.testing.assert_array_equal(chunks[0], [1.0, 2.0])
        np.testing.assert_allclose(chunks[1], [3 * COS1 - 4 * SIN1, 3 * SIN1 + 4 * COS1], atol=1e-15)

    def test_zero_pad_on_ragged_input(self):
        codec = RotaryCodec(r_hat=2, k=3, d=3)
        chunks = mora_compress(np.array([5.0, 6.0, 7.0]), codec)
        np.testing.assert_allclose(chunks[1], rotate_chunk(np.array([7.0, 0.0]), 1, codec), atol=1e-15)

    def test_zero_input_gives_zero_chunks(self):
        codec = RotaryCodec(r_hat=4, k=8, d=8)
        for chunk in mora_compress(np.zeros(8), codec):
            np.testing.assert_array_equal(chunk, np.zeros(4))


class TestMoraForward:
    def test_zero_matrix_gives_zero_vector(self):
        adapter = MoraAdapter.create(d=12, k=8, r_hat=4)
        np.testing.assert_array_equal(mora_forward(adapter, np.ones(8)), np.zeros(12))

    def test_identity_matrix_square_case_is_block_rotation(self):
        # With d = k, r_hat | k, and M = I the output is just the rotated chunks.
        adapter = MoraAdapter.create(d=4, k=4, r_hat=2)
        adapter.M.value[:] = np.eye(2)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        expected = np.concatenate(mora_compress(x, adapter.codec))
        np.testing.assert_allclose(mora_forward(adapter, x), expected, atol=1e-15)

    @pytest.mark.parametrize("r_hat", [2, 4])
    @pytest.mark.parametrize("k", [4, 8])
    @pytest.mark.parametrize("d", [4, 8, 12])
    def test_matches_materialized_update(self, r_hat, k, d):
        rng = np.random.default_rng(r_hat * 100 + k * 10 + d)
        adapter = MoraAdapter.create(d=d, k=k, r_hat=r_hat)
        adapter.M.value[:] = rng.normal(size=(r_hat, r_hat))
        delta = materialize_delta_w(adapter)
        for _ in range(20):
            x = rng.normal(size=k)
            np.testing.assert_allclose(mora_forward(adapter, x), delta @ x, atol=1e-9)


class TestMaterializeDeltaW:
    def test_zero_matrix(self):
        adapter = MoraAdapter.create(d=6, k=4, r_hat=2)
        np.testing.assert_array_equal(materialize_delta_w(adapter), np.zeros((6, 4)))

    def test_identity_blocks(self):
        # d = k = 4, r_hat = 2, M = I: the update is blockdiag(I2, R(1 rad)).
        adapter = MoraAdapter.create(d=4, k=4, r_hat=2)
        adapter.M.value[:] = np.eye(2)
        expected = np.zeros((4, 4))
        expected[:2, :2] = np.eye(2)
        expected[2:, 2:] = [[COS1, -SIN1], [SIN1, COS1]]
        np.testing.assert_allclose(materialize_delta_w(adapter), expected, atol=1e-15)

    def test_equivalence_sweep_with_random_matrices(self):
        rng = np.random.default_rng(77)
        adapter = MoraAdapter.create(d=10, k=6, r_hat=4)
        adapter.M.value[:] = rng.normal(size=(4, 4))
        delta = materialize_delta_w(adapter)
        xs = rng.normal(size=(100, 6))
        for x in xs:
            assert np.max(np.abs(delta @ x - mora_forward(adapter, x))) < 1e-9


class TestLora:
    def test_rank_must_be_below_both_dims(self):
        rng = rng_stream(0, "lora")
        with pytest.raises(ValueError):
            LoraAdapter.create(d=4, k=8, r=4, rng=rng)

    def test_zero_init_returns_frozen_output(self):
        rng = rng_stream(0, "lora")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=2, rng=rng)
        x = rng.normal(size=4)
        # Bitwise against the layer's own base path; close to W @ x numerically.
        np.testing.assert_array_equal(lora_forward(layer, x), _base_forward(layer, x))
        np.testing.assert_allclose(lora_forward(layer, x), layer.frozen.value @ x, atol=1e-12)

    def test_hand_rank_one_case(self):
        # W = 0, B = [1; 0], A = [1, 0]: BAx picks out x_0 in the first slot.
        rng = rng_stream(0, "lora")
        layer = MoLoraLayer.create(d=2, k=2, r_l=1, r_m=2, rng=rng)
        layer.frozen.value[:] = 0.0
        layer.lora.B.value[:] = [[1.0], [0.0]]
        layer.lora.A.value[:] = [[1.0, 0.0]]
        np.testing.assert_array_equal(lora_forward(layer, np.array([2.0, 5.0])), [2.0, 0.0])

    def test_scale_linearity(self):
        rng = rng_stream(3, "lora")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=2, rng=rng)
        layer.lora.B.value[:] = rng.normal(size=(6, 2))
        x = rng.normal(size=4)
        base = layer.frozen.value @ x
        one = lora_forward(layer, x) - base
        layer.lora.scale = 2.0
        two = lora_forward(layer, x) - base
        np.testing.assert_allclose(two, 2.0 * one, atol=1e-12)


class TestMoLoraLayer:
    def test_fresh_layer_is_bitwise_neutral(self):
        rng = rng_stream(5, "layer")
        layer = MoLoraLayer.create(d=12, k=8, r_l=3, r_m=4, rng=rng)
        for _ in range(10):
            x = rng.normal(size=8)
            out = molora_forward(layer, x)
            np.testing.assert_array_equal(out, _base_forward(layer, x))
            np.testing.assert_allclose(out, layer.frozen.value @ x, atol=1e-12)

    def test_reduces_to_lora_when_mora_is_zero(self):
        rng = rng_stream(6, "layer")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=2, rng=rng)
        layer.lora.B.value[:] = rng.normal(size=(6, 2))
        x = rng.normal(size=4)
        np.testing.assert_array_equal(molora_forward(layer, x), lora_forward(layer, x))

    def test_full_materialization_oracle(self):
        rng = rng_stream(7, "layer")
        layer = MoLoraLayer.create(d=9, k=6, r_l=2, r_m=4, rng=rng)
        layer.lora.B.value[:] = rng.normal(size=(9, 2))
        layer.mora.M.value[:] = rng.normal(size=(4, 4))
        layer.lora.scale = 1.5
        combined = (
            layer.frozen.value
            + layer.lora.scale * layer.lora.B.value @ layer.lora.A.value
            + materialize_delta_w(layer.mora)
        )
        for _ in range(20):
            x = rng.normal(size=6)
            np.testing.assert_allclose(molora_forward(layer, x), combined @ x, atol=1e-9)

    def test_batched_apply_matches_vector_calls(self):
        rng = rng_stream(8, "layer")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=2, rng=rng)
        layer.lora.B.value[:] = rng.normal(size=(6, 2))
        layer.mora.M.value[:] = rng.normal(size=(2, 2))
        xs = rng.normal(size=(5, 4))
        tape = GradTape()
        out = layer.apply(tape, tape.constant(xs)).value
        for i in range(5):
            np.testing.assert_allclose(out[i], molora_forward(layer, xs[i]), atol=1e-12)

    def test_gradients_against_finite_differences(self):
        rng = rng_stream(9, "layer")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=4, rng=rng)
        layer.lora.B.value[:] = rng.normal(size=(6, 2))
        layer.mora.M.value[:] = rng.normal(size=(4, 4))
        xs = rng.normal(size=(3, 4))
        reduce_u = rng.normal(size=(1, 3))
        reduce_v = rng.normal(size=(6, 1))

        def f(tape):
            out = layer.apply(tape, tape.constant(xs))
            return tape.matmul(tape.matmul(tape.constant(reduce_u), tape.gelu(out)), tape.constant(reduce_v))

        params = [layer.lora.A, layer.lora.B, layer.mora.M]
        assert grad_check(f, params) < 1e-4

    def test_frozen_weight_gets_zero_gradient(self):
        rng = rng_stream(10, "layer")
        layer = MoLoraLayer.create(d=6, k=4, r_l=2, r_m=2, rng=rng)
        tape = GradTape()
        out = layer.apply(tape, tape.constant(rng.normal(size=(3, 4))))
        loss = tape.cross_entropy(out, [0, 1, 2])
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(layer.frozen), np.zeros((6, 4)))


class TestEquivalenceProperty:
    def test_forward_equals_materialized_for_awkward_shapes(self):
        """f(M g(x)) == DeltaW x across non-divisor ranks and widened outputs."""
        rng = np.random.default_rng(123)
        for r_hat in (2, 4, 8):
            for k in (4, 8, 16):
                for d in (k, 2 * k, 3 * k, k + 2):
                    adapter = MoraAdapter.create(d=d, k=k, r_hat=r_hat)
                    for _ in range(3):
                        adapter.M.value[:] = rng.normal(size=(r_hat, r_hat))
                        delta = materialize_delta_w(adapter)
                        xs = rng.normal(size=(10, k))
                        worst = max(
                            np.max(np.abs(mora_forward(adapter, x) - delta @ x)) for x in xs
                        )
                        assert worst < 1e-9, f"r_hat={r_hat} k={k} d={d}: {worst}"


class TestParamCount:
    def test_lora_part_at_paper_dims(self):
        budget = param_count(2304, 768, RankVector((32,)), RankVector((64,)))
        assert budget.lora[0] == 32 * 3072 == 98304

    def test_mora_part(self):
        budget = param_count(2304, 768, RankVector((32,)), RankVector((64,)))
        assert budget.mora[0] == 64 * 64 == 4096

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            param_count(8, 4, RankVector((2, 2)), RankVector((2,)))

    def test_matches_enumerated_trainable_entries(self):
        rng = rng_stream(31, "count")
        r_l = stepped_schedule(6, 2, 2, 2, 5)
        r_m = stepped_schedule(8, 4, 2, 2, 5)
        d, k = 16, 12
        budget = param_count(d, k, r_l, r_m)
        layers = [
            MoLoraLayer.create(d=d, k=k, r_l=r_l[i], r_m=r_m[i], rng=rng, layer_index=i)
            for i in range(5)
        ]
        enumerated = sum(
            p.value.size for layer in layers for p in layer.params() if p.adapter
        )
        assert budget.total == enumerated
