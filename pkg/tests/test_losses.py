import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framealign.losses import (BatchAssembly, FrameSpan, frame_posterior, frame_similarity,
                               frame_wise_loss, global_clap_loss, pool_frames,
                               pool_frames_backward, region_to_frames)

from conftest import central_difference, relative_error

mpmath.mp.dps = 40


def unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def scalar_frame_loss(clips, regions, delta, tau):
    """Term-by-term reference in 40-digit arithmetic.

    ``regions[i]`` holds ``(onset, offset, text_vector)`` for clip ``i``.
    """
    tau = mpmath.mpf(tau)
    total = mpmath.mpf(0)
    count = 0
    for i, regs in enumerate(regions):
        negatives = [t for k, other in enumerate(regions) if k != i for _, _, t in other]
        T = clips[i].shape[0]
        for onset, offset, positive in regs:
            t_on = int(mpmath.floor(mpmath.mpf(onset) / mpmath.mpf(delta)))
            t_off = int(mpmath.ceil(mpmath.mpf(offset) / mpmath.mpf(delta)))
            t_on, t_off = min(max(t_on, 0), T), min(max(t_off, 0), T)
            term = mpmath.mpf(0)
            for t in range(t_on, t_off):
                frame = [mpmath.mpf(float(v)) for v in clips[i][t]]

                def logit(vec):
                    return mpmath.fsum(a * mpmath.mpf(float(b)) for a, b in zip(frame, vec)) / tau

                pos = logit(positive)
                denom = mpmath.fsum([mpmath.exp(pos)] + [mpmath.exp(logit(n)) for n in negatives])
                term += pos - mpmath.log(denom)
            total -= term / (t_off - t_on)
            count += 1
    return total / count


def random_batch(rng, n=3, T=10, D=8, per_clip=2, delta=0.02):
    clips = [unit_rows(rng, (T, D)) for _ in range(n)]
    regions = []
    for _ in range(n):
        regs = []
        for _ in range(per_clip):
            onset = float(rng.uniform(0, (T - 1) * delta))
            offset = float(rng.uniform(onset + delta, T * delta + 0.01))
            regs.append((onset, offset, unit_rows(rng, D)))
        regions.append(regs)
    return clips, regions


def assemble(clips, regions, delta, tau):
    spans = [[(region_to_frames(on, off, delta, c.shape[0]), t) for on, off, t in regs]
             for c, regs in zip(clips, regions)]
    return BatchAssembly(clips, spans, tau)


class TestRegionToFrames:
    def test_second_caption_row(self):
        assert region_to_frames(2.624, 20.848, 0.02, 1043) == FrameSpan(131, 1043)

    def test_exact_boundary(self):
        assert region_to_frames(0.0, 10 * 0.02, 0.02, 100) == FrameSpan(0, 10)

    def test_sub_frame(self):
        assert region_to_frames(0.001, 0.002, 0.02, 100) == FrameSpan(0, 1)

    def test_clamped_to_clip(self):
        assert region_to_frames(29.99, 30.02, 0.02, 1500) == FrameSpan(1499, 1500)

    def test_past_end_falls_back_to_last_frame(self):
        assert region_to_frames(30.5, 31.0, 0.02, 1500) == FrameSpan(1499, 1500)

    @pytest.mark.parametrize("on,off", [(1.0, 1.0), (2.0, 1.0), (-0.1, 1.0)])
    def test_rejected(self, on, off):
        with pytest.raises(ValueError):
            region_to_frames(on, off, 0.02, 100)

    @given(st.floats(0, 29.9), st.floats(1e-4, 5.0), st.sampled_from([0.01, 0.02, 0.032, 0.1]))
    @settings(max_examples=500)
    def test_span_covers_region(self, onset, length, delta):
        offset = onset + length
        T = 1500
        span = region_to_frames(onset, offset, delta, T)
        assert 0 <= span.t_on < span.t_off <= T
        end = min(offset, T * delta)
        if onset < end:
            assert span.t_on * delta <= onset
            assert span.t_off * delta >= end


class TestSimilarityAndPosterior:
    def test_similarity_examples(self):
        e = np.array([1.0, 0.0])
        assert frame_similarity(e, e, 0.05) == 20.0
        assert frame_similarity(e, np.array([0.0, 1.0]), 0.05) == 0.0
        assert frame_similarity(e, -e, 0.1) == -10.0

    def test_uniform(self):
        e = np.array([1.0, 0.0, 0.0])
        n1 = np.array([0.0, 1.0, 0.0])
        assert frame_posterior(e, np.array([0.0, 0.0, 1.0]), [n1, -n1], 0.1) == pytest.approx(
            1 / 3, abs=1e-15)

    def test_no_negatives(self):
        e = np.array([1.0, 0.0])
        assert frame_posterior(e, np.array([0.0, 1.0]), [], 0.1) == 1.0

    def test_high_precision_case(self):
        e = np.array([1.0, 0.0, 0.0])
        got = frame_posterior(e, e, [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])], 0.05)
        expected = 1 / (1 + 2 * mpmath.exp(-20))
        assert got == pytest.approx(float(expected), abs=1e-15)

    def test_posteriors_sum_to_one(self, rng):
        for _ in range(50):
            frame = unit_rows(rng, 6)
            cands = list(unit_rows(rng, (5, 6)))
            total = sum(frame_posterior(frame, c, cands[:k] + cands[k + 1:], 0.07)
                        for k, c in enumerate(cands))
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance_at_large_logits(self, rng):
        frame = np.array([1.0, 0.0, 0.0, 0.0])
        cands = [np.array([0.0, *unit_rows(rng, 3)]) for _ in range(4)]
        base = frame_posterior(frame, cands[0], cands[1:], 0.01)
        # adding the same multiple of the frame direction shifts every logit by 1e4
        shifted = [c + 100.0 * frame for c in cands]
        assert frame_posterior(frame, shifted[0], shifted[1:], 0.01) == pytest.approx(base, abs=1e-12)


class TestFrameWiseLoss:
    def test_single_clip_is_zero(self, rng):
        frames = unit_rows(rng, (5, 4))
        batch = BatchAssembly([frames], [[(FrameSpan(0, 5), unit_rows(rng, 4))]], 0.1)
        assert frame_wise_loss(batch)[0] == 0.0

    def test_orthogonal_pair_is_ln2(self):
        eye = np.eye(4)
        clips = [np.tile(eye[0], (6, 1)), np.tile(eye[1], (6, 1))]
        regions = [[(FrameSpan(1, 4), eye[2])], [(FrameSpan(0, 6), eye[3])]]
        loss, _ = frame_wise_loss(BatchAssembly(clips, regions, 0.05))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_matches_scalar_reference(self, rng):
        for _ in range(20):
            clips, regions = random_batch(rng)
            tau = float(rng.choice([0.05, 0.1, 0.2]))
            loss, _ = frame_wise_loss(assemble(clips, regions, 0.02, tau))
            assert abs(loss - float(scalar_frame_loss(clips, regions, 0.02, tau))) < 1e-9

    def test_non_negative(self, rng):
        for _ in range(50):
            clips, regions = random_batch(rng, n=int(rng.integers(2, 5)))
            assert frame_wise_loss(assemble(clips, regions, 0.02, 0.05))[0] >= 0.0

    def test_split_region_averages_halves(self, rng):
        # length normalisation: a region's term is the mean of its halves' terms
        clips = [unit_rows(rng, (8, 4)), unit_rows(rng, (8, 4))]
        x, y = unit_rows(rng, 4), unit_rows(rng, 4)

        def loss_for(span):
            return frame_wise_loss(BatchAssembly(clips, [[(span, x)], [(FrameSpan(0, 5), y)]],
                                                 0.1))[0]

        whole = loss_for(FrameSpan(2, 6))
        halves = 0.5 * (loss_for(FrameSpan(2, 4)) + loss_for(FrameSpan(4, 6)))
        assert whole == pytest.approx(halves, abs=1e-9)

    def test_same_clip_regions_not_negatives(self, rng):
        clips = [unit_rows(rng, (6, 4)), unit_rows(rng, (6, 4))]
        x, y, z = unit_rows(rng, (3, 4))
        loss, _ = frame_wise_loss(BatchAssembly(
            clips, [[(FrameSpan(0, 3), x), (FrameSpan(3, 6), y)], [(FrameSpan(0, 6), z)]], 0.1))

        def term(frames, positive, negatives):
            return -np.mean([math.log(frame_posterior(f, positive, negatives, 0.1)) for f in frames])

        expected = (term(clips[0][:3], x, [z]) + term(clips[0][3:], y, [z])
                    + term(clips[1], z, [x, y])) / 3
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_difference(self, rng):
        clips = [unit_rows(rng, (6, 4)), unit_rows(rng, (6, 4))]
        texts = [unit_rows(rng, (2, 4)), unit_rows(rng, (1, 4))]
        spans = [[FrameSpan(0, 3), FrameSpan(2, 6)], [FrameSpan(1, 5)]]

        def loss():
            regions = [[(s, t) for s, t in zip(ss, ts)] for ss, ts in zip(spans, texts)]
            return frame_wise_loss(BatchAssembly(clips, regions, 0.1))[0]

        _, grads = frame_wise_loss(BatchAssembly(
            clips, [[(s, t) for s, t in zip(ss, ts)] for ss, ts in zip(spans, texts)], 0.1))
        for i in range(2):
            assert relative_error(grads.clips[i], central_difference(loss, clips[i])) < 1e-4
            assert relative_error(np.array(grads.texts[i]),
                                  central_difference(loss, texts[i])) < 1e-4

    def test_no_regions(self, rng):
        with pytest.raises(ValueError):
            frame_wise_loss(BatchAssembly([unit_rows(rng, (3, 4))] * 2, [[], []], 0.1))

    def test_span_outside_clip(self, rng):
        with pytest.raises(ValueError):
            BatchAssembly([unit_rows(rng, (3, 4))], [[(FrameSpan(1, 4), unit_rows(rng, 4))]], 0.1)

    def test_bad_temperature(self, rng):
        with pytest.raises(ValueError):
            BatchAssembly([unit_rows(rng, (3, 4))], [[]], 0.0)


class TestGlobalLoss:
    def test_near_perfect_pair(self):
        eye = np.eye(2)
        loss, _ = global_clap_loss(eye, eye, 0.05)
        expected = -mpmath.log(mpmath.exp(20) / (mpmath.exp(20) + 1))
        assert loss == pytest.approx(float(expected), rel=1e-9)
        assert loss == pytest.approx(2.06e-9, abs=5e-12)

    def test_identical_embeddings(self):
        v = np.tile([0.6, 0.8], (2, 1))
        assert global_clap_loss(v, v, 0.07)[0] == pytest.approx(math.log(2), abs=1e-15)

    def test_permutation_invariant(self, rng):
        a, t = unit_rows(rng, (6, 5)), unit_rows(rng, (6, 5))
        perm = rng.permutation(6)
        assert global_clap_loss(a, t, 0.1)[0] == pytest.approx(
            global_clap_loss(a[perm], t[perm], 0.1)[0], abs=1e-12)

    def test_gradient_matches_finite_difference(self, rng):
        a, t = unit_rows(rng, (4, 5)), unit_rows(rng, (4, 5))
        _, (ga, gt) = global_clap_loss(a, t, 0.2)
        assert relative_error(ga, central_difference(lambda: global_clap_loss(a, t, 0.2)[0], a)) < 1e-4
        assert relative_error(gt, central_difference(lambda: global_clap_loss(a, t, 0.2)[0], t)) < 1e-4

    def test_needs_two_pairs(self, rng):
        with pytest.raises(ValueError):
            global_clap_loss(unit_rows(rng, (1, 3)), unit_rows(rng, (1, 3)), 0.1)

    def test_pooling_gradient(self, rng):
        frames = unit_rows(rng, (5, 4))
        g = rng.standard_normal(4)
        numeric = central_difference(lambda: float(g @ pool_frames(frames)), frames)
        assert relative_error(pool_frames_backward(frames, g), numeric) < 1e-4
        assert np.linalg.norm(pool_frames(frames)) == pytest.approx(1.0)
