import math

import numpy as np
import pytest

from r2ground.calibration import (
    CalibrationConfig,
    PositiveSetError,
    adaptive_pool_query,
    calibration_losses,
    info_nce,
    l2_normalize,
    pool_positive_video,
    positive_frames,
)
from r2ground.features import GroundingLabels
from r2ground.tensor import Tensor, finite_diff_check, matmul


def info_nce_scalar_oracle(v, q, tau, symmetric):
    """Independent scalar implementation over plain numpy rows."""
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    n = v.shape[0]

    def one_direction(rows, cols):
        total = 0.0
        for i in range(n):
            logits = np.array([rows[i] @ cols[j] / tau for j in range(n)])
            total += -(logits[i] - math.log(np.exp(logits).sum()))
        return total / n

    fwd = one_direction(v, q)
    if not symmetric:
        return fwd
    return 0.5 * (fwd + one_direction(q, v))


class TestPositiveFrames:
    def test_moment_frames_included(self):
        labels = GroundingLabels(moments=[(2.0, 4.0)])
        assert positive_frames(labels, 8).tolist() == [2, 3, 4]

    def test_relative_saliency_threshold(self):
        labels = GroundingLabels(saliency=np.array([0.1, 0.6, 0.2, 1.0]))
        assert positive_frames(labels, 4).tolist() == [1, 3]

    def test_summary_flags(self):
        labels = GroundingLabels(summary=np.array([0, 1, 0, 1]))
        assert positive_frames(labels, 4).tolist() == [1, 3]


class TestPoolPositiveVideo:
    def test_identical_frames_any_frame(self):
        row = np.arange(4.0)
        pools = [Tensor(np.tile(row, (3, 1))), Tensor(np.tile(row * 2, (3, 1)))]
        out = pool_positive_video(pools, [0, 1, 2])
        assert np.allclose(out.data[0], row)
        assert np.allclose(out.data[1], row * 2)

    def test_singleton_omega_selects_frame(self):
        rng = np.random.default_rng(0)
        pools = [Tensor(rng.normal(size=(3, 4)))]
        out = pool_positive_video(pools, [0])
        assert np.array_equal(out.data[0], pools[0].data[0])

    def test_matches_hand_loop(self):
        rng = np.random.default_rng(1)
        data = [rng.normal(size=(3, 4)) for _ in range(2)]
        pools = [Tensor(d) for d in data]
        out = pool_positive_video(pools, [0, 2])
        for k in range(2):
            want = (data[k][0] + data[k][2]) / 2.0
            assert np.max(np.abs(out.data[k] - want)) < 1e-12

    def test_empty_omega_rejected(self):
        with pytest.raises(PositiveSetError):
            pool_positive_video([Tensor(np.zeros((3, 4)))], [])


class TestAdaptivePoolQuery:
    def _pool_weight(self, c, seed=0):
        rng = np.random.default_rng(seed)
        return Tensor(rng.normal(size=(c, 1)), requires_grad=True)

    def test_single_unmasked_token_passthrough(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(3, 4))
        w = self._pool_weight(4)
        out = adaptive_pool_query([Tensor(q)], [False, True, False], w)
        assert np.allclose(out.data[0], q[1], atol=1e-12)

    def test_equal_scores_uniform_average(self):
        q = np.tile(np.arange(4.0), (3, 1))
        q += np.array([[1.0], [2.0], [3.0]])
        w = Tensor(np.zeros((4, 1)))
        out = adaptive_pool_query([Tensor(q)], [True, True, True], w)
        assert np.allclose(out.data[0], q.mean(axis=0))

    def test_masked_token_matches_two_token_hand_computation(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(3, 4))
        w = self._pool_weight(4, seed=4)
        out = adaptive_pool_query([Tensor(q)], [True, False, True], w)
        s0 = float(q[0] @ w.data[:, 0])
        s2 = float(q[2] @ w.data[:, 0])
        m = max(s0, s2)
        w0 = math.exp(s0 - m) / (math.exp(s0 - m) + math.exp(s2 - m))
        want = w0 * q[0] + (1 - w0) * q[2]
        assert np.max(np.abs(out.data[0] - want)) < 1e-12

    def test_gradient_flows_to_pool_weight(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(3, 4)))
        w = self._pool_weight(4, seed=6)
        f = lambda: (adaptive_pool_query([q], [True, True, False], w) ** 2).sum()
        assert finite_diff_check(f, [w]) < 1e-7


class TestInfoNce:
    def test_identical_pairs_ln2_per_direction(self):
        # two identical unit vectors: every logit equal, softmax row = 1/2
        v = np.tile(np.array([1.0, 0.0]), (2, 1))
        sim = Tensor(v @ v.T / 0.07)
        assert abs(info_nce(sim).item() - math.log(2.0)) < 1e-12
        assert abs(info_nce(sim.swapaxes(0, 1)).item() - math.log(2.0)) < 1e-12

    def test_orthogonal_pairs_closed_form(self):
        # diagonal similarity 1, off-diagonal 0, tau = 0.07, B = 2
        v = np.eye(2)
        sim = Tensor(v @ v.T / 0.07)
        want = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 1.0))
        got = info_nce(sim).item()
        assert abs(got - want) < 1e-12
        assert got == pytest.approx(6.2e-7, rel=0.05)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(3, 5))
        q = rng.normal(size=(3, 5))
        vt = l2_normalize(Tensor(v))
        qt = l2_normalize(Tensor(q))
        sim = matmul(vt, qt.swapaxes(0, 1)) * (1 / 0.07)
        got = 0.5 * (info_nce(sim).item() + info_nce(sim.swapaxes(0, 1)).item())
        want = info_nce_scalar_oracle(v, q, 0.07, symmetric=True)
        assert abs(got - want) < 1e-10


class TestCalibrationLosses:
    def _batch(self, b=3, k=2, c=5, seed=8):
        rng = np.random.default_rng(seed)
        return (
            Tensor(rng.normal(size=(b, k, c)), requires_grad=True),
            Tensor(rng.normal(size=(b, k, c)), requires_grad=True),
        )

    def test_matches_oracle_random_batch(self):
        cfg = CalibrationConfig()
        v, q = self._batch()
        video, layer = calibration_losses(v, q, cfg)
        k, b = 2, 3
        video_want = (
            sum(
                info_nce_scalar_oracle(v.data[:, s, :], q.data[:, s, :], 0.07, True)
                for s in range(k)
            )
            * cfg.lambda_video / k
        )
        layer_want = (
            sum(
                info_nce_scalar_oracle(v.data[i], q.data[i], 0.07, True)
                for i in range(b)
            )
            * cfg.lambda_layer / b
        )
        assert abs(video.item() - video_want) < 1e-10
        assert abs(layer.item() - layer_want) < 1e-10

    def test_batch_permutation_equivariance(self):
        cfg = CalibrationConfig()
        v, q = self._batch(seed=9)
        video1, layer1 = calibration_losses(v, q, cfg)
        perm = [2, 0, 1]
        v2 = Tensor(v.data[perm])
        q2 = Tensor(q.data[perm])
        video2, layer2 = calibration_losses(v2, q2, cfg)
        assert abs(video1.item() - video2.item()) < 1e-12
        assert abs(layer1.item() - layer2.item()) < 1e-12

    def test_layer_permutation_equivariance(self):
        cfg = CalibrationConfig()
        v, q = self._batch(k=3, seed=10)
        video1, layer1 = calibration_losses(v, q, cfg)
        perm = [1, 2, 0]
        video2, layer2 = calibration_losses(
            Tensor(v.data[:, perm, :]), Tensor(q.data[:, perm, :]), cfg
        )
        assert abs(layer1.item() - layer2.item()) < 1e-12
        assert abs(video1.item() - video2.item()) < 1e-12

    def test_positive_rescaling_invariance(self):
        cfg = CalibrationConfig()
        v, q = self._batch(seed=11)
        video1, layer1 = calibration_losses(v, q, cfg)
        video2, layer2 = calibration_losses(v * 3.7, q * 0.21, cfg)
        assert abs(video1.item() - video2.item()) < 1e-10
        assert abs(layer1.item() - layer2.item()) < 1e-10

    def test_swap_arguments_symmetric(self):
        cfg = CalibrationConfig(symmetric_nce=True)
        v, q = self._batch(seed=12)
        video1, layer1 = calibration_losses(v, q, cfg)
        video2, layer2 = calibration_losses(q, v, cfg)
        assert abs(video1.item() - video2.item()) < 1e-12
        assert abs(layer1.item() - layer2.item()) < 1e-12

    def test_nonnegative(self):
        cfg = CalibrationConfig()
        for seed in range(5):
            v, q = self._batch(seed=100 + seed)
            video, layer = calibration_losses(v, q, cfg)
            assert video.item() >= 0.0
            assert layer.item() >= 0.0

    def test_degenerate_sizes_warn_and_zero(self):
        cfg = CalibrationConfig()
        rng = np.random.default_rng(13)
        v1 = Tensor(rng.normal(size=(1, 2, 4)))
        q1 = Tensor(rng.normal(size=(1, 2, 4)))
        with pytest.warns(UserWarning, match="batch"):
            video, _ = calibration_losses(v1, q1, cfg)
        assert video.item() == 0.0
        vk = Tensor(rng.normal(size=(2, 1, 4)))
        qk = Tensor(rng.normal(size=(2, 1, 4)))
        with pytest.warns(UserWarning, match="refinement"):
            _, layer = calibration_losses(vk, qk, cfg)
        assert layer.item() == 0.0

    def test_gradients(self):
        cfg = CalibrationConfig()
        v, q = self._batch(b=2, k=2, c=3, seed=14)

        def f():
            video, layer = calibration_losses(v, q, cfg)
            return video + layer

        assert finite_diff_check(f, [v, q]) < 1e-7
