import numpy as np
import pytest

from boxmend.dataset import Category, Dataset
from boxmend.exceptions import CorrespondenceError, InsufficientData, NonFiniteInput
from boxmend.fmc import correct_dataset
from boxmend.geometry import Box, ImageDims, iou
from boxmend.interpolation import (
    ConstantPolicy,
    HeuristicPolicy,
    LearnedPolicy,
    MlpParams,
    apply_interpolation,
    box_pair_features,
    gamma_oracle,
    init_params,
    mlp_forward,
    mlp_grad,
    mlp_loss,
    mlp_train,
    parse_policy,
)
from boxmend.noise import NoiseConfig, inject
from boxmend.synth import OracleProvider, SceneSpec, generate_scenes, scenes_to_dataset

DIMS = ImageDims(100, 100)


def random_features(rng):
    return rng.uniform(-1.5, 1.5, size=12)


def finite_difference_grad(params, feats, targets, eps=1e-5):
    """Central-difference gradient oracle over every parameter."""
    out = {}
    for name in MlpParams.SHAPES:
        base = getattr(params, name)
        grad = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            for sign, store in ((1, "plus"), (-1, "minus")):
                shifted = MlpParams(**{n: getattr(params, n).copy() for n in MlpParams.SHAPES})
                getattr(shifted, name)[idx] += sign * eps
                if store == "plus":
                    up = mlp_loss(shifted, feats, targets)
                else:
                    down = mlp_loss(shifted, feats, targets)
            grad[idx] = (up - down) / (2 * eps)
            it.iternext()
        out[name] = grad
    return out


class TestGammaOracle:
    def test_endpoint_when_corrected_is_truth(self):
        b_true = Box(10, 10, 6, 6)
        assert gamma_oracle(b_true, Box(20, 20, 6, 6), b_true) == 1.0

    def test_endpoint_when_noisy_is_truth(self):
        b_true = Box(10, 10, 6, 6)
        assert gamma_oracle(Box(20, 20, 6, 6), b_true, b_true) == 0.0

    def test_symmetric_midpoint(self):
        g = gamma_oracle(Box(0, 0, 2, 2), Box(10, 0, 2, 2), Box(5, 0, 2, 2))
        assert g == 0.50

    def test_dominates_endpoints_on_grid(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            b_hat = Box(*rng.uniform(10, 60, 2), *rng.uniform(4, 20, 2))
            b = Box(*rng.uniform(10, 60, 2), *rng.uniform(4, 20, 2))
            b_true = Box(*rng.uniform(10, 60, 2), *rng.uniform(4, 20, 2))
            g = gamma_oracle(b_hat, b, b_true)
            best = iou(
                Box(
                    g * b_hat.cx + (1 - g) * b.cx,
                    g * b_hat.cy + (1 - g) * b.cy,
                    g * b_hat.w + (1 - g) * b.w,
                    g * b_hat.h + (1 - g) * b.h,
                ),
                b_true,
            )
            assert best >= iou(b, b_true) - 1e-12
            assert best >= iou(b_hat, b_true) - 1e-12


class TestFeatures:
    def test_shape_and_finiteness(self):
        f = box_pair_features(Box(10, 10, 4, 8), Box(12, 9, 6, 6), DIMS)
        assert f.shape == (12,)
        assert np.all(np.isfinite(f))

    def test_identical_pair(self):
        b = Box(10, 10, 4, 8)
        f = box_pair_features(b, b, DIMS)
        assert f[8] == 1.0  # IoU
        assert f[9] == 0.0  # center distance
        assert f[10] == f[11] == 0.0  # log ratios


class TestForward:
    def test_zero_params_give_half(self):
        zeros = MlpParams(**{n: np.zeros(s) for n, s in MlpParams.SHAPES.items()})
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert mlp_forward(zeros, random_features(rng)) == 0.5

    def test_output_in_open_unit_interval(self):
        rng = np.random.default_rng(1)
        for i in range(200):
            params = init_params(i)
            for _ in range(50):
                y = mlp_forward(params, random_features(rng))
                assert 0.0 < y < 1.0

    def test_bit_stable(self):
        params = init_params(9)
        f = random_features(np.random.default_rng(2))
        assert mlp_forward(params, f) == mlp_forward(params, f)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteInput):
            mlp_forward(init_params(0), [np.nan] * 12)


class TestGrad:
    def test_zero_at_perfect_fit(self):
        # Zero weights output 0.5 everywhere; target 0.5 means zero loss.
        zeros = MlpParams(**{n: np.zeros(s) for n, s in MlpParams.SHAPES.items()})
        rng = np.random.default_rng(3)
        feats = np.stack([random_features(rng) for _ in range(8)])
        grad = mlp_grad(zeros, feats, np.full(8, 0.5))
        for name in MlpParams.SHAPES:
            assert np.allclose(getattr(grad, name), 0.0)

    def test_matches_finite_differences(self):
        from boxmend.interpolation import _forward_batch

        rng = np.random.default_rng(4)
        worst = 0.0
        for trial in range(5):
            params = init_params(100 + trial)
            while True:
                feats = np.stack([random_features(rng) for _ in range(4)])
                _, z1, _, z2, _, _ = _forward_batch(params, feats)
                # stay clear of ReLU kinks, where the derivative is undefined
                if min(np.abs(z1).min(), np.abs(z2).min()) > 1e-3:
                    break
            targets = rng.uniform(0.1, 0.9, size=4)
            analytic = mlp_grad(params, feats, targets)
            numeric = finite_difference_grad(params, feats, targets)
            for name in MlpParams.SHAPES:
                a, n = getattr(analytic, name), numeric[name]
                denom = np.maximum(np.abs(n), 1e-6)
                worst = max(worst, float(np.max(np.abs(a - n) / denom)))
        assert worst < 1e-4

    def test_batch_gradient_is_mean_of_per_sample(self):
        rng = np.random.default_rng(5)
        params = init_params(6)
        feats = np.stack([random_features(rng) for _ in range(6)])
        targets = rng.uniform(0, 1, size=6)
        batch = mlp_grad(params, feats, targets)
        singles = [mlp_grad(params, feats[i : i + 1], targets[i : i + 1]) for i in range(6)]
        for name in MlpParams.SHAPES:
            mean = np.mean([getattr(g, name) for g in singles], axis=0)
            assert np.allclose(getattr(batch, name), mean, atol=1e-12)


class TestTrain:
    def make_pairs(self, n=150, target=None, seed=7):
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(n):
            f = random_features(rng)
            t = target if target is not None else float(np.clip(0.5 + 0.3 * f[0], 0, 1))
            pairs.append((f, t))
        return pairs

    def test_loss_decreases(self):
        pairs = self.make_pairs()
        feats = np.stack([p[0] for p in pairs])
        targets = np.array([p[1] for p in pairs])
        initial = mlp_loss(init_params(11), feats, targets)
        _, final = mlp_train(pairs, seed=11)
        assert final <= initial

    def test_constant_target_learned(self):
        pairs = self.make_pairs(target=0.7)
        params, _ = mlp_train(pairs, seed=13)
        preds = [mlp_forward(params, f) for f, _ in pairs]
        assert all(abs(p - 0.7) < 0.05 for p in preds)

    def test_deterministic(self):
        pairs = self.make_pairs()
        a, loss_a = mlp_train(pairs, seed=21)
        b, loss_b = mlp_train(pairs, seed=21)
        assert a == b and loss_a == loss_b

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            mlp_train(self.make_pairs(n=20), seed=0)


def interpolation_setup(count=8, level=0.4):
    taxonomy = (Category(1, "circle"), Category(2, "rectangle"), Category(3, "triangle"))
    spec = SceneSpec(
        dims=ImageDims(96, 96),
        num_objects=3,
        shape_classes=taxonomy,
        min_size=14,
        max_size=28,
        seed=31,
    )
    scenes = generate_scenes(spec, count)
    truth = scenes_to_dataset(scenes)
    noisy = inject(truth, NoiseConfig(level=level, seed=41))
    corrected, records = correct_dataset(noisy, OracleProvider(scenes))
    return truth, noisy, corrected, records


class TestApplyInterpolation:
    def test_constant_zero_returns_noisy(self):
        _, noisy, corrected, records = interpolation_setup(count=3)
        out = apply_interpolation(corrected, noisy, records, ConstantPolicy(0.0))
        assert [a.box for a in out.annotations] == [a.box for a in noisy.annotations]

    def test_constant_one_returns_corrected(self):
        _, noisy, corrected, records = interpolation_setup(count=3)
        out = apply_interpolation(corrected, noisy, records, ConstantPolicy(1.0))
        assert [a.box for a in out.annotations] == [a.box for a in corrected.annotations]

    def test_correspondence_error(self):
        _, noisy, corrected, records = interpolation_setup(count=2)
        truncated = Dataset(
            corrected.images, corrected.categories, corrected.annotations[:-1], {}
        )
        with pytest.raises(CorrespondenceError):
            apply_interpolation(truncated, noisy, records, ConstantPolicy(0.5))

    def test_gammas_recorded_in_provenance(self):
        _, noisy, corrected, records = interpolation_setup(count=2)
        out = apply_interpolation(corrected, noisy, records, HeuristicPolicy())
        assert out.provenance["policy"] == "heuristic"
        gammas = out.provenance["gammas"]
        assert set(gammas) == {str(a.id) for a in noisy.annotations}
        assert all(0.0 <= g <= 1.0 for g in gammas.values())

    def test_learned_policy_beats_noisy(self):
        truth, noisy, corrected, records = interpolation_setup(count=40)
        dims_by_image = {img.id: img.dims for img in noisy.images}
        truth_boxes = {a.id: a.box for a in truth.annotations}
        corr_by_id = {a.id: a.box for a in corrected.annotations}
        pairs = []
        for ann in noisy.annotations:
            b_hat = corr_by_id[ann.id]
            g_star = gamma_oracle(b_hat, ann.box, truth_boxes[ann.id])
            pairs.append(
                (box_pair_features(b_hat, ann.box, dims_by_image[ann.image_id]), g_star)
            )
        params, _ = mlp_train(pairs, seed=3)
        out = apply_interpolation(corrected, noisy, records, LearnedPolicy(params))
        mean_noisy = np.mean([iou(a.box, truth_boxes[a.id]) for a in noisy.annotations])
        mean_interp = np.mean([iou(a.box, truth_boxes[a.id]) for a in out.annotations])
        assert mean_interp >= mean_noisy


class TestParsePolicy:
    def test_spellings(self, tmp_path):
        assert isinstance(parse_policy("heuristic"), HeuristicPolicy)
        p = parse_policy("constant:0.25")
        assert isinstance(p, ConstantPolicy) and p.value == 0.25
        path = tmp_path / "params.json"
        init_params(0).save(path)
        learned = parse_policy(f"learned:{path}")
        assert isinstance(learned, LearnedPolicy)

    def test_params_round_trip(self, tmp_path):
        params = init_params(5)
        path = tmp_path / "p.json"
        params.save(path)
        assert MlpParams.load(path) == params

    def test_unknown(self):
        with pytest.raises(ValueError):
            parse_policy("magic")
