import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from microtog.attacks import (
    AttackConfig,
    DetectionTarget,
    Perturbation,
    UniversalConfig,
    apply_universal,
    attack_success,
    build_target,
    load_perturbation,
    project_linf,
    save_perturbation,
    sign,
    tog_attack,
    train_universal,
)
from microtog.detector import (
    DetectedObject,
    DetectorConfig,
    GroundTruthObject,
    build_detector,
    detect,
)
from microtog.errors import EmptyDetectionsError, ParseError, ShapeError, ValidationError

SMALL = DetectorConfig(input_size=8, grid=2, channels=(4, 4), seed=3)


def fire_everywhere(config=SMALL):
    """Weights whose head fires a confident class-1 detection in every slot."""
    w = build_detector(config)
    head = w.layers[-1]
    head.kernels[:] = 0.0
    per = 5 + config.num_classes
    for a in range(config.num_anchors):
        head.bias[a * per + 4] = 6.0   # objectness
        head.bias[a * per + 5] = 6.0   # class 1
        head.bias[a * per + 6] = -6.0
        head.bias[a * per + 7] = -6.0
    return w


def silent(config=SMALL):
    w = build_detector(config)
    head = w.layers[-1]
    head.kernels[:] = 0.0
    per = 5 + config.num_classes
    for a in range(config.num_anchors):
        head.bias[a * per + 4] = -40.0
    return w


class TestSign:
    def test_basic_values(self):
        assert np.array_equal(sign(np.array([-2.5, 0.0, 7.1])), [-1.0, 0.0, 1.0])

    @given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-10, 10)))
    @settings(max_examples=50, deadline=None)
    def test_idempotent_and_odd(self, g):
        s = sign(g)
        assert np.array_equal(sign(s), s)
        assert np.array_equal(sign(-g), -s)


class TestProjectLinf:
    def test_single_pixel_clamp(self):
        out = project_linf(np.array([0.6]), np.array([0.5]), 0.031)
        assert out[0] == pytest.approx(0.531)

    def test_inside_ball_unchanged(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.3, 0.7, (4, 4, 3))
        cand = x + rng.uniform(-0.01, 0.01, x.shape)
        assert np.array_equal(project_linf(cand, x, 0.05), cand)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (4, 4, 3))
        cand = x + rng.uniform(-0.5, 0.5, x.shape)
        once = project_linf(cand, x, 0.031)
        assert np.array_equal(project_linf(once, x, 0.031), once)

    def test_result_valid_image_in_ball(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (6, 6, 3))
        cand = x + rng.uniform(-1, 1, x.shape)
        out = project_linf(cand, x, 0.1)
        assert np.all((out >= 0) & (out <= 1))
        assert np.max(np.abs(out - x)) <= 0.1 + 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            project_linf(np.zeros((2, 2)), np.zeros((3, 3)), 0.1)


class TestBuildTarget:
    def test_vanishing_empty_target(self):
        w = fire_everywhere()
        img = np.full((8, 8, 3), 0.5, np.float32)
        t = build_target(w, img, "vanishing")
        assert t.target_objects == []
        assert t.loss_sign == 1
        assert np.all(t.assignment.mask == 0)

    def test_fabrication_mirrors_detections(self):
        w = fire_everywhere()
        img = np.full((8, 8, 3), 0.5, np.float32)
        n_benign = len(detect(w, img))
        t = build_target(w, img, "fabrication")
        assert len(t.target_objects) == n_benign
        assert t.loss_sign == -1

    def test_mislabel_targets_differ_from_predictions(self):
        w = fire_everywhere()
        img = np.full((8, 8, 3), 0.5, np.float32)
        dets = detect(w, img)
        t_ml = build_target(w, img, "mislabel_ml")
        t_ll = build_target(w, img, "mislabel_ll")
        for det_obj, ml_obj, ll_obj in zip(dets, t_ml.target_objects, t_ll.target_objects):
            assert ml_obj.class_id != det_obj.class_id
            assert ll_obj.class_id != det_obj.class_id
        # class probs are (0.998, ~0, ~0): runner-up and least-likely share
        # the remaining order by index
        assert all(o.class_id == 2 for o in t_ml.target_objects)
        assert all(o.class_id == 2 for o in t_ll.target_objects)

    def test_ml_second_highest_ll_lowest(self):
        from microtog.attacks import _mislabel_class
        probs = (0.7, 0.2, 0.1)
        assert _mislabel_class(probs, "mislabel_ml") == 2
        assert _mislabel_class(probs, "mislabel_ll") == 3

    def test_empty_detections_error(self):
        w = silent()
        img = np.full((8, 8, 3), 0.5, np.float32)
        for variant in ("fabrication", "mislabel_ml", "mislabel_ll"):
            with pytest.raises(EmptyDetectionsError):
                build_target(w, img, variant)

    def test_loss_sign_validation(self):
        from microtog.detector import assign_targets
        asn = assign_targets([], SMALL)
        with pytest.raises(ValidationError):
            DetectionTarget("vanishing", [], asn, loss_sign=-1)


class TestAttackSuccess:
    B = [DetectedObject(box=(0.5, 0.5, 0.2, 0.2), class_id=1, confidence=0.9, slot_index=1),
         DetectedObject(box=(0.2, 0.2, 0.2, 0.2), class_id=2, confidence=0.8, slot_index=2)]

    def _adv(self, n):
        return [DetectedObject(box=(0.1 + 0.08 * i, 0.5, 0.05, 0.05), class_id=1,
                               confidence=0.9, slot_index=i + 1) for i in range(n)]

    def test_vanishing(self):
        assert attack_success(self.B, [], "vanishing")
        assert not attack_success(self.B, self.B[:1], "vanishing")

    def test_fabrication_thresholds(self):
        assert attack_success(self.B, self._adv(11), "fabrication")
        assert not attack_success(self.B, self._adv(4), "fabrication")
        # 2 benign: needs >= 6 and >= 5
        assert attack_success(self.B, self._adv(6), "fabrication")
        assert not attack_success(self.B, self._adv(5), "fabrication")

    def test_mislabeling_needs_target_classes(self):
        target = DetectionTarget(
            "mislabel_ll",
            [GroundTruthObject(box=b.box, class_id=3 - b.class_id + 1) for b in self.B],
            __import__("microtog.detector", fromlist=["assign_targets"]).assign_targets([], DetectorConfig()),
        )
        flipped = [DetectedObject(box=b.box, class_id=t.class_id, confidence=0.9, slot_index=b.slot_index)
                   for b, t in zip(self.B, target.target_objects)]
        assert attack_success(self.B, flipped, "mislabel_ll", target)
        assert not attack_success(self.B, self.B, "mislabel_ll", target)
        assert not attack_success(self.B, [], "mislabel_ll", target)


class TestTogAttack:
    def test_zero_step_size_keeps_image(self):
        w = fire_everywhere()
        rng = np.random.default_rng(0)
        img = rng.uniform(0.2, 0.8, (8, 8, 3)).astype(np.float32)
        cfg = AttackConfig(variant="vanishing", epsilon=0.031, step_size=0.0, max_iterations=3)
        result = tog_attack(w, img, cfg)
        assert np.array_equal(result.adversarial, img)
        assert len(detect(w, result.adversarial)) == len(detect(w, img))

    def test_budget_and_range_always_hold(self):
        cfg = SMALL
        w = build_detector(DetectorConfig(input_size=8, grid=2, channels=(4, 4), seed=11))
        rng = np.random.default_rng(3)
        for variant in ("vanishing",):
            for _ in range(5):
                img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
                acfg = AttackConfig(variant=variant, epsilon=0.031, step_size=0.008,
                                    max_iterations=5)
                res = tog_attack(w, img, acfg)
                assert np.max(np.abs(res.adversarial - img)) <= 0.031 + 1e-6
                assert np.all((res.adversarial >= 0) & (res.adversarial <= 1))

    def test_deterministic(self):
        w = fire_everywhere()
        img = np.random.default_rng(1).uniform(0, 1, (8, 8, 3)).astype(np.float32)
        cfg = AttackConfig(variant="vanishing", max_iterations=4)
        a = tog_attack(w, img, cfg)
        b = tog_attack(w, img, cfg)
        assert a.adversarial.tobytes() == b.adversarial.tobytes()

    def test_stalled_flag_on_flat_gradient(self):
        w = silent()
        img = np.random.default_rng(2).uniform(0.3, 0.7, (8, 8, 3)).astype(np.float32)
        # silent() already yields empty detections so vanishing succeeds at t=0:
        # force a non-trivial variant by using a fabrication-style target by hand
        from microtog.attacks import _empty_assignment
        target = DetectionTarget("vanishing", [], _empty_assignment(SMALL), loss_sign=1)
        res = tog_attack(w, img, AttackConfig(variant="vanishing"), target=target)
        assert res.success  # nothing detected on the clean image already
        assert res.iterations == 0

    def test_vanishing_reduces_mean_objectness(self):
        # random conv path with biases pushed positive so every image has
        # detections to remove; the descended loss is exactly the no-object BCE
        cfg = DetectorConfig(input_size=8, grid=2, channels=(4, 4), seed=21)
        w = build_detector(cfg)
        per = 5 + cfg.num_classes
        for a in range(cfg.num_anchors):
            w.layers[-1].bias[a * per + 4] = 1.5
            w.layers[-1].bias[a * per + 5] = 2.0
        rng = np.random.default_rng(5)
        from microtog.detector import decode, forward_head
        acfg = AttackConfig(variant="vanishing", epsilon=0.05, step_size=0.01, max_iterations=8)
        drops = 0
        for _ in range(5):
            img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
            res = tog_attack(w, img, acfg)
            assert res.iterations > 0
            before = np.mean([c.objectness for c in decode(forward_head(w, img), cfg)])
            after = np.mean([c.objectness for c in decode(forward_head(w, res.adversarial), cfg)])
            drops += after < before
        assert drops >= 4

    def test_universal_apply_rejected(self):
        w = silent()
        img = np.zeros((8, 8, 3), np.float32)
        with pytest.raises(ValidationError):
            tog_attack(w, img, AttackConfig(variant="universal_apply"))

    def test_scalar_analytic_single_step(self):
        # one sign step against a fixed gradient direction: x' = clamp(x - a*sign(g))
        x = np.full((8, 8, 3), 0.5, np.float32)
        g = np.ones_like(x)
        stepped = project_linf(x - 0.008 * sign(g), x, 0.031)
        assert np.allclose(stepped, 0.492)


class TestApplyUniversal:
    def test_zero_eta_identity(self):
        img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3)).astype(np.float32)
        eta = Perturbation(np.zeros_like(img), 0.031)
        assert np.array_equal(apply_universal(img, eta), img)

    def test_budget_bound(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        eta = Perturbation(rng.uniform(-0.031, 0.031, img.shape).astype(np.float32), 0.031)
        out = apply_universal(img, eta)
        assert np.max(np.abs(out - img)) <= 0.031 + 1e-6
        assert np.all((out >= 0) & (out <= 1))

    def test_shape_mismatch(self):
        eta = Perturbation(np.zeros((4, 4, 3), np.float32), 0.031)
        with pytest.raises(ShapeError):
            apply_universal(np.zeros((8, 8, 3), np.float32), eta)


class TestTrainUniversal:
    def test_zero_step_keeps_eta_zero(self, tiny_scenes):
        cfg = DetectorConfig(seed=2)
        w = build_detector(cfg)
        ucfg = UniversalConfig(step_size=0.0, epochs=2, training_set_size=3, kappa=99.0)
        eta, history = train_universal(w, tiny_scenes[:3], ucfg)
        assert np.all(eta.delta == 0)
        assert len(history) <= 2

    def test_eta_within_epsilon_exactly(self, tiny_scenes):
        cfg = DetectorConfig(seed=2)
        w = build_detector(cfg)
        ucfg = UniversalConfig(step_size=0.02, epochs=2, training_set_size=3, kappa=100.0)
        eta, _ = train_universal(w, tiny_scenes[:3], ucfg)
        assert np.max(np.abs(eta.delta)) <= ucfg.epsilon

    def test_empty_dataset_rejected(self):
        w = build_detector(DetectorConfig(seed=2))
        with pytest.raises(ValidationError):
            train_universal(w, [], UniversalConfig())

    def test_history_rows_match_epochs_run(self, tiny_scenes):
        cfg = DetectorConfig(seed=2)
        w = build_detector(cfg)
        ucfg = UniversalConfig(step_size=0.001, epochs=3, training_set_size=3, kappa=100.0)
        _, history = train_universal(w, tiny_scenes[:3], ucfg)
        assert [row["epoch"] for row in history] == list(range(1, len(history) + 1))


class TestPerturbationFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        eta = Perturbation(rng.uniform(-0.03, 0.03, (16, 16, 3)).astype(np.float32), 0.031)
        path = tmp_path / "eta.togp"
        save_perturbation(eta, path)
        back = load_perturbation(path)
        assert back.epsilon_used == eta.epsilon_used
        assert back.delta.tobytes() == eta.delta.tobytes()

    def test_rewrite_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        eta = Perturbation(rng.uniform(-0.03, 0.03, (8, 8, 3)).astype(np.float32), 0.02)
        p1, p2 = tmp_path / "a.togp", tmp_path / "b.togp"
        save_perturbation(eta, p1)
        save_perturbation(load_perturbation(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.togp"
        path.write_bytes(b"XXXX" + b"\x00" * 30)
        with pytest.raises(ParseError, match="magic"):
            load_perturbation(path)


class TestAttackConfigValidation:
    def test_epsilon_range(self):
        with pytest.raises(ValidationError, match="epsilon"):
            AttackConfig(epsilon=1.5).validate()

    def test_unknown_variant(self):
        with pytest.raises(ValidationError, match="variant"):
            AttackConfig(variant="explode").validate()

    def test_paper_defaults(self):
        cfg = AttackConfig()
        assert cfg.epsilon == 0.031
        assert cfg.step_size == 0.008
        assert cfg.max_iterations == 10

    def test_universal_defaults_validate(self):
        UniversalConfig().validate()
        with pytest.raises(ValidationError, match="kappa"):
            UniversalConfig(kappa=0.0).validate()
