import numpy as np
import pytest

from protosep import autodiff as ad
from protosep.autodiff import InvalidArgumentError, ShapeError, Tensor
from protosep.prototypes import (ClassifierWeights, PrototypeBank,
                                 ReductionParams, classify,
                                 modulate_and_score, project_prototypes,
                                 prototype_forward, reduce_features,
                                 similarity)


def make_bank(n_classes=3, per_class=2, dim=4, seed=0, gamma=1e-5):
    rng = np.random.default_rng(seed)
    return PrototypeBank.init(n_classes, per_class, dim, rng, gamma=gamma)


class TestBankInvariants:
    def test_init_shape_and_ownership(self):
        bank = make_bank(n_classes=4, per_class=3, dim=5)
        assert bank.m == 12 and bank.dim == 5
        assert np.all(np.bincount(bank.class_of) == 3)
        assert np.all((bank.P.data > 0) & (bank.P.data < 1))

    def test_wrong_count_rejected(self):
        with pytest.raises(InvalidArgumentError):
            PrototypeBank(P=Tensor(np.zeros((5, 2))),
                          class_of=np.array([0, 0, 1, 1, 1]), K=2, c=3)

    def test_uneven_ownership_rejected(self):
        with pytest.raises(InvalidArgumentError):
            PrototypeBank(P=Tensor(np.zeros((4, 2))),
                          class_of=np.array([0, 0, 0, 1]), K=2, c=2)

    def test_nonpositive_gamma_rejected(self):
        with pytest.raises(InvalidArgumentError):
            make_bank(gamma=0.0)


class TestReduce:
    def test_zero_kernels_give_half_everywhere(self):
        params = ReductionParams(k1=Tensor(np.zeros((6, 4))),
                                 k2=Tensor(np.zeros((4, 3))))
        z = reduce_features(Tensor(np.random.default_rng(0).normal(size=(5, 5, 6))),
                            params)
        np.testing.assert_allclose(z.data, 0.5, rtol=0, atol=1e-15)

    def test_output_shape(self):
        rng = np.random.default_rng(1)
        params = ReductionParams.init(64, 32, rng)
        z = reduce_features(Tensor(rng.normal(size=(8, 8, 64))), params)
        assert z.shape == (8, 8, 32)

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        params = ReductionParams.init(6, 3, rng)
        z = reduce_features(Tensor(rng.normal(size=(4, 4, 6))), params)
        assert np.all(z.data > 0) and np.all(z.data < 1)

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(3)
        params = ReductionParams.init(6, 3, rng)
        with pytest.raises(ShapeError):
            reduce_features(Tensor(rng.normal(size=(4, 4, 5))), params)

    def test_gradient_wrt_input(self):
        rng = np.random.default_rng(4)
        params = ReductionParams.init(5, 3, rng)

        def loss(x):
            z = reduce_features(x, params)
            return ad.reduce_sum(ad.mul(z, z))

        x = Tensor(rng.normal(size=(3, 3, 5)), requires_grad=True)
        ok, err = ad.finite_diff_check(loss, x)
        assert ok, f"reduction grad err {err}"


class TestSimilarity:
    def test_zero_distance_hits_log_inverse_gamma(self):
        bank = PrototypeBank(P=Tensor(np.array([[0.3, 0.7]])),
                             class_of=np.array([0]), K=1, c=1)
        z = Tensor(np.array([[[0.3, 0.7]]]))
        maps = similarity(z, bank)
        assert maps.data[0, 0, 0] == pytest.approx(11.512925, abs=1e-5)
        assert maps.data[0, 0, 0] == pytest.approx(np.log(1.0 / 1e-5), abs=1e-9)

    def test_unit_distance_value(self):
        bank = PrototypeBank(P=Tensor(np.array([[1.0]])),
                             class_of=np.array([0]), K=1, c=1)
        maps = similarity(Tensor(np.array([[[0.0]]])), bank)
        assert maps.data[0, 0, 0] == pytest.approx(0.693137, abs=1e-5)

    def test_huge_distance_decays_to_zero(self):
        bank = PrototypeBank(P=Tensor(np.array([[1000.0]])),
                             class_of=np.array([0]), K=1, c=1)
        maps = similarity(Tensor(np.array([[[0.0]]])), bank)
        assert 0.0 < maps.data[0, 0, 0] < 1.01e-6

    def test_strictly_positive_and_decreasing(self):
        bank = PrototypeBank(P=Tensor(np.zeros((1, 1))),
                             class_of=np.array([0]), K=1, c=1)
        dists = np.array([0.0, 0.1, 0.5, 1.0, 4.0, 25.0])
        z = Tensor(np.sqrt(dists).reshape(1, -1, 1))
        vals = similarity(z, bank).data[0, :, 0]
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) < 0)
        assert vals[0] == pytest.approx(np.log(1.0 / 1e-5), abs=1e-9)

    def test_dim_mismatch_raises(self):
        bank = make_bank(dim=4)
        with pytest.raises(ShapeError):
            similarity(Tensor(np.zeros((2, 2, 5))), bank)


class TestModulateAndScore:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.maps = Tensor(np.abs(rng.normal(size=(3, 4, 5))))

    def test_zero_attention_zeroes_scores(self):
        _, scores = modulate_and_score(self.maps, Tensor(np.zeros((3, 4))))
        assert np.all(scores.data == 0.0)

    def test_unit_attention_is_plain_spatial_max(self):
        _, scores = modulate_and_score(self.maps, Tensor(np.ones((3, 4))))
        np.testing.assert_allclose(scores.data, self.maps.data.max(axis=(0, 1)),
                                   rtol=0, atol=0)

    def test_one_hot_attention_picks_that_location(self):
        a = np.zeros((3, 4))
        a[1, 2] = 1.0
        _, scores = modulate_and_score(self.maps, Tensor(a))
        np.testing.assert_allclose(scores.data, self.maps.data[1, 2],
                                   rtol=0, atol=0)

    def test_negative_attention_rejected(self):
        a = np.zeros((3, 4))
        a[0, 0] = -0.1
        with pytest.raises(InvalidArgumentError):
            modulate_and_score(self.maps, Tensor(a))

    def test_scores_bounded_by_peak_similarity_times_peak_attention(self):
        rng = np.random.default_rng(8)
        bank = make_bank(dim=3, seed=8)
        for _ in range(10):
            z = Tensor(rng.uniform(size=(4, 4, 3)))
            a = Tensor(rng.uniform(size=(4, 4)))
            maps = similarity(z, bank)
            _, scores = modulate_and_score(maps, a)
            bound = np.log(1.0 / bank.gamma) * a.data.max()
            assert np.all(scores.data <= bound + 1e-12)


class TestClassify:
    def test_two_class_init_pattern(self):
        bank = make_bank(n_classes=2, per_class=1, dim=3)
        w = ClassifierWeights.init(bank.class_of, 2)
        s1, s2 = 3.0, 5.0
        logits = classify(Tensor(np.array([s1, s2])), w)
        np.testing.assert_allclose(logits.data,
                                   [s1 - 0.5 * s2, -0.5 * s1 + s2],
                                   rtol=0, atol=1e-15)

    def test_zero_scores_give_zero_logits(self):
        bank = make_bank()
        w = ClassifierWeights.init(bank.class_of, bank.K)
        logits = classify(Tensor(np.zeros(bank.m)), w)
        assert np.all(logits.data == 0.0)

    def test_init_entry_counts(self):
        bank = make_bank(n_classes=5, per_class=4)
        w = ClassifierWeights.init(bank.class_of, bank.K).W.data
        m, k = bank.m, bank.K
        assert int((w == 1.0).sum()) == m
        assert int((w == -0.5).sum()) == m * (k - 1)
        # the +1 entries sit exactly on (class_of[l], l)
        assert np.all(w[bank.class_of, np.arange(m)] == 1.0)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        bank = make_bank()
        w = ClassifierWeights.init(bank.class_of, bank.K)
        s1 = rng.normal(size=bank.m)
        s2 = rng.normal(size=bank.m)
        both = classify(Tensor(s1 + s2), w).data
        separate = classify(Tensor(s1), w).data + classify(Tensor(s2), w).data
        np.testing.assert_allclose(both, separate, rtol=0, atol=1e-12)

    def test_shape_mismatch_raises(self):
        bank = make_bank()
        w = ClassifierWeights.init(bank.class_of, bank.K)
        with pytest.raises(ShapeError):
            classify(Tensor(np.zeros(bank.m + 1)), w)


class TestProjection:
    def test_nearest_patch_chosen(self):
        bank = PrototypeBank(P=Tensor(np.array([[0.0, 0.0]])),
                             class_of=np.array([0]), K=1, c=1)
        patches = np.array([[1.0, 1.0], [2.0, 2.0]])
        out = project_prototypes(bank, patches, [0, 0], [10, 11],
                                 [[0, 0], [1, 1]])
        np.testing.assert_array_equal(out.P.data[0], [1.0, 1.0])
        np.testing.assert_array_equal(out.provenance[0], [10, 0, 0])

    def test_prototype_on_patch_is_fixed_point(self):
        bank = PrototypeBank(P=Tensor(np.array([[2.0, 2.0]])),
                             class_of=np.array([0]), K=1, c=1)
        patches = np.array([[1.0, 1.0], [2.0, 2.0]])
        out = project_prototypes(bank, patches, [0, 0], [0, 1],
                                 [[0, 0], [0, 1]])
        np.testing.assert_array_equal(out.P.data[0], [2.0, 2.0])

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(10)
        bank = make_bank(n_classes=3, per_class=2, dim=4, seed=10)
        n = 60
        patches = rng.uniform(size=(n, 4))
        classes = rng.integers(0, 3, size=n)
        classes[:3] = [0, 1, 2]  # every class populated
        ids = np.arange(n)
        locs = np.stack([rng.integers(0, 8, n), rng.integers(0, 8, n)], axis=1)
        out = project_prototypes(bank, patches, classes, ids, locs)
        for l in range(bank.m):
            d_all = ((patches - bank.P.data[l]) ** 2).sum(axis=1)
            d_all[classes != bank.class_of[l]] = np.inf
            best = int(np.argmin(d_all))
            np.testing.assert_array_equal(out.P.data[l], patches[best])
            assert out.provenance[l, 0] == ids[best]

    def test_projected_prototypes_sit_at_zero_distance(self):
        rng = np.random.default_rng(11)
        bank = make_bank(n_classes=2, per_class=3, dim=5, seed=11)
        patches = rng.uniform(size=(40, 5))
        classes = np.tile([0, 1], 20)
        out = project_prototypes(bank, patches, classes, np.arange(40),
                                 np.zeros((40, 2), dtype=int))
        for l in range(out.m):
            d = ((patches[classes == out.class_of[l]] - out.P.data[l]) ** 2).sum(axis=1)
            assert d.min() == 0.0

    def test_empty_class_raises(self):
        bank = make_bank(n_classes=2, per_class=1, dim=3, seed=12)
        patches = np.zeros((4, 3))
        with pytest.raises(InvalidArgumentError):
            project_prototypes(bank, patches, [0, 0, 0, 0], np.arange(4),
                               np.zeros((4, 2), dtype=int))

    def test_original_bank_untouched(self):
        bank = make_bank(n_classes=2, per_class=1, dim=3, seed=13)
        before = bank.P.data.copy()
        patches = np.random.default_rng(13).uniform(size=(10, 3))
        project_prototypes(bank, patches, np.tile([0, 1], 5), np.arange(10),
                           np.zeros((10, 2), dtype=int))
        np.testing.assert_array_equal(bank.P.data, before)


class TestFullBranch:
    def test_forward_shapes_single_and_batched(self):
        rng = np.random.default_rng(14)
        bank = make_bank(n_classes=3, per_class=2, dim=4, seed=14)
        w = ClassifierWeights.init(bank.class_of, bank.K)
        z = Tensor(rng.uniform(size=(5, 5, 4)))
        a = Tensor(rng.uniform(size=(5, 5)))
        out = prototype_forward(z, bank, a, w)
        assert out.maps.shape == (5, 5, 6)
        assert out.scores.shape == (6,)
        assert out.logits.shape == (3,)

        zb = Tensor(rng.uniform(size=(2, 5, 5, 4)))
        ab = Tensor(rng.uniform(size=(2, 5, 5)))
        outb = prototype_forward(zb, bank, ab, w)
        assert outb.scores.shape == (2, 6)
        assert outb.logits.shape == (2, 3)

    def test_scores_are_spatial_max_of_modulated(self):
        rng = np.random.default_rng(15)
        bank = make_bank(dim=4, seed=15)
        w = ClassifierWeights.init(bank.class_of, bank.K)
        out = prototype_forward(Tensor(rng.uniform(size=(4, 4, 4))), bank,
                                Tensor(rng.uniform(size=(4, 4))), w)
        np.testing.assert_allclose(out.scores.data,
                                   out.modulated.data.max(axis=(0, 1)),
                                   rtol=0, atol=0)

    def test_gradients_flow_to_prototypes_and_input(self):
        rng = np.random.default_rng(16)
        bank = make_bank(n_classes=2, per_class=2, dim=3, seed=16)
        w = ClassifierWeights.init(bank.class_of, bank.K)
        a = Tensor(rng.uniform(size=(3, 3)))
        z0 = rng.uniform(size=(3, 3, 3))

        def loss_wrt_z(z):
            out = prototype_forward(z, bank, a, w)
            return ad.reduce_sum(ad.mul(out.logits, out.logits))

        ok, err = ad.finite_diff_check(loss_wrt_z,
                                       Tensor(z0, requires_grad=True))
        assert ok, f"z grad err {err}"

        def loss_wrt_p(p):
            b = PrototypeBank(P=p, class_of=bank.class_of, K=bank.K, c=bank.c)
            out = prototype_forward(Tensor(z0), b, a, w)
            return ad.reduce_sum(ad.mul(out.logits, out.logits))

        ok, err = ad.finite_diff_check(loss_wrt_p,
                                       Tensor(bank.P.data.copy(),
                                              requires_grad=True))
        assert ok, f"prototype grad err {err}"
