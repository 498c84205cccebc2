import numpy as np
import pytest

from protosep import autodiff as ad
from protosep.autodiff import InvalidArgumentError, Tensor
from protosep.losses import (BatchContext, LossConfig,
                             attentional_cluster_loss,
                             attentional_separation_loss,
                             batch_regularization_loss)
from protosep.prototypes import PrototypeBank


def bank_from(protos, class_of, n_classes, per_class):
    return PrototypeBank(P=Tensor(np.asarray(protos, dtype=np.float64),
                                  requires_grad=True),
                         class_of=np.asarray(class_of), K=n_classes,
                         c=per_class)


def random_batch(rng, b=3, h=4, w=4, d=3, n_classes=3, per_class=2):
    bank = PrototypeBank.init(n_classes, per_class, d, rng)
    z = Tensor(rng.uniform(size=(b, h, w, d)), requires_grad=True)
    a = Tensor(rng.uniform(size=(b, h, w)))
    y = rng.integers(0, n_classes, size=b)
    return BatchContext(z=z, attention=a, labels=y, bank=bank)


class TestClusterLoss:
    def test_single_location_distance_four(self):
        bank = bank_from([[2.0]], [0], 1, 1)
        z = Tensor(np.array([[[0.0]]]))
        loss = attentional_cluster_loss(z, Tensor(np.ones((1, 1))), bank, 0)
        assert loss.item() == pytest.approx(4.0, abs=1e-12)

    def test_zero_attention_gives_zero(self):
        rng = np.random.default_rng(0)
        bank = PrototypeBank.init(2, 2, 3, rng)
        z = Tensor(rng.uniform(size=(4, 4, 3)))
        loss = attentional_cluster_loss(z, Tensor(np.zeros((4, 4))), bank, 1)
        assert loss.item() == 0.0

    def test_min_over_prototypes_then_weight(self):
        # own-class prototypes at squared distances 4 and 1, attention 0.5
        bank = bank_from([[2.0], [1.0]], [0, 0], 1, 2)
        z = Tensor(np.array([[[0.0]]]))
        loss = attentional_cluster_loss(z, Tensor(np.array([[0.5]])), bank, 0)
        assert loss.item() == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            bank = PrototypeBank.init(3, 2, 4, rng)
            z = Tensor(rng.normal(size=(3, 3, 4)))
            a = Tensor(rng.uniform(size=(3, 3)))
            y = int(rng.integers(0, 3))
            assert attentional_cluster_loss(z, a, bank, y).item() >= 0.0

    def test_invariant_to_permuting_own_prototypes(self):
        rng = np.random.default_rng(2)
        protos = rng.uniform(size=(4, 3))
        bank = bank_from(protos, [0, 0, 1, 1], 2, 2)
        z = Tensor(rng.uniform(size=(3, 3, 3)))
        a = Tensor(rng.uniform(size=(3, 3)))
        base = attentional_cluster_loss(z, a, bank, 0).item()
        swapped = bank_from(protos[[1, 0, 2, 3]], [0, 0, 1, 1], 2, 2)
        assert attentional_cluster_loss(z, a, swapped, 0).item() == base

    def test_zero_when_features_sit_on_own_prototypes(self):
        rng = np.random.default_rng(3)
        protos = rng.uniform(size=(4, 3))
        bank = bank_from(protos, [0, 0, 1, 1], 2, 2)
        # every location equals own-class prototype 0
        z = Tensor(np.broadcast_to(protos[0], (3, 3, 3)).copy())
        a = Tensor(rng.uniform(size=(3, 3)))
        assert attentional_cluster_loss(z, a, bank, 0).item() == 0.0

    def test_bad_label_rejected(self):
        bank = bank_from([[0.0]], [0], 1, 1)
        with pytest.raises(InvalidArgumentError):
            attentional_cluster_loss(Tensor(np.zeros((1, 1, 1))),
                                     Tensor(np.ones((1, 1))), bank, 1)


class TestSeparationLoss:
    def test_single_location_distance_nine(self):
        bank = bank_from([[0.0], [3.0]], [0, 1], 2, 1)
        z = Tensor(np.array([[[0.0]]]))
        loss = attentional_separation_loss(z, Tensor(np.ones((1, 1))), bank, 0)
        assert loss.item() == pytest.approx(-9.0, abs=1e-12)

    def test_zero_attention_gives_zero(self):
        rng = np.random.default_rng(4)
        bank = PrototypeBank.init(2, 2, 3, rng)
        z = Tensor(rng.uniform(size=(4, 4, 3)))
        loss = attentional_separation_loss(z, Tensor(np.zeros((4, 4))), bank, 0)
        assert loss.item() == 0.0

    def test_min_governs_among_other_prototypes(self):
        # other-class prototypes at squared distances 9 and 16
        bank = bank_from([[0.0], [0.5], [3.0], [4.0]], [0, 0, 1, 1], 2, 2)
        z = Tensor(np.array([[[0.0]]]))
        loss = attentional_separation_loss(z, Tensor(np.ones((1, 1))), bank, 0)
        assert loss.item() == pytest.approx(-9.0, abs=1e-12)

    def test_nonpositive(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            bank = PrototypeBank.init(3, 2, 4, rng)
            z = Tensor(rng.normal(size=(3, 3, 4)))
            a = Tensor(rng.uniform(size=(3, 3)))
            y = int(rng.integers(0, 3))
            assert attentional_separation_loss(z, a, bank, y).item() <= 0.0

    def test_invariant_to_permuting_other_prototypes(self):
        rng = np.random.default_rng(6)
        protos = rng.uniform(size=(4, 3))
        bank = bank_from(protos, [0, 0, 1, 1], 2, 2)
        z = Tensor(rng.uniform(size=(3, 3, 3)))
        a = Tensor(rng.uniform(size=(3, 3)))
        base = attentional_separation_loss(z, a, bank, 0).item()
        swapped = bank_from(protos[[0, 1, 3, 2]], [0, 0, 1, 1], 2, 2)
        assert attentional_separation_loss(z, a, swapped, 0).item() == base

    def test_single_class_bank_rejected(self):
        bank = bank_from([[0.0]], [0], 1, 1)
        with pytest.raises(InvalidArgumentError):
            attentional_separation_loss(Tensor(np.zeros((1, 1, 1))),
                                        Tensor(np.ones((1, 1))), bank, 0)


class TestBatchRegularization:
    def test_single_sample_recovers_weighted_per_sample_losses(self):
        rng = np.random.default_rng(7)
        for trial in range(25):
            bank = PrototypeBank.init(3, 2, 4, rng)
            z = rng.uniform(size=(1, 4, 5, 4))
            a = rng.uniform(size=(1, 4, 5))
            y = int(rng.integers(0, 3))
            cfg = LossConfig(lambda1=float(rng.uniform(1, 20)),
                             lambda2=float(rng.uniform(0.01, 1)),
                             batch_size=1)
            batch = BatchContext(z=Tensor(z), attention=Tensor(a),
                                 labels=[y], bank=bank)
            total, per_sample = batch_regularization_loss(batch, cfg)
            want = (cfg.lambda1 * attentional_cluster_loss(
                        Tensor(z[0]), Tensor(a[0]), bank, y).item()
                    + cfg.lambda2 * attentional_separation_loss(
                        Tensor(z[0]), Tensor(a[0]), bank, y).item())
            assert abs(total.item() - want) <= 1e-12, f"trial {trial}"
            assert abs(per_sample.data[0] - want) <= 1e-12

    def test_zero_attention_everywhere_gives_zero(self):
        rng = np.random.default_rng(8)
        bank = PrototypeBank.init(2, 2, 3, rng)
        batch = BatchContext(z=Tensor(rng.uniform(size=(3, 4, 4, 3))),
                             attention=Tensor(np.zeros((3, 4, 4))),
                             labels=[0, 1, 0], bank=bank)
        total, per_sample = batch_regularization_loss(batch, LossConfig())
        assert total.item() == 0.0
        assert np.all(per_sample.data == 0.0)

    def test_two_sample_hand_instance(self):
        # 1 location, D=1, prototype 0.0 for class 0 and 1.0 for class 1,
        # both features at 0.5, attentions 1 and 0.5, unit weights:
        # summed attention 1.5 weights equal pull and push of 0.25 each,
        # so both per-sample values vanish
        bank = bank_from([[0.0], [1.0]], [0, 1], 2, 1)
        z = Tensor(np.full((2, 1, 1, 1), 0.5))
        a = Tensor(np.array([[[1.0]], [[0.5]]]))
        batch = BatchContext(z=z, attention=a, labels=[0, 1], bank=bank)
        cfg = LossConfig(lambda1=1.0, lambda2=1.0, batch_size=2)
        total, per_sample = batch_regularization_loss(batch, cfg)
        np.testing.assert_allclose(per_sample.data, [0.0, 0.0], atol=1e-15)
        assert total.item() == pytest.approx(0.0, abs=1e-15)
        # brute force over j, t confirms the 1.5 * 0.25 pieces
        pull = 1.5 * 0.25
        push = 1.5 * 0.25
        assert per_sample.data[0] == pytest.approx(pull - push, abs=1e-15)

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            bank = PrototypeBank.init(3, 2, 3, rng)
            b, h, w = 4, 3, 3
            z = rng.uniform(size=(b, h, w, 3))
            a = rng.uniform(size=(b, h, w))
            y = rng.integers(0, 3, size=b)
            cfg = LossConfig(lambda1=7.0, lambda2=0.3, batch_size=b)
            batch = BatchContext(z=Tensor(z), attention=Tensor(a),
                                 labels=y, bank=bank)
            total, per_sample = batch_regularization_loss(batch, cfg)
            p = bank.P.data
            want = np.zeros(b)
            for i in range(b):
                own = p[bank.class_of == y[i]]
                other = p[bank.class_of != y[i]]
                for j in range(b):
                    for r in range(h):
                        for s in range(w):
                            zi = z[i, r, s]
                            dmin_own = ((own - zi) ** 2).sum(axis=1).min()
                            dmin_other = ((other - zi) ** 2).sum(axis=1).min()
                            want[i] += a[j, r, s] * (cfg.lambda1 * dmin_own
                                                     - cfg.lambda2 * dmin_other)
            np.testing.assert_allclose(per_sample.data, want, rtol=1e-10)
            assert total.item() == pytest.approx(want.mean(), rel=1e-10)

    def test_doubling_attention_doubles_loss(self):
        rng = np.random.default_rng(10)
        batch = random_batch(rng)
        cfg = LossConfig(lambda1=5.0, lambda2=0.2, batch_size=batch.size)
        base, _ = batch_regularization_loss(batch, cfg)
        doubled = BatchContext(z=batch.z,
                               attention=Tensor(2.0 * batch.attention.data),
                               labels=batch.labels, bank=batch.bank)
        twice, _ = batch_regularization_loss(doubled, cfg)
        assert twice.item() == pytest.approx(2.0 * base.item(), rel=1e-12)

    def test_zero_weights_short_circuit_to_zero(self):
        rng = np.random.default_rng(11)
        batch = random_batch(rng)
        cfg = LossConfig(lambda1=0.0, lambda2=0.0, batch_size=batch.size)
        total, per_sample = batch_regularization_loss(batch, cfg)
        assert total.item() == 0.0 and np.all(per_sample.data == 0.0)

    def test_cluster_part_vanishes_on_projected_features(self):
        # park every high-attention feature exactly on an own-class prototype
        rng = np.random.default_rng(12)
        protos = rng.uniform(size=(4, 3))
        bank = bank_from(protos, [0, 0, 1, 1], 2, 2)
        z = np.broadcast_to(protos[2], (1, 3, 3, 3)).copy()
        a = rng.uniform(size=(1, 3, 3))
        batch = BatchContext(z=Tensor(z), attention=Tensor(a), labels=[1],
                             bank=bank)
        cfg = LossConfig(lambda1=3.0, lambda2=0.0001, batch_size=1)
        total, _ = batch_regularization_loss(batch, cfg)
        # only the (negative) separation part remains
        assert total.item() < 0.0
        sep = attentional_separation_loss(Tensor(z[0]), Tensor(a[0]), bank, 1)
        assert total.item() == pytest.approx(
            cfg.lambda2 * sep.item(), rel=1e-12)

    def test_gradients_pass_finite_difference(self):
        rng = np.random.default_rng(13)
        bank = PrototypeBank.init(2, 2, 3, rng)
        z0 = rng.uniform(size=(2, 3, 3, 3))
        a0 = rng.uniform(size=(2, 3, 3))
        y = np.array([0, 1])
        cfg = LossConfig(lambda1=4.0, lambda2=0.5, batch_size=2)

        def loss_wrt_z(z):
            batch = BatchContext(z=z, attention=Tensor(a0), labels=y, bank=bank)
            total, _ = batch_regularization_loss(batch, cfg)
            return total

        ok, err = ad.finite_diff_check(loss_wrt_z,
                                       Tensor(z0, requires_grad=True))
        assert ok, f"z grad err {err}"

        def loss_wrt_p(p):
            b = PrototypeBank(P=p, class_of=bank.class_of, K=bank.K, c=bank.c)
            batch = BatchContext(z=Tensor(z0), attention=Tensor(a0), labels=y,
                                 bank=b)
            total, _ = batch_regularization_loss(batch, cfg)
            return total

        ok, err = ad.finite_diff_check(loss_wrt_p,
                                       Tensor(bank.P.data.copy(),
                                              requires_grad=True))
        assert ok, f"prototype grad err {err}"

        def loss_wrt_a(a):
            batch = BatchContext(z=Tensor(z0), attention=a, labels=y, bank=bank)
            total, _ = batch_regularization_loss(batch, cfg)
            return total

        ok, err = ad.finite_diff_check(loss_wrt_a,
                                       Tensor(a0, requires_grad=True))
        assert ok, f"attention grad err {err}"

    def test_mismatched_sample_shapes_rejected(self):
        rng = np.random.default_rng(14)
        bank = PrototypeBank.init(2, 1, 3, rng)
        zs = [rng.uniform(size=(3, 3, 3)), rng.uniform(size=(4, 4, 3))]
        As = [rng.uniform(size=(3, 3)), rng.uniform(size=(4, 4))]
        with pytest.raises(InvalidArgumentError):
            BatchContext.from_samples(zs, As, [0, 1], bank)

    def test_attention_feature_shape_mismatch_rejected(self):
        rng = np.random.default_rng(15)
        bank = PrototypeBank.init(2, 1, 3, rng)
        with pytest.raises(InvalidArgumentError):
            BatchContext(z=Tensor(rng.uniform(size=(2, 3, 3, 3))),
                         attention=Tensor(rng.uniform(size=(2, 4, 4))),
                         labels=[0, 1], bank=bank)


class TestLossConfig:
    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidArgumentError):
            LossConfig(lambda1=-1.0)

    def test_zero_batch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            LossConfig(batch_size=0)

    def test_paper_defaults(self):
        cfg = LossConfig()
        assert cfg.lambda1 == 10.0
        assert cfg.lambda2 == 0.08
        assert cfg.batch_size == 75
