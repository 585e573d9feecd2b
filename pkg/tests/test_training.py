"""Loss arithmetic, sampling, augmentation, Adam, and loop determinism."""

from pathlib import Path

import numpy as np
import pytest

from logonet.dataset import (DatasetManifest, LogoRecord, SketchRecord,
                             make_split, synth_generate)
from logonet.gradcheck import check_gradients
from logonet.model import LogoNetConfig, init_model
from logonet.tensor import Tensor, backward
from logonet.training import (Adam, ImageCache, TrainConfig, augment,
                              format_log_csv, sample_triplets, train,
                              triplet_loss)

TINY = dict(input_channels=1, input_size=8, first_kernel=3,
            stage_channels=(2,), embed_dim=2, attention_ratio=2,
            spatial_kernel=3)


def loss_of(d_pos, d_neg, margin):
    """Loss for a single 1-d triplet realizing the given distances."""
    e_s = Tensor(np.array([[0.0]]))
    e_p = Tensor(np.array([[d_pos]]))
    e_n = Tensor(np.array([[d_neg]]))
    return triplet_loss(e_s, e_p, e_n, margin).data.item()


class TestTripletLoss:
    def test_inactive_when_margin_met(self):
        assert abs(loss_of(0.5, 0.9, 0.2)) < 1e-6

    def test_active_value(self):
        assert abs(loss_of(0.9, 0.5, 0.2) - 0.6) < 1e-6

    def test_degenerate_equal_embeddings_give_margin_exactly(self):
        rng = np.random.default_rng(0)
        e = Tensor(rng.normal(size=(4, 6)))
        loss = triplet_loss(e, Tensor(e.data.copy()), Tensor(e.data.copy()),
                            0.37)
        assert loss.data.item() == 0.37

    def test_satisfied_rows_get_exactly_zero_gradient(self):
        e_s = Tensor(np.array([[0.0, 0.0], [0.0, 0.0]]), requires_grad=True)
        e_p = Tensor(np.array([[0.1, 0.0], [0.8, 0.0]]), requires_grad=True)
        e_n = Tensor(np.array([[0.0, 0.9], [0.0, 0.1]]), requires_grad=True)
        # row 0 satisfies 0.2 + 0.1 - 0.9 < 0; row 1 violates
        loss = triplet_loss(e_s, e_p, e_n, 0.2)
        backward(loss)
        for t in (e_s, e_p, e_n):
            np.testing.assert_array_equal(t.grad[0], [0.0, 0.0])
            assert np.any(t.grad[1] != 0.0)

    def test_mean_over_batch(self):
        one = loss_of(0.9, 0.5, 0.2)
        e_s = Tensor(np.zeros((2, 1)))
        e_p = Tensor(np.array([[0.9], [0.0]]))
        e_n = Tensor(np.array([[0.5], [0.9]]))
        both = triplet_loss(e_s, e_p, e_n, 0.2).data.item()
        assert abs(both - one / 2) < 1e-6

    def test_shape_mismatch(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="embedding shapes differ"):
            triplet_loss(a, b, a, 0.2)

    def test_negative_margin(self):
        a = Tensor(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="margin"):
            triplet_loss(a, a, a, -0.1)

    def test_gradients_at_active_separated_point(self):
        rng = np.random.default_rng(5)
        e_s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        e_p = Tensor(e_s.data + rng.normal(size=(3, 4)) + 2.0,
                     requires_grad=True)
        e_n = Tensor(e_s.data - 0.1, requires_grad=True)
        worst = check_gradients(
            lambda a, b, c: triplet_loss(a, b, c, 5.0), (e_s, e_p, e_n))
        assert worst < 1e-4


def fake_manifest(n_instances, sketches_per):
    logos = tuple(LogoRecord(f"i{k:03d}", Path(f"img{k}.png"))
                  for k in range(n_instances))
    sketches = tuple(
        SketchRecord(f"s{k:04d}", f"i{k % n_instances:03d}",
                     Path(f"s{k}.png"), "easy", "train")
        for k in range(n_instances * sketches_per))
    return DatasetManifest(root=Path("."), logos=logos, sketches=sketches)


class TestSampler:
    def test_positive_is_anchor_instance_and_negative_differs(self):
        man = fake_manifest(10, 3)
        by_id = {s.sketch_id: s for s in man.sketches}
        stream = sample_triplets(man, "train", np.random.default_rng(0))
        for _ in range(300):
            t = next(stream)
            assert by_id[t.anchor_sketch_id].instance_id == t.positive_logo_id
            assert t.negative_logo_id != t.positive_logo_id

    def test_deterministic_for_a_seed(self):
        man = fake_manifest(6, 2)
        a = sample_triplets(man, "train", np.random.default_rng(9))
        b = sample_triplets(man, "train", np.random.default_rng(9))
        assert [next(a) for _ in range(50)] == [next(b) for _ in range(50)]

    def test_anchor_and_negative_frequencies_are_uniform(self):
        man = fake_manifest(100, 2)
        stream = sample_triplets(man, "train", np.random.default_rng(123))
        n = 10_000
        pos_counts: dict = {}
        neg_counts: dict = {}
        for _ in range(n):
            t = next(stream)
            pos_counts[t.positive_logo_id] = pos_counts.get(
                t.positive_logo_id, 0) + 1
            neg_counts[t.negative_logo_id] = neg_counts.get(
                t.negative_logo_id, 0) + 1
        for counts in (pos_counts, neg_counts):
            freqs = np.array(list(counts.values())) / n
            assert len(counts) == 100
            assert np.all(np.abs(freqs - 0.01) < 0.005)

    def test_empty_split(self):
        man = fake_manifest(4, 2)
        with pytest.raises(ValueError, match="no sketches"):
            next(sample_triplets(man, "test", np.random.default_rng(0)))

    def test_needs_two_instances(self):
        logos = (LogoRecord("only", Path("x.png")),)
        sketches = (SketchRecord("s", "only", Path("s.png"), "easy", "train"),)
        man = DatasetManifest(Path("."), logos, sketches)
        with pytest.raises(ValueError, match="at least 2 instances"):
            next(sample_triplets(man, "train", np.random.default_rng(0)))


class TestAugment:
    def img(self, seed=0, s=8):
        rng = np.random.default_rng(seed)
        return Tensor(rng.random((1, s, s), dtype=np.float32))

    def test_identity_when_crop_full_and_no_flip(self):
        cfg = TrainConfig(epochs=1, crop_fraction=1.0, hflip_prob=0.0)
        x = self.img()
        out = augment(x, cfg, np.random.default_rng(0))
        assert out.data is not x.data
        np.testing.assert_array_equal(out.data, x.data)

    def test_certain_flip_mirrors_width(self):
        cfg = TrainConfig(epochs=1, crop_fraction=1.0, hflip_prob=1.0)
        x = self.img()
        out = augment(x, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x.data[:, :, ::-1])

    def test_flip_twice_is_identity(self):
        cfg = TrainConfig(epochs=1, crop_fraction=1.0, hflip_prob=1.0)
        x = self.img()
        once = augment(x, cfg, np.random.default_rng(0))
        twice = augment(once, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(twice.data, x.data)

    def test_output_keeps_geometry_and_dtype(self):
        cfg = TrainConfig(epochs=1, crop_fraction=0.5, hflip_prob=0.5)
        out = augment(self.img(s=16), cfg, np.random.default_rng(3))
        assert out.data.shape == (1, 16, 16)
        assert out.data.dtype == np.float32

    def test_crop_offsets_cover_their_range(self):
        cfg = TrainConfig(epochs=1, crop_fraction=0.5, hflip_prob=0.0)
        rng = np.random.default_rng(7)
        base = np.zeros((1, 8, 8), dtype=np.float32)
        base[0, 0, 0] = 1.0  # corner marker survives only for offset (0, 0)
        hits = 0
        for _ in range(200):
            out = augment(Tensor(base), cfg, rng)
            if out.data[0, 0, 0] == 1.0:
                hits += 1
        # offset (0,0) out of 5x5 choices: expect about 8 of 200
        assert 0 < hits < 40

    def test_same_rng_state_same_output(self):
        cfg = TrainConfig(epochs=1, crop_fraction=0.7, hflip_prob=0.5)
        x = self.img(4, 12)
        a = augment(x, cfg, np.random.default_rng(11))
        b = augment(x, cfg, np.random.default_rng(11))
        np.testing.assert_array_equal(a.data, b.data)


class TestAdam:
    def test_first_step_matches_hand_formula(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([3.0, -1.5])
        opt = Adam([p], lr=0.1)
        opt.step()
        expected = np.array([1.0, -2.0]) - 0.1 * np.array([3.0, -1.5]) / (
            np.abs([3.0, -1.5]) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_zero_gradient_leaves_parameter_untouched(self):
        p = Tensor(np.array([0.5, 0.5]), requires_grad=True)
        before = p.data.copy()
        opt = Adam([p])
        for _ in range(3):
            p.grad = np.zeros(2)
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_is_an_error(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p])
        with pytest.raises(ValueError, match="parameter 0 has no gradient"):
            opt.step()

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(2000):
            p.grad = 2 * (p.data - 3.0)
            opt.step()
        assert abs(p.data[0] - 3.0) < 1e-3

    def test_zero_grad_clears(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.ones(1)
        opt = Adam([p])
        opt.zero_grad()
        assert p.grad is None

    def test_for_model_reads_config(self):
        m = init_model(LogoNetConfig(**TINY), 0)
        cfg = TrainConfig(epochs=1, learning_rate=0.05, adam_beta1=0.8)
        opt = Adam.for_model(m, cfg)
        assert opt.lr == 0.05
        assert opt.beta1 == 0.8
        assert len(opt.params) == len(m.parameters())


class TestTrainConfig:
    def test_collects_every_problem(self):
        with pytest.raises(ValueError) as err:
            TrainConfig(epochs=-1, learning_rate=0.0, batch_size=0)
        msg = str(err.value)
        assert "epochs" in msg and "learning_rate" in msg
        assert "batch_size" in msg

    def test_defaults_are_valid(self):
        cfg = TrainConfig(epochs=1)
        assert cfg.learning_rate == 1e-4
        assert cfg.margin == 0.2
        assert cfg.batch_size == 16


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    man = synth_generate(3, 4, 8, 7, root)
    return make_split(man, "by_sketch", 0.25, seed=7)


class TestTrainLoop:
    def cfg(self, **kw):
        base = dict(epochs=2, batch_size=4, seed=13, crop_fraction=1.0,
                    hflip_prob=0.0)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_epochs_is_a_noop(self, small_data):
        m = init_model(LogoNetConfig(**TINY), 1)
        before = [t.data.copy() for _, t in m.parameters()]
        log = train(m, small_data, self.cfg(epochs=0))
        assert log == []
        for snap, (_, t) in zip(before, m.parameters()):
            np.testing.assert_array_equal(snap, t.data)

    def test_same_seed_is_bit_identical(self, small_data):
        runs = []
        for _ in range(2):
            m = init_model(LogoNetConfig(**TINY), 1)
            log = train(m, small_data, self.cfg())
            runs.append(([t.data.copy() for _, t in m.parameters()],
                         [r["mean_loss"] for r in log]))
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0], runs[1][0]):
            np.testing.assert_array_equal(a, b)

    def test_chunked_run_matches_uninterrupted(self, small_data):
        whole = init_model(LogoNetConfig(**TINY), 2)
        train(whole, small_data, self.cfg(epochs=4))

        parts = init_model(LogoNetConfig(**TINY), 2)
        cfg2 = self.cfg(epochs=2)
        opt = Adam.for_model(parts, cfg2)
        cache = ImageCache(1, 8)
        log_a = train(parts, small_data, cfg2, optimizer=opt, cache=cache)
        log_b = train(parts, small_data, cfg2, optimizer=opt, epoch_offset=2,
                      cache=cache)
        assert [r["epoch"] for r in log_a + log_b] == [0, 1, 2, 3]
        for (_, a), (_, b) in zip(whole.parameters(), parts.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_training_moves_loss_down(self, small_data):
        m = init_model(LogoNetConfig(**TINY), 3)
        log = train(m, small_data, self.cfg(epochs=8, learning_rate=2e-3))
        assert log[-1]["mean_loss"] < log[0]["mean_loss"]

    def test_disabled_attention_params_stay_at_init(self, small_data):
        # sa_only keeps the channel-attention tensors out of the graph; their
        # zero-filled gradients must leave them bitwise at their init values
        cfg_m = LogoNetConfig(attention_modes=("sa_only",), **TINY)
        m = init_model(cfg_m, 4)
        before = {name: t.data.copy() for name, t in m.parameters()}
        assert any(".ca." in name for name in before)
        train(m, small_data, self.cfg(epochs=1))
        for name, t in m.parameters():
            if ".ca." in name:
                np.testing.assert_array_equal(before[name], t.data)
        assert any(".ca." not in name and not np.array_equal(before[name], t.data)
                   for name, t in m.parameters())

    def test_val_rows_only_on_schedule(self, small_data):
        m = init_model(LogoNetConfig(**TINY), 5)
        log = train(m, small_data, self.cfg(epochs=4), val_every=2,
                    val_split="test")
        vals = [r["val_acc1"] for r in log]
        assert vals[0] is None and vals[2] is None
        assert vals[1] is not None and vals[3] is not None
        assert 0.0 <= vals[1] <= 1.0

    def test_empty_train_split_raises(self, small_data):
        man = DatasetManifest(small_data.root, small_data.logos,
                              tuple())
        m = init_model(LogoNetConfig(**TINY), 6)
        with pytest.raises(ValueError, match="training split is empty"):
            train(m, man, self.cfg(epochs=1))


class TestLogCsv:
    def test_format(self):
        rows = [
            {"epoch": 0, "mean_loss": 0.5, "val_acc1": None,
             "wall_seconds": 1.25},
            {"epoch": 1, "mean_loss": 0.25, "val_acc1": 0.875,
             "wall_seconds": 1.0},
        ]
        text = format_log_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,mean_loss,val_acc1,wall_seconds"
        assert lines[1] == "0,0.500000,,1.250"
        assert lines[2] == "1,0.250000,0.8750,1.000"
