"""FIFO class memory: lockstep queues, capacity, prototypes."""
import numpy as np
import pytest
import torch

from tailcontrast.memory import ClassMemory


def _unit(vec):
    t = torch.as_tensor(vec, dtype=torch.float64)
    return t / t.norm()


def _push_value(mem, k, value, confidence=1.0, dim=3):
    feature = torch.full((dim,), float(value), dtype=torch.float64)
    emb = torch.zeros(dim, dtype=torch.float64)
    emb[int(value) % dim] = 1.0
    mem.push(k, feature, emb, confidence)


class TestPushSemantics:
    def test_fifo_order_over_capacity(self):
        mem = ClassMemory(num_classes=1, capacity=3)
        for v in range(1, 6):
            _push_value(mem, 0, v)
        stored = [f[0].item() for f in mem.features(0)]
        assert stored == [3.0, 4.0, 5.0]

    def test_raw_entry_stores_confidence_one(self):
        mem = ClassMemory(num_classes=2, capacity=4)
        mem.push(1, torch.ones(3), _unit([1, 1, 1]), 1.0)
        assert mem.confidences(1) == [1.0]
        assert mem.pushed_raw[1] == 1 and mem.pushed_augmented[1] == 0

    def test_augmented_entry_stores_lambda(self):
        mem = ClassMemory(num_classes=2, capacity=4)
        mem.push(0, torch.ones(3), _unit([1, 0, 0]), 0.85)
        assert mem.confidences(0) == [0.85]
        assert mem.pushed_augmented[0] == 1

    def test_out_of_range_class_rejected(self):
        mem = ClassMemory(num_classes=2, capacity=4)
        with pytest.raises(ValueError, match="out of range"):
            mem.push(2, torch.ones(3), _unit([1, 0, 0]), 1.0)
        with pytest.raises(ValueError, match="out of range"):
            mem.push(-1, torch.ones(3), _unit([1, 0, 0]), 1.0)

    def test_invalid_confidence_rejected(self):
        mem = ClassMemory(num_classes=1, capacity=4)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError, match="confidence"):
                mem.push(0, torch.ones(3), _unit([1, 0, 0]), bad)

    def test_non_unit_embedding_rejected(self):
        mem = ClassMemory(num_classes=1, capacity=4)
        with pytest.raises(ValueError, match="unit-norm"):
            mem.push(0, torch.ones(3), torch.ones(3), 1.0)


class TestPrototypes:
    def test_singleton_mean(self):
        mem = ClassMemory(num_classes=2, capacity=4)
        f = torch.tensor([1.0, 2.0, 3.0])
        mem.push(0, f, _unit([1, 0, 0]), 1.0)
        protos = mem.prototypes()
        assert torch.allclose(protos.matrix[0], f)
        assert protos.defined.tolist() == [True, False]

    def test_two_point_mean(self):
        mem = ClassMemory(num_classes=1, capacity=4)
        mem.push(0, torch.tensor([0.0, 2.0]), _unit([1, 0]), 1.0)
        mem.push(0, torch.tensor([2.0, 0.0]), _unit([0, 1]), 1.0)
        protos = mem.prototypes()
        assert torch.allclose(protos.matrix[0], torch.tensor([1.0, 1.0]))

    def test_empty_class_flagged_undefined(self):
        mem = ClassMemory(num_classes=3, capacity=4)
        _push_value(mem, 1, 2)
        protos = mem.prototypes()
        assert protos.defined.tolist() == [False, True, False]

    def test_mean_over_eviction_window_only(self):
        mem = ClassMemory(num_classes=1, capacity=2)
        for v in (1.0, 5.0, 9.0):
            mem.push(0, torch.tensor([v]), _unit([1.0]), 1.0)
        protos = mem.prototypes()
        assert protos.matrix[0].item() == pytest.approx(7.0, abs=1e-12)


class TestInvariants:
    def test_lockstep_and_capacity_random_ops(self):
        rng = np.random.default_rng(0)
        mem = ClassMemory(num_classes=4, capacity=5)
        reference = [[] for _ in range(4)]
        for _ in range(300):
            k = int(rng.integers(0, 4))
            vec = rng.normal(size=6)
            conf = float(rng.uniform(0.5, 1.0))
            emb = torch.tensor(vec / np.linalg.norm(vec), dtype=torch.float64)
            mem.push(k, torch.tensor(vec, dtype=torch.float64), emb, conf)
            reference[k].append((vec.copy(), conf))
            reference[k] = reference[k][-5:]
            for kk in range(4):
                assert len(mem.features(kk)) == len(mem.embeddings(kk)) == len(mem.confidences(kk))
                assert len(mem.features(kk)) <= 5
        for k in range(4):
            stored = [f.numpy() for f in mem.features(k)]
            assert len(stored) == len(reference[k])
            for got, (want, conf) in zip(stored, reference[k]):
                np.testing.assert_allclose(got, want)
        protos = mem.prototypes()
        for k in range(4):
            if reference[k]:
                want = np.mean([v for v, _ in reference[k]], axis=0)
                np.testing.assert_allclose(protos.matrix[k].numpy(), want, atol=1e-7)

    def test_snapshot_is_immutable_copy(self):
        mem = ClassMemory(num_classes=2, capacity=3)
        _push_value(mem, 0, 1)
        snap = mem.snapshot()
        _push_value(mem, 0, 2)
        _push_value(mem, 1, 3)
        assert snap.total == 1
        assert snap.fill == [1, 0]

    def test_snapshot_layout(self):
        mem = ClassMemory(num_classes=2, capacity=3)
        mem.push(0, torch.ones(2), _unit([1, 0]), 1.0)
        mem.push(1, torch.ones(2), _unit([0, 1]), 0.9)
        snap = mem.snapshot()
        assert snap.classes.tolist() == [0, 1]
        assert snap.label_confidence.tolist() == [1.0, 0.9]
        assert snap.embeddings.shape == (2, 2)

    def test_state_dict_round_trip(self):
        mem = ClassMemory(num_classes=2, capacity=3)
        for v in range(4):
            _push_value(mem, v % 2, v + 1, confidence=0.8 + 0.05 * v)
        other = ClassMemory(num_classes=2, capacity=3)
        other.load_state_dict(mem.state_dict())
        a, b = mem.snapshot(), other.snapshot()
        assert torch.equal(a.embeddings, b.embeddings)
        assert a.fill == b.fill
        assert other.pushed_augmented == mem.pushed_augmented
