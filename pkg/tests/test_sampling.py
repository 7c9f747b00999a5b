from collections import Counter

import numpy as np
import pytest

from mtdnet.core.errors import DatasetError
from mtdnet.models import LabeledImage
from mtdnet.services.sampling import (
    batch_iter,
    count_batches,
    enumerate_positive_pairs,
    make_triplets,
    mirror,
    mirror_augment,
    training_triplets,
)


def person(pid, cam, value=None, size=4):
    fill = float(pid) if value is None else value
    image = np.full((3, size, size), fill, dtype=np.float32)
    image[:, 0, 0] = cam  # distinguishes views
    return LabeledImage(image=image, person_id=pid, camera_id=cam)


def one_per_camera(n):
    return [person(pid, cam) for pid in range(n) for cam in (1, 2)]


class TestPositivePairs:
    def test_single_person(self):
        assert len(enumerate_positive_pairs([person(0, 1), person(0, 2)])) == 1

    def test_cross_product_of_views(self):
        data = [person(0, 1), person(0, 1), person(0, 2), person(0, 2)]
        assert len(enumerate_positive_pairs(data)) == 4

    def test_ten_persons(self):
        pairs = enumerate_positive_pairs(one_per_camera(10))
        assert len(pairs) == 10
        assert [a.person_id for a, _ in pairs] == list(range(10))
        assert all(a.camera_id == 1 and b.camera_id == 2 for a, b in pairs)

    def test_single_camera_person_skipped(self, caplog):
        data = one_per_camera(2) + [person(5, 1)]
        assert len(enumerate_positive_pairs(data)) == 2
        assert "only one camera" in caplog.text

    def test_one_camera_dataset_rejected(self):
        with pytest.raises(DatasetError):
            enumerate_positive_pairs([person(0, 1), person(1, 1)])


class TestTriplets:
    def test_ten_triplets_with_distinct_negatives(self):
        data = one_per_camera(11)
        triplets = make_triplets(enumerate_positive_pairs(data), data, k=10, rng_seed=0)
        assert len(triplets) == 110
        for i in range(11):
            group = triplets[10 * i:10 * (i + 1)]
            assert len({id(t.negative) for t in group}) == 10

    def test_k_one(self):
        data = one_per_camera(4)
        pairs = enumerate_positive_pairs(data)
        assert len(make_triplets(pairs, data, k=1)) == len(pairs)

    def test_invariants_hold(self):
        data = one_per_camera(6)
        for t in make_triplets(enumerate_positive_pairs(data), data, k=3, rng_seed=9):
            assert t.anchor.person_id == t.positive.person_id != t.negative.person_id
            assert t.positive.camera_id == t.negative.camera_id != t.anchor.camera_id

    def test_seed_determinism(self):
        data = one_per_camera(8)
        pairs = enumerate_positive_pairs(data)

        def negatives(seed):
            return [t.negative.person_id for t in make_triplets(pairs, data, k=3, rng_seed=seed)]

        assert negatives(1) == negatives(1)
        assert negatives(1) != negatives(2)

    def test_replacement_warning(self, caplog):
        data = one_per_camera(3)
        triplets = make_triplets(enumerate_positive_pairs(data), data, k=5)
        assert len(triplets) == 15
        assert "with replacement" in caplog.text

    def test_single_identity_rejected(self):
        data = one_per_camera(1)
        with pytest.raises(DatasetError):
            make_triplets(enumerate_positive_pairs(data), data)


class TestMirror:
    def test_mirror_is_involution(self):
        img = person(3, 2)
        img.image[:, 1, 2] = 0.25
        twice = mirror(mirror(img))
        np.testing.assert_array_equal(twice.image, img.image)
        assert twice.mirrored is False
        assert mirror(img).mirrored is True

    def test_augment_doubles_images_and_quadruples_pairs(self):
        data = one_per_camera(5)
        augmented = mirror_augment(data)
        assert len(augmented) == 10 * 2
        assert len(enumerate_positive_pairs(augmented)) == 4 * len(enumerate_positive_pairs(data))
        assert Counter((i.person_id, i.camera_id) for i in augmented) == \
            Counter((i.person_id, i.camera_id) for i in data * 2)


class TestBatches:
    def _triplets(self, n):
        data = one_per_camera(11)
        return make_triplets(enumerate_positive_pairs(data), data, k=10)[:n]

    def test_sizes_keep_partial_batch(self):
        batches = list(batch_iter(self._triplets(100), 32, rng_seed=0, epoch=0))
        assert [len(b) for b in batches] == [32, 32, 32, 4]
        assert count_batches(100, 32) == 4

    def test_epoch_reshuffles(self):
        triplets = self._triplets(50)

        def order(epoch):
            return [id(t) for b in batch_iter(triplets, 8, 3, epoch) for t in b.triplets]

        assert order(0) == order(0)
        assert order(0) != order(1)
        assert sorted(order(1)) == sorted(id(t) for t in triplets)

    def test_batch_arrays(self):
        batch = next(iter(batch_iter(self._triplets(10), 4, 0, 0)))
        assert batch.anchors.shape == (4, 3, 4, 4)
        assert batch.negatives.shape == batch.positives.shape

    def test_empty_rejected_eagerly(self):
        with pytest.raises(DatasetError):
            batch_iter([], 4, 0, 0)
        with pytest.raises(ValueError):
            batch_iter(self._triplets(3), 0, 0, 0)


def test_training_triplets_augmented_counts():
    data = one_per_camera(6)
    plain = training_triplets(data, k=2, seed=0, augment=False)
    augmented = training_triplets(data, k=2, seed=0, augment=True)
    assert len(plain) == 12
    assert len(augmented) == 48
    regenerated = training_triplets(data, k=2, seed=0, augment=False, epoch=1, regenerate=True)
    assert len(regenerated) == len(plain)
