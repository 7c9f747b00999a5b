import numpy as np
import pytest
from PIL import Image

from mtdnet.core.errors import DatasetError
from mtdnet.models import CameraTransform, SplitProtocol, SynthSpec
from mtdnet.services.synth_data import (
    effective_transform,
    export_dataset,
    generate,
    load_dataset,
    load_folder,
    load_manifest,
    nearest_neighbor_rank1,
    read_image,
    split,
)


class TestGenerate:
    def test_counts(self):
        data = generate(SynthSpec(n_identities=2, image_size=[16, 16]))
        assert len(data) == 4
        assert {img.person_id for img in data} == {0, 1}
        assert {img.camera_id for img in data} == {1, 2}
        assert data[0].image.shape == (3, 16, 16)
        assert data[0].image.dtype == np.float32

    def test_same_seed_bit_identical(self, tiny_spec):
        first, second = generate(tiny_spec), generate(tiny_spec)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image, b.image)

    def test_identity_transform_gives_identical_views(self):
        data = generate(SynthSpec(n_identities=3, image_size=[16, 16]))
        for pid in range(3):
            cam1, cam2 = [img.image for img in data if img.person_id == pid]
            np.testing.assert_array_equal(cam1, cam2)

    def test_pixels_stay_in_unit_range(self):
        spec = SynthSpec(n_identities=4, image_size=[16, 16], domain_shift=1.0,
                         camera2=CameraTransform(brightness_shift=0.5, noise_sigma=0.3))
        for img in generate(spec):
            assert img.image.min() >= 0.0 and img.image.max() <= 1.0

    def test_too_small_rejected(self):
        with pytest.raises(DatasetError, match="too small"):
            generate(SynthSpec(n_identities=2, image_size=[8, 8]))

    def test_domain_shift_changes_camera_two_only(self):
        spec = SynthSpec(domain_shift=0.5)
        assert effective_transform(spec, 1, 32) == spec.camera1
        shifted = effective_transform(spec, 2, 32)
        assert shifted.brightness_shift < 0.0
        assert shifted.horizontal_jitter == 2

    def test_raw_pixel_neighbours_beat_chance(self):
        data = generate(SynthSpec(n_identities=16, image_size=[16, 16], seed=1,
                                  camera2=CameraTransform(brightness_shift=0.05, noise_sigma=0.02)))
        assert nearest_neighbor_rank1(data) > 3.0 / 16

    def test_raw_pixel_rank1_falls_with_domain_shift(self):
        def mean_rank1(shift):
            return np.mean([nearest_neighbor_rank1(generate(SynthSpec(n_identities=24, domain_shift=shift, seed=s)))
                            for s in range(4)])

        clean, half, full = mean_rank1(0.0), mean_rank1(0.5), mean_rank1(1.0)
        assert clean >= half >= full
        assert clean > full


class TestSplit:
    def test_disjoint_and_complete(self):
        data = generate(SynthSpec(n_identities=20, image_size=[16, 16]))
        parts = split(data, SplitProtocol(n_test_identities=5))
        assert len(parts.identities("test")) == 5
        assert len(parts.identities("train")) == 15
        assert not set(parts.identities("test")) & set(parts.identities("train"))
        assert set(parts.identities("test")) | set(parts.identities("train")) == set(range(20))

    def test_distractors(self):
        data = generate(SynthSpec(n_identities=20, image_size=[16, 16]))
        parts = split(data, SplitProtocol(n_test_identities=5, n_val_identities=2, gallery_distractors=10))
        assert len(parts.identities("distractors")) == 10
        assert len(parts.identities("val")) == 2
        assert len(parts.identities("train")) == 3
        union = set()
        for part in ("train", "val", "test", "distractors"):
            assert not union & set(parts.identities(part))
            union |= set(parts.identities(part))
        assert union == set(range(20))

    def test_insufficient_identities_rejected(self, tiny_dataset):
        with pytest.raises(DatasetError):
            split(tiny_dataset, SplitProtocol(n_test_identities=10))


class TestFiles:
    def test_export_and_manifest(self, tiny_dataset, tmp_path):
        manifest = export_dataset(tiny_dataset, tmp_path / "set")
        assert manifest.name == "manifest.csv"
        loaded = load_manifest(tmp_path / "set")
        assert len(loaded) == len(tiny_dataset)
        assert [(i.person_id, i.camera_id) for i in loaded] == [(i.person_id, i.camera_id) for i in tiny_dataset]
        # 8-bit quantisation
        np.testing.assert_allclose(loaded[0].image, tiny_dataset[0].image, atol=0.5 / 255 + 1e-6)

    def test_folder_layout(self, tmp_path):
        for pid in (0, 1):
            for cam in (1, 2):
                folder = tmp_path / str(pid) / str(cam)
                folder.mkdir(parents=True)
                Image.fromarray(np.full((20, 20, 3), 40 * (pid + cam), dtype=np.uint8)).save(folder / "a.png")
        data = load_folder(tmp_path, size=(16, 16))
        assert len(data) == 4
        assert data[0].image.shape == (3, 16, 16)
        assert data[-1].person_id == 1 and data[-1].camera_id == 2

    def test_non_image_file_is_an_error(self, tmp_path):
        folder = tmp_path / "0" / "1"
        folder.mkdir(parents=True)
        (folder / "notes.txt").write_text("not an image")
        with pytest.raises(DatasetError, match="notes.txt"):
            load_folder(tmp_path)

    def test_manifest_with_bad_camera_names_row(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("path,person_id,camera_id\n1/3/a.png,1,3\n")
        with pytest.raises(DatasetError, match=r"manifest.csv:2: .*camera_id=3"):
            load_manifest(tmp_path)

    def test_manifest_with_non_integer_label(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("path,person_id,camera_id\n0/1/a.png,x,1\n")
        with pytest.raises(DatasetError, match="non-integer"):
            load_manifest(tmp_path)

    def test_negative_person_folder_rejected(self, tmp_path):
        folder = tmp_path / "-1" / "1"
        folder.mkdir(parents=True)
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(folder / "a.png")
        with pytest.raises(DatasetError, match="person_id=-1"):
            load_folder(tmp_path)

    def test_empty_folder_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="No images"):
            load_folder(tmp_path)

    def test_resize_of_correct_size_is_identity(self, tmp_path):
        pixels = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "x.png")
        image = read_image(tmp_path / "x.png", size=(16, 16))
        np.testing.assert_allclose(image, pixels.transpose(2, 0, 1) / 255.0, atol=1e-6)

    def test_load_dataset_prefers_manifest(self, tiny_dataset, tmp_path):
        export_dataset(tiny_dataset, tmp_path)
        assert len(load_dataset(tmp_path)) == len(tiny_dataset)
