# test_volume_io.py
import os
import json

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.core.errors import (
    LabelSchemeError, ManifestError, SplitError, VolumeFormatError, VolumeWriteError
)
from app.core.volume_io import (
    ChannelTag, DatasetManifest, Labeling, LabelScheme, LabelVolume, ManifestEntry, Volume,
    largest_remainder, load_labels, load_volume, read_manifest, save_volume, split_manifest,
    write_manifest
)


def _manifest(n, seed=0):
    entries = [ManifestEntry(f"/data/v{i}.nii.gz", f"/data/l{i}.nii.gz", Labeling.FULL) for i in range(n)]
    return DatasetManifest(entries=entries, seed=seed)


def test_volume_round_trip_keeps_data_and_spacing(tmp_path, rng):
    """Anisotropic spacing survives the NIfTI header"""
    data = rng.uniform(-1000, 400, (6, 7, 8)).astype(np.float32)
    path = str(tmp_path / 'ct.nii.gz')
    save_volume(Volume(data, (0.62, 0.62, 1.25), (1.0, -2.0, 3.5)), path)

    loaded = load_volume(path)
    assert np.array_equal(loaded.data, data)
    assert loaded.spacing == pytest.approx((0.62, 0.62, 1.25), abs=1e-6)
    assert loaded.origin == pytest.approx((1.0, -2.0, 3.5))
    assert loaded.channel_tag is ChannelTag.RAW_HU


def test_channel_tag_and_scheme_travel_in_header(tmp_path):
    volume_path = str(tmp_path / 'norm.nii.gz')
    label_path = str(tmp_path / 'labels.nii.gz')
    save_volume(Volume(np.full((4, 4, 4), 0.25, dtype=np.float32), channel_tag=ChannelTag.NORMALIZED), volume_path)
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[0, 0, 0] = 1
    save_volume(LabelVolume(labels, LabelScheme.FIVE_CLASS), label_path)

    assert load_volume(volume_path).channel_tag is ChannelTag.NORMALIZED
    # max label 1 would infer three_class; the header wins
    assert load_labels(label_path).scheme is LabelScheme.FIVE_CLASS


def test_label_scheme_inferred_without_header(tmp_path):
    path = str(tmp_path / 'plain.nii.gz')
    data = np.zeros((5, 5, 5), dtype=np.uint8)
    data[1, 1, 1] = 2
    nib.save(nib.Nifti1Image(data, np.eye(4)), path)
    assert load_labels(path).scheme is LabelScheme.THREE_CLASS

    data[2, 2, 2] = 4
    nib.save(nib.Nifti1Image(data, np.eye(4)), path)
    assert load_labels(path).scheme is LabelScheme.FIVE_CLASS


def test_missing_file_names_the_path(tmp_path):
    path = str(tmp_path / 'absent.nii.gz')
    with pytest.raises(VolumeFormatError) as excinfo:
        load_volume(path)
    assert path in excinfo.value.message
    assert excinfo.value.to_dict()['path'] == path


def test_two_dimensional_image_is_rejected(tmp_path):
    path = str(tmp_path / 'slice.nii.gz')
    nib.save(nib.Nifti1Image(np.zeros((8, 8), dtype=np.float32), np.eye(4)), path)
    with pytest.raises(VolumeFormatError, match='not a 3D volume'):
        load_volume(path)


def test_unparsable_file_is_rejected(tmp_path):
    path = tmp_path / 'garbage.nii.gz'
    path.write_bytes(b'not a nifti file')
    with pytest.raises(VolumeFormatError):
        load_volume(str(path))


def test_save_into_missing_directory_fails(tmp_path):
    volume = Volume(np.zeros((3, 3, 3), dtype=np.float32))
    with pytest.raises(VolumeWriteError):
        save_volume(volume, str(tmp_path / 'nope' / 'ct.nii.gz'))

    blocker = tmp_path / 'file'
    blocker.write_text('x')
    with pytest.raises(VolumeWriteError):
        save_volume(volume, str(blocker / 'ct.nii.gz'))


def test_in_memory_validation():
    with pytest.raises(VolumeFormatError):
        Volume(np.full((3, 3, 3), 1.5, dtype=np.float32), channel_tag=ChannelTag.NORMALIZED)
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((3, 3, 3)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(LabelSchemeError):
        LabelVolume(np.full((3, 3, 3), 3, dtype=np.uint8), LabelScheme.THREE_CLASS)
    with pytest.raises(VolumeFormatError):
        LabelVolume(np.zeros((3, 3, 3), dtype=np.float32))


def test_manifest_round_trip_uses_relative_paths(tmp_path):
    entries = [
        ManifestEntry(str(tmp_path / 'a_image.nii.gz'), str(tmp_path / 'a_label.nii.gz'), Labeling.FULL),
        ManifestEntry(str(tmp_path / 'b_image.nii.gz'), str(tmp_path / 'b_label.nii.gz'), Labeling.HALF_LEFT),
        ManifestEntry(str(tmp_path / 'c_image.nii.gz'), None, Labeling.HALF_RIGHT)
    ]
    path = str(tmp_path / 'manifest.jsonl')
    write_manifest(DatasetManifest(entries=entries, seed=11), path)

    with open(path) as f:
        lines = [json.loads(line) for line in f]
    assert lines[0] == {'seed': 11}
    assert lines[1]['volume'] == 'a_image.nii.gz'

    loaded = read_manifest(path)
    assert loaded.seed == 11
    assert loaded.entries == entries
    assert loaded.entries[1].case_id == 'b_image'


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(str(tmp_path / 'missing.jsonl'))

    path = tmp_path / 'bad.jsonl'
    path.write_text(json.dumps({'volume': 'a.nii.gz', 'labeling': 'quarter'}) + '\n')
    with pytest.raises(ManifestError, match='labeling'):
        read_manifest(str(path))

    with pytest.raises(ManifestError, match='Duplicate'):
        DatasetManifest(entries=[
            ManifestEntry('/x/a.nii.gz', '/x/l.nii.gz'),
            ManifestEntry('/x/a.nii.gz', '/x/m.nii.gz')
        ])


def test_largest_remainder_counts():
    assert largest_remainder(717, (0.7, 0.1, 0.2)) == [502, 72, 143]
    assert largest_remainder(10, (0.7, 0.1, 0.2)) == [7, 1, 2]


def test_split_is_reproducible():
    manifest = _manifest(20, seed=5)
    first = split_manifest(manifest)
    second = split_manifest(manifest)
    assert [p.entries for p in first] == [p.entries for p in second]
    other = split_manifest(manifest, seed=6)
    assert [p.entries for p in first] != [p.entries for p in other]


def test_split_rejects_bad_input():
    with pytest.raises(SplitError):
        split_manifest(_manifest(10), (0.5, 0.5, 0.5))
    with pytest.raises(SplitError):
        split_manifest(_manifest(10), (0.8, 0.2, 0.0))
    with pytest.raises(SplitError):
        split_manifest(_manifest(2))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(min_value=3, max_value=120),
    seed=st.integers(min_value=0, max_value=2 ** 31),
    weights=st.tuples(*[st.integers(min_value=1, max_value=10)] * 3)
)
def test_split_is_a_partition(n, seed, weights):
    """Every entry lands in exactly one part and part sizes follow the rounding rule"""
    ratios = tuple(w / sum(weights) for w in weights)
    if abs(sum(ratios) - 1.0) > 1e-9:
        return
    manifest = _manifest(n)
    parts = split_manifest(manifest, ratios, seed)

    paths = [e.volume_path for part in parts for e in part.entries]
    assert sorted(paths) == sorted(e.volume_path for e in manifest.entries)
    assert len(set(paths)) == n
    assert [len(p) for p in parts] == largest_remainder(n, ratios)
    for size, ratio in zip((len(p) for p in parts), ratios):
        assert abs(size - n * ratio) < 1.0 + 1e-9
