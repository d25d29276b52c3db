import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvinspect.errors import (
    AnomalousTrainSample,
    BadMagic,
    InvalidTensor,
    SchemaError,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
)
from mvinspect.features import (
    FeatureTensor,
    load_manifest,
    load_rig,
    masks_from_json_dict,
    masks_to_json_dict,
    read_feature_tensor,
    save_rig,
    write_feature_tensor,
)
from mvinspect.geometry import EpipolarMaskSet, PatchGrid
from mvinspect.synth import SceneConfig, make_rig, synth_dataset

GRID = PatchGrid(64, 64, 16)


def small_config(seed=0, views=2):
    return SceneConfig(seed=seed, views=views, grid=GRID, feature_dims=8,
                       surface_points=120, anomaly_rate=0.5)


class TestMvftFormat:
    @settings(max_examples=25, deadline=None)
    @given(v=st.integers(1, 8), t=st.integers(1, 256), d=st.integers(1, 128),
           seed=st.integers(0, 2**32 - 1))
    def test_round_trip_identity(self, tmp_path_factory, v, t, d, seed):
        path = tmp_path_factory.mktemp("mvft") / "t.mvft"
        data = np.random.default_rng(seed).standard_normal((v, t, d)).astype(np.float32)
        write_feature_tensor(FeatureTensor(data), path)
        back = read_feature_tensor(path)
        assert back.data.tobytes() == data.tobytes()

    def test_known_encoding(self, tmp_path):
        path = tmp_path / "single.mvft"
        write_feature_tensor(FeatureTensor(np.full((1, 1, 1), 0.5, np.float32)), path)
        raw = path.read_bytes()
        expected_header = b"MVFT" + struct.pack("<IIII", 1, 1, 1, 1) + b"\x00" * 8
        assert len(raw) == 32
        assert raw[:28] == expected_header
        assert raw[28:] == b"\x00\x00\x00\x3f"

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(InvalidTensor):
            FeatureTensor(np.array([[[np.nan]]], dtype=np.float32))
        t = FeatureTensor(np.zeros((1, 1, 1), np.float32))
        t.data = np.array([[[np.inf]]], dtype=np.float32)  # corrupt after validation
        with pytest.raises(InvalidTensor):
            write_feature_tensor(t, tmp_path / "bad.mvft")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mvft"
        path.write_bytes(b"NOPE" + b"\x00" * 28)
        with pytest.raises(BadMagic):
            read_feature_tensor(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.mvft"
        path.write_bytes(b"MVFT" + struct.pack("<IIII", 9, 1, 1, 1) + b"\x00" * 12)
        with pytest.raises(VersionMismatch):
            read_feature_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.mvft"
        path.write_bytes(b"MVFT" + struct.pack("<IIII", 1, 2, 2, 2) + b"\x00" * 8 + b"\x00" * 10)
        with pytest.raises(TruncatedPayload):
            read_feature_tensor(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long.mvft"
        path.write_bytes(b"MVFT" + struct.pack("<IIII", 1, 1, 1, 1) + b"\x00" * 8
                         + b"\x00" * 4 + b"xx")
        with pytest.raises(SchemaError):
            read_feature_tensor(path)

    def test_nonfinite_payload_rejected(self, tmp_path):
        path = tmp_path / "inf.mvft"
        payload = struct.pack("<f", np.inf)
        path.write_bytes(b"MVFT" + struct.pack("<IIII", 1, 1, 1, 1) + b"\x00" * 8 + payload)
        with pytest.raises(InvalidTensor):
            read_feature_tensor(path)


class TestRigFile:
    def test_round_trip(self, tmp_path):
        rig = make_rig(small_config())
        save_rig(rig, tmp_path / "rig.json")
        back = load_rig(tmp_path / "rig.json")
        assert back.view_ids == rig.view_ids
        for pair, f in rig.fundamental.items():
            np.testing.assert_allclose(back.fundamental[pair].m, f.m, atol=1e-15)

    def test_calibration_consistency_enforced(self, tmp_path):
        rig = make_rig(small_config())
        obj = rig.to_json_dict()
        obj["fundamental"]["view0"]["view1"][0] += 0.05
        (tmp_path / "rig.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            load_rig(tmp_path / "rig.json")

    def test_missing_pair_rejected(self, tmp_path):
        rig = make_rig(small_config())
        obj = rig.to_json_dict()
        del obj["fundamental"]["view0"]["view1"]
        (tmp_path / "rig.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            load_rig(tmp_path / "rig.json")


@pytest.fixture()
def dataset_dir(tmp_path):
    synth_dataset(small_config(), n_train=3, n_test=2, out_dir=tmp_path)
    return tmp_path


class TestManifest:
    def test_synth_output_loads_clean(self, dataset_dir):
        manifest = load_manifest(dataset_dir / "manifest.json")
        assert len(manifest.train_samples()) == 3
        assert len(manifest.test_samples()) == 2
        assert manifest.grid == GRID

    def test_anomalous_train_sample_rejected(self, dataset_dir):
        obj = json.loads((dataset_dir / "manifest.json").read_text())
        train = next(s for s in obj["samples"] if s["split"] == "train")
        train["label"] = "anomalous"
        (dataset_dir / "manifest.json").write_text(json.dumps(obj))
        with pytest.raises(AnomalousTrainSample):
            load_manifest(dataset_dir / "manifest.json")

    def test_shape_mismatch_rejected(self, dataset_dir):
        obj = json.loads((dataset_dir / "manifest.json").read_text())
        victim = obj["samples"][1]["view_feature_paths"][0]
        write_feature_tensor(
            FeatureTensor(np.zeros((1, GRID.token_count, 99), np.float32)),
            dataset_dir / victim)
        with pytest.raises(ShapeMismatch):
            load_manifest(dataset_dir / "manifest.json")

    def test_missing_file_rejected(self, dataset_dir):
        obj = json.loads((dataset_dir / "manifest.json").read_text())
        (dataset_dir / obj["samples"][0]["view_feature_paths"][0]).unlink()
        with pytest.raises(SchemaError):
            load_manifest(dataset_dir / "manifest.json")

    @pytest.mark.parametrize("mutate", [
        lambda obj: obj["samples"][0].__setitem__("split", "validate"),
        lambda obj: obj["samples"][0].__setitem__("label", "broken"),
        lambda obj: obj["samples"][0].__setitem__("view_labels", [0]),
        lambda obj: obj.__setitem__("rig_path", "nowhere.json"),
    ])
    def test_structural_mutations_rejected(self, dataset_dir, mutate):
        obj = json.loads((dataset_dir / "manifest.json").read_text())
        mutate(obj)
        (dataset_dir / "manifest.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            load_manifest(dataset_dir / "manifest.json")

    def test_bad_patch_mask_length(self, dataset_dir):
        obj = json.loads((dataset_dir / "manifest.json").read_text())
        test = next(s for s in obj["samples"] if s["split"] == "test")
        test["patch_masks"][0] = test["patch_masks"][0][:-1]
        (dataset_dir / "manifest.json").write_text(json.dumps(obj))
        with pytest.raises(ShapeMismatch):
            load_manifest(dataset_dir / "manifest.json")


class TestMaskSerialization:
    def test_round_trip(self):
        rig = make_rig(small_config())
        ms = EpipolarMaskSet.from_fundamentals(GRID, rig.fundamental, 1.0,
                                               view_order=rig.view_ids)
        back = masks_from_json_dict(masks_to_json_dict(ms))
        assert back.delta_patches == ms.delta_patches
        assert set(back.masks) == set(ms.masks)
        for key, mask in ms.masks.items():
            assert np.array_equal(back.masks[key], mask)
