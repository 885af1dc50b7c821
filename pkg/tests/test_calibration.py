import json

import numpy as np
import pytest

from nearlight import calibration as calib
from nearlight.errors import (
    FormatError,
    MissingFileError,
    ParameterError,
    ShapeMismatchError,
    UnitMismatchError,
)
from nearlight.io import (
    read_image,
    read_mask,
    read_pfm,
    read_scene,
    write_image,
    write_mask,
    write_pfm,
    write_scene,
)
from nearlight.render import RenderOptions, render_capture_set
from nearlight.scene import NormalMap, make_synthetic_surface
from nearlight.synthetic import standard_camera, standard_lights, standard_scene


@pytest.fixture(scope="module")
def capture():
    cam = standard_camera(32)
    return render_capture_set(standard_scene(cam), standard_lights(12), cam,
                              RenderOptions(noise_sigma=0.002, dark_level=0.02,
                                            quantization_bits=16, rng_seed=3))


# --- file formats ------------------------------------------------------------------


def test_pfm_round_trip(tmp_path, rng):
    for shape in [(5, 7), (4, 6, 3)]:
        a = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "a.pfm", a)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"PF\n6 4\n-1.0\n")


def test_pfm_errors(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "x.pfm")
    with pytest.raises(MissingFileError):
        read_pfm(tmp_path / "none.pfm")


def test_png_is_sixteen_bit_linear(tmp_path):
    img = np.zeros((2, 3, 3))
    img[0, 0] = [1.0, 0.5, 0.0]
    write_image(tmp_path / "i.png", img)
    back = read_image(tmp_path / "i.png")
    np.testing.assert_array_equal(back[0, 0], [1.0, 32768 / 65535, 0.0])


def test_mask_round_trip(tmp_path, rng):
    m = rng.random((9, 11)) > 0.5
    write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)


def test_scene_round_trip_and_units(tmp_path, capture):
    write_scene(tmp_path / "scene.json", capture.camera, capture.lights)
    cam, lights = read_scene(tmp_path / "scene.json")
    assert cam == capture.camera
    for a, b in zip(lights, capture.lights):
        np.testing.assert_array_equal(a.position, b.position)
        assert a.color_group == b.color_group
    d = json.loads((tmp_path / "scene.json").read_text())
    assert d["units"]["length"] == "mm" and d["units"]["pixel"] == "px"
    d["units"]["length"] = "cm"
    (tmp_path / "scene.json").write_text(json.dumps(d))
    with pytest.raises(UnitMismatchError):
        read_scene(tmp_path / "scene.json")


def test_corrupt_scene_is_format_error(tmp_path):
    (tmp_path / "scene.json").write_text("{not json")
    with pytest.raises(FormatError, match="parse error"):
        read_scene(tmp_path / "scene.json")


# --- capture directories ----------------------------------------------------------------


def test_capture_round_trip_bit_identical(tmp_path, capture):
    calib.save_capture(capture, tmp_path)
    back = calib.load_capture(tmp_path)
    assert back.num_lights == 12
    np.testing.assert_array_equal(back.single_light_images, capture.single_light_images)
    np.testing.assert_array_equal(back.dark_image, capture.dark_image)
    np.testing.assert_array_equal(back.trichrome_image, capture.trichrome_image)


def test_missing_dark_names_file(tmp_path, capture):
    calib.save_capture(capture, tmp_path)
    (tmp_path / "dark.png").unlink()
    with pytest.raises(MissingFileError, match="dark.png"):
        calib.load_capture(tmp_path)


def test_dimension_mismatch(tmp_path, capture):
    calib.save_capture(capture, tmp_path)
    write_image(tmp_path / "light_03.png", np.zeros((8, 8, 3)))
    with pytest.raises(ShapeMismatchError, match="light_03"):
        calib.load_capture(tmp_path)


# --- preprocessing -----------------------------------------------------------------------


def test_preprocess_identity_with_zero_dark():
    cam = standard_camera(16)
    cap = render_capture_set(standard_scene(cam), standard_lights(3), cam)
    out = calib.preprocess(cap)
    np.testing.assert_array_equal(out.single_light_images, cap.single_light_images)
    np.testing.assert_array_equal(out.trichrome_image, cap.trichrome_image)


def test_preprocess_image_equal_to_dark(capture):
    from nearlight.scene import CaptureSet

    d = capture.dark_image
    same = CaptureSet(np.repeat(d[None], 3, 0), d, d, capture.lights[:3], capture.camera)
    out = calib.preprocess(same)
    assert not out.single_light_images.any() and not out.trichrome_image.any()


def test_preprocess_removes_dark_level():
    cam = standard_camera(16)
    s = standard_scene(cam)
    a = calib.preprocess(render_capture_set(s, standard_lights(12), cam, RenderOptions(dark_level=0.05)))
    b = render_capture_set(s, standard_lights(12), cam)
    np.testing.assert_allclose(a.single_light_images, b.single_light_images, atol=1e-12)
    np.testing.assert_allclose(a.trichrome_image, b.trichrome_image, atol=1e-12)


def test_preprocess_idempotent(capture):
    once = calib.preprocess(capture)
    twice = calib.preprocess(once)
    np.testing.assert_array_equal(once.single_light_images, twice.single_light_images)
    assert not once.dark_image.any()


def test_downsample_area_average(capture):
    small = calib.downsample_capture(capture, 16)
    assert small.camera.shape == (16, 16)
    np.testing.assert_allclose(small.trichrome_image[0, 0], capture.trichrome_image[:2, :2].mean(axis=(0, 1)))
    assert small.camera.pixel_pitch_u == pytest.approx(2 * capture.camera.pixel_pitch_u)
    assert calib.downsample_capture(capture, 512) is capture


# --- contact mask --------------------------------------------------------------------------


def test_contact_mask_no_change():
    ref = np.random.default_rng(0).random((30, 30, 3))
    assert not calib.contact_mask(ref, ref.copy()).any()


def test_contact_mask_square():
    ref = np.zeros((50, 50, 3))
    pressed = ref.copy()
    pressed[10:30, 15:35, 1] = 0.06
    m = calib.contact_mask(ref, pressed, tau=0.03, min_blob=16)
    want = np.zeros((50, 50), bool)
    want[10:30, 15:35] = True
    assert np.array_equal(m, want)


def test_contact_mask_blob_filter():
    ref = np.zeros((20, 20, 3))
    pressed = ref.copy()
    pressed[7, 7] = 0.5
    assert not calib.contact_mask(ref, pressed, tau=0.03, min_blob=5).any()


def test_contact_mask_closing_fills_pinhole():
    ref = np.zeros((20, 20, 3))
    pressed = ref.copy()
    pressed[5:15, 5:15] = 0.1
    pressed[9, 9] = 0.0
    assert calib.contact_mask(ref, pressed)[9, 9]


# --- samples and datasets ----------------------------------------------------------------------


def test_normalized_coords_center():
    U, V = calib.normalized_coords((21, 41))
    assert U[10, 20] == pytest.approx(0.0, abs=1e-12) and V[10, 20] == pytest.approx(0.0, abs=1e-12)
    assert U.min() == -1 and U.max() == 1 and V.min() == -1 and V.max() == 1
    U, V = calib.normalized_coords((20, 40))
    assert abs(U[10, 20]) < 0.06 and abs(V[10, 20]) < 0.06


def _normals(cam, rng):
    n = rng.normal(size=cam.shape + (3,))
    n[..., 2] = np.abs(n[..., 2]) + 1
    return NormalMap(n / np.linalg.norm(n, axis=-1, keepdims=True), np.ones(cam.shape, bool))


def test_build_samples_cardinality_and_exact_copy(capture, rng):
    nm = _normals(capture.camera, rng)
    m = np.zeros(capture.camera.shape, bool)
    m.reshape(-1)[rng.choice(m.size, 100, replace=False)] = True
    s = calib.build_samples(capture, nm, m, "c0", 0)
    assert len(s) == 100
    r, c = s.pixels.T
    np.testing.assert_array_equal(s.normals, nm.n[r, c].astype(np.float32))
    np.testing.assert_array_equal(s.inputs[:, 2:], capture.trichrome_image[r, c].astype(np.float32))
    norms = np.linalg.norm(s.normals.astype(float), axis=1)
    assert np.all(np.abs(norms - 1) < 1e-6)
    sample = next(iter(s))
    assert -1 <= sample.u <= 1 and -1 <= sample.v <= 1


def test_build_samples_rejects_mask_outside_normals(capture, rng):
    nm = _normals(capture.camera, rng)
    invalid = NormalMap(nm.n, np.zeros(capture.camera.shape, bool))
    with pytest.raises(ParameterError):
        calib.build_samples(capture, invalid, np.ones(capture.camera.shape, bool))


def test_build_samples_empty_warns(capture, rng):
    with pytest.warns(RuntimeWarning):
        s = calib.build_samples(capture, _normals(capture.camera, rng),
                                np.zeros(capture.camera.shape, bool))
    assert len(s) == 0


def _fake_sets(n_press, per=5, seed=0):
    r = np.random.default_rng(seed)
    sets = []
    for p in range(n_press):
        rec = r.random((per, 8)).astype(np.float32)
        pix = np.column_stack([np.arange(per), np.full(per, p)])
        sets.append(calib.SampleSet(rec, pix, f"press_{p:02d}", p, (8, 64)))
    return sets


def test_merge_fifty_presses():
    sets = _fake_sets(50)
    tr, va = calib.merge_datasets(sets, (0.8, 0.2), seed=7)
    assert len(tr.blocks) == 40 and len(va.blocks) == 10
    ids_t = {b.press_id for b in tr.blocks}
    ids_v = {b.press_id for b in va.blocks}
    assert ids_t.isdisjoint(ids_v) and ids_t | ids_v == set(range(50))
    tr2, va2 = calib.merge_datasets(sets, (0.8, 0.2), seed=7)
    assert [b.press_id for b in va2.blocks] == [b.press_id for b in va.blocks]
    _, va3 = calib.merge_datasets(sets, (0.8, 0.2), seed=8)
    assert [b.press_id for b in va3.blocks] != [b.press_id for b in va.blocks]


def test_merge_errors():
    with pytest.raises(ParameterError):
        calib.merge_datasets(_fake_sets(1), (0.8, 0.2))
    with pytest.raises(ParameterError):
        calib.merge_datasets(_fake_sets(5), (0.5, 0.4))
    dup = _fake_sets(3)
    dup.append(dup[0])
    with pytest.raises(ParameterError, match="duplicate"):
        calib.merge_datasets(dup)


def test_dataset_file_round_trip(tmp_path):
    ds = calib.CalibDataset(_fake_sets(4), split_seed=3)
    calib.write_dataset(tmp_path / "dataset.nlps", ds)
    raw = (tmp_path / "dataset.nlps").read_bytes()
    assert raw[:4] == b"NLPS" and len(raw) == 4 + 2 + 8 + 20 * 32
    back = calib.read_dataset(tmp_path / "dataset.nlps")
    np.testing.assert_array_equal(back.records, ds.records)
    assert back.provenance == ds.provenance
    assert back.split_seed == 3
    np.testing.assert_array_equal(back.blocks[2].pixels, ds.blocks[2].pixels)
    assert json.loads((tmp_path / "dataset.json").read_text())["count"] == 20


def test_dataset_bad_magic(tmp_path):
    (tmp_path / "d.nlps").write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(FormatError):
        calib.read_dataset(tmp_path / "d.nlps")


def test_csv_export(tmp_path):
    ds = calib.CalibDataset(_fake_sets(2, per=3))
    calib.export_csv(tmp_path / "d.csv", ds)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "press_id,u,v,r,g,b,nx,ny,nz"
    assert len(lines) == 7


def test_normal_coverage():
    n = np.array([[0, 0, 1.0], [0.1, 0, 0.995]])
    cov = calib.normal_coverage(n)
    assert sum(cov["tilt_counts"]) == 2


def test_solver_normals_flow_into_samples(capture):
    from nearlight.solver import SolverConfig, solve

    pre = calib.preprocess(capture)
    res = solve(pre, SolverConfig())
    flat = make_synthetic_surface("dome", capture.camera, radius=40.0, albedo=(0.8, 0.78, 0.82))
    ref = calib.preprocess(render_capture_set(flat, standard_lights(12), capture.camera,
                                              RenderOptions(noise_sigma=0.002, dark_level=0.02,
                                                            quantization_bits=16, rng_seed=4)))
    m = calib.contact_mask(ref.trichrome_image, pre.trichrome_image) & res.normals.mask
    assert m.sum() > 20
    s = calib.build_samples(pre, res.normals, m)
    r, c = s.pixels.T
    np.testing.assert_array_equal(s.normals, res.normals.n[r, c].astype(np.float32))
