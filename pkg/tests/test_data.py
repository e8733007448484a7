import csv

import numpy as np
import pytest
from PIL import Image

from fairsqueeze.data import (
    GroupedDataset,
    SyntheticSpec,
    allocate,
    class_templates,
    generate_synthetic,
    load_manifest,
    preprocess,
    resize_bilinear,
    split_by_subject,
    write_dataset,
)
from fairsqueeze.errors import LoadError, ParameterError, SplitError


def loop_bilinear(img, oh, ow):
    """Per-pixel bilinear sampling at half-pixel centres, edges clamped."""
    h, w = img.shape[:2]
    out = np.zeros((oh, ow) + img.shape[2:])
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
        y0 = int(np.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            x0 = int(np.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def test_halving_is_a_box_average():
    img = np.random.default_rng(0).random((96, 96, 1))
    box = img.reshape(48, 2, 48, 2, 1).mean(axis=(1, 3))
    assert np.max(np.abs(resize_bilinear(img, (48, 48)) - box)) <= 1e-12
    checker = (np.indices((96, 96)).sum(axis=0) % 2).astype(np.uint8) * 255
    out = preprocess(checker, size=48)
    assert out.shape == (48, 48, 1) and np.allclose(out, 0.5, atol=1e-6)


@pytest.mark.parametrize("src,dst", [((10, 13), (7, 5)), ((5, 5), (12, 9))])
def test_resize_matches_loop_oracle(src, dst):
    img = np.random.default_rng(1).random(src + (2,))
    assert np.max(np.abs(resize_bilinear(img, dst) - loop_bilinear(img, *dst))) <= 1e-6


def test_identity_and_luminance():
    img = np.random.default_rng(2).integers(0, 256, (6, 6), dtype=np.uint8)
    assert np.max(np.abs(preprocess(img, size=6)[:, :, 0] - img / 255.0)) <= 1 / 255
    red = np.zeros((4, 4, 3), np.uint8)
    red[..., 0] = 255
    assert np.allclose(preprocess(red, grayscale=True), 0.299, atol=1e-7)
    gray = preprocess(np.full((3, 3), 128, np.uint8), channels=3)
    assert gray.shape == (3, 3, 3)


def test_zero_size_image():
    with pytest.raises(LoadError):
        preprocess(np.zeros((0, 4), np.uint8))


def _write_manifest(tmp_path, rows, header="path,label,subject_id,attr:gender"):
    path = tmp_path / "m.csv"
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows))
    return path


def _png(tmp_path, name, value=100, mode="L"):
    arr = np.full((4, 4) if mode == "L" else (4, 4, 3), value, np.uint8)
    Image.fromarray(arr, mode).save(tmp_path / name)


def test_empty_manifest(tmp_path):
    ds = load_manifest(_write_manifest(tmp_path, []), size=4, grayscale=True)
    assert len(ds) == 0 and ds.images.shape == (0, 4, 4, 1)


def test_group_counts_from_manifest(tmp_path):
    for i in range(3):
        _png(tmp_path, f"{i}.png", 50 * i)
    ds = load_manifest(_write_manifest(tmp_path, ["0.png,happy,S1,m", "1.png,sad,S2,f", "2.png,happy,S2,f"]))
    assert ds.group_counts("gender") == {"f": 2, "m": 1}
    assert ds.class_names == ["happy", "sad"] and ds.labels.tolist() == [0, 1, 0]
    assert ds.images.shape == (3, 4, 4, 1) and ds.images[1, 0, 0, 0] == pytest.approx(50 / 255)
    assert ds[2].attributes == {"gender": "f"} and ds.schema == {"gender": ["f", "m"]}


def test_rgb_manifest_to_gray(tmp_path):
    _png(tmp_path, "a.png", 200, mode="RGB")
    ds = load_manifest(_write_manifest(tmp_path, ["a.png,0,S1,m"]), size=2, grayscale=True)
    assert ds.images.shape == (1, 2, 2, 1) and ds.images[0, 0, 0, 0] == pytest.approx(200 / 255, abs=1e-6)


@pytest.mark.parametrize(
    "row,needle",
    [("missing.png,happy,S1,m", "row 2"), ("a.png,angry,S1,m", "unknown label"), ("a.png,happy,S1,", "missing value")],
)
def test_manifest_errors_name_the_row(tmp_path, row, needle):
    _png(tmp_path, "a.png")
    path = _write_manifest(tmp_path, ["a.png,happy,S0,f", row])
    with pytest.raises(LoadError, match=needle):
        load_manifest(path, class_names=["happy", "sad"])


def _subjects_dataset(n_subjects, per=2):
    n = n_subjects * per
    return GroupedDataset(
        np.zeros((n, 2, 2, 1), np.float32),
        np.zeros(n, np.int64),
        np.array([f"S{i // per:03d}" for i in range(n)], dtype=object),
        {"gender": np.array(["m", "f"] * (n // 2), dtype=object)},
    )


def test_split_matches_published_subject_counts():
    train, test = split_by_subject(_subjects_dataset(123), 0.3, seed=0)
    assert len(set(train.subject_ids)) == 86 and len(set(test.subject_ids)) == 37
    assert not set(train.subject_ids) & set(test.subject_ids)


def test_split_edge_cases():
    train, test = split_by_subject(_subjects_dataset(5), 0.0)
    assert len(train) == 10 and len(test) == 0
    with pytest.raises(SplitError):
        split_by_subject(_subjects_dataset(1), 0.5)
    a = split_by_subject(_subjects_dataset(20), 0.25, seed=3)[1].subject_ids.tolist()
    assert a == split_by_subject(_subjects_dataset(20), 0.25, seed=3)[1].subject_ids.tolist()


def test_allocation():
    assert allocate(1000, {"a": 0.7, "b": 0.3}) == {"a": 700, "b": 300}
    assert sum(allocate(7, {"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}).values()) == 7
    with pytest.raises(ParameterError):
        allocate(10, {"m": 0.7, "f": 0.4})


def test_synthetic_quota_and_subjects():
    spec = SyntheticSpec(1000, 3, attributes={"g": {"a": 0.7, "b": 0.3}, "r": {"x": 0.5, "y": 0.5}}, seed=4)
    ds = generate_synthetic(spec)
    assert ds.group_counts("g") == {"a": 700, "b": 300}
    # every subject sits in exactly one attribute cell
    for s in set(ds.subject_ids):
        sel = ds.subject_ids == s
        assert len(set(ds.attributes["g"][sel])) == 1 and len(set(ds.attributes["r"][sel])) == 1
    counts = np.bincount(ds.labels[ds.attributes["g"] == "a"], minlength=3)
    assert counts.max() - counts.min() <= 2


def test_noise_free_templates_are_nearest_template_separable():
    ds = generate_synthetic(SyntheticSpec(90, 5, noise=0.0, image_size=12, seed=1))
    t = class_templates(5, (12, 12))
    d = ((ds.images[:, None, :, :, 0] - t[None]) ** 2).sum(axis=(2, 3))
    assert np.array_equal(d.argmin(axis=1), ds.labels)


def test_templates_are_distinct_and_flip_stable():
    t = class_templates(12, (16, 16))
    flat = t.reshape(12, -1)
    assert len({row.tobytes() for row in flat}) == 12
    # left-right flips preserve the class pattern so flip augmentation is label-safe
    assert np.array_equal(t, t[:, :, ::-1])


def test_difficulty_raises_noise():
    spec = SyntheticSpec(400, 2, attributes={"g": {"a": 0.5, "b": 0.5}}, difficulty={"g": {"b": 0.3}}, noise=0.05, seed=0)
    ds = generate_synthetic(spec)
    t = class_templates(2, (16, 16))
    resid = ds.images[..., 0] - t[ds.labels]
    a = resid[ds.attributes["g"] == "a"].std()
    b = resid[ds.attributes["g"] == "b"].std()
    assert b > 2 * a


def test_write_and_reload(tmp_path):
    ds = generate_synthetic(SyntheticSpec(20, 3, image_size=8, seed=2))
    manifest = write_dataset(ds, tmp_path / "syn")
    back = load_manifest(manifest)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-7
    assert back.labels.tolist() == ds.labels.tolist()
    assert back.subject_ids.tolist() == ds.subject_ids.tolist()
    rows = list(csv.reader(open(manifest)))
    assert rows[0] == ["path", "label", "subject_id", "attr:gender"]
