import json
from collections import deque

import numpy as np
import pytest

from lvit.seeding import stream
from lvit.synth import (
    HashMismatch,
    InvariantViolation,
    SynthParams,
    build_dataset,
    check_case,
    generate_case,
    generate_dataset,
    labeled_count,
    load_dataset,
    lung_mask,
    parse_pgm,
    split_sizes,
    write_pgm,
)
from lvit.text import ContrastiveBank, VOCAB, parse_report, select_contrastive


def flood_fill_count(mask):
    """4-connected component count by breadth-first search."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    count = 0
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            count += 1
            seen[sy, sx] = True
            queue = deque([(sy, sx)])
            while queue:
                y, x = queue.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
    return count


@pytest.fixture(scope="module")
def dataset():
    return build_dataset(7, 60, SynthParams(image_size=64))


class TestGenerate:
    def test_reports_parse(self, dataset):
        for case in dataset.cases:
            assert parse_report(case.report_text) == case.report

    def test_component_count(self, dataset):
        for case in dataset.cases:
            assert flood_fill_count(case.mask[0]) == case.report.lesion_count

    def test_laterality(self, dataset):
        mid = 32
        for case in dataset.cases:
            m = case.mask[0]
            left, right = m[:, :mid].any(), m[:, mid:].any()
            assert (left and right) == (case.report.laterality == "bilateral")

    def test_inside_lungs(self, dataset):
        lungs = lung_mask(64)
        for case in dataset.cases:
            assert not (case.mask[0].astype(bool) & ~lungs).any()
            assert 1 <= case.report.lesion_count <= 3

    def test_lesions_brighter(self, dataset):
        for case in dataset.cases[:20]:
            m = case.mask[0].astype(bool)
            lung_only = lung_mask(64) & ~m
            assert case.image[0][m].mean() > case.image[0][lung_only].mean()

    def test_deterministic(self):
        a = generate_case(stream(5, "case", 0), SynthParams(), "x")
        b = generate_case(stream(5, "case", 0), SynthParams(), "x")
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.report_text == b.report_text

    def test_self_contrastive(self, dataset):
        bank = ContrastiveBank(np.random.default_rng(0).normal(size=(len(VOCAB), 8)))
        for case in dataset.cases[:10]:
            bank.add(case.id, case.report.tokens, case.mask[0])
        for case in dataset.cases[:10]:
            _, sim = select_contrastive(bank.vector(case.report.tokens), bank)
            assert sim == pytest.approx(1.0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SynthParams(min_lesions=3, max_lesions=1)


class TestSplits:
    def test_sizes(self):
        assert split_sizes(100, (0.6, 0.2, 0.2)) == (60, 20, 20)
        assert labeled_count(60, 0.25) == 15
        with pytest.raises(ValueError):
            split_sizes(100, (0.5, 0.2, 0.2))
        with pytest.raises(ValueError):
            build_dataset(0, 5)

    def test_dataset_split(self):
        ds = build_dataset(1, 100, SynthParams(image_size=32))
        assert [len(ds.split(s)) for s in ("train", "val", "test")] == [60, 20, 20]
        train = ds.split("train")
        assert sum(c.labeled for c in train) == 15
        assert all(c.labeled for c in train[:15])


class TestFiles:
    def test_pgm_roundtrip(self, tmp_path):
        data = np.random.default_rng(0).integers(0, 65536, size=(5, 7)).astype(np.uint16)
        write_pgm(tmp_path / "a.pgm", data, 65535)
        back, maxval = parse_pgm((tmp_path / "a.pgm").read_bytes())
        assert maxval == 65535
        np.testing.assert_array_equal(back, data)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")

    def test_pgm_big_endian(self, tmp_path):
        raw = write_pgm(tmp_path / "b.pgm", np.array([[258]], dtype=np.uint16), 65535)
        assert raw.endswith(b"\x01\x02")

    def test_roundtrip(self, tmp_path):
        ds = generate_dataset(3, 12, tmp_path, SynthParams(image_size=32))
        back = load_dataset(tmp_path)
        assert back.hash == ds.hash
        for a, b in zip(ds.cases, back.cases):
            assert a.id == b.id and a.split == b.split and a.labeled == b.labeled
            assert a.image.tobytes() == b.image.tobytes()
            assert a.mask.tobytes() == b.mask.tobytes()
            assert a.report == b.report

    def test_hash_stable(self, tmp_path):
        a = generate_dataset(42, 10, tmp_path / "a", SynthParams(image_size=32))
        b = generate_dataset(42, 10, tmp_path / "b", SynthParams(image_size=32))
        assert a.hash == b.hash

    def test_tampered_mask(self, tmp_path):
        ds = generate_dataset(4, 10, tmp_path, SynthParams(image_size=32))
        victim = ds.cases[3]
        path = tmp_path / "cases" / f"{victim.id}_mask.pgm"
        mask = victim.mask[0].copy()
        mask[:] = 0
        write_pgm(path, mask, 1)
        with pytest.raises(InvariantViolation) as info:
            load_dataset(tmp_path)
        assert victim.id in str(info.value)

    def test_hash_mismatch(self, tmp_path):
        generate_dataset(5, 10, tmp_path, SynthParams(image_size=32))
        manifest = tmp_path / "manifest.json"
        doc = json.loads(manifest.read_text())
        doc["seed"] = 999
        manifest.write_text(json.dumps(doc))
        with pytest.raises(HashMismatch):
            load_dataset(tmp_path)

    def test_missing_file(self, tmp_path):
        ds = generate_dataset(6, 10, tmp_path, SynthParams(image_size=32))
        (tmp_path / "cases" / f"{ds.cases[0].id}_image.pgm").unlink()
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_check_case_flags_extra_component(self, dataset):
        case = dataset.cases[0]
        bad = type(case)(case.id, case.image, case.mask.copy(), case.report, case.split, case.labeled)
        lungs = lung_mask(64)
        ys, xs = np.nonzero(lungs & (bad.mask[0] == 0))
        # a single isolated pixel far from existing lesions
        for y, x in zip(ys, xs):
            window = bad.mask[0, max(y - 2, 0) : y + 3, max(x - 2, 0) : x + 3]
            if not window.any():
                bad.mask[0, y, x] = 1
                break
        with pytest.raises(InvariantViolation):
            check_case(bad)
