import filecmp
import json

import numpy as np
import pytest

from gmb.grading import GleasonScore, gs_to_isup
from gmb.manifest import parse_label, read_manifest, validate_manifest
from gmb.synth import (
    SynthConfig,
    generate_cohort,
    label_from_class_map,
    oracle_embed,
    oracle_embed_all_ops,
    sample_class_map,
    sample_score,
)
from gmb.tiling import dihedral_transform


def test_class_maps_reproduce_every_score():
    rng = np.random.default_rng(0)
    for isup in range(6):
        for _ in range(30):
            score = sample_score(isup, rng)
            assert gs_to_isup(score).grade == isup
            assert label_from_class_map(sample_class_map(score, 6, rng)) == score


def test_label_rule():
    cmap = np.array([[1, 1, 1], [2, 2, 0], [-1, 0, 0]])
    assert str(label_from_class_map(cmap)) == "3+4"
    assert str(label_from_class_map(np.array([[3, 0], [0, -1]]))) == "5+5"
    assert label_from_class_map(np.zeros((2, 2), int)).is_benign


def test_generation_deterministic_and_valid(tmp_path):
    cfg = SynthConfig(n_patients=8, n_holdout=2, seed=3)
    a = generate_cohort(cfg, tmp_path / "a")
    generate_cohort(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    for name in (tmp_path / "a" / "slides").iterdir():
        assert filecmp.cmp(name, tmp_path / "b" / "slides" / name.name, shallow=False)
    assert validate_manifest(a) == []
    assert sum(r.split == "internal_validation" for r in a.rows) >= 2
    m = read_manifest(tmp_path / "a" / "manifest.csv")
    r = m.rows[0]
    meta = json.loads(m.resolve(r.filename).read_text())
    assert str(label_from_class_map(np.array(meta["class_map"]))) == meta["gleason"] == str(parse_label(r).score)


def test_benign_only_mixture(tmp_path):
    m = generate_cohort(SynthConfig(n_patients=5, n_holdout=1, grade_mixture=[1, 0, 0, 0, 0, 0]), tmp_path)
    assert all(parse_label(r).score == GleasonScore.benign() for r in m.rows)


def test_config_validation():
    for bad in ({"n_patients": 1}, {"n_holdout": 10, "n_patients": 10}, {"grade_mixture": [1, 2]}, {"n_scanners": 0}):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_oracle_embedding_deterministic_and_informative():
    rng = np.random.default_rng(0)
    pink = np.full((2, 8, 8, 3), (228, 178, 200), np.uint8)
    purple = np.full((2, 8, 8, 3), (96, 44, 128), np.uint8)
    pink[1, 0, 0, 0] = 227
    e = oracle_embed(np.concatenate([pink, purple]), 16, 0.05)
    assert np.array_equal(e, oracle_embed(np.concatenate([pink, purple]), 16, 0.05))
    assert np.linalg.norm(e[0] - e[1]) < np.linalg.norm(e[0] - e[2])
    patches = rng.integers(0, 256, (3, 6, 6, 3), dtype=np.uint8)
    all_ops = oracle_embed_all_ops(patches, 8)
    assert all_ops.shape == (8, 3, 8)
    assert np.array_equal(all_ops[2, 1], oracle_embed(dihedral_transform(patches[1], 2)[None], 8)[0])
