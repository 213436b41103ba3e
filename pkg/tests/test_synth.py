import os

import numpy as np
import pytest

from services.evaluation import EvalConfig, PairPredictions, evaluate
from services.feature_pipeline import assemble_hyperpixel
from services.matchers import MatchOptions, match_stmatch
from services.synth import SynthConfig, synth_dataset, write_synth_dataset
from utils.errors import ConfigError


def tree_bytes(root):
    found = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, 'rb') as fh:
                found[os.path.relpath(path, root)] = fh.read()
    return found


def stmatch_report(ds, ks=(0, 1, 3, 5)):
    config = ds.config
    pyramids = {v.annotation.video_id: assemble_hyperpixel(v.layers, config.layer_ids, config.grid)
                for v in ds.videos}
    predictions = []
    for pair in ds.gt:
        sources = [s for s, _ in pair.matches]
        out = match_stmatch(pyramids[pair.src], pyramids[pair.tgt], sources,
                            config.dims, config.dims, MatchOptions())
        predictions.append(PairPredictions(pair.src, pair.tgt, list(zip(sources, out.keypoints))))
    return evaluate(predictions, ds.gt, ds.annotations, EvalConfig(ks=list(ks)))


def test_same_seed_same_bytes(tmp_path):
    config = SynthConfig()
    write_synth_dataset(synth_dataset(config, seed=5), str(tmp_path / 'a'))
    write_synth_dataset(synth_dataset(config, seed=5, jobs=3), str(tmp_path / 'b'))
    a, b = tree_bytes(str(tmp_path / 'a')), tree_bytes(str(tmp_path / 'b'))
    assert a == b

    write_synth_dataset(synth_dataset(config, seed=6), str(tmp_path / 'c'))
    assert tree_bytes(str(tmp_path / 'c')) != a


def test_default_layout(tmp_path):
    ds = synth_dataset(SynthConfig(), seed=0)
    assert [v.annotation.video_id for v in ds.videos] == ['v0000', 'v0001', 'v0002', 'v0003']
    assert [v.annotation.action for v in ds.videos] == ['action0', 'action1', 'action0', 'action1']
    assert len(ds.pairs) == 4
    assert {(p.src, p.tgt) for p in ds.pairs} == {
        ('v0000', 'v0002'), ('v0002', 'v0000'), ('v0001', 'v0003'), ('v0003', 'v0001')}

    paths = write_synth_dataset(ds, str(tmp_path))
    assert sorted(paths) == ['annotations', 'gt', 'manifest', 'pairs']
    assert len(os.listdir(tmp_path / 'features')) == 8
    assert sorted(f for f in os.listdir(tmp_path) if f.endswith('.json')) == [
        'annotations.json', 'gt.json', 'manifest.json', 'pairs.json']


def test_annotations_sit_on_grid_nodes():
    ds = synth_dataset(SynthConfig(), seed=1)
    for v in ds.videos:
        ann = v.annotation
        assert len(ann.key_moments) == 2
        for kp in ann.all_keypoints():
            assert kp.t % 5 == 0 and kp.x % 21 == 0 and kp.y % 21 == 0
        # types occupy distinct cells
        first = ann.frame_keypoints(ann.key_moments[0])
        assert len({(kp.x, kp.y) for kp in first}) == 16


def test_frame_permutation_keeps_key_order():
    ds = synth_dataset(SynthConfig(n_key_moments=3), seed=2)
    for v in ds.videos:
        assert sorted(v.frame_perm.tolist()) == [0, 1, 2, 3]
        key_latent = [int(v.frame_perm[t // 5]) for t in v.annotation.key_moments]
        assert key_latent == sorted(key_latent)


def test_planted_correspondences_recovered():
    for seed in range(100):
        report = stmatch_report(synth_dataset(SynthConfig(), seed=seed))
        assert report.n_overall == 4 * 2 * 16
        assert report.overall == {0: 100.0, 1: 100.0, 3: 100.0, 5: 100.0}
        assert set(report.per_class) == {'human', 'object', 'all'}


def test_small_noise_keeps_matches():
    report = stmatch_report(synth_dataset(SynthConfig(noise=0.01), seed=3), ks=(5,))
    assert report.overall[5] == 100.0


def test_validation_split():
    ds = synth_dataset(SynthConfig(n_videos=8, val_fraction=0.5), seed=4)
    splits = {v.annotation.video_id: v.annotation.split for v in ds.videos}
    assert [splits[f"v{i:04d}"] for i in range(8)] == ['train'] * 4 + ['val'] * 4
    assert len(ds.pairs) == 8
    assert all(splits[p.src] == splits[p.tgt] for p in ds.pairs)


def test_dropped_keypoints_remove_pairs():
    ds = synth_dataset(SynthConfig(drop_prob=1.0), seed=0)
    assert ds.pairs == [] and ds.gt == []
    assert all(not kp.visible for v in ds.videos for kp in v.annotation.all_keypoints())


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n_key_moments=5)
    with pytest.raises(ConfigError):
        SynthConfig(layer_channels=())
    with pytest.raises(ConfigError):
        SynthConfig(drop_prob=1.5)
    assert np.array_equal(SynthConfig().layer_ids, [0, 1])
