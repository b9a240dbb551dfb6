import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turngraph.data import SynthConfig, generate, is_validation, load_records, save_records, split
from turngraph.records import MODALITIES, RecordError


def assert_same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.video_id == y.video_id
        assert [t.speaker_id for t in x.turns] == [t.speaker_id for t in y.turns]
        for tx, ty in zip(x.turns, y.turns):
            for k in MODALITIES:
                fx, fy = tx.features(k), ty.features(k)
                assert fx.size == fy.size
                if fx.size:
                    np.testing.assert_array_equal(fx, fy)
        for qx, qy in zip(x.qa_items, y.qa_items):
            for u, v in zip((qx.question, qx.correct, qx.incorrect), (qy.question, qy.correct, qy.incorrect)):
                np.testing.assert_array_equal(u, v)


def test_round_trip_exact(tmp_path):
    videos = generate(SynthConfig(videos=10, turns_min=1, turns_max=5, nodes_min=1, seed=3))
    save_records(videos, tmp_path / "d.jsonl")
    assert_same(videos, load_records(tmp_path / "d.jsonl"))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_generated_records_valid_and_round_trip(seed, turns, nodes):
    import tempfile
    from pathlib import Path
    cfg = SynthConfig(videos=3, turns_min=1, turns_max=turns, nodes_min=1, nodes_max=nodes, seed=seed)
    videos = generate(cfg)
    for v in videos:
        assert 1 <= v.num_turns <= turns
        for t in v.turns:
            assert t.num_nodes >= 1
            for k, d in cfg.modality_dims.items():
                assert t.features(k).shape[1] == d
        assert len(v.qa_items) == cfg.qa_per_video
    with tempfile.TemporaryDirectory() as d:
        save_records(videos, Path(d) / "r.jsonl")
        assert_same(videos, load_records(Path(d) / "r.jsonl"))


def test_same_seed_same_data():
    a = generate(SynthConfig(videos=4, seed=9))
    b = generate(SynthConfig(videos=4, seed=9))
    assert_same(a, b)


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_records(tmp_path / "e.jsonl") == []


def test_malformed_line_reports_line_number(tmp_path):
    videos = generate(SynthConfig(videos=2))
    save_records(videos, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    (tmp_path / "d.jsonl").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(RecordError, match=r"d.jsonl:2"):
        load_records(tmp_path / "d.jsonl")


def test_dim_mismatch_names_modality(tmp_path):
    videos = generate(SynthConfig(videos=2, d_vision=6))
    save_records(videos, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    obj = json.loads(lines[1])
    obj["turns"][0]["vision"] = [[0.0] * 5]
    (tmp_path / "d.jsonl").write_text(lines[0] + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(RecordError, match=r"vision.*expected 6"):
        load_records(tmp_path / "d.jsonl")


def test_turn_without_rows_rejected(tmp_path):
    obj = {"video_id": "x", "turns": [{"speaker_id": "a", "text": [], "vision": [], "acoustic": []}]}
    (tmp_path / "d.jsonl").write_text(json.dumps(obj) + "\n")
    with pytest.raises(RecordError, match=":1"):
        load_records(tmp_path / "d.jsonl")


def test_split_is_stable_and_near_80_20():
    videos = generate(SynthConfig(videos=2000, turns_min=1, turns_max=1, nodes_max=2, qa_per_video=0))
    train, val = split(videos)
    assert len(train) + len(val) == 2000
    assert 0.17 < len(val) / 2000 < 0.23
    assert all(is_validation(v.video_id) for v in val)
    assert split(videos)[1] == val


def _cos(a, b):
    return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def test_strong_speaker_signal_clusters_turns():
    videos = generate(SynthConfig(videos=100, speaker_signal=5.0, turns_min=4, turns_max=6))
    same, cross = [], []
    for v in videos:
        means = [np.concatenate([t.features(k).mean(axis=0) for k in MODALITIES]) for t in v.turns]
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                (same if v.turns[i].speaker_id == v.turns[j].speaker_id else cross).append(_cos(means[i], means[j]))
    assert np.mean(same) > np.mean(cross)


def test_config_validation():
    with pytest.raises(ValueError, match="videos"):
        SynthConfig(videos=0).validate()
    with pytest.raises(ValueError, match="speaker_signal"):
        SynthConfig(speaker_signal=-1).validate()
    with pytest.raises(ValueError):
        SynthConfig(turns_min=3, turns_max=2).validate()
