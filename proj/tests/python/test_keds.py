import json
import math

import numpy as np
import pytest

import keds


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d)).astype(np.float32)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_kedb_round_trip_and_header(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "m.kedb"
    keds.write_kedb(path, a)
    raw = path.read_bytes()
    assert raw[:4] == b"KEDB"
    assert len(raw) == 28 + a.size * 4
    np.testing.assert_array_equal(keds.read_kedb(path), a)


def test_truncated_kedb_is_format_error(tmp_path):
    path = tmp_path / "m.kedb"
    keds.write_kedb(path, np.ones((4, 8), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(keds.FormatError):
        keds.read_kedb(path)


def test_metadata_jsonl_round_trip(tmp_path):
    records = [
        {"id": 0, "caption_tokens": [5, 6, 7], "subject_span": (1, 3), "text": "a red car"},
        {"id": 1, "caption_tokens": [8], "subject_span": None, "text": None},
    ]
    path = tmp_path / "meta.jsonl"
    keds.write_metadata(path, records)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["id"] for r in lines] == [0, 1]
    back = keds.read_metadata(path)
    assert back[0]["subject_span"] == (1, 3)
    assert back[1]["subject_span"] is None
    with pytest.raises(keds.FormatError):
        keds.write_metadata(path, [{"id": 0, "caption_tokens": [1], "subject_span": (0, 2)}])


def test_vocab_json_round_trip(tmp_path):
    path = tmp_path / "vocab.json"
    keds.write_vocab(path, {"a": 0, "photo": 1, "of": 2})
    assert json.loads(path.read_text()) == {"a": 0, "photo": 1, "of": 2}
    assert keds.read_vocab(path) == {"a": 0, "photo": 1, "of": 2}
    with pytest.raises(keds.FormatError):
        keds.write_vocab(path, {"a": 0, "b": 5})


def test_flat_matches_numpy_and_ivf_full_probe_matches_flat():
    rng = np.random.default_rng(0)
    data = unit_rows(rng, 2000, 16)
    queries = unit_rows(rng, 10, 16)
    ids, scores = keds.FlatIndex(data).search(queries, 5)
    expected = np.argsort(-(queries.astype(np.float64) @ data.T.astype(np.float64)), axis=1, kind="stable")[:, :5]
    np.testing.assert_array_equal(ids, expected)
    assert np.all(np.diff(scores, axis=1) <= 0)

    ivf = keds.IvfIndex(data, partitions=32, iterations=5, seed=1, nprobe=4)
    ivf.nprobe = 32
    ivf_ids, ivf_scores = ivf.search(queries, 5)
    np.testing.assert_array_equal(ivf_ids, ids)
    np.testing.assert_array_equal(ivf_scores, scores)


def test_losses():
    rng = np.random.default_rng(1)
    row = rng.standard_normal(6)
    for b in (2, 4, 8):
        x = np.tile(row, (b, 1))
        assert keds.contrastive_loss(x, x, 100.0) == pytest.approx(2 * math.log(b), abs=1e-9)
    v, t, a, s = (rng.standard_normal(8) for _ in range(4))
    r0 = keds.registration_loss(v, t, a, s, 0.0)
    assert r0["total"] == r0["cos"]
    r2 = keds.registration_loss(v, t, a, s, 2.0)
    assert r2["total"] == pytest.approx(r0["cos"] + 2.0 * r0["sup"], abs=1e-12)


def test_hybrid_feature_endpoints():
    v = np.array([3.0, 4.0], dtype=np.float32)
    va = np.array([0.0, 2.0], dtype=np.float32)
    np.testing.assert_allclose(keds.hybrid_feature(v, va, 1.0), [0.6, 0.8], rtol=1e-6)
    np.testing.assert_allclose(keds.hybrid_feature(v, va, 0.0), [0.0, 1.0], rtol=1e-6)
    with pytest.raises(keds.ConfigError):
        keds.hybrid_feature(v, va, 1.5)


def test_config_rejects_unknown_keys():
    with pytest.raises(keds.ConfigError, match="train.lrr"):
        keds.RunConfig('{"train": {"lrr": 1}}')
    c = keds.RunConfig('{"seed": 3}')
    assert json.loads(c.to_json())["seed"] == 3


def test_gradient_suite_passes():
    cases = keds.gradient_suite(1)
    assert len(cases) >= 10
    assert all(ok for ok, _ in cases.values())


def test_tiny_pipeline(tmp_path):
    c = keds.RunConfig(json.dumps({
        "seed": 3,
        "synth": {"corpus": 240, "database": 160, "gallery": 120, "tasks": 20},
        "model": {"dim": 16, "layers": 1, "heads": 2, "composer": {"vocab_size": 48, "max_len": 16}},
        "train": {"total_steps": 8, "warmup_steps": 2, "batch_size": 8, "k": 4},
        "eval": {"k": 4},
    }))
    c.dir = str(tmp_path)
    keds.gen_synth(c)
    assert keds.build_db(c) == 160
    written, skipped = keds.mine(c)
    assert written + skipped == 240
    model = keds.train(c)
    assert (tmp_path / "model.kedc").exists()

    rows = keds.evaluate(c, model)
    assert rows[0]["value"] == "keds"
    assert rows[0]["n_tasks"] == 20
    assert 0.0 <= rows[0]["R10"] <= 1.0

    kb = keds.load_knowledge(c)
    image = keds.read_kedb(tmp_path / "world" / "gallery_images.kedb")[0]
    out = model.project("M", image, kb, 4)
    assert out.shape == (3, 16)
    again = keds.load_checkpoint(tmp_path / "model.kedc").project("M", image, kb, 4)
    np.testing.assert_array_equal(out, again)
    with pytest.raises(keds.ConfigError):
        model.project("Z", image, kb, 4)
