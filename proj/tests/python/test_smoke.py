import json
import math
import os
import pathlib

import numpy as np
import pytest

import medmm

FIXTURES = pathlib.Path(
    os.environ.get("MEDMM_FIXTURES_DIR", pathlib.Path(__file__).resolve().parents[1] / "fixtures")
)


def test_mstf_round_trip():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    blob = medmm.encode_mstf(a)
    assert blob[:4] == b"MSTF"
    assert len(blob) == 8 + 4 * 3 + 4 * a.size
    np.testing.assert_array_equal(medmm.decode_mstf(blob), a)
    with pytest.raises(medmm.MedmmError, match="MalformedHeader"):
        medmm.decode_mstf(b"XXXX" + blob[4:])


def test_image_loading():
    img = medmm.load_image_rgb8(FIXTURES / "rgb_2x2.png")
    assert img.dtype == np.uint8
    assert img.tolist() == [[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [10, 20, 30]]]
    with pytest.raises(medmm.MedmmError, match="DecodeError"):
        medmm.load_image_rgb8(FIXTURES / "not_image.txt")


def test_resize_hand_values():
    img = np.repeat(np.array([[0, 1], [2, 3]], dtype=np.float32)[:, :, None], 3, axis=2)
    out = medmm.resize_bilinear(img, 4, 4)[:, :, 0]
    expected = [[0, 0.25, 0.75, 1], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2, 2.25, 2.75, 3]]
    np.testing.assert_allclose(out, expected, atol=1e-7)


def test_split_stitch_round_trip():
    img = np.random.default_rng(1).random((756, 756, 3), dtype=np.float32)
    rows, cols, tiles = medmm.split_tiles(img, 378)
    assert (rows, cols, len(tiles)) == (2, 2, 4)
    np.testing.assert_array_equal(tiles[1], img[:378, 378:])
    np.testing.assert_array_equal(medmm.stitch_tiles(rows, cols, tiles), img)


def test_pyramid_and_prepare_square():
    levels = medmm.build_pyramid(np.full((378, 378, 3), 0.5, np.float32))
    assert [lv.shape[0] for lv in levels] == [378, 756, 1134]
    sq = medmm.prepare_square(np.ones((100, 50, 3), np.float32), 100)
    assert sq.shape == (100, 100, 3)
    assert sq[:, :25].max() == 0 and sq[:, 75:].max() == 0 and sq[:, 25:75].min() == 1


@pytest.mark.parametrize("kind,dim", [("PatchMean", 3), ("SeededLinear", 8)])
def test_multiscale_shape(kind, dim):
    img = np.random.default_rng(2).random((378, 378, 3), dtype=np.float32)
    out = medmm.encode_multiscale(img, kind=kind, dim=dim, seed=5)
    assert out.shape == (27, 27, 3 * dim)
    again = medmm.encode_multiscale(img, kind=kind, dim=dim, seed=5, threads=3)
    np.testing.assert_array_equal(out, again)


def test_patch_mean_matches_numpy():
    img = np.random.default_rng(3).random((378, 378, 3), dtype=np.float32)
    out = medmm.encode_multiscale(img, scales=[378])
    ref = img.astype(np.float64).reshape(27, 14, 27, 14, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_pooling():
    grid = np.array([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=np.float32)
    np.testing.assert_array_equal(medmm.pool_to_base(grid, 1), [[[2.5]]])


def _numpy_forward(x, w1, b1, w2, b2):
    z = x @ w1 + b1
    erf = np.vectorize(math.erf)
    return (0.5 * z * (1 + erf(z / math.sqrt(2)))) @ w2 + b2


def test_connector_forward_and_gradients():
    rng = np.random.default_rng(4)
    x, t = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (4, 3))
    w1, b1 = rng.uniform(-1, 1, (6, 5)), rng.uniform(-1, 1, 5)
    w2, b2 = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, 3)
    np.testing.assert_allclose(medmm.mlp_forward(x, w1, b1, w2, b2), _numpy_forward(x, w1, b1, w2, b2), atol=1e-12)
    g = medmm.mlp_backward(x, t, w1, b1, w2, b2)
    h = 1e-5
    for i in range(w1.shape[0]):
        for j in range(w1.shape[1]):
            up, down = w1.copy(), w1.copy()
            up[i, j] += h
            down[i, j] -= h
            num = (medmm.alignment_loss(medmm.mlp_forward(x, up, b1, w2, b2), t)
                   - medmm.alignment_loss(medmm.mlp_forward(x, down, b1, w2, b2), t)) / (2 * h)
            assert abs(num - g["w1"][i, j]) <= 1e-4 * max(abs(num), abs(g["w1"][i, j]), 1e-8)
    assert medmm.alignment_loss(t, t) == pytest.approx(0.0, abs=1e-15)
    assert medmm.alignment_loss(-t, t) == pytest.approx(2.0)


def test_schedule_and_training():
    assert medmm.lr_at(30, 1000) == 1e-3
    assert medmm.lr_at(1000, 1000) == 0.0
    assert medmm.lr_at(3, 100, "InstructFinetune") == 2e-5
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (64, 6)).astype(np.float32)
    y = x @ rng.uniform(-1, 1, (6, 3)).astype(np.float32)
    a = medmm.train_stage(x, y, hidden=16, lr=1e-2, batch=8, epochs=5, seed=1)
    b = medmm.train_stage(x, y, hidden=16, lr=1e-2, batch=8, epochs=5, seed=1)
    assert a["losses"] == b["losses"]
    assert len(a["losses"]) == 40
    # Per-batch losses are noisy; compare whole-epoch means.
    assert np.mean(a["losses"][-8:]) < 0.5 * np.mean(a["losses"][:8])


def test_synthesis_helpers():
    assert medmm.SYSTEM_PROMPT.startswith("You are an AI assistant specialized in biomedical topics.")
    system, user = medmm.build_prompt("A CT scan.", ["m1", "m2"])
    assert system == medmm.SYSTEM_PROMPT
    assert user == "Figure Caption: A CT scan.\n\nIn Context Mentioning #1: m1\n\nIn Context Mentioning #2: m2"
    ids = [f"id{i}" for i in range(20)]
    mapping = medmm.assign_providers(ids, 0.25, 7)
    assert sum(v == "A" for v in mapping.values()) == 5
    assert mapping == medmm.assign_providers(ids, 0.25, 7)
    turns = medmm.parse_conversation((FIXTURES / "sample_generation.txt").read_text())
    assert [r for r, _ in turns] == ["human", "gpt"] * 3
    assert turns[0][1] == "What is the location of the extraskeletal mass?"
    with pytest.raises(medmm.MedmmError, match="DanglingAssistant"):
        medmm.parse_conversation("Assistant: hi")


def test_metrics():
    assert medmm.normalize("Left  lower-lobe") == ["left", "lower", "lobe"]
    assert medmm.open_recall("the left lobe is affected", "left lower lobe") == 2 / 3
    dataset = (FIXTURES / "vqa_10.jsonl").read_text()
    items = [json.loads(line) for line in dataset.splitlines()]
    preds = "\n".join(json.dumps({"qid": it["qid"], "text": it["answer"]}) for it in items)
    report = medmm.evaluate_jsonl(preds, dataset)
    assert report["open_recall"] == 1.0
    assert report["closed_accuracy"] == 1.0
    assert report["average"] == 1.0
    assert (report["n_open"], report["n_closed"]) == (5, 5)
