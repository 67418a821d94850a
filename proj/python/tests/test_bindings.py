import math
import pathlib

import numpy as np
import pytest

tmkd = pytest.importorskip("tmkd")

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def test_loss_hand_values():
    assert tmkd.feature_loss([0.0, 0.0], [2.0, 0.0], 2.0) == pytest.approx(0.4436, abs=1e-3)
    assert tmkd.logit_loss([1.0, 0.0], [0.0, 0.0], 4.0) == pytest.approx(0.00777, abs=1e-4)
    eye = np.eye(2)
    assert tmkd.crd_loss(eye, eye, 2.0) == pytest.approx(0.9481, abs=1e-3)


def test_loss_errors():
    with pytest.raises(ValueError):
        tmkd.feature_loss([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        tmkd.logit_loss([1.0], [1.0], 0.0)


def test_views_shapes_and_alpha_zero():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(12, 10, 3), dtype=np.uint8)
    views = tmkd.make_views(img)
    assert set(views) == {"rgb", "edge", "hf"}
    for v in views.values():
        assert v.shape == (12, 10, 3)
        assert v.min() >= 0.0 and v.max() <= 1.0
    flat = tmkd.make_views(img, alpha_e=0.0, alpha_hf=0.0)
    np.testing.assert_array_equal(flat["edge"], img / 255.0)
    np.testing.assert_array_equal(flat["hf"], img / 255.0)


def test_canny_step_edge():
    ch = np.zeros((10, 10))
    ch[:, 5:] = 255.0
    e = tmkd.canny(ch, 100.0, 200.0)
    assert e.dtype == np.uint8
    assert set(np.unique(e)) <= {0, 255}
    assert e.any()
    assert not tmkd.canny(np.full((8, 8), 90.0)).any()


def test_embeddings_fixture_and_round_trip():
    path = FIXTURES / "synthetic4_pseudo64.emb"
    table = tmkd.load_embeddings(str(path))
    assert len(table) == 12
    assert tmkd.encode_embeddings(table) == path.read_bytes()
    assert tmkd.parse_embeddings(path.read_bytes()).keys() == table.keys()
    assert tmkd.missing_keys(table, ["circle_coarse", "square_fine"]) == []


def test_pseudo_embeddings_reproduce_fixture():
    table = tmkd.pseudo_embeddings(["circle_coarse", "circle_fine", "square_coarse", "square_fine"], dim=64, seed=0)
    assert tmkd.encode_embeddings(table) == (FIXTURES / "synthetic4_pseudo64.emb").read_bytes()
    for v in table.values():
        assert math.isclose(float(np.linalg.norm(v.astype(np.float64))), 1.0, abs_tol=1e-6)


def test_partial_fixture_reports_missing_keys():
    table = tmkd.load_embeddings(str(FIXTURES / "partial2_pseudo64.emb"))
    missing = tmkd.missing_keys(table, ["circle_coarse", "square_fine"])
    assert missing == ["square_fine/rgb", "square_fine/edge", "square_fine/hf"]
    assert tmkd.embedding_key("square_fine", "hf") == "square_fine/hf"


def test_bad_embedding_bytes():
    with pytest.raises(tmkd.ParseError):
        tmkd.parse_embeddings(b"TMKX" + bytes(12))


def test_evaluate_logits():
    r = tmkd.evaluate_logits(np.eye(4), [0, 1, 2, 3], 2)
    assert r["top1"] == 100.0 and r["k"] == 2


def test_gradcheck_and_config():
    ok, text = tmkd.gradcheck(trials=3)
    assert ok
    assert text.rstrip().endswith("PASS")
    cfg = tmkd.default_config()
    assert "train.lr = 0.001" in cfg
    assert tmkd.resolve_config(cfg) == cfg
    with pytest.raises(ValueError):
        tmkd.resolve_config("train.nope = 1\n")
