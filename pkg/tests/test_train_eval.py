import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astcaps import checkpoint
from astcaps.data import SampleWindow, synth_generate
from astcaps.decision import BayesModel
from astcaps.metrics import (HEAD_NAMES, auc, confusion_matrix, evaluate, export_features, layer_features,
                             roc_curve, write_metrics)
from astcaps.model import ASTCapsNet, ModelConfig
from astcaps.spatiotemporal import WindowLayout
from astcaps.tensor import Rng
from astcaps.train import train, write_curve

TOY = dict(K=6, T=5, n_classes=3, hidden=4, conv_filters=3, conv_kernel=(3, 3), caps_kernel=(2, 2),
           primary_caps=4, digit_dim=4, routing_iterations=2, head2_width=5)


def toy_windows(n_classes=3, per_class=8, seed=0):
    return synth_generate(n_classes, per_class, WindowLayout(6, 5), 0.05, Rng(seed))


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


# -- training -------------------------------------------------------------

def test_zero_epochs_leaves_model_untouched():
    model = ASTCapsNet(ModelConfig(**TOY), Rng(1))
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    res = train(model, toy_windows(), 0, 4, Rng(2))
    assert res.curve == [] and model.bayes is None
    assert all(np.array_equal(before[k], v.data) for k, v in model.parameters().items())


def test_first_batch_loss_decreases():
    ws = toy_windows()
    X = np.stack([w.features for w in ws])
    y = np.array([w.label for w in ws])
    for seed in range(5):
        model = ASTCapsNet(ModelConfig(**TOY), Rng(seed))
        before = model.loss(model.forward(X), y).total.item()
        train(model, ws, 1, len(ws), Rng(seed))
        after = model.loss(model.forward(X), y).total.item()
        assert after < before


def test_training_is_bit_identical_for_fixed_seeds():
    runs = []
    for _ in range(2):
        model = ASTCapsNet(ModelConfig(**TOY, dropout=0.3), Rng(3))
        res = train(model, toy_windows(), 3, 5, Rng(4))
        runs.append((checkpoint.dumps(model), res.curve))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]


def test_training_rejects_bad_arguments():
    model = ASTCapsNet(ModelConfig(**TOY), Rng(0))
    with pytest.raises(ValueError):
        train(model, toy_windows(), -1, 4, Rng(0))
    with pytest.raises(ValueError):
        train(model, toy_windows(per_class=2), 1, 100, Rng(0))
    with pytest.raises(ValueError):
        train(model, [], 1, 1, Rng(0))


def test_curve_csv(tmp_path):
    model = ASTCapsNet(ModelConfig(**TOY), Rng(5))
    res = train(model, toy_windows(), 2, 8, Rng(6))
    write_curve(tmp_path / "c.csv", res.curve)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_tp,l_st,l_pc,l_dc,total,acc" and len(lines) == 3
    row = res.curve[0]
    assert abs(row["total"] - (row["l_tp"] + row["l_st"] + row["l_pc"] + row["l_dc"])) <= 1e-12


# -- metrics --------------------------------------------------------------

def test_auc_perfect_and_reversed():
    fpr, tpr = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert auc(fpr, tpr) == 1.0
    fpr, tpr = roc_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    assert auc(fpr, tpr) == 0.0
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1


def test_auc_six_point_pairwise():
    scores = [0.9, 0.7, 0.7, 0.4, 0.3, 0.1]
    positive = [1, 0, 1, 0, 1, 0]
    fpr, tpr = roc_curve(scores, positive)
    assert abs(auc(fpr, tpr) - pairwise_auc(scores, positive)) <= 1e-15
    assert pairwise_auc(scores, positive) == pytest.approx(6.5 / 9)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pairwise_count(pairs):
    scores = [s / 5 for s, _ in pairs]
    positive = [p for _, p in pairs]
    if all(positive) or not any(positive):
        with pytest.raises(ValueError):
            roc_curve(scores, positive)
        return
    fpr, tpr = roc_curve(scores, positive)
    assert abs(auc(fpr, tpr) - pairwise_auc(scores, positive)) <= 1e-12
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_confusion_matrix():
    cm = confusion_matrix([0, 1, 2, 2], [0, 2, 2, 1], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 1]]


def trained_toy(n_classes=3, **extra):
    cfg = ModelConfig(**{**TOY, "n_classes": n_classes, **extra})
    model = ASTCapsNet(cfg, Rng(7))
    ws = toy_windows(n_classes)
    train(model, ws, 2, 8, Rng(8))
    return model, ws


def test_evaluate_report_shape_and_micro_auc():
    model, ws = trained_toy()
    rep = evaluate(model, ws)
    assert set(rep.accuracy) == set(HEAD_NAMES) | {"bayes_fused"}
    assert rep.confusion.sum() == len(ws) and rep.n_test == len(ws)
    y = np.array([w.label for w in ws])
    _, post = model.fused(np.concatenate([model.votes(np.stack([w.features for w in ws]))]))
    pooled = pairwise_auc(post.ravel().tolist(), np.eye(3, dtype=bool)[y].ravel().tolist())
    assert abs(rep.auc_micro - pooled) <= 1e-12
    assert rep.accuracy["bayes_fused"] == float(np.trace(rep.confusion)) / len(ws)


def test_fused_follows_a_trusted_head():
    model, ws = trained_toy()
    y = np.array([w.label for w in ws])
    # force every vote onto the digit head and make the Bayes layer trust only it
    votes = model.votes(np.stack([w.features for w in ws]))
    cond = np.full((4, 3, 3), 1 / 3)
    cond[3] = np.eye(3) * 0.98 + 0.01
    model.bayes = BayesModel(np.full(3, 1 / 3), cond, 1.0)
    rep = evaluate(model, ws)
    assert rep.accuracy["bayes_fused"] == float((votes[:, 3] == y).mean())


def test_write_metrics_files(tmp_path):
    model, ws = trained_toy()
    write_metrics(evaluate(model, ws), tmp_path, ["a", "b", "c"])
    names = {p.name for p in tmp_path.iterdir()}
    assert {"metrics.json", "confusion.csv", "roc_micro.csv", "roc_0.csv"} <= names
    assert (tmp_path / "confusion.csv").read_text().splitlines()[0] == "true\\pred,a,b,c"


def test_export_feature_shapes(tmp_path):
    model, ws = trained_toy(n_classes=4, digit_dim=16)
    X = np.stack([w.features for w in ws])
    assert layer_features(model, X, "digit").shape == (len(ws), 64)
    assert layer_features(model, X, "low_level").shape == (len(ws), int(np.prod(model.config.map_shape)))
    p = export_features(model, ws, "digit", tmp_path / "f.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 1 + len(ws) and len(lines[0].split(",")) == 65
    with pytest.raises(ValueError):
        layer_features(model, X, "nope")


# -- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip_byte_identical(tmp_path):
    model, ws = trained_toy()
    path = checkpoint.save(model, tmp_path / "m.ckpt", {"note": "x"})
    loaded, echo = checkpoint.load(path)
    assert echo["note"] == "x" and echo["model"]["hidden"] == 4
    assert checkpoint.dumps(loaded, {"note": "x"}) == path.read_bytes()
    X = np.stack([w.features for w in ws])
    assert np.array_equal(model.votes(X), loaded.votes(X))
    assert evaluate(model, ws).to_json() == evaluate(loaded, ws).to_json()


def test_checkpoint_without_bayes():
    model = ASTCapsNet(ModelConfig(**TOY), Rng(0))
    loaded, _ = checkpoint.loads(checkpoint.dumps(model))
    assert loaded.bayes is None


def test_checkpoint_errors():
    model, _ = trained_toy()
    raw = checkpoint.dumps(model)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXXXXXX" + raw[8:])
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(raw[:8] + struct.pack("<I", 99) + raw[12:])
    for cut in (10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(raw[:cut])
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.loads(raw + b"\x00")
    with pytest.raises(checkpoint.CheckpointError, match="not found"):
        checkpoint.load("/nonexistent/model.ckpt")


def test_checkpoint_config_mismatch_names_parameter():
    model, _ = trained_toy()
    other = ModelConfig(**{**TOY, "hidden": 5})
    with pytest.raises(checkpoint.CheckpointError, match=r"cell\.W_z"):
        checkpoint.loads(checkpoint.dumps(model), other)
