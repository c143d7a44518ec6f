"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py`` and read the summary block at the end.
"""

import itertools
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import random_caption, random_region_set, tiny_config
from tern import checkpoint as ckpt_io
from tern import numerics as nx
from tern.cli import main
from tern.config import RunConfig
from tern.data_io import (
    CaptionRecord,
    Embedding,
    RegionSet,
    average_fold_metrics,
    fold_image_ids,
    load_captions,
    load_embeddings,
    load_region_features,
    write_captions,
    write_embeddings,
    write_region_features,
)
from tern.encoder import make_te_layer, scaled_dot_product_attention, te_stack_forward
from tern.experiments import overfit_synthetic
from tern.metrics import RelevanceMatrix, dcg, ndcg, rouge_l
from tern.model import TERN
from tern.numerics import Tensor
from tern.training import similarity_matrix, triplet_loss_hard_negatives

RESULTS = []


@contextmanager
def criterion(number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        RESULTS.append(f"FAIL  [{number}] {title} ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})")
        raise
    RESULTS.append(f"PASS  [{number}] {title} ({time.perf_counter() - start:.1f}s)")


# --- independent oracles -----------------------------------------------------

def brute_triplet_loss(S, alpha):
    B = len(S)
    total = 0.0
    for i in range(B):
        total += max(0.0, max(alpha + S[i][c] - S[i][i] for c in range(B) if c != i))
        total += max(0.0, max(alpha + S[j][i] - S[i][i] for j in range(B) if j != i))
    return total


def direct_dcg(rels, p):
    return sum(r / math.log2(i + 2) for i, r in enumerate(rels[:p]))


def brute_lcs(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            it = iter(long_)
            if all(short[i] in it for i in idx):
                return k
    return 0


def brute_rouge(c, r, beta):
    lcs = brute_lcs(c, r)
    if lcs == 0:
        return 0.0
    rec, prec = lcs / len(r), lcs / len(c)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


# --- criteria ----------------------------------------------------------------

def test_c1_gradient_check():
    with criterion(1, "gradient check, full model + triplet loss, 2-pair batch, 64-bit"):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        model = TERN(tiny_config(n_visual_te=2, n_text_te=1, n_shared_te=1), seed=11)
        sets = [random_region_set(rng, n=4, image_id=f"i{k}") for k in range(2)]
        caps = [random_caption(rng, m=5, caption_id=f"c{k}", image_id=f"i{k}") for k in range(2)]

        def loss():
            S = similarity_matrix(model.forward_images(sets), model.forward_captions(caps))
            return triplet_loss_hard_negatives(S, 0.2)

        assert loss().item() > 0, "loss is zero, gradient check would be vacuous"
        err = nx.check_gradients(loss, model.parameters(), eps=1e-6, n_samples=80, rng=np.random.default_rng(1))
        assert err < 1e-4, err
        assert time.perf_counter() - start < 60


def test_c2_loss_oracle():
    with criterion(2, "triplet loss: hand cases and brute-force oracle on 100 random 5x5"):
        assert triplet_loss_hard_negatives(np.array([[0.9, 0.1], [0.2, 0.8]]), 0.2).item() == 0.0
        assert abs(triplet_loss_hard_negatives(np.array([[0.5, 0.6], [0.4, 0.5]]), 0.2).item() - 0.8) < 1e-15
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            S = rng.uniform(-1, 1, (5, 5))
            worst = max(worst, abs(triplet_loss_hard_negatives(S, 0.2).item() - brute_triplet_loss(S, 0.2)))
        assert worst < 1e-10, worst


def test_c3_ndcg_oracle():
    with criterion(3, "DCG reference value, NDCG=1 on sorted lists, NDCG in [0,1]"):
        assert abs(direct_dcg([3, 2, 3, 0, 1, 2], 6) - 6.861) < 1e-3
        assert abs(dcg([3, 2, 3, 0, 1, 2], 6) - 6.861) < 1e-3
        rng = np.random.default_rng(3)
        for _ in range(100):
            rels = sorted(rng.uniform(0, 1, rng.integers(1, 40)).tolist(), reverse=True)
            assert ndcg(rels, int(rng.integers(1, 30))) == 1.0
        for _ in range(1000):
            rels = rng.uniform(0, 1, rng.integers(1, 40)) * (rng.uniform(size=1) > 0.1)
            assert 0.0 <= ndcg(rels.tolist(), int(rng.integers(1, 30))) <= 1.0


def test_c4_rouge_oracle():
    with criterion(4, "ROUGE-L vs brute-force LCS on 200 pairs, reference sentence F=0.75"):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = rng.integers(0, 6, rng.integers(1, 13)).tolist()
            b = rng.integers(0, 6, rng.integers(1, 13)).tolist()
            assert abs(rouge_l(a, b) - brute_rouge(a, b, 1.2)) <= 1e-12
        f = rouge_l("police kill the gunman".split(), "police killed the gunman".split(), beta=1.0)
        assert abs(f - 0.75) < 1e-12


def test_c5_encoder_invariants():
    with criterion(5, "padding invariance, permutation equivariance, attention rows, 50 seeds"):
        worst_pad = worst_perm = worst_rows = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            with nx.precision("float32"):
                layers = [make_te_layer(f"l{i}", 16, 4, 32, 0.1, rng) for i in range(4)]
                n, pad = int(rng.integers(1, 12)), int(rng.integers(1, 8))
                X = rng.normal(size=(n, 16))
                padded = np.concatenate([X, rng.normal(size=(pad, 16)) * 10])
                mask = np.array([True] * n + [False] * pad)
                base = te_stack_forward(Tensor(X), layers).data
                worst_pad = max(worst_pad, np.abs(te_stack_forward(Tensor(padded), layers, mask).data[:n] - base).max())
                perm = rng.permutation(n)
                worst_perm = max(worst_perm, np.abs(te_stack_forward(Tensor(X[perm]), layers).data - base[perm]).max())
                _, w = scaled_dot_product_attention(Tensor(padded), Tensor(padded), Tensor(padded), mask,
                                                    return_weights=True)
                worst_rows = max(worst_rows, np.abs(w.data.sum(axis=-1) - 1).max())
        assert worst_pad <= 1e-5, worst_pad
        assert worst_perm <= 1e-5, worst_perm
        assert worst_rows <= 1e-6, worst_rows


def test_c6_weight_sharing(tmp_path):
    with criterion(6, "shared gradient = sum of branch gradients, single stored copy"):
        rng = np.random.default_rng(6)
        model = TERN(tiny_config(n_shared_te=2), seed=6)
        sets = [random_region_set(rng, image_id=f"i{k}") for k in range(3)]
        caps = [random_caption(rng, caption_id=f"c{k}", image_id=f"i{k}") for k in range(3)]
        shared = [p for layer in model.visual_shared for p in layer.parameters()]
        assert all(a is b for la, lb in zip(model.visual_shared, model.text_shared)
                   for a, b in zip(la.parameters(), lb.parameters()))

        def grads(detach_img=False, detach_cap=False):
            model.zero_grad()
            img, cap = model.forward_images(sets), model.forward_captions(caps)
            img = img.detach() if detach_img else img
            cap = cap.detach() if detach_cap else cap
            triplet_loss_hard_negatives(similarity_matrix(img, cap), 0.5).backward()
            return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in shared]

        full, via_img, via_cap = grads(), grads(detach_cap=True), grads(detach_img=True)
        assert any(np.abs(g).max() > 0 for g in via_img) and any(np.abs(g).max() > 0 for g in via_cap)
        for f, a, b in zip(full, via_img, via_cap):
            assert np.abs(f - (a + b)).max() <= 1e-10

        ckpt_io.save(tmp_path / "m.ckpt", model, {})
        names = list(ckpt_io.load(tmp_path / "m.ckpt").tensors)
        shared_names = [n for n in names if n.startswith("shared.")]
        assert len(shared_names) == len(shared) == len(set(shared_names))


@pytest.mark.slow
def test_c7_overfit():
    with criterion(7, "overfit 32 images / 160 captions: R@1 = 1.0, NDCG@25 >= 0.95, <= 200 epochs"):
        with nx.precision("float32"):
            res = overfit_synthetic(seed=0, cfg=RunConfig.desk(), max_epochs=200)
        report = res.report
        RESULTS.append(f"      [7] epochs={res.epochs} R@1={report.recall[1]:.4f} "
                       f"NDCG@25={report.ndcg['rouge_l']:.4f} time={res.seconds:.1f}s")
        assert report.n_queries == 160 and report.n_images == 32
        assert report.recall[1] == 1.0
        assert report.ndcg["rouge_l"] >= 0.95
        assert res.epochs <= 200 and res.seconds < 600


def cli_run(root):
    data, run, ev = root / "data", root / "run", root / "eval"
    assert main(["gen", "--out", str(data), "--seed", "3", "--images", "16", "--test-images", "6"]) == 0
    cfg = RunConfig.desk(data, run)
    cfg.precision = "float64"
    cfg.train.epochs = 3
    cfg.train.batch_size = 8
    cfg.write(root / "cfg.json")
    assert main(["train", "--config", str(root / "cfg.json")]) == 0
    emb = root / "emb.jsonl"
    assert main(["embed", "--config", str(root / "cfg.json"), "--checkpoint",
                 str(run / "checkpoints" / "last.ckpt"), "--output", str(emb)]) == 0
    assert main(["evaluate", "--config", str(root / "cfg.json"), "--embeddings", str(emb), "--out", str(ev)]) == 0
    return [run / "checkpoints" / "last.ckpt", run / "checkpoints" / "epoch_0002.ckpt", run / "loss.csv",
            emb, ev / "report.txt", ev / "report.jsonl", ev / "summary.json", ev / "ndcg_vs_p.csv"]


def test_c8_determinism(tmp_path):
    with criterion(8, "same seed and config give bit-identical checkpoints and reports (64-bit)"):
        a = cli_run(tmp_path / "a")
        b = cli_run(tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_c9_format_fidelity(tmp_path):
    with criterion(9, "RELM and JSON-lines round trips, 5-fold split and averaging"):
        rng = np.random.default_rng(9)
        m = RelevanceMatrix([f"q{i}" for i in range(7)], [f"img{i}" for i in range(5)], rng.uniform(0, 1, (7, 5)))
        m.save(tmp_path / "r.relm")
        back = RelevanceMatrix.load(tmp_path / "r.relm")
        assert back.to_bytes() == (tmp_path / "r.relm").read_bytes()
        assert back.values.tobytes() == m.values.tobytes()
        assert (back.query_ids, back.image_ids) == (m.query_ids, m.image_ids)

        sets = [RegionSet(f"i{k}", 500.0, 375.0, [[1.5, 2.25, 100.0, 200.125]] * 3, rng.normal(size=(3, 7)))
                for k in range(4)]
        caps = [CaptionRecord(f"c{k}", f"i{k % 4}", f"A caption, number {k} · ünïcode") for k in range(8)]
        embs = [Embedding(f"e{k}", "image" if k % 2 else "caption", rng.normal(size=9)) for k in range(6)]
        for write, load, records in ((write_region_features, load_region_features, sets),
                                     (write_captions, load_captions, caps),
                                     (write_embeddings, load_embeddings, embs)):
            p1, p2 = tmp_path / f"{write.__name__}.1", tmp_path / f"{write.__name__}.2"
            write(p1, records)
            write(p2, load(p1))
            assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(sets, load_region_features(tmp_path / "write_region_features.1")):
            assert a.features.tobytes() == b.features.tobytes() and a.boxes.tobytes() == b.boxes.tobytes()
        for a, b in zip(embs, load_embeddings(tmp_path / "write_embeddings.1")):
            assert a.vector.tobytes() == b.vector.tobytes()
        assert load_captions(tmp_path / "write_captions.1") == caps

        ids = [f"t{k:02d}" for k in range(50)]
        folds = fold_image_ids(ids, 5)
        assert [len(f) for f in folds] == [10] * 5
        assert sorted(i for f in folds for i in f) == ids
        assert all(not set(a) & set(b) for a, b in itertools.combinations(folds, 2))
        per_fold = [{"recall": {"1": r1}, "ndcg": {"rouge_l": n}}
                    for r1, n in [(0.5, 0.7), (0.6, 0.8), (0.4, 0.6), (0.7, 0.9), (0.3, 0.5)]]
        avg = average_fold_metrics(per_fold)
        assert avg["recall"]["1"] == pytest.approx(2.5 / 5, abs=1e-15)
        assert avg["ndcg"]["rouge_l"] == pytest.approx(3.5 / 5, abs=1e-15)
