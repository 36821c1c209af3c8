import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vicprompt import evaluation as ev
from vicprompt.canvas import compose_canvas, extract_cell, resize, to_tensor
from vicprompt.data import split_folds
from vicprompt.pipeline import binarize
from vicprompt.prompt import PLACEMENTS, init_prompt
from vicprompt.retrieval import build_index, retrieve
from vicprompt.trainer import TrainConfig

FAST = TrainConfig(epochs=1, batch_size=8, learning_rate=0.05)


def _pixel_count_miou(preds, gts):
    per = {}
    for c in preds:
        inter = union = 0
        for p, g in zip(preds[c], gts[c]):
            for i in range(p.shape[0]):
                for j in range(p.shape[1]):
                    inter += bool(p[i, j]) and bool(g[i, j])
                    union += bool(p[i, j]) or bool(g[i, j])
        per[c] = 1.0 if union == 0 else inter / union
    return per


def test_miou_trivial_cases():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert ev.miou({0: [a]}, {0: [a]})[1] == 1.0
    assert ev.miou({0: [a]}, {0: [~a]})[1] == 0.0
    empty = np.zeros((4, 4), bool)
    assert ev.miou({0: [empty]}, {0: [empty]})[1] == 1.0


def test_miou_half_overlap_rectangles():
    p = np.zeros((8, 8), bool)
    g = np.zeros((8, 8), bool)
    p[0:4, 0:4] = True
    g[0:4, 2:6] = True
    per, mean = ev.miou({3: [p]}, {3: [g]})
    assert per[3] == _pixel_count_miou({3: [p]}, {3: [g]})[3] == 8 / 24
    assert mean == per[3]


def test_miou_accumulates_per_class():
    p1, g1 = np.ones((2, 2), bool), np.ones((2, 2), bool)
    p2, g2 = np.zeros((2, 2), bool), np.ones((2, 2), bool)
    per, _ = ev.miou({0: [p1, p2]}, {0: [g1, g2]})
    assert per[0] == 4 / 8  # not the per-image mean of 1.0 and 0.0 either way, but pooled counts


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_miou_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    preds, gts = {}, {}
    for c in range(rng.integers(1, 4)):
        n = int(rng.integers(1, 3))
        preds[c] = [rng.random((16, 16)) < rng.random() for _ in range(n)]
        gts[c] = [rng.random((16, 16)) < rng.random() for _ in range(n)]
    per, mean = ev.miou(preds, gts)
    assert per == _pixel_count_miou(preds, gts)
    assert mean == np.mean(list(per.values()))


def test_miou_rejects_misaligned():
    a = np.zeros((2, 2), bool)
    with pytest.raises(ValueError):
        ev.miou({0: [a]}, {1: [a]})
    with pytest.raises(ValueError):
        ev.miou({0: [a, a]}, {0: [a]})
    with pytest.raises(ValueError):
        ev.miou({0: [a]}, {0: [np.zeros((3, 3), bool)]})


def test_binarize_cases():
    assert binarize(np.ones((4, 4, 3))).all()
    assert not binarize(np.zeros((4, 4, 3))).any()
    img = np.random.default_rng(0).random((8, 8, 3))
    out = binarize(img)
    for i in range(8):
        for j in range(8):
            assert out[i, j] == ((img[i, j, 0] + img[i, j, 1] + img[i, j, 2]) / 3 > 0.5)
    t = torch.from_numpy(img).permute(2, 0, 1)
    assert np.array_equal(binarize(t).numpy(), out)


def test_token_agreement_grids():
    m = torch.zeros(4, 4, dtype=torch.bool)
    m[2:, 2:] = True
    a = torch.randint(0, 9, (2, 4, 4), generator=torch.Generator().manual_seed(0))
    assert ev.token_agreement_grids(a, a.clone(), m) == 1.0
    assert ev.token_agreement_grids(a, a + 1, m) == 0.0
    b = a.clone()
    b[0, 2, 2] += 1
    b[1, 3, 3] += 1
    b[0, 0, 0] += 1  # outside the mask
    count = sum(int(a[k, i, j] == b[k, i, j]) for k in range(2) for i in (2, 3) for j in (2, 3))
    assert ev.token_agreement_grids(a, b, m) == count / 8 == 6 / 8


def test_zero_prompt_bit_identical_to_baseline(toy_data, tiny_bundle):
    pool = toy_data.subset(lambda p: int(p.id) < 20)
    queries = toy_data.subset(lambda p: int(p.id) >= 20).pairs
    idx = build_index(pool)
    base = ev.predict_records(queries, idx, pool, tiny_bundle)
    zero = ev.predict_records(queries, idx, pool, tiny_bundle, init_prompt(64, 8), "I,L&Q")
    for b, z in zip(base, zero):
        assert b.retrieved_id == z.retrieved_id
        assert np.array_equal(b.label, z.label) and b.iou == z.iou


def test_single_query_matches_manual_stages(toy_data, tiny_bundle):
    pool = toy_data.subset(lambda p: int(p.id) < 24)
    q = toy_data.pairs[30]
    idx = build_index(pool)
    prompt = init_prompt(64, 8, "gaussian", seed=0, sigma=0.3)
    rec = ev.predict_label(q, idx, pool, tiny_bundle, prompt, "I&L")
    # stage by stage
    rid = retrieve(idx, q.input)
    ctx = pool.by_id(rid)
    x, y, xq = (to_tensor(a) for a in (ctx.input, ctx.label, q.input))
    x = x + prompt.theta * prompt.mask
    y = y + prompt.theta * prompt.mask
    cv = compose_canvas(x, y, xq, 32)
    z = tiny_bundle.predict_logits(cv).argmax(-1)
    lab = extract_cell(tiny_bundle.decode(z), "BR")[0].permute(1, 2, 0).numpy()
    assert rec.retrieved_id == rid
    np.testing.assert_array_equal(rec.label, lab)
    gt = binarize(resize(to_tensor(q.label), 32)[0]).numpy()
    assert rec.iou == ev._iou(binarize(lab), gt)
    assert 0.0 <= rec.iou <= 1.0 and rec.mask.dtype == bool


def _folds(toy_data):
    return split_folds(toy_data, 2)


def test_fold_experiment_report(toy_data, tiny_bundle, tmp_path):
    folds = _folds(toy_data)
    rep = ev.run_fold_experiment(folds, tiny_bundle, FAST)
    assert [r["fold"] for r in rep.rows] == [0, 1]
    for r in rep.rows:
        assert 0 <= r["baseline_mIoU"] <= 1 and 0 <= r["prompt_mIoU"] <= 1
    assert rep.summary["gain"] == pytest.approx(rep.summary["prompt_mIoU"] - rep.summary["baseline_mIoU"])
    # re-aggregate from persisted records
    for i, (_, test) in enumerate(folds):
        ev.save_records(rep.records[f"prompt/fold{i}"], tmp_path / f"r{i}")
        back = ev.load_records(tmp_path / f"r{i}")
        _, mean = ev.score_records(back, ev.ground_truth_masks(test.pairs, 32))
        assert mean == rep.rows[i]["prompt_mIoU"]
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["kind"] == "fold" and d["provenance"]["backbone"] == tiny_bundle.fingerprint
    assert len(d["provenance"]["prompts"]) == 2
    assert (tmp_path / "r_per_class.csv").exists()


def test_placement_ablation_rows(toy_data, tiny_bundle):
    fold = _folds(toy_data)[0]
    rep = ev.ablate_placement(fold, tiny_bundle, FAST)
    assert [r["placement"] for r in rep.rows] == ["baseline", *PLACEMENTS]
    fold_rep = ev.run_fold_experiment([fold], tiny_bundle, FAST)
    il = next(r["mIoU"] for r in rep.rows if r["placement"] == "I&L")
    assert il == fold_rep.rows[0]["prompt_mIoU"]
    frozen = ev.ablate_placement(fold, tiny_bundle, TrainConfig(epochs=1, learning_rate=0.0),
                                 placements=["I,L&Q"])
    assert frozen.rows[1]["mIoU"] == frozen.rows[0]["mIoU"]


def test_padding_sweep_param_column(toy_data, tiny_bundle):
    fold = _folds(toy_data)[0]
    rep = ev.sweep_padding(fold, [2, 32], tiny_bundle, TrainConfig(epochs=1, learning_rate=0.0))
    assert [r["params"] for r in rep.rows] == [3 * (64 ** 2 - 60 ** 2), 3 * 64 ** 2]


def test_dataset_size_sweep(toy_data, tiny_bundle):
    fold = _folds(toy_data)[0]
    rep = ev.sweep_dataset_size(fold, tiny_bundle, TrainConfig(epochs=1, val_fraction=0.0),
                                sizes=[2, 4, 100, None])
    assert [r["size"] for r in rep.rows] == ["2", "4", "100", "all"]
    assert [r["images_per_class"] for r in rep.rows] == [2, 4, 8, 8]
    assert rep.rows[2]["prompt_mIoU"] == rep.rows[3]["prompt_mIoU"]
    assert ev.DATASET_SIZES == (16, 32, 64, 128, 256, None)


def test_cross_class_matrix_shape_and_diagonal(toy_data, tiny_bundle):
    half = lambda p: int(p.id) % 8 < 5  # noqa: E731
    train = toy_data.subset(half)
    test = toy_data.subset(lambda p: not half(p))
    rep = ev.cross_class_matrix(train, test, tiny_bundle, FAST, classes=[0, 1, 2])
    assert len(rep.matrix) == 3 and all(len(r) == 3 for r in rep.matrix)
    assert rep.summary["mean_all_pairs"] == pytest.approx(np.mean(rep.matrix))
    single = ev.cross_class_matrix(train, test, tiny_bundle, FAST, classes=[1])
    assert single.matrix[0][0] == rep.matrix[1][1]


def test_domain_shift_arms(toy_data, tiny_bundle):
    from vicprompt.data import DatasetSpec, SHAPE_CLASSES, generate_dataset

    train, test = _folds(toy_data)[0]
    shifted = generate_dataset(DatasetSpec(classes=SHAPE_CLASSES[:4], per_class_count=8, seed=3, domain_id=1))
    shifted = shifted.subset(lambda p: p.class_id in set(train.class_ids))
    rep = ev.domain_shift(train, shifted, test, tiny_bundle, FAST, placements=["I&L"])
    assert [r["arm"] for r in rep.rows] == ["baseline", "I&L"]
    for r in rep.rows:
        assert r["drop"] == r["in_domain"] - r["shifted"]
    fold_rep = ev.run_fold_experiment([(train, test)], tiny_bundle, FAST)
    assert rep.rows[0]["in_domain"] == fold_rep.rows[0]["baseline_mIoU"]
    assert rep.rows[1]["in_domain"] == fold_rep.rows[0]["prompt_mIoU"]


def test_reports_are_reproducible(toy_data, tiny_bundle, tmp_path):
    fold = _folds(toy_data)[0]
    for k in range(2):
        ev.run_fold_experiment([fold], tiny_bundle, FAST).to_json(tmp_path / f"{k}.json")
    assert (tmp_path / "0.json").read_bytes() == (tmp_path / "1.json").read_bytes()


def test_grid_assembly_oracle(tmp_path):
    rng = np.random.default_rng(0)
    panels = [[rng.random((8, 8, 3)).astype(np.float32) for _ in range(3)] for _ in range(2)]
    img = ev.assemble_grid(panels, cell=8, gap=2)
    assert img.shape == (2 * 8 + 2, 3 * 8 + 4, 3)
    for i in range(2):
        for j in range(3):
            y, x = i * 10, j * 10
            want = (np.clip(panels[i][j], 0, 1) * 255 + 0.5).astype(np.uint8)
            assert np.array_equal(img[y:y + 8, x:x + 8], want)
    assert (img[8:10] == 255).all()
    with pytest.raises(ValueError):
        ev.assemble_grid([[panels[0][0]], []], cell=8)


def test_comparison_grid(toy_data, tiny_bundle, tmp_path):
    train, test = _folds(toy_data)[0]
    idx = build_index(train)
    base = ev.predict_records(test.pairs, idx, train, tiny_bundle)
    prom = ev.predict_records(test.pairs, idx, train, tiny_bundle, init_prompt(64, 8, "gaussian", sigma=0.2))
    img = ev.render_comparison(base, prom, test, train, 3, tmp_path / "g.png")
    assert img.shape == (6 * 32 + 5 * 2, 3 * 32 + 2 * 2, 3)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "g.png")), img)
    with pytest.raises(KeyError):
        ev.comparison_panels(base, prom[1:], test, train, 3)
    with pytest.raises(ValueError):
        ev.comparison_panels(base, prom, test, train, len(base) + 1)


def test_missing_records_are_explicit(tmp_path):
    with pytest.raises(FileNotFoundError):
        ev.load_records(tmp_path)
