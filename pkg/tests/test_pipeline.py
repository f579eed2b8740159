import dataclasses
import json
import os

import numpy as np
import pytest
from PIL import Image

from coseg import cli, grabcut, metrics, packio, pipeline
from oracles import masked_edges_oracle


def _write_class(tmp_path, name="classA", n_images=8, grid=(8, 8), d=16,
                 rect=(2, 2, 4, 4), separation=10.0, noise=0.1, seed=0,
                 patch_size=8, render=False):
    feature_set, gts = packio.make_synthetic_class(
        n_images=n_images, grid=grid, d=d, fg_rect=rect,
        separation=separation, noise=noise, seed=seed, class_id=name,
        patch_size_px=patch_size)
    pack_dir = tmp_path / f"{name}_pack"
    packio.write_feature_pack(feature_set, str(pack_dir))
    gt_dir = tmp_path / f"{name}_gt"
    gt_dir.mkdir(exist_ok=True)
    for gt in gts:
        upscaled = np.repeat(np.repeat(gt.mask, patch_size, axis=0),
                             patch_size, axis=1)
        packio.save_mask_png(upscaled, str(gt_dir / f"{gt.image_id}.png"))
    image_dir = None
    if render:
        image_dir = tmp_path / f"{name}_images"
        image_dir.mkdir(exist_ok=True)
        for img in packio.render_synthetic_images(gts, patch_size, seed=seed):
            Image.fromarray(img.pixels).save(
                str(image_dir / f"{img.image_id}.png"))
    return str(pack_dir), str(gt_dir), (str(image_dir) if image_dir else None), gts


def _job(pack, out, **kwargs):
    return pipeline.ClassJob(class_id=kwargs.pop("class_id", "classA"),
                             relevance_pack=pack, affinity_pack=pack,
                             out_dir=out, **kwargs)


def _coarse_iou(results, gts):
    by_id = {gt.image_id: gt.mask for gt in gts}
    scores = []
    for res in results:
        truth = by_id[res.image_id]
        inter = np.count_nonzero(res.coarse.mask & truth)
        union = np.count_nonzero(res.coarse.mask | truth)
        scores.append(inter / union)
    return scores


def _read_mask_bytes(out_dir):
    mask_dir = os.path.join(out_dir, "masks")
    return {name: open(os.path.join(mask_dir, name), "rb").read()
            for name in sorted(os.listdir(mask_dir))}


# ---------------------------------------------------------------- run_class

def test_run_class_recovers_planted_masks(tmp_path):
    pack, gt_dir, _, gts = _write_class(tmp_path)
    results = pipeline.run_class(_job(pack, str(tmp_path / "out")),
                                 pipeline.PipelineConfig())
    assert len(results) == 8
    scores = _coarse_iou(results, gts)
    assert np.mean(scores) >= 0.9
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["failures"] == {}
    assert (tmp_path / "out" / "masks" / "classA_000.png").exists()
    assert (tmp_path / "out" / "coarse" / "classA_000.png").exists()


def test_run_class_with_images_refines_to_pixel_masks(tmp_path):
    pack, gt_dir, image_dir, gts = _write_class(tmp_path, n_images=4,
                                                render=True)
    results = pipeline.run_class(
        _job(pack, str(tmp_path / "out"), image_dir=image_dir),
        pipeline.PipelineConfig())
    by_id = {gt.image_id: gt.mask for gt in gts}
    for res in results:
        assert "energy_trace" in res.flags
        truth = np.repeat(np.repeat(by_id[res.image_id], 8, axis=0), 8, axis=1)
        inter = np.count_nonzero(res.pixel_mask.mask & truth)
        union = np.count_nonzero(res.pixel_mask.mask | truth)
        assert inter / union >= 0.95


def test_run_class_dual_resolution_packs(tmp_path):
    # relevance on a coarse 4x4 grid (patch 16), affinity on 8x8 (patch 8),
    # same 64px canvas; the seed is replicated onto the finer grid
    rel_set, _ = packio.make_synthetic_class(
        n_images=4, grid=(4, 4), d=12, fg_rect=(1, 1, 2, 2),
        separation=10.0, noise=0.1, seed=2, class_id="dual", patch_size_px=16)
    aff_set, fine_gts = packio.make_synthetic_class(
        n_images=4, grid=(8, 8), d=12, fg_rect=(2, 2, 4, 4),
        separation=10.0, noise=0.1, seed=3, class_id="dual", patch_size_px=8)
    rel_pack = tmp_path / "rel_pack"
    aff_pack = tmp_path / "aff_pack"
    packio.write_feature_pack(rel_set, str(rel_pack))
    packio.write_feature_pack(aff_set, str(aff_pack))
    job = pipeline.ClassJob(class_id="dual", relevance_pack=str(rel_pack),
                            affinity_pack=str(aff_pack),
                            out_dir=str(tmp_path / "out"))
    results = pipeline.run_class(job, pipeline.PipelineConfig())
    scores = _coarse_iou(results, fine_gts)
    assert np.mean(scores) >= 0.9


def test_run_class_deterministic_outputs(tmp_path):
    pack, _, image_dir, _ = _write_class(tmp_path, n_images=3, render=True)
    cfg = pipeline.PipelineConfig()
    pipeline.run_class(_job(pack, str(tmp_path / "a"), image_dir=image_dir), cfg)
    pipeline.run_class(_job(pack, str(tmp_path / "b"), image_dir=image_dir), cfg)
    assert _read_mask_bytes(str(tmp_path / "a")) == _read_mask_bytes(str(tmp_path / "b"))


def test_per_image_independence(tmp_path):
    pack, _, _, _ = _write_class(tmp_path)
    cfg = pipeline.PipelineConfig()
    full = pipeline.run_class(_job(pack, str(tmp_path / "full")), cfg)
    subset_ids = tuple(r.image_id for r in full[:4])
    subset = pipeline.run_class(
        _job(pack, str(tmp_path / "subset"), segment_ids=subset_ids), cfg)
    by_id = {r.image_id: r for r in full}
    for res in subset:
        assert np.array_equal(res.coarse.mask, by_id[res.image_id].coarse.mask)
        assert np.array_equal(res.pixel_mask.mask,
                              by_id[res.image_id].pixel_mask.mask)


def test_leave_one_out_masks_stable(tmp_path):
    pack, _, _, _ = _write_class(tmp_path)
    cfg = pipeline.PipelineConfig()
    standard = pipeline.run_class(_job(pack, str(tmp_path / "std")), cfg)
    loo = pipeline.run_class(
        _job(pack, str(tmp_path / "loo"), mode=pipeline.MODE_LEAVE_ONE_OUT), cfg)
    by_id = {r.image_id: r for r in standard}
    unchanged = sum(
        np.array_equal(res.coarse.mask, by_id[res.image_id].coarse.mask)
        for res in loo)
    assert unchanged >= 7


def test_outlier_injection_degrades_gracefully(tmp_path):
    pack, _, _, gts = _write_class(tmp_path, seed=4)
    donor_pack, _, _, _ = _write_class(tmp_path, name="donor", seed=99,
                                       rect=(0, 0, 3, 8))
    cfg = pipeline.PipelineConfig()
    baseline = pipeline.run_class(_job(pack, str(tmp_path / "base")), cfg)
    contaminated = pipeline.run_class(
        _job(pack, str(tmp_path / "cont"), mode=pipeline.MODE_OUTLIERS,
             n_outliers=2, donor_packs=(donor_pack,)), cfg)
    base_iou = np.mean(_coarse_iou(baseline, gts))
    cont_iou = np.mean(_coarse_iou(contaminated, gts))
    assert base_iou - cont_iou <= 0.05


def test_run_class_records_per_image_failures(tmp_path):
    pack, _, _, _ = _write_class(tmp_path, n_images=3)
    # zero out one image's tensor: zero-norm descriptors fail the affinity op
    data = np.zeros(8 * 8 * 16, dtype="<f4")
    (tmp_path / "classA_pack" / "tensor_0001.f32").write_bytes(data.tobytes())
    results = pipeline.run_class(_job(pack, str(tmp_path / "out")),
                                 pipeline.PipelineConfig())
    assert len(results) == 2
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert list(manifest["failures"]) == ["classA_001"]


def test_pack_mismatch_rejected(tmp_path):
    pack_a, _, _, _ = _write_class(tmp_path, name="a", n_images=3)
    pack_b, _, _, _ = _write_class(tmp_path, name="b", n_images=3)
    job = pipeline.ClassJob(class_id="a", relevance_pack=pack_a,
                            affinity_pack=pack_b, out_dir=str(tmp_path / "out"))
    with pytest.raises(ValueError, match="different image sets"):
        pipeline.run_class(job, pipeline.PipelineConfig())


# ----------------------------------------------------------------- evaluate

def test_evaluate_perfect_predictions(tmp_path):
    _, gt_dir, _, gts = _write_class(tmp_path, n_images=3)
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    for name in os.listdir(gt_dir):
        (pred_dir / name).write_bytes((tmp_path / "classA_gt" / name).read_bytes())
    coseg = pipeline.evaluate(str(pred_dir), gt_dir, mode="coseg")
    assert coseg.overall["jaccard"] == pytest.approx(1.0)
    assert coseg.overall["precision"] == pytest.approx(1.0)
    cosal = pipeline.evaluate(str(pred_dir), gt_dir, mode="cosal")
    assert cosal.overall["mae"] == pytest.approx(0.0)
    assert cosal.overall["f_beta_max"] == pytest.approx(1.0)
    assert cosal.overall["s_measure"] == pytest.approx(1.0)


def test_evaluate_missing_gt_lists_image(tmp_path):
    _, gt_dir, _, _ = _write_class(tmp_path, n_images=2)
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    for name in os.listdir(gt_dir):
        (pred_dir / name).write_bytes((tmp_path / "classA_gt" / name).read_bytes())
    os.remove(os.path.join(gt_dir, "classA_001.png"))
    with pytest.raises(FileNotFoundError, match="classA_001"):
        pipeline.evaluate(str(pred_dir), gt_dir, mode="coseg")


def test_evaluate_matches_direct_metric_calls(tmp_path):
    rng = np.random.default_rng(5)
    gt_dir = tmp_path / "gt"
    pred_dir = tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    expected = {}
    for i in range(5):
        gt = rng.random((8, 8)) > 0.5
        pred = rng.random((8, 8)) > 0.5
        packio.save_mask_png(gt, str(gt_dir / f"img{i}.png"))
        packio.save_mask_png(pred, str(pred_dir / f"img{i}.png"))
        expected[f"img{i}"] = {
            "jaccard": metrics.jaccard(pred, gt),
            "precision": metrics.precision(pred, gt),
        }
    report = pipeline.evaluate(str(pred_dir), str(gt_dir), mode="coseg")
    for image_id, values in expected.items():
        for key, value in values.items():
            assert report.per_image[image_id][key] == pytest.approx(value)


# ----------------------------------------------------------------- ablation

def test_ablation_identical_packs_give_identical_rows(tmp_path):
    pack, gt_dir, _, _ = _write_class(tmp_path, n_images=4)
    job = pipeline.ClassJob(class_id="classA", relevance_pack=pack,
                            affinity_pack=pack, gt_dir=gt_dir,
                            out_dir=str(tmp_path / "out"))
    rows = pipeline.run_ablation_matrix(job, pipeline.PipelineConfig())
    assert len(rows) == 4
    assert [(r["relevance_source"], r["affinity_source"]) for r in rows] == [
        ("pack-A", "pack-A"), ("pack-A", "pack-B"),
        ("pack-B", "pack-A"), ("pack-B", "pack-B")]
    first = rows[0]["metrics"]
    for row in rows[1:]:
        for key, value in row["metrics"].items():
            assert value == pytest.approx(first[key])


def test_ablation_signal_pack_beats_noise_pack(tmp_path):
    signal_pack, gt_dir, _, _ = _write_class(tmp_path, name="sig", n_images=6,
                                             seed=6)
    rng = np.random.default_rng(7)
    noise_grids = []
    signal_set = packio.read_feature_pack(signal_pack)
    for grid in signal_set.grids:
        noise_grids.append(dataclasses.replace(
            grid, features=rng.normal(size=grid.features.shape).astype(np.float32)))
    noise_set = packio.ClassFeatureSet(class_id="sig", grids=tuple(noise_grids),
                                       source_model_tag="synthetic-noise")
    noise_pack = tmp_path / "noise_pack"
    packio.write_feature_pack(noise_set, str(noise_pack))
    job = pipeline.ClassJob(class_id="sig", relevance_pack=signal_pack,
                            affinity_pack=str(noise_pack), gt_dir=gt_dir,
                            out_dir=str(tmp_path / "out"))
    rows = pipeline.run_ablation_matrix(job, pipeline.PipelineConfig())
    scores = {(r["relevance_source"], r["affinity_source"]):
              r["metrics"]["jaccard"] for r in rows}
    best = scores[("pack-A", "pack-A")]
    assert all(best > v for k, v in scores.items() if k != ("pack-A", "pack-A"))
    tags = {r["relevance_tag"] for r in rows}
    assert any("noise" in t for t in tags)


# -------------------------------------------------------------- edge masking

def test_mask_edgemap_identity_and_annihilation():
    rng = np.random.default_rng(8)
    edges = rng.random((10, 12))
    full = grabcut.PixelMask(image_id="e", mask=np.ones((10, 12), dtype=bool))
    none = grabcut.PixelMask(image_id="e", mask=np.zeros((10, 12), dtype=bool))
    assert np.array_equal(pipeline.mask_edgemap(edges, full), edges)
    assert np.all(pipeline.mask_edgemap(edges, none) == 0)


def test_mask_edgemap_matches_pointwise_oracle():
    rng = np.random.default_rng(9)
    edges = rng.random((6, 7))
    mask = rng.random((6, 7)) > 0.5
    out = pipeline.mask_edgemap(edges, grabcut.PixelMask(image_id="e", mask=mask))
    assert np.allclose(out, masked_edges_oracle(edges, mask))


def test_mask_edgemap_resizes_mask():
    edges = np.ones((8, 8))
    small = grabcut.PixelMask(image_id="e",
                              mask=np.array([[True, False], [False, True]]))
    out = pipeline.mask_edgemap(edges, small)
    assert out[:4, :4].all() and not out[:4, 4:].any()


# -------------------------------------------------------------------- config

def test_config_defaults_match_frozen_block():
    cfg = pipeline.PipelineConfig()
    for key, value in pipeline.APPENDIX_DEFAULTS.items():
        assert getattr(cfg, key) == value


def test_config_from_file(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("tau = 0.3\nk_eigenvectors = 8\nseed = 7  # comment\n")
    cfg = pipeline.PipelineConfig.from_file(str(path))
    assert cfg.tau == 0.3
    assert cfg.k_eigenvectors == 8
    assert cfg.seed == 7
    assert cfg.epsilon == 1e-5  # untouched default


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("not_a_field = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        pipeline.PipelineConfig.from_file(str(path))


def test_config_digest_changes_with_values():
    a = pipeline.PipelineConfig()
    b = dataclasses.replace(a, tau=0.25)
    assert a.digest() != b.digest()


# ----------------------------------------------------------------------- CLI

def test_cli_synth_segment_eval_round_trip(tmp_path):
    fixture_dir = tmp_path / "fixture"
    assert cli.main(["synth", "--out", str(fixture_dir), "--images", "4",
                     "--grid", "8,8", "--dim", "16", "--seed", "3",
                     "--render-images"]) == 0
    out_dir = tmp_path / "run"
    assert cli.main(["segment",
                     "--relevance-pack", str(fixture_dir / "pack"),
                     "--affinity-pack", str(fixture_dir / "pack"),
                     "--images", str(fixture_dir / "images"),
                     "--out", str(out_dir)]) == 0
    assert cli.main(["eval", "--pred", str(out_dir / "masks"),
                     "--gt", str(fixture_dir / "gt"),
                     "--mode", "coseg", "--report", "json"]) == 0


def test_cli_exit_codes(tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "nope"),
                     "--gt", str(tmp_path / "nope")]) == 1
    pack, _, _, _ = _write_class(tmp_path, n_images=3)
    data = np.zeros(8 * 8 * 16, dtype="<f4")
    (tmp_path / "classA_pack" / "tensor_0002.f32").write_bytes(data.tobytes())
    code = cli.main(["segment", "--relevance-pack", pack,
                     "--affinity-pack", pack,
                     "--out", str(tmp_path / "out")])
    assert code == 2


def test_cli_mask_edges(tmp_path):
    rng = np.random.default_rng(10)
    edge_png = tmp_path / "edges.png"
    mask_png = tmp_path / "mask.png"
    out_png = tmp_path / "masked.png"
    Image.fromarray((rng.random((6, 6)) * 255).astype(np.uint8), "L").save(edge_png)
    packio.save_mask_png(rng.random((6, 6)) > 0.5, str(mask_png))
    assert cli.main(["mask-edges", "--edgemap", str(edge_png),
                     "--mask", str(mask_png), "--out", str(out_png)]) == 0
    masked = np.asarray(Image.open(out_png))
    mask = packio.load_mask(str(mask_png)).mask
    assert np.all(masked[~mask] == 0)


def test_worker_count_does_not_change_outputs(tmp_path):
    pack, _, image_dir, _ = _write_class(tmp_path, n_images=4, render=True)
    cfg = pipeline.PipelineConfig()
    pipeline.run_class(_job(pack, str(tmp_path / "serial"),
                            image_dir=image_dir), cfg, workers=1)
    pipeline.run_class(_job(pack, str(tmp_path / "pooled"),
                            image_dir=image_dir), cfg, workers=4)
    assert _read_mask_bytes(str(tmp_path / "serial")) == _read_mask_bytes(
        str(tmp_path / "pooled"))
