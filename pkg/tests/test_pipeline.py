"""Config, manifest parsing, calibration precedence, per-image statuses, batch runs."""

import json

import numpy as np
import pytest

from ulcerflow import (
    FAILURE_NOTE_VOCABULARY,
    BinaryMask,
    ConfigError,
    EmptyInput,
    FallbackSegmenter,
    InputShapeError,
    ManifestError,
    MockDetector,
    PipelineConfig,
    RasterImage,
    emit_overlay,
    load_manifest,
    load_records,
    render_overlay,
    resolve_calibration,
    run_batch,
    run_single,
    save_image_png,
)
from ulcerflow.pipeline import ManifestRow

from conftest import (
    COOL_BG,
    RaisingDetector,
    RaisingSegmenter,
    make_disc_image,
    make_image,
    write_batch,
)


def disc_entry(image_id, site="foot", h=160, w=200, r=30, **extra):
    img, disc = make_disc_image(h, w, h // 2, w // 2, r)
    return {"image_id": image_id, "image": img, "site": site,
            "gt_mask": BinaryMask(disc.astype(np.uint8)), **extra}


class TestPipelineConfig:
    def test_defaults_valid(self):
        PipelineConfig()

    @pytest.mark.parametrize(
        "kw",
        [
            {"conf_thresh": 1.5},
            {"nms_iou_thresh": -0.1},
            {"roi_margin": 2.0},
            {"binarize_thresh": 0.0},
            {"refine_min_area_px": -1},
            {"pad_fill": 300},
            {"resize_mode": "tile"},
            {"tta_flips": ("diagonal",)},
            {"scale_name": "nope"},
            {"default_pixels_per_cm": -5.0},
            {"overlay_alpha": 1.2},
        ],
    )
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            PipelineConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        cfg = PipelineConfig(conf_thresh=0.4, tta=True, tta_flips=("vertical",))
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))
        back = PipelineConfig.from_json_file(p)
        assert back == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"conf_thresh": 0.3, "speed": "ludicrous"})

    def test_bad_json_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("not json {")
        with pytest.raises(ConfigError):
            PipelineConfig.from_json_file(p)


class TestLoadManifest:
    def test_round_trip(self, tmp_path):
        manifest = write_batch(
            tmp_path,
            [
                disc_entry("a", site="foot", pixels_per_cm="12.5"),
                disc_entry("b", site="sacrum", ruler_points="0 0 100 0 5"),
                disc_entry("c", site="other"),
            ],
        )
        rows = load_manifest(manifest)
        assert [r.image_id for r in rows] == ["a", "b", "c"]
        assert rows[0].pixels_per_cm == 12.5
        assert rows[1].ruler == ((0.0, 0.0), (100.0, 0.0), 5.0)
        assert rows[2].pixels_per_cm is None and rows[2].ruler is None
        assert rows[0].path.endswith("imgs/a.png")
        assert rows[0].source_path == "imgs/a.png"
        assert rows[0].gt_mask_path.endswith("gt/a.png")

    def test_paths_resolve_against_manifest_dir(self, tmp_path):
        manifest = write_batch(tmp_path, [disc_entry("a")])
        sub = tmp_path / "elsewhere"
        sub.mkdir()
        moved = sub / "batch.csv"
        moved.write_text(manifest.read_text())
        rows = load_manifest(moved)
        assert str(sub) in rows[0].path

    def test_missing_required_columns(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,site\na,foot\n")
        with pytest.raises(ManifestError, match="path"):
            load_manifest(p)

    def test_duplicate_ids(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site\na,x.png,foot\na,y.png,foot\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    def test_unknown_site(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site\na,x.png,knee\n")
        with pytest.raises(ManifestError, match="site"):
            load_manifest(p)

    def test_bad_pixels_per_cm(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site,pixels_per_cm\na,x.png,foot,-3\n")
        with pytest.raises(ManifestError, match="pixels_per_cm"):
            load_manifest(p)

    def test_bad_ruler_arity(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site,ruler_points\na,x.png,foot,1 2 3\n")
        with pytest.raises(ManifestError, match="ruler"):
            load_manifest(p)

    def test_degenerate_ruler(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site,ruler_points\na,x.png,foot,5 5 5 5 2\n")
        with pytest.raises(ManifestError):
            load_manifest(p)

    def test_error_names_offending_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("image_id,path,site\na,x.png,foot\nb,y.png,knee\n")
        with pytest.raises(ManifestError, match=":3"):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent.csv")


class TestResolveCalibration:
    def row(self, **kw):
        base = dict(image_id="x", path="x.png", site="foot", source_path="x.png")
        base.update(kw)
        return ManifestRow(**base)

    def test_manifest_value_wins(self):
        cal = resolve_calibration(
            self.row(pixels_per_cm=9.0, ruler=((0, 0), (10, 0), 1.0)), 5.0
        )
        assert (cal.pixels_per_cm, cal.source) == (9.0, "manifest")

    def test_ruler_next(self):
        cal = resolve_calibration(self.row(ruler=((0.0, 0.0), (30.0, 40.0), 5.0)), 5.0)
        assert cal.pixels_per_cm == pytest.approx(10.0)
        assert cal.source == "two-point-ruler"

    def test_config_default_third(self):
        cal = resolve_calibration(self.row(), 5.0)
        assert (cal.pixels_per_cm, cal.source) == (5.0, "config_default")

    def test_unit_fallback_last(self):
        cal = resolve_calibration(self.row(), None)
        assert (cal.pixels_per_cm, cal.source) == (1.0, "uncalibrated_px")


class TestOverlay:
    def test_exact_blend_value(self):
        img = make_image(4, 4, (100, 100, 100))
        mask = BinaryMask(np.ones((4, 4), np.uint8))
        out = render_overlay(img, mask, alpha=0.4, color=(255, 0, 0))
        # floor(0.4*255 + 0.6*100 + 0.5) = 162, floor(0.6*100 + 0.5) = 60
        assert tuple(out.data[0, 0]) == (162, 60, 60)

    def test_alpha_one_paints_solid(self):
        img = make_image(4, 4, (10, 20, 30))
        mask = BinaryMask(np.ones((4, 4), np.uint8))
        out = render_overlay(img, mask, alpha=1.0, color=(255, 0, 0))
        assert np.all(out.data == (255, 0, 0))

    def test_empty_mask_leaves_pixels(self):
        img = make_image(4, 4, (10, 20, 30))
        out = render_overlay(img, BinaryMask(np.zeros((4, 4), np.uint8)))
        assert np.array_equal(out.data, img.data)
        assert out.data is not img.data

    def test_blends_only_masked_pixels(self):
        img = make_image(4, 4, (100, 100, 100))
        m = np.zeros((4, 4), np.uint8)
        m[1, 1] = 1
        out = render_overlay(img, BinaryMask(m), alpha=0.4)
        assert tuple(out.data[1, 1]) == (162, 60, 60)
        assert tuple(out.data[0, 0]) == (100, 100, 100)

    def test_shape_mismatch(self):
        with pytest.raises(InputShapeError):
            render_overlay(make_image(4, 4), BinaryMask(np.zeros((4, 5), np.uint8)))

    def test_emit_with_empty_mask_matches_recompressed_input(self, tmp_path):
        img, _ = make_disc_image(64, 64, 32, 32, 10)
        save_image_png(img, tmp_path / "in.png")
        emit_overlay(img, BinaryMask(np.zeros((64, 64), np.uint8)), tmp_path / "out.png")
        assert (tmp_path / "out.png").read_bytes() == (tmp_path / "in.png").read_bytes()


class TestRunSingle:
    def _row(self, tmp_path, entry):
        manifest = write_batch(tmp_path, [entry])
        return load_manifest(manifest)[0]

    def test_success_record_is_complete(self, tmp_path):
        row = self._row(tmp_path, disc_entry("ok", pixels_per_cm="10"))
        rec = run_single(row, PipelineConfig(), MockDetector(), FallbackSegmenter())
        assert rec.status == "success"
        assert rec.mask_path == "masks/ok.png"
        assert rec.measurements is not None
        assert rec.size_grade is not None
        assert rec.scale_name == "official_major_minor"
        assert rec.n_detections == 1
        assert rec.detection is not None
        assert rec.transform is not None
        assert len(rec.assessment) == 7
        assert rec.pixels_per_cm == 10.0 and rec.calibration_source == "manifest"
        assert rec.failure_note is None and rec.error is None
        assert rec.timings_ms["total"] > 0

    def test_decode_error(self, tmp_path):
        bad = tmp_path / "imgs"
        bad.mkdir()
        (bad / "junk.png").write_bytes(b"this is not a png")
        row = self._row(tmp_path, {"image_id": "junk", "image": None, "site": "foot"})
        rec = run_single(row, PipelineConfig(), MockDetector(), FallbackSegmenter())
        assert rec.status == "decode_error"
        assert rec.error
        assert rec.mask_path is None and rec.measurements is None and rec.size_grade is None

    def test_detection_failure_gets_vocabulary_note(self, tmp_path):
        row = self._row(tmp_path, disc_entry("miss"))
        rec = run_single(
            row, PipelineConfig(), MockDetector(default="none"), FallbackSegmenter()
        )
        assert rec.status == "detection_failure"
        assert rec.failure_note in FAILURE_NOTE_VOCABULARY
        assert rec.mask_path is None
        assert rec.measurements is None and rec.size_grade is None
        assert rec.n_detections == 0

    def test_detector_crash_is_backend_error(self, tmp_path):
        row = self._row(tmp_path, disc_entry("boom"))
        rec = run_single(row, PipelineConfig(), RaisingDetector(), FallbackSegmenter())
        assert rec.status == "backend_error"
        assert "crash" in rec.error

    def test_segmenter_crash_is_backend_error(self, tmp_path):
        row = self._row(tmp_path, disc_entry("boom2"))
        rec = run_single(row, PipelineConfig(), MockDetector(), RaisingSegmenter())
        assert rec.status == "backend_error"
        assert rec.measurements is None

    def test_box_outside_frame_degrades_to_detection_failure(self, tmp_path):
        row = self._row(tmp_path, disc_entry("off"))
        det = MockDetector(script={"off": [(1000.0, 1000.0, 50.0, 50.0, 0.9)]})
        rec = run_single(row, PipelineConfig(), det, FallbackSegmenter())
        assert rec.status == "detection_failure"
        assert rec.failure_note in FAILURE_NOTE_VOCABULARY

    def test_uncalibrated_row_still_succeeds(self, tmp_path):
        row = self._row(tmp_path, disc_entry("nocal"))
        rec = run_single(row, PipelineConfig(), MockDetector(), FallbackSegmenter())
        assert rec.status == "success"
        assert rec.calibration_source == "uncalibrated_px"
        assert rec.measurements is not None and rec.size_grade is not None
        s_item = next(i for i in rec.assessment if i["dimension"] == "S")
        assert s_item["status"] == "partial"

    def test_writes_artifacts_when_out_dir_given(self, tmp_path):
        row = self._row(tmp_path, disc_entry("art", pixels_per_cm="8"))
        out = tmp_path / "run"
        (out / "masks").mkdir(parents=True)
        (out / "overlays").mkdir()
        rec = run_single(
            row, PipelineConfig(), MockDetector(), FallbackSegmenter(), out_dir=out
        )
        assert (out / rec.mask_path).exists()
        assert (out / rec.overlay_path).exists()

    def test_mask_matches_disc_well(self, tmp_path):
        from ulcerflow import iou, load_mask_png

        entry = disc_entry("disc", h=240, w=240, r=50, pixels_per_cm="10")
        row = self._row(tmp_path, entry)
        out = tmp_path / "run"
        (out / "masks").mkdir(parents=True)
        (out / "overlays").mkdir()
        rec = run_single(
            row, PipelineConfig(), MockDetector(), FallbackSegmenter(), out_dir=out
        )
        got = load_mask_png(out / rec.mask_path)
        want = load_mask_png(tmp_path / "gt" / "disc.png")
        assert iou(got, want) > 0.9


class TestRunBatch:
    def test_empty_rows(self, tmp_path):
        with pytest.raises(EmptyInput):
            run_batch([], PipelineConfig(), tmp_path / "out")

    def test_bad_worker_count(self, tmp_path):
        manifest = write_batch(tmp_path, [disc_entry("a")])
        rows = load_manifest(manifest)
        with pytest.raises(ConfigError):
            run_batch(rows, PipelineConfig(), tmp_path / "out", workers=0)

    def test_artifact_tree_and_summary(self, tmp_path):
        entries = [disc_entry(f"im{i}", site=s, pixels_per_cm="10")
                   for i, s in enumerate(["foot", "foot", "sacrum"])]
        rows = load_manifest(write_batch(tmp_path, entries))
        result = run_batch(rows, PipelineConfig(), tmp_path / "out")
        assert not result.had_errors
        assert (tmp_path / "out" / "records.jsonl").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        for e in entries:
            assert (tmp_path / "out" / "masks" / f"{e['image_id']}.png").exists()
            assert (tmp_path / "out" / "overlays" / f"{e['image_id']}.png").exists()
        s = result.summary
        assert s["n_images"] == 3
        assert s["success_rate"] == "3 / 3 (100.0%)"
        assert s["per_site"] == {
            "foot": {"n": 2, "n_success": 2},
            "sacrum": {"n": 1, "n_success": 1},
        }
        assert sum(s["status_counts"].values()) == s["n_images"]

    def test_mixed_statuses_partition(self, tmp_path):
        entries = [disc_entry("good"), disc_entry("skip")]
        rows = load_manifest(write_batch(tmp_path, entries))
        det = MockDetector(script={"skip": []}, default="full_frame")
        result = run_batch(rows, PipelineConfig(), tmp_path / "out", detector=det)
        counts = result.summary["status_counts"]
        assert counts["success"] == 1
        assert counts["detection_failure"] == 1
        assert result.summary["success_rate"] == "1 / 2 (50.0%)"
        assert not result.had_errors

    def test_decode_error_sets_had_errors(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        (tmp_path / "imgs" / "bad.png").write_bytes(b"nope")
        rows = load_manifest(
            write_batch(tmp_path, [{"image_id": "bad", "image": None, "site": "foot"}])
        )
        result = run_batch(rows, PipelineConfig(), tmp_path / "out")
        assert result.had_errors
        assert result.summary["status_counts"]["decode_error"] == 1

    def test_records_jsonl_round_trip(self, tmp_path):
        entries = [disc_entry("a", pixels_per_cm="10"), disc_entry("b")]
        rows = load_manifest(write_batch(tmp_path, entries))
        result = run_batch(rows, PipelineConfig(), tmp_path / "out")
        back = load_records(tmp_path / "out")
        assert [r.image_id for r in back] == ["a", "b"]
        assert back[0].status == result.records[0].status
        assert back[0].measurements == result.records[0].measurements

    def test_worker_parity_after_timing_strip(self, tmp_path):
        entries = [disc_entry(f"p{i}", site="foot", pixels_per_cm="10") for i in range(6)]
        rows = load_manifest(write_batch(tmp_path, entries))

        def normalized(run_dir):
            lines = (run_dir / "records.jsonl").read_text().splitlines()
            out = []
            for ln in lines:
                d = json.loads(ln)
                d.pop("timings_ms", None)
                out.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
            return "\n".join(out)

        run_batch(rows, PipelineConfig(), tmp_path / "w1", workers=1)
        run_batch(rows, PipelineConfig(), tmp_path / "w4", workers=4)
        assert normalized(tmp_path / "w1") == normalized(tmp_path / "w4")

    def test_unshareable_instance_rejected_for_parallel(self, tmp_path):
        rows = load_manifest(write_batch(tmp_path, [disc_entry("a")]))

        class Hoarder(FallbackSegmenter):
            shareable = False

        with pytest.raises(ConfigError):
            run_batch(
                rows, PipelineConfig(), tmp_path / "out", segmenter=Hoarder(), workers=2
            )
        # fine single-threaded
        run_batch(rows, PipelineConfig(), tmp_path / "out1", segmenter=Hoarder(), workers=1)

    def test_factory_builds_one_backend_per_thread(self, tmp_path):
        entries = [disc_entry(f"f{i}") for i in range(8)]
        rows = load_manifest(write_batch(tmp_path, entries))
        built = []

        def factory():
            s = FallbackSegmenter()
            built.append(s)
            return s

        run_batch(
            rows, PipelineConfig(), tmp_path / "out", segmenter=factory, workers=3
        )
        assert 1 <= len(built) <= 3

    def test_probmap_dump_opt_in(self, tmp_path):
        rows = load_manifest(write_batch(tmp_path, [disc_entry("pm")]))
        run_batch(rows, PipelineConfig(dump_probmaps=True), tmp_path / "out")
        assert (tmp_path / "out" / "probmaps" / "pm.png").exists()

    def test_load_records_missing(self, tmp_path):
        with pytest.raises(ManifestError):
            load_records(tmp_path / "nothing")
