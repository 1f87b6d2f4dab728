import numpy as np
import pytest
import torch

from sanr.evaluation import (
    RDCurve,
    RDPoint,
    avg_error_map,
    bd_metrics,
    bpp,
    conv_macs,
    emit_reports,
    kmac_per_pixel,
    per_view_psnr_map,
    psnr,
)
from sanr.lightfield import AngularCoord, LightField, make_synthetic_lightfield
from sanr.model import ModelConfig, SanrModel


def lf_from(arr):
    return LightField(np.asarray(arr, dtype=np.uint8))


class TestPsnr:
    def test_identical_capped_at_100(self):
        rng = np.random.default_rng(0)
        lf = lf_from(rng.integers(0, 256, size=(2, 2, 8, 8, 3)))
        matrix, mean = psnr(lf, lf)
        assert (matrix == 100.0).all()
        assert mean == 100.0

    def test_maximal_error(self):
        a = lf_from(np.zeros((1, 1, 4, 4, 3)))
        b = lf_from(np.full((1, 1, 4, 4, 3), 255))
        matrix, mean = psnr(a, b)
        assert mean == pytest.approx(0.0, abs=1e-9)

    def test_direct_formula(self):
        # One view with MSE = 255^2 / 10 gives exactly 10 dB.
        target_mse = 255.0**2 / 10.0
        delta = int(round(np.sqrt(target_mse)))
        a = np.zeros((1, 1, 10, 10, 3), dtype=np.uint8)
        b = np.full_like(a, delta)
        matrix, _ = psnr(lf_from(a), lf_from(b))
        expect = 10 * np.log10(255.0**2 / delta**2)
        assert matrix[0, 0] == pytest.approx(expect)

    def test_mean_equals_matrix_mean(self):
        rng = np.random.default_rng(1)
        a = lf_from(rng.integers(0, 256, size=(3, 2, 6, 6, 3)))
        b = lf_from(rng.integers(0, 256, size=(3, 2, 6, 6, 3)))
        matrix, mean = psnr(a, b)
        assert mean == pytest.approx(float(matrix.mean()))

    def test_dimension_mismatch(self):
        a = lf_from(np.zeros((1, 1, 4, 4, 3)))
        b = lf_from(np.zeros((1, 1, 5, 4, 3)))
        with pytest.raises(ValueError):
            psnr(a, b)


class TestBpp:
    def test_reference_value(self):
        assert bpp(1000, 9, 9, 64, 64) == pytest.approx(8000 / 331776)

    def test_zero_bytes(self):
        assert bpp(0, 2, 2, 8, 8) == 0.0

    def test_linearity(self):
        assert bpp(2000, 3, 3, 64, 64) == pytest.approx(2 * bpp(1000, 3, 3, 64, 64))

    def test_positive_dims_required(self):
        with pytest.raises(ValueError):
            bpp(10, 0, 2, 4, 4)


class TestErrorMaps:
    def test_identical_fields(self):
        rng = np.random.default_rng(2)
        lf = lf_from(rng.integers(0, 256, size=(2, 2, 6, 6, 3)))
        assert (avg_error_map(lf, lf) == 0).all()

    def test_single_view_error_is_averaged(self):
        a = np.zeros((2, 2, 4, 4, 3), dtype=np.uint8)
        b = a.copy()
        b[0, 1] += 8
        emap = avg_error_map(lf_from(a), lf_from(b))
        assert np.allclose(emap, 8.0 / 4)

    def test_constant_error(self):
        a = np.zeros((2, 1, 4, 4, 3), dtype=np.uint8)
        b = np.ones_like(a)
        assert np.allclose(avg_error_map(lf_from(a), lf_from(b)), 1.0)


class TestPerViewPsnrMap:
    def test_uniform_cap_for_identical(self):
        rng = np.random.default_rng(3)
        lf = lf_from(rng.integers(0, 256, size=(3, 3, 8, 8, 3)))
        pmap = per_view_psnr_map(lf, lf)
        assert pmap.shape == (3, 3)
        assert (pmap == 100.0).all()

    def test_symmetry_oracle(self):
        # Zero-disparity fixture plus a model whose per-view parameters are
        # tied under the angular mirror, so mirrored views reconstruct
        # identically and the PSNR map inherits the symmetry.
        lf = make_synthetic_lightfield(32, 32, 3, 3, 0.0, seed=4)
        cfg = ModelConfig(c_s=4, rank=2, c_l=2, u_count=3, v_count=3, height=32, width=32)
        model = SanrModel(cfg, seed=4)
        with torch.no_grad():
            for block in model.blocks:
                conv = block.conv
                conv.w_u[2].copy_(conv.w_u[0])
                conv.w_v[2].copy_(conv.w_v[0])
                conv.b_u[2].copy_(conv.b_u[0])
                conv.b_v[2].copy_(conv.b_v[0])
        model.eval()
        views = np.empty((3, 3, 32, 32, 3), dtype=np.uint8)
        for u in range(3):
            for v in range(3):
                img = model(AngularCoord(u, v))
                views[u, v] = (img.permute(1, 2, 0).detach().numpy() * 255).round().astype(np.uint8)
        pmap = per_view_psnr_map(lf, LightField(views))
        mirrored = pmap[::-1, ::-1]
        assert np.abs(pmap - mirrored).max() < 0.5


class TestBdMetrics:
    @staticmethod
    def curve(label, rates, psnrs):
        return RDCurve(label, tuple(RDPoint(r, p) for r, p in zip(rates, psnrs)))

    def test_identity(self):
        rates = [0.05, 0.1, 0.2, 0.4]
        psnrs = [30.0, 33.0, 36.0, 39.0]
        a = self.curve("a", rates, psnrs)
        b = self.curve("b", rates, psnrs)
        rate, quality = bd_metrics(a, b)
        assert rate == pytest.approx(0.0, abs=1e-9)
        assert quality == pytest.approx(0.0, abs=1e-12)

    def test_half_rate_shift(self):
        rates = [0.05, 0.1, 0.2, 0.4]
        psnrs = [30.0, 33.0, 36.0, 39.0]
        anchor = self.curve("anchor", rates, psnrs)
        test = self.curve("test", [r / 2 for r in rates], psnrs)
        rate, _ = bd_metrics(anchor, test)
        assert rate == pytest.approx(-50.0, abs=0.1)

    def test_one_db_offset(self):
        rates = [0.05, 0.1, 0.2, 0.4]
        psnrs = [30.0, 33.0, 36.0, 39.0]
        anchor = self.curve("anchor", rates, psnrs)
        test = self.curve("test", rates, [p + 1 for p in psnrs])
        _, quality = bd_metrics(anchor, test)
        assert quality == pytest.approx(1.0, abs=1e-6)

    def test_antisymmetry(self):
        a = self.curve("a", [0.05, 0.11, 0.19, 0.42], [30.0, 32.5, 35.5, 38.0])
        b = self.curve("b", [0.04, 0.09, 0.22, 0.40], [30.5, 33.0, 36.5, 38.5])
        rate_ab, psnr_ab = bd_metrics(a, b)
        rate_ba, psnr_ba = bd_metrics(b, a)
        assert psnr_ab == pytest.approx(-psnr_ba, abs=1e-9)
        assert (1 + rate_ab / 100) * (1 + rate_ba / 100) == pytest.approx(1.0, abs=1e-3)

    def test_too_few_points(self):
        a = self.curve("a", [0.1, 0.2, 0.4], [30, 33, 36])
        with pytest.raises(ValueError, match=">= 4 points"):
            bd_metrics(a, a)

    def test_insufficient_overlap(self):
        a = self.curve("a", [0.05, 0.1, 0.2, 0.4], [20.0, 22.0, 24.0, 26.0])
        b = self.curve("b", [0.05, 0.1, 0.2, 0.4], [30.0, 32.0, 34.0, 36.0])
        with pytest.raises(ValueError, match="overlap"):
            bd_metrics(a, b)

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            self.curve("bad", [0.2, 0.1], [30, 31])
        with pytest.raises(ValueError):
            RDPoint(0.0, 30.0)


class TestKmac:
    def test_single_conv_convention(self):
        # A 3x3 convolution mapping one channel to one channel costs 9 MACs
        # per output position.
        assert conv_macs(1, 1, 3, 64, 64) == 9 * 64 * 64

    def test_cin_linearity(self):
        assert conv_macs(8, 4, 3, 10, 10) == 2 * conv_macs(4, 4, 3, 10, 10)

    def test_per_pixel_invariance_across_sizes(self):
        a = kmac_per_pixel(ModelConfig(c_s=8, rank=2, c_l=4, u_count=3, v_count=3, height=64, width=64))
        b = kmac_per_pixel(ModelConfig(c_s=8, rank=2, c_l=4, u_count=3, v_count=3, height=128, width=128))
        assert abs(a - b) / b < 0.01

    def test_positive_and_scales_with_channels(self):
        small = kmac_per_pixel(ModelConfig(c_s=8, rank=2, c_l=4, u_count=3, v_count=3, height=64, width=64))
        big = kmac_per_pixel(ModelConfig(c_s=16, rank=2, c_l=4, u_count=3, v_count=3, height=64, width=64))
        assert 0 < small < big


class TestEmitReports:
    def test_report_files(self, tmp_path):
        curve = RDCurve("fixture", (RDPoint(0.1, 30.0), RDPoint(0.2, 33.0)))
        out = emit_reports([curve], str(tmp_path), error_maps={"fixture": np.ones((8, 8))},
                           psnr_maps={"fixture": np.full((3, 3), 31.0)})
        rd_csv = (tmp_path / "rd.csv").read_text().strip().splitlines()
        assert rd_csv[0] == "label,bpp,psnr_db"
        assert len(rd_csv) == 3
        assert (tmp_path / "rd_curves.png").exists()
        assert (tmp_path / "error_map_fixture.bin").stat().st_size == 8 * 8 * 4
        import json

        sidecar = json.loads((tmp_path / "error_map_fixture.json").read_text())
        assert sidecar["shape"] == [8, 8]
        assert sidecar["byte_order"] == "little"
        assert (tmp_path / "per_view_psnr_fixture.png").exists()

    def test_reemit_identical_csv(self, tmp_path):
        curve = RDCurve("x", (RDPoint(0.1, 30.0), RDPoint(0.2, 33.0)))
        emit_reports([curve], str(tmp_path / "a"))
        emit_reports([curve], str(tmp_path / "b"))
        assert (tmp_path / "a" / "rd.csv").read_bytes() == (tmp_path / "b" / "rd.csv").read_bytes()

    def test_empty_curves_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_reports([], str(tmp_path))
