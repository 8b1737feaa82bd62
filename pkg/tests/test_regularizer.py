import numpy as np
import pytest

from planesweep.costvolume import (CostVolume, build_cost_volume, winner_take_all,
                                   winner_take_all_bins)
from planesweep.dataio import SceneConfig, make_window, synth_scene
from planesweep.depthmap import DepthMap
from planesweep.features import rgb_features
from planesweep.geometry import InverseDepthGrid
from planesweep.metrics import evaluate
from planesweep.regularizer import (RegularizerConfig, lambda_sweep,
                                    minimize_energy, save_energy_csv,
                                    save_sweep_csv)

MEAN = np.array([127.5, 127.5, 127.5])


def plane_volume(noise, seed=3, n_frames=9, k=33):
    seq = synth_scene(SceneConfig(kind="textured_plane", width=32, height=24,
                                  n_frames=n_frames, noise_sigma=noise, seed=seed))
    win = make_window(seq, n_frames // 2, half_width=n_frames // 2)
    f_ref = rgb_features(win.reference.rgb, MEAN)
    lives = [(rgb_features(fr.rgb, MEAN), p)
             for fr, p in zip(win.lives, win.relative_poses)]
    grid = InverseDepthGrid(k, 0.0, 2.0)
    cv = build_cost_volume(f_ref, lives, grid, seq.intrinsics)
    return cv, win.reference.depth_map()


def boxes_volume(noise=12.0, seed=5):
    seq = synth_scene(SceneConfig(kind="stepped_boxes", width=32, height=24,
                                  n_frames=9, noise_sigma=noise, seed=seed))
    win = make_window(seq, 4, half_width=4)
    f_ref = rgb_features(win.reference.rgb, MEAN)
    lives = [(rgb_features(fr.rgb, MEAN), p)
             for fr, p in zip(win.lives, win.relative_poses)]
    grid = InverseDepthGrid(33, 0.0, 2.0)
    cv = build_cost_volume(f_ref, lives, grid, seq.intrinsics)
    return cv, win.reference.depth_map()


class TestMinimizeEnergy:
    def test_energy_non_increasing_on_fixtures(self):
        for cv, _ in (plane_volume(noise=25.0), boxes_volume()):
            res = minimize_energy(cv, RegularizerConfig(lam=300.0))
            assert np.all(np.diff(res.energies) <= 1e-9)

    def test_output_respects_grid_bounds(self):
        cv, _ = plane_volume(noise=25.0)
        res = minimize_energy(cv, RegularizerConfig(lam=300.0))
        assert res.field.values.min() >= cv.grid.rho_min
        assert res.field.values.max() <= cv.grid.rho_max

    def test_noisy_plane_rmse_improves_on_wta(self):
        cv, gt = plane_volume(noise=25.0)
        wta = winner_take_all(cv)
        res = minimize_energy(cv, RegularizerConfig(lam=300.0))
        reg = res.field.depth_map()
        reg = DepthMap(reg.depth, reg.valid & wta.valid)
        assert evaluate(reg, gt).rms <= evaluate(wta, gt).rms

    def test_data_dominant_limit_sticks_to_wta(self):
        cv, _ = plane_volume(noise=0.0)
        res = minimize_energy(cv, RegularizerConfig(lam=1e-6))
        bins, supported = winner_take_all_bins(cv)
        wta_rho = cv.grid.centers()[bins]
        half_bin = cv.grid.bin_width / 2
        diff = np.abs(res.field.values - wta_rho)[supported]
        assert np.all(diff <= half_bin + 1e-12)

    def test_smooth_minima_stay_within_half_bin(self):
        cv, _ = plane_volume(noise=0.0)
        res = minimize_energy(cv, RegularizerConfig(lam=100.0))
        bins, supported = winner_take_all_bins(cv)
        wta_rho = cv.grid.centers()[bins]
        half_bin = cv.grid.bin_width / 2
        close = np.abs(res.field.values - wta_rho)[supported] <= half_bin + 1e-12
        assert close.mean() >= 0.99

    def test_deterministic(self):
        cv, _ = plane_volume(noise=25.0)
        a = minimize_energy(cv, RegularizerConfig(lam=300.0))
        b = minimize_energy(cv, RegularizerConfig(lam=300.0))
        assert np.array_equal(a.field.values, b.field.values)
        assert np.array_equal(a.energies, b.energies)

    def test_confidence_in_unit_interval(self):
        cv, _ = plane_volume(noise=25.0)
        res = minimize_energy(cv, RegularizerConfig(lam=300.0))
        assert res.field.confidence.min() > 0.0
        assert res.field.confidence.max() <= 1.0

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            RegularizerConfig(lam=0.0)
        with pytest.raises(ValueError):
            RegularizerConfig(theta_decay=1.5)


class TestLambdaSweep:
    def test_single_lambda_matches_direct_call(self):
        cv, gt = plane_volume(noise=25.0)
        cfg = RegularizerConfig(lam=1.0)
        rows = lambda_sweep(cv, [300.0], gt, cfg)
        from dataclasses import replace
        direct = minimize_energy(cv, replace(cfg, lam=300.0))
        want = evaluate(direct.field.depth_map(), gt)
        assert rows[0][0] == 300.0
        assert rows[0][1] == want

    def test_duplicate_lambdas_identical_rows(self):
        cv, gt = plane_volume(noise=25.0)
        rows = lambda_sweep(cv, [100.0, 100.0], gt)
        assert rows[0][1] == rows[1][1]

    def test_empty_list_rejected(self):
        cv, gt = plane_volume(noise=25.0)
        with pytest.raises(ValueError):
            lambda_sweep(cv, [], gt)

    def test_csv_output(self, tmp_path):
        cv, gt = plane_volume(noise=25.0)
        rows = lambda_sweep(cv, [30.0, 300.0], gt)
        path = tmp_path / "sweep.csv"
        save_sweep_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "lambda,rmse,log,absrel,sqrel,d1,d2,d3"
        assert len(lines) == 3
        vals = [float(v) for v in lines[1].split(",")]
        assert vals[0] == 30.0 and all(np.isfinite(vals))


class TestEnergyCsv:
    def test_trace_export(self, tmp_path):
        cv, _ = plane_volume(noise=25.0)
        res = minimize_energy(cv, RegularizerConfig(lam=300.0))
        path = tmp_path / "energy.csv"
        save_energy_csv(res.energies, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "outer_iter,energy"
        assert len(lines) == 1 + len(res.energies)
        e = [float(line.split(",")[1]) for line in lines[1:]]
        assert np.all(np.diff(e) <= 1e-9)
