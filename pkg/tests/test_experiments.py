import json
import os

import numpy as np
import pytest

from phasediversity.cli import main
from phasediversity.experiments import (
    COMPARE_METHODS,
    ConfigError,
    build_instance,
    config_from_mapping,
    config_from_sources,
    initial_guess,
    iterations_to_rms,
    parse_config_text,
    run_analyze_hessian,
    run_compare_methods,
    run_compare_models,
    run_single,
    run_solve,
    simulate,
)
from phasediversity.fields import field_from_csv
from phasediversity.hessian import SpectrumReport
from phasediversity.objectives import DataMisfit, ObjectiveSpec
from phasediversity.optimizers import RunTrace
from phasediversity.problems import load_instance


def small_config(**over):
    mapping = {"problem.n": "12", "restarts": "2", "solver.max_iters": "25"}
    mapping.update({k: str(v) for k, v in over.items()})
    return config_from_mapping(mapping)


class TestConfigParsing:
    def test_defaults(self):
        cfg = config_from_mapping({})
        assert cfg.problem_type == "zernike"
        assert cfg.n == 32
        assert cfg.defocus == (-3.0, 3.0)
        assert cfg.amplitude_plane is True
        assert cfg.model == "LS"
        assert cfg.epsilon == 1e-14
        assert cfg.solver.method == "LBFGS"
        assert cfg.solver.max_iters == 150
        assert cfg.solver.c1 == 1e-4 and cfg.solver.c2 == 0.9
        assert cfg.solver.lbfgs_memory == 2
        assert cfg.restarts == 10

    def test_text_parsing_with_comments(self):
        text = """
        # benchmark
        problem.type = vonkarman
        problem.n = 16   # small
        plan.defocus = -2,2
        solver.method = sd
        noise.snr = 10
        """
        cfg = config_from_mapping(parse_config_text(text))
        assert cfg.problem_type == "vonkarman"
        assert cfg.n == 16
        assert cfg.defocus == (-2.0, 2.0)
        assert cfg.solver.method == "SD"
        assert cfg.snr == 10.0

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ConfigError, match="unknown config key 'solver.steps'"):
            config_from_mapping({"solver.steps": "3"})

    def test_unknown_problem_parameter(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"problem.radius": "0.3"})

    def test_wrong_type_reported(self):
        with pytest.raises(ConfigError, match="problem.n"):
            config_from_mapping({"problem.n": "many"})

    def test_bad_problem_type(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"problem.type": "airy"})

    def test_solver_constraint_violation_is_config_error(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"solver.c1": "0.95"})

    def test_param_scoping_by_problem_type(self):
        # rings belongs to the segmented generator, not the zernike one
        with pytest.raises(ConfigError, match="rings"):
            config_from_mapping({"problem.type": "zernike",
                                 "problem.rings": "2"})
        cfg = config_from_mapping({"problem.type": "segmented",
                                   "problem.rings": "1"})
        assert cfg.problem_params["rings"] == 1

    def test_overrides_win(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("problem.n = 16\nrestarts = 3\n")
        cfg = config_from_sources(p, ["problem.n=8"])
        assert cfg.n == 8
        assert cfg.restarts == 3

    def test_missing_config_file(self):
        with pytest.raises(ConfigError):
            config_from_sources("no/such/file.txt")

    def test_flat_dump_is_complete(self):
        cfg = small_config()
        flat = cfg.to_flat()
        for key in ("problem.type", "problem.r_inner", "plan.defocus",
                    "objective.model", "solver.method", "solver.c2",
                    "restarts", "noise.snr", "morozov.enabled", "output_dir"):
            assert key in flat


class TestInitialGuess:
    def test_unit_amplitude_in_pupil(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        u = initial_guess(mask, 3)
        assert np.abs(np.abs(u[mask]) - 1.0).max() < 1e-15
        assert np.all(u[~mask] == 0)

    def test_phase_range_half_open(self):
        u = initial_guess(np.ones((64, 64), dtype=bool), 4)
        theta = np.angle(u)
        assert theta.max() <= np.pi
        assert theta.min() > -np.pi

    def test_seeded(self):
        mask = np.ones((6, 6), dtype=bool)
        assert np.array_equal(initial_guess(mask, 5), initial_guess(mask, 5))
        assert not np.array_equal(initial_guess(mask, 5), initial_guess(mask, 6))


class TestSimulate:
    def test_idempotent_bytes(self, tmp_path):
        cfg = small_config()
        paths = []
        for name in ("a", "b"):
            out = tmp_path / name
            simulate(cfg, out)
            paths.append(out)
        for fname in sorted(os.listdir(paths[0])):
            b1 = (paths[0] / fname).read_bytes()
            b2 = (paths[1] / fname).read_bytes()
            assert b1 == b2, fname

    def test_roundtrip_objective_at_truth(self, tmp_path):
        cfg = small_config()
        inst = simulate(cfg, tmp_path / "inst")
        back = load_instance(tmp_path / "inst")
        spec = ObjectiveSpec("LSI", 1e-14, back.plan, back.data, back.grid)
        assert DataMisfit(spec).value(back.truth) < 1e-8


class TestRunSolve:
    def test_summary_reproducible(self, tmp_path, monkeypatch):
        cfg = small_config(restarts=1)
        inst = build_instance(cfg)
        s1 = run_solve(cfg, inst, tmp_path / "r1")
        s2 = run_solve(cfg, inst, tmp_path / "r2")
        assert s1 == s2
        assert (tmp_path / "r1" / "summary.json").read_text() == \
            (tmp_path / "r2" / "summary.json").read_text()

    def test_outputs_embed_config_and_parse(self, tmp_path):
        cfg = small_config()
        inst = build_instance(cfg)
        run_solve(cfg, inst, tmp_path / "out")
        trace_path = tmp_path / "out" / "trace_restart_00.csv"
        trace, header = RunTrace.from_csv(trace_path)
        assert header["problem.type"] == "zernike"
        assert header["solver.method"] == "LBFGS"
        assert len(trace) >= 1
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["config"]["problem.n"] == 12
        assert len(summary["restarts"]) == cfg.restarts

    def test_aggregates_recompute_from_rows(self, tmp_path):
        cfg = small_config(restarts=3)
        inst = build_instance(cfg)
        summary = run_solve(cfg, inst, tmp_path / "out")
        rows = summary["restarts"]
        agg = summary["aggregates"]
        assert agg["mean_fft_calls"] == pytest.approx(
            np.mean([r["fft_calls"] for r in rows]))
        assert agg["mean_iterations"] == pytest.approx(
            np.mean([r["iterations"] for r in rows]))
        assert agg["success_rate"] == pytest.approx(
            np.mean([r["final_rms"] < cfg.success_rms for r in rows]))
        assert agg["best_rms"] == pytest.approx(
            min(r["final_rms"] for r in rows))

    def test_restart_seeds_derived_from_base(self, tmp_path):
        cfg = small_config(restarts=3, **{"solver.seed": 7})
        inst = build_instance(cfg)
        summary = run_solve(cfg, inst, tmp_path / "out")
        assert [r["seed"] for r in summary["restarts"]] == [7, 8, 9]

    def test_morozov_fields_present_with_noise(self, tmp_path):
        cfg = small_config(**{"noise.snr": 10, "morozov.enabled": "true",
                              "restarts": 2})
        inst = build_instance(cfg)
        summary = run_solve(cfg, inst, tmp_path / "out")
        for row in summary["restarts"]:
            assert "morozov_index" in row
            assert "morozov_reached" in row
            assert 0 <= row["morozov_index"] <= row["iterations"]

    def test_fft_counter_matches_instrumented_transforms(self, monkeypatch):
        calls = {"n": 0}
        real_fft2, real_ifft2 = np.fft.fft2, np.fft.ifft2

        def counting_fft2(*a, **k):
            calls["n"] += 1
            return real_fft2(*a, **k)

        def counting_ifft2(*a, **k):
            calls["n"] += 1
            return real_ifft2(*a, **k)

        monkeypatch.setattr(np.fft, "fft2", counting_fft2)
        monkeypatch.setattr(np.fft, "ifft2", counting_ifft2)
        cfg = small_config(restarts=1)
        inst = build_instance(cfg)
        calls["n"] = 0
        trace, row = run_single(cfg, inst, 0)
        assert row["fft_calls"] == calls["n"]

    def test_misell_method_runs_on_defocus_planes(self, tmp_path):
        cfg = small_config(**{"solver.method": "MISELL",
                              "solver.max_iters": 10, "restarts": 1})
        inst = build_instance(cfg)
        summary = run_solve(cfg, inst, tmp_path / "out")
        assert summary["restarts"][0]["iterations"] == 10

    def test_restart_failure_recorded_not_fatal(self, tmp_path, monkeypatch):
        import phasediversity.experiments as exp

        real = exp.run_single

        def flaky(config, instance, restart, **kw):
            if restart == 0:
                raise RuntimeError("synthetic blow-up")
            return real(config, instance, restart, **kw)

        monkeypatch.setattr(exp, "run_single", flaky)
        cfg = small_config(restarts=3)
        inst = build_instance(cfg)
        summary = exp.run_solve(cfg, inst, tmp_path / "out")
        assert len(summary["restarts"]) == 3
        assert summary["restarts"][0]["stop_reason"].startswith("error:")
        assert np.isnan(summary["restarts"][0]["final_rms"])
        assert summary["restarts"][1]["stop_reason"] != ""
        assert not (tmp_path / "out" / "trace_restart_00.csv").exists()
        assert (tmp_path / "out" / "trace_restart_01.csv").exists()

    def test_noise_applied_to_clean_instance_at_solve_time(self, tmp_path):
        clean = build_instance(small_config())
        cfg = small_config(**{"noise.snr": 10, "morozov.enabled": "true",
                              "restarts": 1, "solver.max_iters": 40})
        summary = run_solve(cfg, clean, tmp_path / "out")
        assert summary["config"]["noise.snr"] == 10.0
        # noisy data cannot be fit to the noiseless floor
        assert summary["restarts"][0]["final_rms"] > 1e-4

    def test_conflicting_noise_rejected(self, tmp_path):
        noisy_inst = build_instance(small_config(**{"noise.snr": 10}))
        cfg = small_config(**{"noise.snr": 20})
        with pytest.raises(ConfigError, match="snr"):
            run_solve(cfg, noisy_inst, tmp_path / "out")

    def test_noisy_instance_used_as_is_and_embedded(self, tmp_path):
        noisy_inst = build_instance(small_config(**{"noise.snr": 10,
                                                    "noise.seed": 3}))
        cfg = small_config(restarts=1)
        summary = run_solve(cfg, noisy_inst, tmp_path / "out")
        assert summary["config"]["noise.snr"] == 10.0
        assert summary["config"]["noise.seed"] == 3

    def test_misell_needs_two_defocus_planes(self, tmp_path):
        cfg = small_config(**{"solver.method": "MISELL",
                              "plan.defocus": "3", "restarts": 1})
        inst = build_instance(cfg)
        with pytest.raises(ConfigError):
            run_solve(cfg, inst, tmp_path / "out")


class TestCompareRunners:
    def test_compare_methods_four_rows_and_orderings(self, tmp_path):
        cfg = small_config(restarts=1, **{"solver.max_iters": 10})
        inst = build_instance(cfg)
        payload = run_compare_methods(cfg, inst, tmp_path / "cmp")
        assert [e["method"] for e in payload["methods"]] == list(COMPARE_METHODS)
        assert set(payload["fft_orderings"]) == {"lbfgs_lt_ncg", "ncg_lt_sd",
                                                 "lbfgs_lt_tn"}
        lines = [ln for ln in
                 (tmp_path / "cmp" / "compare_methods.csv").read_text().splitlines()
                 if ln and not ln.startswith("#")]
        assert lines[0] == "method,mean_fft_calls,mean_iterations,success_rate"
        assert len(lines) == 5

    def test_compare_models_series(self, tmp_path):
        cfg = small_config(restarts=2, **{"solver.max_iters": 12})
        inst = build_instance(cfg)
        payload = run_compare_models(cfg, inst, tmp_path / "cm")
        lines = [ln for ln in
                 (tmp_path / "cm" / "compare_models.csv").read_text().splitlines()
                 if ln and not ln.startswith("#")]
        assert lines[0] == "model,restart,iter,rms,f"
        body = [ln.split(",") for ln in lines[1:]]
        starts = {}
        for model, restart, it, rms, f in body:
            it = int(it)
            assert it <= cfg.solver.max_iters
            if it == 0:
                starts.setdefault(restart, set()).add(rms)
        # all models share the seeded start, so iteration-0 rms agrees
        for restart, vals in starts.items():
            assert len(vals) == 1

    def test_lbfgs_cheapest_across_seed_batches(self, tmp_path, bench32):
        # Three independent seed batches on the n=32 benchmark (reduced
        # from a ten-batch repetition study): LBFGS takes the fewest mean
        # FFT calls in every batch and in >=8/10 individual seeds.
        for k, base in enumerate((0, 100, 777)):
            cfg = config_from_mapping({"solver.seed": str(base)})
            payload = run_compare_methods(cfg, bench32, tmp_path / f"b{k}")
            fft = {e["method"]: [r["fft_calls"] for r in e["restarts"]]
                   for e in payload["methods"]}
            means = {m: np.mean(v) for m, v in fft.items()}
            assert means["LBFGS"] == min(means.values())
            per_seed = sum(
                1 for i in range(cfg.restarts)
                if fft["LBFGS"][i] < min(fft["SD"][i], fft["NCG"][i],
                                         fft["TN"][i]))
            assert per_seed >= 8
            lbfgs = next(e for e in payload["methods"]
                         if e["method"] == "LBFGS")
            assert lbfgs["success_rate"] >= 0.7

    def test_iterations_to_rms(self):
        trace = RunTrace()
        from phasediversity.optimizers import TraceRecord

        for i, rms in enumerate([1.0, 0.5, 0.01, 0.002]):
            trace.append(TraceRecord(i, 1.0, 1.0, 1.0, rms, 0, False))
        assert iterations_to_rms(trace, 1e-1) == 2
        assert iterations_to_rms(trace, 1e-9) is None


class TestAnalyzeHessian:
    def test_report_schema_roundtrips(self, tmp_path):
        cfg = small_config(**{"problem.n": 8})
        inst = build_instance(cfg)
        payload = run_analyze_hessian(cfg, inst, "truth", tmp_path / "hx")
        data = json.loads((tmp_path / "hx" / "hessian_analysis.json").read_text())
        assert data["point"] == "truth"
        assert len(data["planes"]) == len(inst.plan)
        for plane in data["planes"]:
            for model, entry in plane["models"].items():
                report = SpectrumReport.from_dict(entry)
                assert report.lambda_min <= report.lambda_max
                assert entry["dense_max_deviation"] < 1e-9
            assert plane["clustering"]["ls_max_times2"] <= 2.0 + 1e-12

    def test_size_guard_is_config_error(self, tmp_path):
        cfg = small_config(**{"problem.n": 16})
        inst = build_instance(cfg)
        with pytest.raises(ConfigError):
            run_analyze_hessian(cfg, inst, "truth", tmp_path / "hx")

    def test_point_from_file(self, tmp_path):
        cfg = small_config(**{"problem.n": 8})
        inst = build_instance(cfg)
        from phasediversity.fields import save_field

        save_field(tmp_path / "pt.npy", inst.truth)
        payload = run_analyze_hessian(cfg, inst, str(tmp_path / "pt.npy"),
                                      tmp_path / "hx")
        assert payload["point"].endswith("pt.npy")

    def test_missing_point_file(self, tmp_path):
        cfg = small_config(**{"problem.n": 8})
        inst = build_instance(cfg)
        with pytest.raises(ConfigError):
            run_analyze_hessian(cfg, inst, "nope.npy", tmp_path / "hx")


class TestCli:
    def test_simulate_solve_pipeline(self, tmp_path, capsys):
        inst_dir = tmp_path / "inst"
        rc = main(["simulate", "--set", "problem.n=12", "--out", str(inst_dir)])
        assert rc == 0
        rc = main(["solve", "--instance", str(inst_dir), "--set", "problem.n=12",
                   "--set", "restarts=1", "--set", "solver.max_iters=15",
                   "--out", str(tmp_path / "run")])
        assert rc == 0
        assert (tmp_path / "run" / "summary.json").exists()

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        rc = main(["simulate", "--set", "nope=1", "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_instance_exits_2(self, tmp_path):
        rc = main(["solve", "--instance", str(tmp_path / "missing")])
        assert rc == 2

    def test_bad_problem_type_exits_2(self, tmp_path):
        rc = main(["simulate", "--set", "problem.type=airy",
                   "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_env_var_output_dir(self, tmp_path, monkeypatch):
        out = tmp_path / "envout"
        monkeypatch.setenv("PHASEDIVERSITY_OUTPUT_DIR", str(out))
        rc = main(["simulate", "--set", "problem.n=12"])
        assert rc == 0
        assert (out / "truth.npy").exists()

    def test_config_file_plus_override(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("problem.n = 12\nrestarts = 1\nsolver.max_iters = 10\n")
        inst_dir = tmp_path / "inst"
        assert main(["simulate", "--config", str(cfg),
                     "--out", str(inst_dir)]) == 0
        assert main(["compare-models", "--config", str(cfg), "--instance",
                     str(inst_dir), "--out", str(tmp_path / "cm")]) == 0
        data = json.loads((tmp_path / "cm" / "compare_models.json").read_text())
        assert set(data["models"]) == {"MLP", "LS", "LSI"}

    def test_analyze_hessian_cli(self, tmp_path):
        inst_dir = tmp_path / "inst8"
        assert main(["simulate", "--set", "problem.n=8",
                     "--out", str(inst_dir)]) == 0
        rc = main(["analyze-hessian", "--instance", str(inst_dir),
                   "--set", "problem.n=8", "--point", "random",
                   "--out", str(tmp_path / "hx")])
        assert rc == 0
        assert (tmp_path / "hx" / "hessian_analysis.json").exists()

    def test_intensity_csvs_parse_with_headers(self, tmp_path):
        inst_dir = tmp_path / "inst"
        assert main(["simulate", "--set", "problem.n=12",
                     "--out", str(inst_dir)]) == 0
        arr = field_from_csv(inst_dir / "plane_00.csv")
        assert arr.shape == (12, 12)
        assert arr.min() >= 0
