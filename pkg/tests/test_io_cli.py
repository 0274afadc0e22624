"""Persistence formats, configuration parsing, and the command-line workflow."""

import json
import struct

import numpy as np
import pytest

from factorint import (
    Annotation,
    ConfigError,
    CorruptFile,
    FormatVersionMismatch,
    gp_spec,
    mult_spec,
    run_gp_chain,
    run_mult_chain,
    standardize_rows,
)
from factorint import io as fio
from factorint.cli import main as cli_main


def small_data(seed=0, m=8, n=10):
    rng = np.random.default_rng(seed)
    return standardize_rows(rng.normal(size=(m, n)))


class TestDataCsv:
    def test_round_trip_exact(self, tmp_path):
        data = small_data()
        path = tmp_path / "data.csv"
        fio.write_data_csv(path, data)
        back = fio.read_data_csv(path)
        np.testing.assert_array_equal(back.values, data.values)
        assert back.feature_ids == data.feature_ids
        assert back.sample_ids == data.sample_ids

    def test_malformed_rows_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("feature_id,s1,s2\nf1,1.0\n")
        with pytest.raises(ConfigError):
            fio.read_data_csv(path)


class TestAnnotationCsv:
    def test_round_trip(self, tmp_path):
        ann = Annotation(("p1", "p2"), ("22", "16"), np.array([100, 200]))
        path = tmp_path / "ann.csv"
        fio.write_annotation(path, ann)
        back = fio.read_annotation(path)
        assert back.probe_ids == ann.probe_ids
        assert back.chromosomes == ann.chromosomes
        np.testing.assert_array_equal(back.positions, ann.positions)

    def test_header_required(self, tmp_path):
        path = tmp_path / "ann.csv"
        path.write_text("probe,chrom,pos\np1,22,100\n")
        with pytest.raises(ConfigError):
            fio.read_annotation(path)


class TestBundleFormat:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "x.bin"
        arrays = {"a": np.arange(12.0).reshape(3, 4), "b": np.array([1, 2, 3], dtype=np.int8)}
        fio.write_bundle(path, {"kind": "test", "note": 7}, arrays)
        meta, back = fio.read_bundle(path)
        assert meta == {"kind": "test", "note": 7}
        np.testing.assert_array_equal(back["a"], arrays["a"])
        np.testing.assert_array_equal(back["b"], arrays["b"])
        assert back["b"].dtype == np.int8

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        fio.write_bundle(path, {"kind": "test"}, {"a": np.ones(5)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CorruptFile):
            fio.read_bundle(path)

    def test_flipped_payload_byte_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        fio.write_bundle(path, {"kind": "test"}, {"a": np.ones(5)})
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptFile):
            fio.read_bundle(path)

    def test_version_bump_reports_both_versions(self, tmp_path):
        path = tmp_path / "x.bin"
        fio.write_bundle(path, {"kind": "test"}, {"a": np.ones(5)})
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, len(fio.MAGIC), 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatVersionMismatch) as err:
            fio.read_bundle(path)
        assert err.value.found == 99
        assert err.value.expected == fio.FORMAT_VERSION

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTMINE!" + b"\x00" * 64)
        with pytest.raises(CorruptFile):
            fio.read_bundle(path)


class TestSpecSerialization:
    @pytest.mark.parametrize("spec", [
        mult_spec(1, n_factors=3),
        mult_spec(2, seed_groups={0: frozenset({0, 1}), 1: frozenset({2})}),
        gp_spec(1),
        gp_spec(5),
        gp_spec(4, fixed_inter_prob={3: 0.0}),
    ])
    def test_round_trip(self, spec):
        assert fio.spec_from_dict(fio.spec_to_dict(spec)) == spec


class TestDrawsPersistence:
    def test_mult_round_trip(self, tmp_path):
        data = small_data(1)
        draws = run_mult_chain(mult_spec(1), data, n_iters=14, burn_in=4, thin=2, seed=3)
        path = tmp_path / "draws.bin"
        fio.persist_draws(draws, path)
        back = fio.load_draws(path)
        assert back.spec == draws.spec
        assert (back.burn_in, back.thin, back.n_iters, back.seed) == (4, 2, 14, 3)
        assert back.feature_ids == data.feature_ids
        assert len(back.states) == len(draws.states)
        for sa, sb in zip(draws.states, back.states):
            np.testing.assert_array_equal(sa.loadings, sb.loadings)
            np.testing.assert_array_equal(sa.inter_scores, sb.inter_scores)
            np.testing.assert_array_equal(sa.load_mask, sb.load_mask)
        assert back.states[0].effects is None

    def test_gp_round_trip_with_ledger(self, tmp_path):
        data = small_data(2, m=5, n=6)
        draws = run_gp_chain(gp_spec(2), data, n_iters=12, burn_in=6, seed=4)
        path = tmp_path / "draws.bin"
        fio.persist_draws(draws, path)
        back = fio.load_draws(path)
        np.testing.assert_array_equal(back.mh_accept_counts, draws.mh_accept_counts)
        for sa, sb in zip(draws.states, back.states):
            np.testing.assert_array_equal(sa.effects, sb.effects)
            np.testing.assert_array_equal(sa.shared_effect, sb.shared_effect)
        assert back.states[0].inter_loadings is None


class TestConfigParsing:
    def test_comments_and_whitespace(self):
        cfg = fio.parse_config_text("""
            # a comment
            model.family = gp   # trailing comment
            mcmc.iters = 40
        """)
        assert cfg == {"model.family": "gp", "mcmc.iters": "40"}

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            fio.parse_config_text("model.family gp")

    def test_spec_from_config_gp_variant_defaults(self):
        cfg = {"model.family": "gp", "model.gp_variant": "5"}
        spec = fio.spec_from_config(cfg)
        assert spec.gp_variant == 5
        assert spec.load_prob_model.value == "grouped"
        assert spec.inter_prob_model.value == "grouped"

    def test_spec_from_config_seed_groups_by_id(self):
        data = small_data()
        cfg = {"model.family": "mult_approach2",
               "model.seed_group.1": f"{data.feature_ids[0]}, {data.feature_ids[1]}",
               "model.seed_group.2": "2, 3"}
        spec = fio.spec_from_config(cfg, data)
        assert spec.seed_groups[0] == frozenset({0, 1})
        assert spec.seed_groups[1] == frozenset({2, 3})

    def test_beta_pair_and_group_overrides(self):
        cfg = {"model.family": "mult_approach1", "model.product_var": "1e-5",
               "model.beta": "1, 10", "model.gamma.expected": "9, 1"}
        spec = fio.spec_from_config(cfg)
        assert spec.inter_prob_prior.default == (1.0, 10.0)
        assert spec.load_prob_prior.groups["expected"] == (9.0, 1.0)

    def test_settings_from_config(self):
        s = fio.settings_from_config({"mcmc.iters": "100", "mcmc.burn_in": "50",
                                      "mcmc.seed": "9", "mcmc.adapt_rw": "false"})
        assert (s.n_iters, s.burn_in, s.seed, s.adapt_rw) == (100, 50, 9, False)


def run_cli(*argv):
    return cli_main(list(argv))


class TestCli:
    def test_simulate_fit_summarize_deterministic(self, tmp_path):
        outs = []
        for name in ("run_a", "run_b"):
            out = tmp_path / name
            assert run_cli("simulate", "--output-dir", str(out), "--seed", "5",
                           "--set", "simulate.features=24", "--set", "simulate.samples=16") == 0
            assert run_cli("fit", "--output-dir", str(out), "--seed", "5",
                           "--set", f"paths.data={out / 'data.csv'}",
                           "--set", "model.family=mult_approach2",
                           "--set", "mcmc.iters=40", "--set", "mcmc.burn_in=20") == 0
            outs.append(out)
        a, b = outs
        assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
        assert (a / "draws.bin").read_bytes() == (b / "draws.bin").read_bytes()
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()

    def test_manifest_checksums_verify(self, tmp_path):
        out = tmp_path / "sim"
        assert run_cli("simulate", "--output-dir", str(out), "--seed", "3",
                       "--set", "simulate.features=20", "--set", "simulate.samples=12") == 0
        assert fio.verify_manifest(out)
        manifest = json.loads((out / "manifest.json").read_text())
        assert {e["path"] for e in manifest["artifacts"]} == {"data.csv", "truth.bin"}

    def test_gp_fit_writes_acceptance_report(self, tmp_path):
        out = tmp_path / "gp"
        out.mkdir()
        fio.write_data_csv(out / "data.csv", small_data(4, m=6, n=8))
        assert run_cli("fit", "--output-dir", str(out), "--seed", "2",
                       "--set", f"paths.data={out / 'data.csv'}",
                       "--set", "model.family=gp", "--set", "model.gp_variant=1",
                       "--set", "mcmc.iters=40", "--set", "mcmc.burn_in=10") == 0
        lines = (out / "acceptance.csv").read_text().strip().splitlines()
        assert lines[0] == "chain,column,accepted,proposed,rate,rw_step_final"
        assert len(lines) == 1 + 8

    def test_detect_command(self, tmp_path):
        out = tmp_path / "d"
        out.mkdir()
        data = small_data(5, m=6, n=8)
        fio.write_data_csv(out / "data.csv", data)
        assert run_cli("fit", "--output-dir", str(out), "--seed", "2",
                       "--set", f"paths.data={out / 'data.csv'}",
                       "--set", "model.family=mult_approach2",
                       "--set", "mcmc.iters=30", "--set", "mcmc.burn_in=10") == 0
        assert run_cli("detect", "--output-dir", str(out),
                       "--set", f"paths.draws={out / 'draws.bin'}") == 0
        header = (out / "detected.csv").read_text().splitlines()[0]
        assert header == "feature_id,probability"

    def test_overlap_command_matches_library(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert run_cli("test-overlap", "--output-dir", str(out), "--seed", "4",
                       "--set", "overlap.population=100",
                       "--set", "overlap.counts=20, 25",
                       "--set", "overlap.observed=8",
                       "--set", "overlap.replicates=2000") == 0
        from factorint import OverlapTestInput, overlap_permutation_test
        p, _ = overlap_permutation_test(
            OverlapTestInput(100, (20, 25), 8, 2000), seed=4)
        line = (out / "overlap.csv").read_text().splitlines()[1]
        assert line.startswith(f"{p:.10g},")
        assert f"p_value={p:.10g}" in capsys.readouterr().out

    def test_export_surface_command(self, tmp_path):
        out = tmp_path / "s"
        out.mkdir()
        data = small_data(6, m=6, n=9)
        fio.write_data_csv(out / "data.csv", data)
        assert run_cli("fit", "--output-dir", str(out), "--seed", "1",
                       "--set", f"paths.data={out / 'data.csv'}",
                       "--set", "model.family=mult_approach2",
                       "--set", "mcmc.iters=30", "--set", "mcmc.burn_in=10") == 0
        assert run_cli("export-surface", "--output-dir", str(out),
                       "--set", f"paths.draws={out / 'draws.bin'}",
                       "--set", f"surface.feature={data.feature_ids[2]}") == 0
        header = (out / "surface.csv").read_text().splitlines()[0]
        assert header == "lambda1,lambda2,effect,source"

    def test_failure_prints_single_error_line(self, tmp_path, capsys):
        code = run_cli("fit", "--output-dir", str(tmp_path))
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("ERROR ConfigError:")

    def test_config_file_with_set_override(self, tmp_path):
        out = tmp_path / "cfg"
        cfg = tmp_path / "run.cfg"
        cfg.write_text("simulate.features = 30\nsimulate.samples = 14\nmcmc.seed = 6\n")
        assert run_cli("simulate", "--config", str(cfg), "--output-dir", str(out),
                       "--set", "simulate.features=22") == 0
        data = fio.read_data_csv(out / "data.csv")
        assert data.n_features == 22
        assert data.n_samples == 14

    def test_output_dir_environment_default(self, tmp_path, monkeypatch):
        target = tmp_path / "from_env"
        monkeypatch.setenv("FACTORINT_OUTPUT_DIR", str(target))
        assert run_cli("simulate", "--seed", "2",
                       "--set", "simulate.features=20", "--set", "simulate.samples=12") == 0
        assert (target / "data.csv").exists()

    def test_multi_chain_fit_writes_per_chain_draws(self, tmp_path):
        out = tmp_path / "chains"
        out.mkdir()
        fio.write_data_csv(out / "data.csv", small_data(7, m=6, n=8))
        assert run_cli("fit", "--output-dir", str(out), "--seed", "3", "--threads", "2",
                       "--set", f"paths.data={out / 'data.csv'}",
                       "--set", "model.family=mult_approach2",
                       "--set", "mcmc.chains=2",
                       "--set", "mcmc.iters=40", "--set", "mcmc.burn_in=20") == 0
        a = fio.load_draws(out / "draws_000.bin")
        b = fio.load_draws(out / "draws_001.bin")
        assert a.chain == 0 and b.chain == 1
        # distinct chains take distinct paths from the same run seed
        assert not np.array_equal(a.states[0].scores, b.states[0].scores)
        assert fio.verify_manifest(out)

    def test_compare_command(self, tmp_path):
        out = tmp_path / "cmp"
        assert run_cli("simulate", "--output-dir", str(out), "--seed", "6",
                       "--set", "simulate.features=30", "--set", "simulate.samples=20") == 0
        spec_a = tmp_path / "mult2.cfg"
        spec_a.write_text("model.family = mult_approach2\n")
        spec_b = tmp_path / "mult1.cfg"
        spec_b.write_text("model.family = mult_approach1\nmodel.product_var = 1e-5\n")
        assert run_cli("compare", "--output-dir", str(out), "--seed", "6",
                       "--set", f"paths.data={out / 'data.csv'}",
                       "--set", f"paths.truth={out / 'truth.bin'}",
                       "--set", f"compare.specs={spec_a}, {spec_b}",
                       "--set", "mcmc.iters=60", "--set", "mcmc.burn_in=30") == 0
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert (out / "surface_mult2.csv").exists()
        assert (out / "surface_mult1.csv").exists()
        assert fio.verify_manifest(out)
