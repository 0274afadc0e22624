"""Command-line entry point.

Commands: simulate, fit, summarize, detect, compare, test-overlap,
export-surface. Every run writes its artifacts plus a ``manifest.json``
recording the resolved configuration, the seed, and a checksum per artifact.
Failures exit nonzero with a single line ``ERROR <Code>: <message>`` on
stderr. The FACTORINT_OUTPUT_DIR environment variable sets the default
output directory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import io as fio
from .errors import ConfigError, FactorIntError
from .genomics import OverlapTestInput, detect_interactions, overlap_permutation_test, posterior_summary
from .model import Family, McmcSettings, PosteriorDraws, standardize_rows
from .simulate import (
    compare_models,
    export_surface,
    fit_spec,
    generate_saddle_dataset,
    posterior_mean_effects,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorint",
        description="Sparse latent factor models with interaction effects.")
    parser.add_argument("command", choices=[
        "simulate", "fit", "summarize", "detect", "compare", "test-overlap",
        "export-surface"])
    parser.add_argument("--config", help="configuration file (key = value lines)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override mcmc.seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel chains inside fit")
    return parser


def _load_config(args) -> dict[str, str]:
    cfg: dict[str, str] = {}
    if args.config:
        cfg.update(fio.parse_config_text(Path(args.config).read_text(encoding="utf-8"),
                                         origin=args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    if args.seed is not None:
        cfg["mcmc.seed"] = str(args.seed)
    return cfg


def _output_dir(args) -> Path:
    out = args.output_dir or os.environ.get("FACTORINT_OUTPUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(out: Path, command: str, cfg: dict, seed: int, artifacts: list[str]) -> None:
    fio.write_manifest(out, command, cfg, seed, artifacts)
    for name in artifacts:
        print(f"wrote {out / name}")


def cmd_simulate(cfg: dict[str, str], out: Path, threads: int) -> None:
    settings = fio.settings_from_config(cfg)
    data, truth = generate_saddle_dataset(
        m=int(cfg.get("simulate.features", 100)),
        n=int(cfg.get("simulate.samples", 100)),
        frac_affected=float(cfg.get("simulate.frac_affected", 0.1)),
        noise_scale=float(cfg.get("simulate.noise_scale", 1.0)),
        seed=settings.seed)
    fio.write_data_csv(out / "data.csv", data)
    fio.write_bundle(out / "truth.bin", {"kind": "truth", "seed": settings.seed}, {
        "loadings": truth.loadings, "scores": truth.scores, "effects": truth.effects,
        "noise_var": truth.noise_var, "affected": truth.affected,
        "seed_group_1": truth.seed_groups[0], "seed_group_2": truth.seed_groups[1]})
    _finish(out, "simulate", cfg, settings.seed, ["data.csv", "truth.bin"])


def _chain_draws(spec, data, settings: McmcSettings, threads: int) -> list[PosteriorDraws]:
    def one(chain: int) -> PosteriorDraws:
        return fit_spec(spec, data, settings, chain=chain)

    if settings.n_chains == 1 or threads <= 1:
        return [one(c) for c in range(settings.n_chains)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(settings.n_chains)))


def cmd_fit(cfg: dict[str, str], out: Path, threads: int) -> None:
    if "paths.data" not in cfg:
        raise ConfigError("fit requires paths.data")
    data = standardize_rows(fio.read_data_csv(cfg["paths.data"]))
    spec = fio.spec_from_config(cfg, data)
    settings = fio.settings_from_config(cfg)
    all_draws = _chain_draws(spec, data, settings, threads)

    artifacts: list[str] = []
    for draws in all_draws:
        name = "draws.bin" if settings.n_chains == 1 else f"draws_{draws.chain:03d}.bin"
        fio.persist_draws(draws, out / name)
        artifacts.append(name)

    pooled = all_draws[0] if len(all_draws) == 1 else replace(
        all_draws[0], states=[s for d in all_draws for s in d.states])
    posterior_summary(pooled).write_csv(out / "summary.csv")
    artifacts.append("summary.csv")

    if spec.family is Family.GP:
        with open(out / "acceptance.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "column", "accepted", "proposed", "rate", "rw_step_final"])
            for draws in all_draws:
                counts = draws.mh_accept_counts
                for j in range(counts.shape[0]):
                    acc, prop = int(counts[j, 0]), int(counts[j, 1])
                    rate = acc / prop if prop else 0.0
                    writer.writerow([draws.chain, j, acc, prop, f"{rate:.6g}",
                                     f"{draws.rw_step_final:.6g}"])
        artifacts.append("acceptance.csv")
    _finish(out, "fit", cfg, settings.seed, artifacts)


def _load_draws_from_cfg(cfg: dict[str, str]) -> PosteriorDraws:
    if "paths.draws" not in cfg:
        raise ConfigError("this command requires paths.draws")
    return fio.load_draws(cfg["paths.draws"])


def cmd_summarize(cfg: dict[str, str], out: Path, threads: int) -> None:
    draws = _load_draws_from_cfg(cfg)
    posterior_summary(draws).write_csv(out / "summary.csv")
    _finish(out, "summarize", cfg, draws.seed, ["summary.csv"])


def cmd_detect(cfg: dict[str, str], out: Path, threads: int) -> None:
    draws = _load_draws_from_cfg(cfg)
    detected = detect_interactions(draws, float(cfg.get("detect.threshold", 0.5)))
    fids = draws.feature_ids or tuple(str(i) for i in range(len(draws.states[0].noise_var)))
    with open(out / "detected.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_id", "probability"])
        for i, prob in sorted(detected.items()):
            writer.writerow([fids[i], f"{prob:.10g}"])
    _finish(out, "detect", cfg, draws.seed, ["detected.csv"])


def cmd_compare(cfg: dict[str, str], out: Path, threads: int) -> None:
    for key in ("paths.data", "paths.truth", "compare.specs"):
        if key not in cfg:
            raise ConfigError(f"compare requires {key}")
    data = standardize_rows(fio.read_data_csv(cfg["paths.data"]))
    meta, arrays = fio.read_bundle(cfg["paths.truth"])
    if meta.get("kind") != "truth":
        raise ConfigError(f"{cfg['paths.truth']}: not a truth bundle")
    from .simulate import SyntheticTruth
    truth = SyntheticTruth(
        loadings=arrays["loadings"], scores=arrays["scores"], effects=arrays["effects"],
        noise_var=arrays["noise_var"], affected=arrays["affected"],
        seed_groups={0: arrays["seed_group_1"], 1: arrays["seed_group_2"]})
    spec_paths = [p.strip() for p in cfg["compare.specs"].split(",") if p.strip()]
    specs, labels = [], []
    for p in spec_paths:
        sub = fio.parse_config_text(Path(p).read_text(encoding="utf-8"), origin=p)
        specs.append(fio.spec_from_config(sub, data))
        labels.append(Path(p).stem)
    settings = fio.settings_from_config(cfg)
    report = compare_models(data, truth, specs, settings, labels=labels)
    report.write_csv(out / "comparison.csv")
    artifacts = ["comparison.csv"]
    for row in report.rows:
        name = f"surface_{row.label}.csv"
        row.surface.write_csv(out / name)
        artifacts.append(name)
    _finish(out, "compare", cfg, settings.seed, artifacts)


def cmd_test_overlap(cfg: dict[str, str], out: Path, threads: int) -> None:
    for key in ("overlap.population", "overlap.counts", "overlap.observed"):
        if key not in cfg:
            raise ConfigError(f"test-overlap requires {key}")
    settings = fio.settings_from_config(cfg)
    inp = OverlapTestInput(
        population_size=int(cfg["overlap.population"]),
        per_dataset_counts=tuple(int(c) for c in cfg["overlap.counts"].split(",")),
        observed_overlap=int(cfg["overlap.observed"]),
        n_replicates=int(cfg.get("overlap.replicates", 100_000)))
    p_value, reps = overlap_permutation_test(inp, seed=settings.seed)
    with open(out / "overlap.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p_value", "observed", "replicates", "mean_overlap", "sd_overlap"])
        writer.writerow([f"{p_value:.10g}", inp.observed_overlap, inp.n_replicates,
                         f"{reps.mean:.10g}", f"{reps.sd:.10g}"])
    print(f"p_value={p_value:.10g}")
    _finish(out, "test-overlap", cfg, settings.seed, ["overlap.csv"])


def cmd_export_surface(cfg: dict[str, str], out: Path, threads: int) -> None:
    draws = _load_draws_from_cfg(cfg)
    if "surface.feature" not in cfg:
        raise ConfigError("export-surface requires surface.feature")
    token = cfg["surface.feature"]
    fids = draws.feature_ids or ()
    if token in fids:
        feature = fids.index(token)
    else:
        try:
            feature = int(token)
        except ValueError:
            raise ConfigError(f"surface.feature: unknown feature {token!r}") from None
    effects = posterior_mean_effects(draws)
    scores = draws.stack("scores").mean(axis=0)
    export_surface(effects[feature], scores[:2]).write_csv(out / "surface.csv")
    _finish(out, "export-surface", cfg, draws.seed, ["surface.csv"])


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "detect": cmd_detect,
    "compare": cmd_compare,
    "test-overlap": cmd_test_overlap,
    "export-surface": cmd_export_surface,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = _output_dir(args)
        _COMMANDS[args.command](cfg, out, max(1, args.threads))
    except FactorIntError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - contract: one parsable line per failure
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
