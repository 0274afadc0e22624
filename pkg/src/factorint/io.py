"""Persistence and configuration.

File formats
------------
Data CSV: first row sample ids (the top-left cell is a label), first column
feature ids, remaining cells real numbers, comma-delimited UTF-8.

Annotation CSV: header ``probe_id,chromosome,position``.

Bundle: the binary container used for draws and synthetic truth. Layout:
8-byte magic ``FIBUNDLE``, little-endian uint32 format version, uint64 header
length, UTF-8 JSON header describing metadata and every array (name, dtype,
shape, byte offset and length relative to the payload), the raw C-order array
payload, and a trailing SHA-256 digest of everything before it.

Configuration: ``key = value`` lines with dotted section prefixes; ``#``
starts a comment. Recognized keys are listed in CONFIG_KEYS.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFile, FormatVersionMismatch
from .genomics import Annotation
from .model import (
    BetaTable,
    DataMatrix,
    Family,
    InterProbModel,
    LoadProbModel,
    McmcSettings,
    McmcState,
    ModelSpec,
    PosteriorDraws,
    validate_spec,
)

MAGIC = b"FIBUNDLE"
FORMAT_VERSION = 1

CONFIG_KEYS = """
model.family              mult_approach1 | mult_approach2 | gp
model.factors             integer factor count (default 2)
model.gp_variant          1..5 (gp family)
model.length_scale        positive real (gp family, default 0.2)
model.product_var         positive real (mult approach 1, default 1e-5)
model.slab_var_loading    slab variance of the loadings (default 10)
model.slab_var_inter      slab variance of the interaction loadings (default 10)
model.noise_shape         inverse-gamma shape (default 2.1)
model.noise_scale         inverse-gamma scale (default 1.1)
model.load_prob_model     per_entry | grouped
model.inter_prob_model    per_feature | global | grouped
model.gamma               default Beta pair for the loading probabilities, "a, b"
model.gamma.<group>       per-group override (expected | excluded | unknown)
model.beta                default Beta pair for the interaction probabilities
model.beta.<group>        per-group override (seed | unknown)
model.seed_group.<k>      features of seed group k (1-based factor), ids or indices
model.seed_constraints    true | false (default true)
model.include_interactions true | false (default true)
mcmc.iters                total iterations (default 600)
mcmc.burn_in              burn-in (default 400 mult / 300 gp)
mcmc.thin                 retention stride (default 1)
mcmc.seed                 integer seed (default 0)
mcmc.chains               number of chains (default 1)
mcmc.rw_step              initial MH step (gp, default 0.1)
mcmc.adapt_rw             true | false (default true)
paths.data                data CSV
paths.truth               truth bundle (compare)
paths.draws               draws bundle (summarize / detect / export-surface)
paths.annotation          annotation CSV
simulate.features         m (default 100)
simulate.samples          n (default 100)
simulate.frac_affected    fraction of candidates with effects (default 0.1)
simulate.noise_scale      noise standard deviation (default 1.0)
detect.threshold          posterior probability threshold (default 0.5)
surface.feature           feature id or index
compare.specs             comma-separated model config paths
overlap.population        population size
overlap.counts            per-dataset counts, comma-separated
overlap.observed          observed summed pairwise overlap
overlap.replicates        replicates (default 100000)
"""


# ---------------------------------------------------------------- CSV data

def write_data_csv(path, data: DataMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_id", *data.sample_ids])
        for i, fid in enumerate(data.feature_ids):
            writer.writerow([fid] + [f"{v:.17g}" for v in data.values[i]])


def read_data_csv(path) -> DataMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty data file") from None
        sample_ids = header[1:]
        feature_ids = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(sample_ids) + 1:
                raise ConfigError(f"{path}:{lineno}: expected {len(sample_ids) + 1} cells")
            feature_ids.append(row[0])
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return DataMatrix(np.asarray(rows, dtype=float), tuple(feature_ids), tuple(sample_ids))


def read_annotation(path) -> Annotation:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["probe_id", "chromosome", "position"]:
            raise ConfigError(f"{path}: expected header probe_id,chromosome,position")
        probes, chroms, positions = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 cells")
            probes.append(row[0])
            chroms.append(row[1])
            try:
                positions.append(int(row[2]))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return Annotation(tuple(probes), tuple(chroms), np.asarray(positions, dtype=np.int64))


def write_annotation(path, annotation: Annotation) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe_id", "chromosome", "position"])
        for pid, chrom, pos in zip(annotation.probe_ids, annotation.chromosomes,
                                   annotation.positions):
            writer.writerow([pid, chrom, int(pos)])


# ---------------------------------------------------------------- bundles

def write_bundle(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(header))
    body += header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def read_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a bundle file (bad magic)")
    version = struct.unpack_from("<I", blob, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(version, FORMAT_VERSION)
    if len(blob) < 32:
        raise CorruptFile(f"{path}: truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    header_len = struct.unpack_from("<Q", blob, len(MAGIC) + 4)[0]
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    payload = body[start + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CorruptFile(f"{path}: payload shorter than declared")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()
    return header["meta"], arrays


# ------------------------------------------------------ spec serialization

def spec_to_dict(spec: ModelSpec) -> dict:
    def beta_table(table: BetaTable) -> dict:
        return {
            "default": list(table.default),
            "groups": {k: list(v) for k, v in sorted(table.groups.items())},
            "entries": {",".join(map(str, k)): list(v) for k, v in sorted(table.entries.items())},
        }

    return {
        "family": spec.family.value,
        "n_factors": spec.n_factors,
        "slab_var_loading": spec.slab_var_loading,
        "slab_var_inter": spec.slab_var_inter,
        "noise_prior": list(spec.noise_prior),
        "product_var": spec.product_var,
        "gp_variant": spec.gp_variant,
        "length_scale": spec.length_scale,
        "load_prob_model": spec.load_prob_model.value,
        "inter_prob_model": spec.inter_prob_model.value,
        "load_prob_prior": beta_table(spec.load_prob_prior),
        "inter_prob_prior": beta_table(spec.inter_prob_prior),
        "seed_groups": None if spec.seed_groups is None else
            {str(k): sorted(int(i) for i in v) for k, v in sorted(spec.seed_groups.items())},
        "fixed_load_prob": None if spec.fixed_load_prob is None else
            {f"{i},{l}": v for (i, l), v in sorted(spec.fixed_load_prob.items())},
        "fixed_inter_prob": None if spec.fixed_inter_prob is None else
            {str(i): v for i, v in sorted(spec.fixed_inter_prob.items())},
        "seed_constraints": spec.seed_constraints,
        "include_interactions": spec.include_interactions,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    def beta_table(sub: dict) -> BetaTable:
        return BetaTable(
            default=tuple(sub["default"]),
            groups={k: tuple(v) for k, v in sub.get("groups", {}).items()},
            entries={tuple(int(x) for x in k.split(",")): tuple(v)
                     for k, v in sub.get("entries", {}).items()},
        )

    return validate_spec(ModelSpec(
        family=Family(d["family"]),
        n_factors=int(d["n_factors"]),
        slab_var_loading=float(d["slab_var_loading"]),
        slab_var_inter=float(d["slab_var_inter"]),
        noise_prior=tuple(d["noise_prior"]),
        product_var=None if d.get("product_var") is None else float(d["product_var"]),
        gp_variant=None if d.get("gp_variant") is None else int(d["gp_variant"]),
        length_scale=None if d.get("length_scale") is None else float(d["length_scale"]),
        load_prob_model=LoadProbModel(d["load_prob_model"]),
        inter_prob_model=InterProbModel(d["inter_prob_model"]),
        load_prob_prior=beta_table(d["load_prob_prior"]),
        inter_prob_prior=beta_table(d["inter_prob_prior"]),
        seed_groups=None if d.get("seed_groups") is None else
            {int(k): frozenset(int(i) for i in v) for k, v in d["seed_groups"].items()},
        fixed_load_prob=None if d.get("fixed_load_prob") is None else
            {tuple(int(x) for x in k.split(",")): float(v)
             for k, v in d["fixed_load_prob"].items()},
        fixed_inter_prob=None if d.get("fixed_inter_prob") is None else
            {int(k): float(v) for k, v in d["fixed_inter_prob"].items()},
        seed_constraints=bool(d.get("seed_constraints", True)),
        include_interactions=bool(d.get("include_interactions", True)),
    ))


# -------------------------------------------------------- draws persistence

_STATE_FIELDS = ("loadings", "scores", "load_mask", "load_prob", "noise_var",
                 "inter_mask", "inter_prob", "inter_loadings", "inter_scores",
                 "effects", "shared_effect")


def persist_draws(draws: PosteriorDraws, path) -> None:
    """Lossless, versioned, checksummed dump of the retained states."""
    arrays: dict[str, np.ndarray] = {}
    present = []
    for name in _STATE_FIELDS:
        if getattr(draws.states[0], name) is None:
            continue
        present.append(name)
        arrays[name] = draws.stack(name)
    if draws.mh_accept_counts is not None:
        arrays["mh_accept_counts"] = draws.mh_accept_counts
    meta = {
        "kind": "draws",
        "spec": spec_to_dict(draws.spec),
        "burn_in": draws.burn_in,
        "thin": draws.thin,
        "n_iters": draws.n_iters,
        "seed": draws.seed,
        "chain": draws.chain,
        "state_fields": present,
        "feature_ids": list(draws.feature_ids) if draws.feature_ids else None,
        "sample_ids": list(draws.sample_ids) if draws.sample_ids else None,
        "rw_step_final": draws.rw_step_final,
    }
    write_bundle(path, meta, arrays)


def load_draws(path) -> PosteriorDraws:
    meta, arrays = read_bundle(path)
    if meta.get("kind") != "draws":
        raise CorruptFile(f"{path}: bundle does not contain draws")
    spec = spec_from_dict(meta["spec"])
    n_states = arrays["loadings"].shape[0]
    states = []
    for k in range(n_states):
        fields = {name: arrays[name][k] for name in meta["state_fields"]}
        states.append(McmcState(**fields))
    return PosteriorDraws(
        spec=spec,
        states=states,
        burn_in=int(meta["burn_in"]),
        thin=int(meta["thin"]),
        n_iters=int(meta["n_iters"]),
        seed=int(meta["seed"]),
        chain=int(meta["chain"]),
        feature_ids=None if meta["feature_ids"] is None else tuple(meta["feature_ids"]),
        sample_ids=None if meta["sample_ids"] is None else tuple(meta["sample_ids"]),
        mh_accept_counts=arrays.get("mh_accept_counts"),
        rw_step_final=meta.get("rw_step_final"),
    )


# ------------------------------------------------------------ configuration

def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def _as_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _as_pair(value: str, key: str) -> tuple[float, float]:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'a, b', got {value!r}")
    return float(parts[0]), float(parts[1])


def _resolve_features(tokens: list[str], data: DataMatrix | None, key: str) -> frozenset[int]:
    if all(t.lstrip("-").isdigit() for t in tokens):
        return frozenset(int(t) for t in tokens)
    if data is None:
        raise ConfigError(f"{key}: feature ids given but no data file to resolve them against")
    index = data.feature_index()
    missing = [t for t in tokens if t not in index]
    if missing:
        raise ConfigError(f"{key}: unknown feature ids {missing}")
    return frozenset(index[t] for t in tokens)


def spec_from_config(cfg: dict[str, str], data: DataMatrix | None = None) -> ModelSpec:
    family_raw = cfg.get("model.family", "mult_approach2")
    try:
        family = Family(family_raw)
    except ValueError:
        raise ConfigError(f"model.family: unknown family {family_raw!r}") from None

    def beta_table(default_key: str) -> BetaTable:
        default = _as_pair(cfg[default_key], default_key) if default_key in cfg else (1.0, 1.0)
        groups = {}
        for key, value in cfg.items():
            if key.startswith(default_key + "."):
                groups[key[len(default_key) + 1:]] = _as_pair(value, key)
        return BetaTable(default=default, groups=groups)

    seed_groups: dict[int, frozenset[int]] = {}
    for key, value in cfg.items():
        if key.startswith("model.seed_group."):
            factor = int(key.rsplit(".", 1)[1]) - 1
            tokens = [t.strip() for t in value.split(",") if t.strip()]
            seed_groups[factor] = _resolve_features(tokens, data, key)

    kwargs = dict(
        family=family,
        n_factors=int(cfg.get("model.factors", 2)),
        slab_var_loading=float(cfg.get("model.slab_var_loading", 10.0)),
        slab_var_inter=float(cfg.get("model.slab_var_inter", 10.0)),
        noise_prior=(float(cfg.get("model.noise_shape", 2.1)),
                     float(cfg.get("model.noise_scale", 1.1))),
        load_prob_prior=beta_table("model.gamma"),
        inter_prob_prior=beta_table("model.beta"),
        seed_groups=seed_groups or None,
        seed_constraints=_as_bool(cfg.get("model.seed_constraints", "true"),
                                  "model.seed_constraints"),
        include_interactions=_as_bool(cfg.get("model.include_interactions", "true"),
                                      "model.include_interactions"),
    )
    if family is Family.GP:
        variant = int(cfg.get("model.gp_variant", 1))
        from .model import GP_VARIANT_TABLE
        if variant not in GP_VARIANT_TABLE:
            raise ConfigError(f"model.gp_variant: must be 1..5, got {variant}")
        load_model, _, inter_model = GP_VARIANT_TABLE[variant]
        kwargs.update(
            gp_variant=variant,
            length_scale=float(cfg.get("model.length_scale", 0.2)),
            load_prob_model=LoadProbModel(cfg.get("model.load_prob_model", load_model.value)),
            inter_prob_model=InterProbModel(cfg.get("model.inter_prob_model", inter_model.value)),
        )
    else:
        if family is Family.MULT_APPROACH1:
            kwargs["product_var"] = float(cfg.get("model.product_var", 1e-5))
        kwargs["load_prob_model"] = LoadProbModel(cfg.get("model.load_prob_model", "per_entry"))
        kwargs["inter_prob_model"] = InterProbModel(cfg.get("model.inter_prob_model", "per_feature"))
    return validate_spec(ModelSpec(**kwargs))


def settings_from_config(cfg: dict[str, str]) -> McmcSettings:
    return McmcSettings(
        n_iters=int(cfg.get("mcmc.iters", 600)),
        burn_in=int(cfg["mcmc.burn_in"]) if "mcmc.burn_in" in cfg else None,
        thin=int(cfg.get("mcmc.thin", 1)),
        seed=int(cfg.get("mcmc.seed", 0)),
        n_chains=int(cfg.get("mcmc.chains", 1)),
        rw_step=float(cfg.get("mcmc.rw_step", 0.1)),
        adapt_rw=_as_bool(cfg.get("mcmc.adapt_rw", "true"), "mcmc.adapt_rw"),
    )


# --------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(output_dir, command: str, config: dict, seed: int,
                   artifacts: list[str]) -> Path:
    """Record the resolved configuration and a checksum for every artifact."""
    output_dir = Path(output_dir)
    entries = []
    for name in sorted(artifacts):
        p = output_dir / name
        entries.append({"path": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = {"command": command, "config": config, "seed": seed, "artifacts": entries}
    path = output_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def verify_manifest(output_dir) -> bool:
    output_dir = Path(output_dir)
    manifest = json.loads((output_dir / "manifest.json").read_text(encoding="utf-8"))
    for entry in manifest["artifacts"]:
        if sha256_file(output_dir / entry["path"]) != entry["sha256"]:
            return False
    return True
