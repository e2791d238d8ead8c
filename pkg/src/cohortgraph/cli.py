"""Pipeline orchestration: subcommands, artifact manifests, staleness checks.

Each stage writes its artifact plus a manifest (config hash, input
hashes, output hash, seed) under ``<artifact_dir>/manifests/``. Re-running
a stage whose manifest still matches is a no-op unless --force is given;
a downstream stage whose upstream manifest is missing or was produced
under a different configuration fails with a staleness error naming the
stage to rerun.

Exit codes: 0 success, 2 configuration/input error, 3 staleness,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import datagen, evalstat, featurize, ingest, models, schema, simgraph
from .errors import (
    CohortGraphError,
    ConfigError,
    NumericError,
    StalenessError,
)

log = logging.getLogger("cohortgraph")

PAPER_TAUS = (0.8, 0.9, 0.95, 0.99)

ABLATION_COMBOS = (
    ("All", ("admissions", "diagnoses", "procedures", "labevents", "notes")),
    ("Admissions, Procedures, Diagnoses, Lab Events",
     ("admissions", "diagnoses", "procedures", "labevents")),
    ("Admissions, Diagnoses, Lab Events, clinical notes",
     ("admissions", "diagnoses", "labevents", "notes")),
    ("Admissions, Procedures, Lab Events, clinical notes",
     ("admissions", "procedures", "labevents", "notes")),
    ("Admissions, Lab Events, clinical notes",
     ("admissions", "labevents", "notes")),
    ("Admissions, Lab Events", ("admissions", "labevents")),
)

_DEFAULTS: dict[str, dict] = {
    "paths": {"data_dir": "data", "artifact_dir": "artifacts"},
    "generate": {
        "seed": 7,
        "n_patients": 1000,
        "mean_admissions_per_patient": 2.4,
        "readmission_base_rate": 0.17,
        "homophily_strength": 0.5,
        "n_lab_items": 856,
        "n_icd_diag": 2000,
        "n_icd_proc": 600,
        "n_clusters": 8,
        "note_char_scale": 0.04,
        "missing_rate": 0.10,
    },
    "featurize": {
        "embed_dim": 768,
        "embed_seed": 0,
        "max_window": 512,
        "selection": list(schema.BLOCK_ORDER),
        # optional precomputed embeddings, e.g. notes_matrix / notes_ids
        "diagnoses_matrix": "",
        "diagnoses_ids": "",
        "procedures_matrix": "",
        "procedures_ids": "",
        "notes_matrix": "",
        "notes_ids": "",
    },
    "split": {"fractions": [0.6, 0.2, 0.2], "seed": 11},
    "graph": {"tau": 0.9, "tile_size": 1024, "allow_custom_tau": False},
    "train": {
        "n_layers": 2,
        "hidden": 64,
        "aggregator": "mean",
        "learning_rate": 1e-5,
        "max_epochs": 150,
        "patience": 10,
        "seed": 3,
        "baseline_learning_rate": 1e-2,
        "mlp_hidden": [64, 64],
    },
    "grid": {
        "learning_rates": list(models.GRID_LEARNING_RATES),
        "n_layers": list(models.GRID_LAYERS),
        "hidden": list(models.GRID_HIDDEN),
        "aggregators": list(models.GRID_AGGREGATORS),
        "max_epochs": 150,
        "patience": 10,
        "seed": 3,
    },
    "crossval": {"k": 20, "seed": 5, "val_fraction": 0.15},
}

STAGES = (
    "generate",
    "ingest",
    "featurize",
    "graph",
    "train",
    "grid",
    "ablate",
    "crossval",
    "report",
)


class RunConfig:
    def __init__(self, sections: dict, base_dir: str):
        self.sections = sections
        self.base_dir = base_dir

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def path(self, key: str) -> str:
        p = self.sections["paths"][key]
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def data_dir(self) -> str:
        return self.path("data_dir")

    @property
    def artifact_dir(self) -> str:
        return self.path("artifact_dir")


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from None
    sections = {}
    for name, defaults in _DEFAULTS.items():
        merged = dict(defaults)
        user = raw.get(name, {})
        if not isinstance(user, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        for key, value in user.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in config section [{name}]")
            merged[key] = value
        sections[name] = merged
    for name in raw:
        if name not in _DEFAULTS:
            raise ConfigError(f"unknown config section [{name}]")

    if seed_override is not None:
        for sec in ("generate", "split", "train", "grid", "crossval"):
            sections[sec]["seed"] = seed_override

    if "admissions" not in sections["featurize"]["selection"]:
        raise ConfigError("featurize.selection must include the admissions block")
    tau = sections["graph"]["tau"]
    if tau not in PAPER_TAUS and not sections["graph"]["allow_custom_tau"]:
        raise ConfigError(
            f"graph.tau must be one of {PAPER_TAUS} (set allow_custom_tau to override), got {tau}"
        )
    return RunConfig(sections, os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Manifests

def _canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _hash_files(paths: list[str]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as fh:
            while True:
                chunk = fh.read(1 << 20)
                if not chunk:
                    break
                h.update(chunk)
    return h.hexdigest()


class Stages:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.manifest_dir = os.path.join(cfg.artifact_dir, "manifests")

    def manifest_path(self, stage: str) -> str:
        return os.path.join(self.manifest_dir, f"{stage}.json")

    def read_manifest(self, stage: str) -> dict | None:
        path = self.manifest_path(stage)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def config_hash(self, stage: str) -> str:
        relevant = {
            "generate": ["generate"],
            "ingest": [],
            "featurize": ["featurize", "split"],
            "graph": ["graph", "featurize"],
            "train": ["train"],
            "grid": ["grid"],
            "ablate": ["train", "graph", "featurize", "split"],
            "crossval": ["crossval", "train"],
            "report": [],
        }[stage]
        return _canonical_hash({name: self.cfg[name] for name in relevant})

    def require_upstream(self, stage: str, upstream: str) -> dict:
        manifest = self.read_manifest(upstream)
        if manifest is None:
            raise StalenessError(
                f"stage {stage!r} needs artifacts from {upstream!r}; "
                f"run 'cohortgraph {upstream}' first"
            )
        if manifest["config_hash"] != self.config_hash(upstream):
            raise StalenessError(
                f"artifacts of stage {upstream!r} were built under a different "
                f"configuration; rerun 'cohortgraph {upstream}'"
            )
        for rel in manifest["outputs"]:
            if not os.path.exists(os.path.join(self.cfg.artifact_dir, rel)) and not os.path.exists(
                rel
            ):
                raise StalenessError(
                    f"output {rel!r} of stage {upstream!r} is missing; "
                    f"rerun 'cohortgraph {upstream}'"
                )
        return manifest

    def is_fresh(self, stage: str, input_manifests: dict[str, dict]) -> bool:
        manifest = self.read_manifest(stage)
        if manifest is None:
            return False
        if manifest["config_hash"] != self.config_hash(stage):
            return False
        expected = {name: m["output_hash"] for name, m in input_manifests.items()}
        if manifest["input_hashes"] != expected:
            return False
        for rel in manifest["outputs"]:
            path = rel if os.path.isabs(rel) else os.path.join(self.cfg.artifact_dir, rel)
            if not os.path.exists(path):
                return False
        return True

    def write_manifest(
        self,
        stage: str,
        input_manifests: dict[str, dict],
        outputs: list[str],
        seed,
        extra: dict | None = None,
    ) -> None:
        os.makedirs(self.manifest_dir, exist_ok=True)
        abs_outputs = [
            p if os.path.isabs(p) else os.path.join(self.cfg.artifact_dir, p)
            for p in outputs
        ]
        manifest = {
            "stage": stage,
            "config_hash": self.config_hash(stage),
            "input_hashes": {name: m["output_hash"] for name, m in input_manifests.items()},
            "outputs": outputs,
            "output_hash": _hash_files(abs_outputs),
            "seed": seed,
        }
        if extra:
            manifest["extra"] = extra
        with open(self.manifest_path(stage), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _write_table(path: str, cfg_hash: str, header: list[str], rows: list[list]) -> None:
    """CSV with a leading comment row carrying the stage's config hash."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Stage implementations

def cmd_generate(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    if stages.is_fresh("generate", {}) and not force:
        print("generate: up to date, skipping")
        return
    gen_cfg = datagen.GenConfig(**cfg["generate"])
    tables = datagen.generate(gen_cfg)
    datagen.write_tables(tables, cfg.data_dir)
    code_map = datagen.make_code_text_map(gen_cfg.n_icd_diag, gen_cfg.n_icd_proc)
    map_path = os.path.join(cfg.data_dir, "code_text_map.csv")
    datagen.write_code_text_map(code_map, map_path)
    outputs = [
        os.path.join(cfg.data_dir, schema.TABLE_FILES[name])
        for name in schema.TABLE_FILES
    ] + [map_path]
    stages.write_manifest(
        "generate", {}, outputs, gen_cfg.seed,
        extra={"n_admissions": len(tables.admissions)},
    )
    print(f"generate: wrote {len(tables.admissions)} admissions to {cfg.data_dir}")


def cmd_ingest(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {"generate": stages.require_upstream("ingest", "generate")}
    if stages.is_fresh("ingest", inputs) and not force:
        print("ingest: up to date, skipping")
        return
    tables = datagen.read_tables(cfg.data_dir)
    datagen.validate_tables(tables)
    cohort = ingest.prepare_cohort(tables)
    os.makedirs(cfg.artifact_dir, exist_ok=True)
    out = os.path.join(cfg.artifact_dir, "cohort.csv")
    ingest.write_cohort_csv(cohort, out)
    positives = sum(r.label_readmit_30d for r in cohort.records)
    stages.write_manifest(
        "ingest", inputs, ["cohort.csv"], None,
        extra={"n_admissions": len(cohort), "n_positive": positives},
    )
    print(f"ingest: cohort of {len(cohort)} admissions ({positives} positive)")


def _load_cohort(cfg: RunConfig) -> ingest.Cohort:
    return ingest.read_cohort_csv(os.path.join(cfg.artifact_dir, "cohort.csv"))


def cmd_featurize(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {
        "generate": stages.require_upstream("featurize", "generate"),
        "ingest": stages.require_upstream("featurize", "ingest"),
    }
    if stages.is_fresh("featurize", inputs) and not force:
        print("featurize: up to date, skipping")
        return
    fz = cfg["featurize"]
    tables = datagen.read_tables(cfg.data_dir)
    cohort = _load_cohort(cfg)
    code_map = featurize.read_code_text_map(os.path.join(cfg.data_dir, "code_text_map.csv"))
    embedder = featurize.HashEmbedder(
        dimension=fz["embed_dim"], seed=fz["embed_seed"], max_window=fz["max_window"]
    )
    item_vocab = featurize.default_item_vocab(cfg["generate"]["n_lab_items"])

    blocks = {
        "admissions": featurize.encode_admissions(cohort),
        "labevents": featurize.encode_labevents(tables, cohort, item_vocab),
    }
    for name, builder in (
        ("diagnoses", lambda: featurize.encode_diagnoses(tables, cohort, code_map, embedder)),
        ("procedures", lambda: featurize.encode_procedures(tables, cohort, code_map, embedder)),
        ("notes", lambda: featurize.encode_notes(tables, cohort, embedder)),
    ):
        matrix_key, ids_key = f"{name}_matrix", f"{name}_ids"
        if fz[matrix_key]:
            blocks[name] = featurize.block_from_embedding_file(
                name, fz[matrix_key], fz[ids_key], cohort
            )
        else:
            blocks[name] = builder()

    ids = [r.admission_id for r in cohort.records]
    all_blocks = featurize.assemble(blocks, list(schema.BLOCK_ORDER), ids)
    splits = evalstat.make_splits(
        cohort, evalstat.SplitSpec(tuple(cfg["split"]["fractions"]), cfg["split"]["seed"])
    )
    scalers = featurize.fit_scalers(all_blocks, splits.train_mask)
    scaled = featurize.apply_scalers(all_blocks, scalers)

    feat_dir = os.path.join(cfg.artifact_dir, "features")
    blocks_dir = os.path.join(feat_dir, "blocks")
    os.makedirs(blocks_dir, exist_ok=True)
    outputs = []
    for name in schema.BLOCK_ORDER:
        rel = os.path.join("features", "blocks", f"{name}.bin")
        featurize.write_matrix(
            os.path.join(cfg.artifact_dir, rel), scaled.matrix[:, scaled.block_slice(name)]
        )
        outputs.append(rel)

    selection = [n for n in schema.BLOCK_ORDER if n in fz["selection"]]
    sel_slices = [scaled.block_slice(n) for n in selection]
    sel_matrix = np.hstack([scaled.matrix[:, s] for s in sel_slices])
    sel_features = featurize.NodeFeatureMatrix(
        matrix=sel_matrix,
        block_names=tuple(selection),
        block_widths=tuple(s.stop - s.start for s in sel_slices),
        admission_ids=scaled.admission_ids,
        scaled=True,
    )
    featurize.save_features(
        sel_features,
        scalers,
        feat_dir,
        extra={
            "graph_built_on": "scaled",
            "dropped_lab_events": blocks["labevents"].meta.get("dropped_events", 0),
        },
    )
    outputs += [
        os.path.join("features", "features.bin"),
        os.path.join("features", "features.json"),
        os.path.join("features", "features.ids.txt"),
    ]

    splits_payload = {
        "fractions": list(cfg["split"]["fractions"]),
        "seed": cfg["split"]["seed"],
        "train": np.flatnonzero(splits.train_mask).tolist(),
        "val": np.flatnonzero(splits.val_mask).tolist(),
        "test": np.flatnonzero(splits.test_mask).tolist(),
    }
    with open(os.path.join(cfg.artifact_dir, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump(splits_payload, fh, sort_keys=True)
        fh.write("\n")
    outputs.append("splits.json")

    stages.write_manifest(
        "featurize", inputs, outputs, cfg["split"]["seed"],
        extra={"n_cols_selected": int(sel_features.n_cols)},
    )
    print(
        f"featurize: {sel_features.n_rows} rows, {sel_features.n_cols} columns "
        f"(selection: {', '.join(selection)})"
    )


def _load_splits(cfg: RunConfig, n: int) -> evalstat.Splits:
    with open(os.path.join(cfg.artifact_dir, "splits.json"), encoding="utf-8") as fh:
        payload = json.load(fh)
    masks = []
    for key in ("train", "val", "test"):
        mask = np.zeros(n, dtype=bool)
        mask[payload[key]] = True
        masks.append(mask)
    return evalstat.Splits(*masks)


def _load_labels(cfg: RunConfig, features: featurize.NodeFeatureMatrix) -> np.ndarray:
    cohort = _load_cohort(cfg)
    by_id = {r.admission_id: float(r.label_readmit_30d) for r in cohort.records}
    return np.array([by_id[int(i)] for i in features.admission_ids])


def cmd_graph(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {"featurize": stages.require_upstream("graph", "featurize")}
    if stages.is_fresh("graph", inputs) and not force:
        print("graph: up to date, skipping")
        return
    features, _ = featurize.load_features(os.path.join(cfg.artifact_dir, "features"))
    g = simgraph.range_search(
        features, cfg["graph"]["tau"], tile_size=cfg["graph"]["tile_size"], threads=threads
    )
    stats = simgraph.graph_stats(g)
    simgraph.save_graph(g, os.path.join(cfg.artifact_dir, "graph.bin"))
    stages.write_manifest(
        "graph", inputs, ["graph.bin"], None,
        extra={"edges": stats.edge_count, "average_degree": stats.average_degree},
    )
    print(
        f"graph: tau={g.tau} -> {stats.edge_count} edges, "
        f"{stats.average_degree:.4f} average degree"
    )


def _epoch_logger(history: list):
    def log_fn(epoch, train_loss, val_loss, val_auroc):
        history.append((epoch, train_loss, val_loss, val_auroc))
        log.info(
            "epoch=%d train_loss=%.6f val_loss=%.6f val_auroc=%.4f",
            epoch, train_loss, val_loss, val_auroc,
        )

    return log_fn


def _metrics_dict(result: models.TrainResult) -> dict:
    return {
        "val_auroc": result.val_auroc,
        "val_bacc": result.val_bacc,
        "test_auroc": result.test_auroc,
        "test_bacc": result.test_bacc,
        "stopped_epoch": result.stopped_epoch,
        "best_epoch": result.best_epoch,
    }


def cmd_train(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {
        "featurize": stages.require_upstream("train", "featurize"),
        "graph": stages.require_upstream("train", "graph"),
    }
    if stages.is_fresh("train", inputs) and not force:
        print("train: up to date, skipping")
        return
    tr = cfg["train"]
    features, _ = featurize.load_features(os.path.join(cfg.artifact_dir, "features"))
    graph = simgraph.load_graph(os.path.join(cfg.artifact_dir, "graph.bin"))
    labels = _load_labels(cfg, features)
    splits = _load_splits(cfg, features.n_rows)

    sage_cfg = models.SageConfig(
        n_layers=tr["n_layers"],
        hidden=tr["hidden"],
        aggregator=tr["aggregator"],
        learning_rate=tr["learning_rate"],
        max_epochs=tr["max_epochs"],
        patience=tr["patience"],
        seed=tr["seed"],
    )
    model = models.build_sage(sage_cfg, features.n_cols)
    history: list = []
    result = models.train(
        model, graph, features.matrix, labels, splits, log_fn=_epoch_logger(history)
    )
    lr_result = models.train_logreg(
        features.matrix, labels, splits,
        learning_rate=tr["baseline_learning_rate"],
        max_epochs=tr["max_epochs"], patience=tr["patience"], seed=tr["seed"],
    )
    mlp_result = models.train_mlp(
        features.matrix, labels, splits,
        hidden_layers=tuple(tr["mlp_hidden"]),
        learning_rate=tr["baseline_learning_rate"],
        max_epochs=tr["max_epochs"], patience=tr["patience"], seed=tr["seed"],
    )

    train_dir = os.path.join(cfg.artifact_dir, "train")
    os.makedirs(train_dir, exist_ok=True)
    cfg_hash = stages.config_hash("train")
    _write_table(
        os.path.join(train_dir, "history.csv"),
        cfg_hash,
        ["epoch", "train_loss", "val_loss", "val_auroc"],
        [[e, repr(tl), repr(vl), repr(va)] for e, tl, vl, va in history],
    )
    metrics = {
        "graphsage": _metrics_dict(result),
        "logreg": _metrics_dict(lr_result),
        "mlp": _metrics_dict(mlp_result),
    }
    with open(os.path.join(train_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
    models.save_checkpoint(
        model,
        os.path.join(train_dir, "checkpoint.json"),
        os.path.join(train_dir, "checkpoint.bin"),
    )
    outputs = [
        os.path.join("train", name)
        for name in ("metrics.json", "history.csv", "checkpoint.json", "checkpoint.bin")
    ]
    stages.write_manifest("train", inputs, outputs, tr["seed"], extra=metrics)
    print(
        "train: GraphSAGE test AUROC "
        f"{result.test_auroc:.4f} / BAcc {result.test_bacc:.4f} "
        f"(LR {lr_result.test_auroc:.4f}, MLP {mlp_result.test_auroc:.4f})"
    )


def cmd_grid(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {
        "featurize": stages.require_upstream("grid", "featurize"),
        "graph": stages.require_upstream("grid", "graph"),
    }
    if stages.is_fresh("grid", inputs) and not force:
        print("grid: up to date, skipping")
        return
    gr = cfg["grid"]
    features, _ = featurize.load_features(os.path.join(cfg.artifact_dir, "features"))
    graph = simgraph.load_graph(os.path.join(cfg.artifact_dir, "graph.bin"))
    labels = _load_labels(cfg, features)
    splits = _load_splits(cfg, features.n_rows)

    grid = [
        models.SageConfig(
            n_layers=layers, hidden=hidden, aggregator=agg, learning_rate=lr,
            max_epochs=gr["max_epochs"], patience=gr["patience"], seed=gr["seed"],
        )
        for lr in gr["learning_rates"]
        for layers in gr["n_layers"]
        for hidden in gr["hidden"]
        for agg in gr["aggregators"]
    ]
    ranked = models.grid_search(
        grid, graph, features.matrix, labels, splits, progress_fn=log.info
    )
    grid_dir = os.path.join(cfg.artifact_dir, "grid")
    os.makedirs(grid_dir, exist_ok=True)
    rows = [
        [
            c.learning_rate, c.n_layers, c.hidden, c.aggregator, r.stopped_epoch,
            repr(r.val_auroc), repr(r.val_bacc), repr(r.test_auroc), repr(r.test_bacc),
            c.seed,
        ]
        for c, r in ranked
    ]
    _write_table(
        os.path.join(grid_dir, "results.csv"),
        stages.config_hash("grid"),
        ["lr", "layers", "hidden", "aggregator", "stopped_epoch",
         "val_auroc", "val_bacc", "test_auroc", "test_bacc", "seed"],
        rows,
    )
    best_cfg, best = ranked[0]
    stages.write_manifest(
        "grid", inputs, [os.path.join("grid", "results.csv")], gr["seed"],
        extra={"n_runs": len(ranked), "best_val_auroc": best.val_auroc},
    )
    print(
        f"grid: {len(ranked)} runs; best val AUROC {best.val_auroc:.4f} "
        f"(lr={best_cfg.learning_rate}, layers={best_cfg.n_layers}, "
        f"hidden={best_cfg.hidden}, agg={best_cfg.aggregator})"
    )


def cmd_ablate(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {
        "featurize": stages.require_upstream("ablate", "featurize"),
        "ingest": stages.require_upstream("ablate", "ingest"),
    }
    if stages.is_fresh("ablate", inputs) and not force:
        print("ablate: up to date, skipping")
        return
    tr = cfg["train"]
    blocks_dir = os.path.join(cfg.artifact_dir, "features", "blocks")
    block_mats = {
        name: featurize.read_matrix(os.path.join(blocks_dir, f"{name}.bin"))
        for name in schema.BLOCK_ORDER
    }
    cohort = _load_cohort(cfg)
    labels = np.array([float(r.label_readmit_30d) for r in cohort.records])
    splits = _load_splits(cfg, len(cohort))

    rows = []
    for label, combo in ABLATION_COMBOS:
        matrix = np.hstack([block_mats[name] for name in combo])
        graph = simgraph.range_search(
            matrix, cfg["graph"]["tau"], tile_size=cfg["graph"]["tile_size"], threads=threads
        )
        sage_cfg = models.SageConfig(
            n_layers=tr["n_layers"], hidden=tr["hidden"], aggregator=tr["aggregator"],
            learning_rate=tr["learning_rate"], max_epochs=tr["max_epochs"],
            patience=tr["patience"], seed=tr["seed"],
        )
        model = models.build_sage(sage_cfg, matrix.shape[1])
        result = models.train(model, graph, matrix, labels, splits)
        rows.append([label, result.test_auroc, result.test_bacc])
        log.info("ablate %-55s AUROC %.4f BAcc %.4f", label, result.test_auroc, result.test_bacc)

    rows.sort(key=lambda r: -r[1])
    ablate_dir = os.path.join(cfg.artifact_dir, "ablate")
    os.makedirs(ablate_dir, exist_ok=True)
    _write_table(
        os.path.join(ablate_dir, "results.csv"),
        stages.config_hash("ablate"),
        ["data", "auroc", "bacc"],
        [[label, repr(a), repr(b)] for label, a, b in rows],
    )
    stages.write_manifest(
        "ablate", inputs, [os.path.join("ablate", "results.csv")], tr["seed"],
        extra={"best": rows[0][0]},
    )
    print(f"ablate: {len(rows)} combinations; best: {rows[0][0]} (AUROC {rows[0][1]:.4f})")


def _inner_val_split(
    cohort: ingest.Cohort,
    train_mask: np.ndarray,
    val_fraction: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Carve a patient-grouped validation subset out of a fold's training
    nodes (early stopping needs a validation loss)."""
    groups = [
        (pid, rows, label)
        for pid, rows, label in evalstat._patient_groups(cohort)
        if train_mask[rows[0]]
    ]
    bin_of = evalstat._greedy_deal(groups, [1.0 - val_fraction, val_fraction], seed)
    inner_train = np.zeros_like(train_mask)
    inner_val = np.zeros_like(train_mask)
    for pid, rows, _ in groups:
        (inner_train if bin_of[pid] == 0 else inner_val)[rows] = True
    return inner_train, inner_val


def cmd_crossval(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {
        "featurize": stages.require_upstream("crossval", "featurize"),
        "graph": stages.require_upstream("crossval", "graph"),
        "ingest": stages.require_upstream("crossval", "ingest"),
    }
    if stages.is_fresh("crossval", inputs) and not force:
        print("crossval: up to date, skipping")
        return
    cv = cfg["crossval"]
    tr = cfg["train"]
    features, _ = featurize.load_features(os.path.join(cfg.artifact_dir, "features"))
    graph = simgraph.load_graph(os.path.join(cfg.artifact_dir, "graph.bin"))
    cohort = _load_cohort(cfg)
    labels = _load_labels(cfg, features)
    folds = evalstat.make_folds(cohort, cv["k"], cv["seed"])

    fold_metrics = {
        name: {"auroc": [], "bacc": []} for name in ("graphsage", "mlp", "logreg")
    }
    for f in range(folds.k):
        inner_train, inner_val = _inner_val_split(
            cohort, folds.train_masks[f], cv["val_fraction"], cv["seed"] + 1000 + f
        )
        splits = evalstat.Splits(inner_train, inner_val, folds.test_masks[f])
        sage_cfg = models.SageConfig(
            n_layers=tr["n_layers"], hidden=tr["hidden"], aggregator=tr["aggregator"],
            learning_rate=tr["learning_rate"], max_epochs=tr["max_epochs"],
            patience=tr["patience"], seed=tr["seed"] + f,
        )
        model = models.build_sage(sage_cfg, features.n_cols)
        results = {
            "graphsage": models.train(model, graph, features.matrix, labels, splits),
            "mlp": models.train_mlp(
                features.matrix, labels, splits, hidden_layers=tuple(tr["mlp_hidden"]),
                learning_rate=tr["baseline_learning_rate"], max_epochs=tr["max_epochs"],
                patience=tr["patience"], seed=tr["seed"] + f,
            ),
            "logreg": models.train_logreg(
                features.matrix, labels, splits,
                learning_rate=tr["baseline_learning_rate"], max_epochs=tr["max_epochs"],
                patience=tr["patience"], seed=tr["seed"] + f,
            ),
        }
        for name, result in results.items():
            fold_metrics[name]["auroc"].append(result.test_auroc)
            fold_metrics[name]["bacc"].append(result.test_bacc)
        log.info(
            "fold %d/%d: sage %.4f mlp %.4f lr %.4f",
            f + 1, folds.k,
            results["graphsage"].test_auroc,
            results["mlp"].test_auroc,
            results["logreg"].test_auroc,
        )

    report = evalstat.compare_models(fold_metrics)
    cv_dir = os.path.join(cfg.artifact_dir, "crossval")
    os.makedirs(cv_dir, exist_ok=True)
    cfg_hash = stages.config_hash("crossval")
    _write_table(
        os.path.join(cv_dir, "cv_metrics.csv"),
        cfg_hash,
        ["model", "auroc_mean", "auroc_std", "bacc_mean", "bacc_std"],
        [
            [
                name,
                repr(float(np.mean(fold_metrics[name]["auroc"]))),
                repr(float(np.std(fold_metrics[name]["auroc"], ddof=1))),
                repr(float(np.mean(fold_metrics[name]["bacc"]))),
                repr(float(np.std(fold_metrics[name]["bacc"], ddof=1))),
            ]
            for name in fold_metrics
        ],
    )
    _write_table(
        os.path.join(cv_dir, "shapiro.csv"),
        cfg_hash,
        ["model", "metric", "W", "pvalue"],
        [
            [m, k, repr(report.shapiro[m][k][0]), repr(report.shapiro[m][k][1])]
            for m in report.models
            for k in report.metrics
        ],
    )
    _write_table(
        os.path.join(cv_dir, "ttests.csv"),
        cfg_hash,
        ["models", "metric", "statistic", "pvalue", "significant"],
        [
            [f"{t.model_a} vs. {t.model_b}", t.metric, repr(t.statistic), repr(t.pvalue),
             int(t.significant)]
            for t in report.ttests
        ],
    )
    with open(os.path.join(cv_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs = [
        os.path.join("crossval", name)
        for name in ("cv_metrics.csv", "shapiro.csv", "ttests.csv", "report.json")
    ]
    stages.write_manifest("crossval", inputs, outputs, cv["seed"])
    means = {m: float(np.mean(fold_metrics[m]["auroc"])) for m in fold_metrics}
    print(
        f"crossval: {folds.k} folds; mean AUROC "
        + ", ".join(f"{m}={v:.4f}" for m, v in means.items())
    )


def cmd_report(cfg: RunConfig, stages: Stages, force: bool, threads: int) -> None:
    inputs = {"train": stages.require_upstream("report", "train")}
    for optional in ("graph", "grid", "ablate", "crossval"):
        manifest = stages.read_manifest(optional)
        if manifest is not None and manifest["config_hash"] == stages.config_hash(optional):
            inputs[optional] = manifest
    if stages.is_fresh("report", inputs) and not force:
        print("report: up to date, skipping")
        return

    payload: dict = {
        "config_hashes": {stage: stages.config_hash(stage) for stage in STAGES},
        "stages": sorted(inputs),
    }
    with open(os.path.join(cfg.artifact_dir, "train", "metrics.json"), encoding="utf-8") as fh:
        payload["train"] = json.load(fh)
    if "graph" in inputs:
        payload["graph"] = inputs["graph"].get("extra", {})
        payload["graph"]["tau"] = cfg["graph"]["tau"]
    if "ablate" in inputs:
        payload["ablate"] = _read_table_rows(
            os.path.join(cfg.artifact_dir, "ablate", "results.csv")
        )
    if "grid" in inputs:
        payload["grid"] = _read_table_rows(
            os.path.join(cfg.artifact_dir, "grid", "results.csv")
        )
    if "crossval" in inputs:
        with open(
            os.path.join(cfg.artifact_dir, "crossval", "report.json"), encoding="utf-8"
        ) as fh:
            payload["crossval"] = json.load(fh)

    out = os.path.join(cfg.artifact_dir, "report.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    stages.write_manifest("report", inputs, ["report.json"], None)
    print(f"report: wrote {out}")


def _read_table_rows(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    return [dict(row) for row in reader]


_COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "graph": cmd_graph,
    "train": cmd_train,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
    "crossval": cmd_crossval,
    "report": cmd_report,
}


def run_pipeline(cfg: RunConfig, command: str, force: bool = False, threads: int = 1) -> None:
    stages = Stages(cfg)
    _COMMANDS[command](cfg, stages, force, threads)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cohortgraph",
        description="Readmission-prediction pipeline on synthetic EHR-shaped data",
    )
    parser.add_argument("command", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--force", action="store_true", help="rerun even if up to date")
    parser.add_argument("--threads", type=int, default=1, help="worker threads")
    parser.add_argument("--seed", type=int, default=None, help="override all stage seeds")
    parser.add_argument("--verbose", action="store_true", help="per-epoch logging")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        run_pipeline(cfg, args.command, force=args.force, threads=args.threads)
    except StalenessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except CohortGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
