"""Experiment stages: generate -> train -> capture -> cav -> analyses, persisted in an ArtifactStore."""
import json
import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from cavlab.analysis.consistency import ConsistencyContext, consistency_experiment, fixed_gamma_sweep, gamma_sweep
from cavlab.analysis.entanglement import cosine_matrix, dot_distributions, family_entanglement
from cavlab.analysis.spatial import (
    family_mean_grid,
    region_mass_fraction,
    spatial_contrast,
    spatial_dependence_test,
    spatial_tcav_suite,
)
from cavlab.analysis.tcav import ClassInputs, consistency_score_summary, consistency_scores, tcav_sweep
from cavlab.analysis.theory import verify_theory_cases
from cavlab.cav import CavFamily, cav_accuracy_table, decode_cavs, encode_cavs, find_family, random_cavs, train_family
from cavlab.config import SCHEMA_VERSION, thread_cap
from cavlab.elements.classes import ClassTable
from cavlab.elements.concepts import OVERLAP_POLICY, TEXTURE_GEOMETRY, all_concepts, concept_group
from cavlab.elements.dataset import class_inputs, generate_dataset
from cavlab.elements.probes import fingerprint, positive_set, random_set
from cavlab.elements.render import save_png
from cavlab.errors import ConfigError, MissingArtifactError, UnknownConceptError
from cavlab.nn.checkpoint import load_checkpoint, save_checkpoint
from cavlab.nn.model import TrainedModel, eligible_layers, evaluate, forward_capture, layer_index
from cavlab.nn.train import train
from cavlab.reports import emit_report
from cavlab.schemas import DatasetManifest, ExperimentConfig, ExperimentManifest
from cavlab.storage import ArtifactStore, decode_bundle, decode_images, encode_bundle, encode_images

logger = logging.getLogger(__name__)

REFERENCE_MEAN_CONSISTENCY = 0.841
ANALYSIS_STAGES = ("train", "cav", "tcav", "consistency", "entangle", "spatial", "verify-theory")


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse an experiment config file; syntax errors report line and column."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_config(raw, str(path))


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: {problems}") from None


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Return a re-validated copy with command-line overrides applied; None means not given."""
    raw = json.loads(config.model_dump_json())
    if overrides.get("seed") is not None:
        for section in ("dataset", "training", "probes"):
            raw[section]["seed"] = overrides["seed"]
    for key in ("layers", "concepts", "classes", "gamma", "p_threshold"):
        if overrides.get(key) is not None:
            raw["analysis"][key] = overrides[key]
    if overrides.get("r") is not None:
        raw["probes"]["num_random"] = overrides["r"]
    return parse_config(raw, "command line")


class Pipeline:
    def __init__(self, config: ExperimentConfig, out: str | Path, threads: int | None = None):
        self.config = config
        self.store = ArtifactStore(out)
        self.threads = thread_cap(threads)
        self.table = ClassTable.from_config(config.dataset)

    # ------------------------------------------------------------ selections

    @property
    def heldout_r(self) -> int:
        """Random index no CAV is trained against."""
        return self.config.probes.num_random

    def concepts(self) -> list[str]:
        concepts = self.config.analysis.concepts or all_concepts(self.config.dataset)
        for c in concepts:
            concept_group(self.config.dataset, c)
        return concepts

    def probe_labels(self) -> list[tuple[str, str | None]]:
        return [(c, None) for c in self.concepts()] + [
            (c, loc) for c in self.concepts() for loc in self.config.analysis.locations
        ]

    def layers(self) -> list[str]:
        for layer in self.config.analysis.layers:
            layer_index(layer)
        return list(self.config.analysis.layers)

    def cav_layers(self) -> list[str]:
        layers = list(self.layers())
        for l1, l2 in self.config.analysis.consistency_pairs:
            for layer in (l1, l2):
                layer_index(layer)
                if layer not in layers:
                    layers.append(layer)
        return sorted(layers, key=layer_index)

    def classes(self, spatial_only: bool = False) -> list[str]:
        names = self.config.analysis.classes or self.table.names
        for name in names:
            self.table.index(name)
        if spatial_only:
            names = [n for n in names if self.table.get(n).region is not None]
        return names

    # ------------------------------------------------------------ provenance

    def write_manifest(self, stage: str, inputs: list[str], notes: dict | None = None) -> str:
        manifest = ExperimentManifest(
            stage=stage,
            config=self.config,
            inputs={s: self.store.digest_of(s) for s in inputs},
            artifacts={s: self.store.path(s).name for s in inputs},
            training_log_digest=self.store.digest_of("training_log") or None,
            notes={k: str(v) for k, v in (notes or {}).items()},
        )
        return self.store.put_json(f"manifest-{stage}", json.loads(manifest.model_dump_json())).name

    def _payload(self, manifest: str, **body) -> dict:
        return {"schema_version": SCHEMA_VERSION, "manifest": manifest, **body}

    def require(self, *stages: str) -> None:
        for stage in stages:
            self.store.path(stage)

    def load_model(self) -> TrainedModel:
        return load_checkpoint(self.store.get("checkpoint"))

    def load_families(self) -> list[CavFamily]:
        return decode_cavs(self.store.get("cavs"))

    def load_activations(self) -> dict[str, np.ndarray]:
        arrays, _ = decode_bundle(self.store.get("activations"))
        return arrays

    # ------------------------------------------------------------ stages

    def gen(self, png: int = 0) -> str:
        cfg = self.config.dataset
        digests = {}
        splits = {}
        for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
            data = generate_dataset(cfg, self.table, n, split, self.threads, progress=True)
            splits[split] = data
            path = self.store.put(f"images_{split}", encode_images(data.images), ".f32")
            digests[split] = self.store.digest_of(f"images_{split}")
            logger.info("wrote %s", path.name)
        self.store.put(
            "labels",
            encode_bundle({s: d.labels for s, d in splits.items()}, meta={"kind": "labels", "classes": self.table.names}),
            ".bin",
        )
        manifest = DatasetManifest(
            config=cfg,
            split="train+val",
            seed=cfg.seed,
            classes=self.table.names,
            texture_geometry=TEXTURE_GEOMETRY,
            overlap_policy=OVERLAP_POLICY,
            scenes=splits["train"].scenes + splits["val"].scenes,
            images_digest=digests["train"],
            labels_digest=self.store.digest_of("labels"),
        )
        self.store.put_json("dataset", json.loads(manifest.model_dump_json()))
        self.store.put_json("config", json.loads(self.config.model_dump_json()))
        self.write_manifest("gen", ["images_train", "images_val", "labels", "dataset"],
                            {"texture_geometry": TEXTURE_GEOMETRY, "overlap_policy": OVERLAP_POLICY})
        if png:
            png_dir = self.store.root / "png"
            png_dir.mkdir(parents=True, exist_ok=True)
            for i in range(min(png, len(splits["train"].images))):
                save_png(splits["train"].images[i], png_dir / f"train_{i:05d}.png")
        return f"gen: {cfg.n_train} train / {cfg.n_val} val images, {len(self.table)} classes, digest {digests['train'][:16]}"

    def train(self) -> str:
        self.require("images_train", "images_val", "labels")
        images = decode_images(self.store.get("images_train"))
        val_images = decode_images(self.store.get("images_val"))
        labels, _ = decode_bundle(self.store.get("labels"))
        validation = (val_images, labels["val"]) if len(val_images) else None
        model = train(self.config.model, images, labels["train"], self.config.training, validation)
        self.store.put("checkpoint", save_checkpoint(model), ".ckpt")
        self.store.put_json("training_log", json.loads(model.log.model_dump_json()))
        manifest = self.write_manifest(
            "train", ["images_train", "labels", "checkpoint"], {"loss_function": model.log.loss_function}
        )
        self.store.put_json("report-train", self._payload(manifest, training_log=json.loads(model.log.model_dump_json())))
        val = evaluate(model, *validation) if validation is not None else (float("nan"), float("nan"))
        last = model.log.epochs[-1].accuracy if model.log.epochs else float("nan")
        flag = "" if model.log.converged else " (not converged)"
        return f"train: {len(model.log.epochs)} epochs, train acc {last:.4f}, val acc {val[1]:.4f}{flag}"

    def capture(self) -> str:
        self.require("checkpoint")
        model = self.load_model()
        cfg, probes = self.config.dataset, self.config.probes
        groups: dict[str, np.ndarray] = {}
        for concept, location in self.probe_labels():
            label = f"{concept}@{location}" if location else concept
            groups[label] = positive_set(cfg, concept, probes.n_positive, location)[0]
        for r in range(self.heldout_r + 1):
            groups[f"random:{r}"] = random_set(cfg, r, probes.n_negative)[0]
        arrays = {}
        for layer in self.cav_layers():
            for name, images in tqdm(groups.items(), desc=f"capture {layer}"):
                arrays[f"{layer}|{name}"] = forward_capture(model, images, layer).data.astype(np.float32)
        meta = {"kind": "activations", "fingerprints": {name: fingerprint(images) for name, images in groups.items()}}
        self.store.put("activations", encode_bundle(arrays, meta=meta, dtype="<f4"), ".bin")
        self.write_manifest("capture", ["checkpoint", "activations"])
        return f"capture: {len(groups)} probe sets at {len(self.cav_layers())} layers"

    def cav(self) -> str:
        self.require("activations")
        acts, meta = decode_bundle(self.store.get("activations"))
        probes = self.config.probes
        families: list[CavFamily] = []
        for layer in self.cav_layers():
            negatives = {r: _flat(acts[f"{layer}|random:{r}"]) for r in range(probes.num_random)}
            for concept, location in tqdm(self.probe_labels(), desc=f"cav {layer}"):
                label = f"{concept}@{location}" if location else concept
                key = f"{layer}|{label}"
                if key not in acts:
                    raise MissingArtifactError(f"no captured activations for {label!r} at {layer}; rerun capture")
                families.append(
                    train_family(concept, layer, _flat(acts[key]), negatives, probes, location, self.threads,
                                 meta["fingerprints"].get(label, ""))
                )
            families.append(random_cavs(layer, negatives, probes.random_cav_count, probes, self.threads))
        self.store.put("cavs", encode_cavs(families), ".bin")
        manifest = self.write_manifest(
            "cav", ["activations", "cavs"],
            {"probe": f"logistic regression, l2 {probes.l2}, {probes.iterations} GD iterations",
             "standardize": probes.standardize, "test_fraction": probes.test_fraction},
        )
        table = cav_accuracy_table(families)
        self.store.put_json("report-cav", self._payload(manifest, accuracy=table.to_dict(orient="records")))
        return f"cav: {sum(len(f) for f in families)} CAVs in {len(families)} families"

    def _tcav_layers(self, model: TrainedModel, families: list[CavFamily]) -> list[str]:
        accuracy = None
        if self.config.analysis.exclude_low_accuracy_layers:
            accuracy = {
                layer: float(np.mean([f.accuracies.mean() for f in families if f.layer == layer and f.concept != "random"]))
                for layer in self.layers()
            }
        eligible = eligible_layers(model, accuracy, self.config.analysis.min_cav_accuracy)
        return [l for l in self.layers() if l in eligible]

    def _control_class(self, families: list[CavFamily]) -> str | None:
        """First region-free class sharing a concept with a location-constrained family."""
        located = {f.concept for f in families if f.location is not None}
        for name in self.classes():
            class_def = self.table.get(name)
            if class_def.region is None and located & set(class_def.concepts):
                return name
        return None

    def _class_inputs(self, names: list[str]) -> list[ClassInputs]:
        n = self.config.analysis.class_inputs
        return [ClassInputs(name, self.table.index(name), class_inputs(self.config.dataset, self.table, name, n)[0])
                for name in names]

    def tcav(self, significant_only: bool = False) -> str:
        self.require("checkpoint", "cavs")
        model = self.load_model()
        all_families = self.load_families()
        layers = self._tcav_layers(model, all_families)
        wanted = set(self.concepts())
        families = [f for f in all_families if f.concept in wanted and f.location is None]
        randoms = {f.layer: f for f in all_families if f.concept == "random"}
        reports = tcav_sweep(model, families, randoms, self._class_inputs(self.classes()), layers,
                             self.config.analysis.p_threshold)
        scores = consistency_scores(reports, significant_only)
        summary = consistency_score_summary(scores) if scores else {}
        summary["reference_mean"] = REFERENCE_MEAN_CONSISTENCY
        manifest = self.write_manifest("tcav", ["checkpoint", "cavs"], {"layers": ",".join(layers)})
        self.store.put_json("report-tcav", self._payload(
            manifest,
            reports=[json.loads(r.model_dump_json()) for r in reports],
            consistency_scores=[json.loads(s.model_dump_json()) for s in scores],
            summary=summary,
        ))
        mean = summary.get("mean", float("nan"))
        return f"tcav: {len(reports)} reports over {len(layers)} layers, mean consistency score {mean:.3f}"

    def consistency(self) -> str:
        self.require("checkpoint", "cavs")
        model = self.load_model()
        families = self.load_families()
        a = self.config.analysis
        X = random_set(self.config.dataset, self.heldout_r, a.optimise.n_inputs)[0]
        reports, sweeps = [], []
        for l1, l2 in a.consistency_pairs:
            ctx = ConsistencyContext.build(model, X, l1, l2)
            random2 = find_family(families, "random", l2)
            for concept in self.concepts():
                f1, f2 = find_family(families, concept, l1), find_family(families, concept, l2)
                reports.append(consistency_experiment(ctx, f1, f2, random2, a.gamma, a.consistency_cavs, a.optimise,
                                                      a.projected_recentre, self.config.probes.seed))
                v1, v2 = f1.cavs[0].v, f2.cavs[0].v
                sweeps.append(gamma_sweep(ctx, v1, v2, a.gammas, concept))
                sweeps.append(fixed_gamma_sweep(ctx, v1, v2, a.gamma, a.gammas, concept))
        manifest = self.write_manifest("consistency", ["checkpoint", "cavs"],
                                       {"recentred_projection": a.projected_recentre, "gamma": a.gamma})
        self.store.put_json("report-consistency", self._payload(
            manifest,
            reports=[json.loads(r.model_dump_json()) for r in reports],
            sweeps=[json.loads(s.model_dump_json()) for s in sweeps],
        ))
        return f"consistency: {len(reports)} reports, {len(sweeps)} gamma sweeps"

    def entangle(self) -> str:
        self.require("cavs", "activations")
        families = self.load_families()
        acts = self.load_activations()
        a = self.config.analysis
        matrices, dots, flags = [], [], []
        held = f"random:{self.heldout_r}"
        for layer in self.layers():
            layer_families = [f for f in families if f.layer == layer and f.location is None and f.concept != "random"]
            matrices.append(cosine_matrix(layer_families, label=self.config.name))
            for c1, c2 in a.entanglement_pairs:
                for c in (c1, c2):
                    if f"{layer}|{c}" not in acts:
                        raise UnknownConceptError(f"entanglement concept {c!r} was not captured; add it to analysis.concepts")
                family = find_family(families, c1, layer)
                probes = {c1: _flat(acts[f"{layer}|{c1}"]), c2: _flat(acts[f"{layer}|{c2}"]),
                          "random": _flat(acts[f"{layer}|{held}"])}
                dots.extend(dot_distributions(family.cavs[0], probes))
                flags.extend(family_entanglement(family, probes[c2], probes["random"], c2, a.entanglement_threshold))
        manifest = self.write_manifest("entangle", ["cavs", "activations"],
                                       {"entanglement_threshold": a.entanglement_threshold})
        self.store.put_json("report-entangle", self._payload(
            manifest,
            matrices=[json.loads(m.model_dump_json()) for m in matrices],
            dots=[json.loads(d.model_dump_json()) for d in dots],
            flags=[json.loads(f.model_dump_json()) for f in flags],
        ))
        return f"entangle: {len(matrices)} similarity matrices, {len(flags)} entanglement tests"

    def spatial(self) -> str:
        self.require("checkpoint", "cavs", "activations")
        model = self.load_model()
        families = self.load_families()
        acts = self.load_activations()
        a = self.config.analysis
        grids, mass, dependence = [], [], []
        for layer in self.layers():
            dims = model.layer_shape(layer)
            for family in [f for f in families if f.layer == layer and f.concept != "random"]:
                for reduction in ("norm", "mean"):
                    grids.append(family_mean_grid(family, dims, reduction))
                norm_grid = grids[-2]
                row = {"concept": family.label, "layer": layer}
                for region in ("left", "right", "top", "bottom"):
                    row[region] = region_mass_fraction(norm_grid, region)
                mass.append(row)
            for concept in self.concepts():
                for loc in a.locations:
                    other = _opposite(loc)
                    if other not in a.locations:
                        continue
                    family = find_family(families, f"{concept}@{loc}", layer)
                    for cav in family.cavs:
                        dependence.append(spatial_dependence_test(
                            cav, _flat(acts[f"{layer}|{concept}@{loc}"]), _flat(acts[f"{layer}|{concept}@{other}"]),
                            loc, other, a.spatial_threshold))
        reports, contrast = [], {}
        layers = self._tcav_layers(model, families)
        randoms = {f.layer: f for f in families if f.concept == "random"}
        control = self._control_class(families)
        targets = self.classes(spatial_only=True) + ([control] if control else [])
        for cls in self._class_inputs(targets):
            concepts = self.table.get(cls.name).concepts
            chosen = [f for f in families if f.concept in concepts]
            suite = spatial_tcav_suite(model, cls, chosen, randoms, layers, a.p_threshold)
            reports.extend(suite)
            for concept in concepts:
                for loc in a.locations:
                    other = _opposite(loc)
                    left = [r for r in suite if r.concept == f"{concept}@{loc}"]
                    right = [r for r in suite if r.concept == f"{concept}@{other}"]
                    if left and right and loc < other:
                        contrast[f"{cls.name}|{concept}|{loc}-{other}"] = spatial_contrast(left, right)
        manifest = self.write_manifest("spatial", ["checkpoint", "cavs", "activations"],
                                       {"mass_threshold": a.mass_threshold, "spatial_threshold": a.spatial_threshold})
        self.store.put_json("report-spatial", self._payload(
            manifest,
            grids=[json.loads(g.model_dump_json()) for g in grids],
            mass=mass,
            dependence=[json.loads(d.model_dump_json()) for d in dependence],
            reports=[json.loads(r.model_dump_json()) for r in reports],
            contrast=contrast,
            control_class=control,
        ))
        return f"spatial: {len(grids)} grids, {len(dependence)} dependence tests, {len(reports)} TCAV reports"

    def verify_theory(self, dims: int = 4) -> str:
        rng = np.random.default_rng(self.config.probes.seed)
        verdicts = [verify_theory_cases(case, dims, rng) for case in ("linear", "relu", "sigmoid")]
        manifest = self.write_manifest("verify-theory", [])
        self.store.put_json("report-verify-theory", self._payload(
            manifest, verdicts=[json.loads(v.model_dump_json()) for v in verdicts]))
        return "verify-theory: " + ", ".join(f"{v.case}={'consistent' if v.consistent else 'inconsistent'}" for v in verdicts)

    def report(self) -> str:
        out_dir = self.store.root / "reports"
        written = []
        for kind in ANALYSIS_STAGES:
            if self.store.has(f"report-{kind}"):
                written.extend(emit_report(kind, self.store.get_json(f"report-{kind}"), out_dir))
        if not written:
            raise MissingArtifactError(f"no analysis artifacts in {self.store.root}; run an analysis stage first")
        return f"report: {len(written)} files in {out_dir}"


def _flat(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(len(a), -1)


def _opposite(region: str) -> str:
    return {"left": "right", "right": "left", "top": "bottom", "bottom": "top"}[region]


def stored_config(out: str | Path) -> ExperimentConfig:
    store = ArtifactStore(out)
    if not store.has("config"):
        raise MissingArtifactError(f"no --config given and no stored config in {out}; run gen first")
    return parse_config(store.get_json("config"), "stored config")
