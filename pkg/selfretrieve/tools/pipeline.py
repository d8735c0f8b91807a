from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from selfretrieve.config import RunConfig, apply_overrides
from selfretrieve.exceptions import ConfigurationError, Error, MissingArtifactError
from selfretrieve.image.image import resize_longer_side
from selfretrieve.image.proposals import propose, read_regions, write_regions
from selfretrieve.model.boost import (
    assemble_triplets,
    fine_tune,
    mine_pseudo_labels,
    read_triplets,
    select_anchors,
    write_pseudo_labels,
    write_triplets,
)
from selfretrieve.model.checkpoint import EmbeddingTable, load_checkpoint, save_checkpoint
from selfretrieve.model.ssl import train_ssl, write_history
from selfretrieve.search.diffusion import build_graph, write_edges, write_scores
from selfretrieve.search.evaluate import (
    EvalSetting,
    evaluate,
    evaluate_cross_distractor,
    extract_descriptors,
    write_report,
    write_summary,
)
from selfretrieve.search.manifest import DatasetManifest, annotations_path
from selfretrieve.util.parallel import parallel_map
from selfretrieve.util.synthgen import generate, generate_distractors

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable

    from selfretrieve.image.image import Image
    from selfretrieve.image.proposals import ProposalConfig
    from selfretrieve.search.manifest import ManifestEntry

log = logging.getLogger("selfretrieve")

EXIT_MISSING_ARTIFACT = 2
EXIT_CONFIGURATION = 3

RUN_SUBDIRS = ("dataset", "proposals", "checkpoints", "embeddings", "mining", "reports", "stages")
VARIANTS = ("initial", "boosted")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Run:
    """A run directory and the configuration that owns it.

    Every stage records a JSON manifest under ``stages/`` with the checksums of its inputs and outputs, the
    hash of the configuration sections it reads and its wall time. A stage whose manifest still matches is
    skipped.
    """

    def __init__(self, config: RunConfig, root: Path, force: bool = False):
        self.config = config
        self.root = root
        self.force = force
        for name in RUN_SUBDIRS:
            (root / name).mkdir(parents=True, exist_ok=True)

    @classmethod
    def open(cls, config: RunConfig, run_dir: Path | None = None, force: bool = False) -> Run:
        """Use ``run_dir``, or the latest run of this configuration, or start a new one."""
        if run_dir is None:
            runs = Path(config.paths.runs)
            existing = sorted(runs.glob(f"*-{config.short_hash()}")) if runs.exists() else []
            if existing:
                run_dir = existing[-1]
            else:
                run_dir = runs / f"{time.strftime('%Y%m%d-%H%M%S')}-{config.short_hash()}"
        log.info("Run directory: %s", run_dir)
        return cls(config, Path(run_dir), force)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def relative(self, path: Path) -> str:
        try:
            return path.relative_to(self.root).as_posix()
        except ValueError:
            return str(path)

    @property
    def manifest_path(self) -> Path:
        if self.config.paths.dataset:
            return Path(self.config.paths.dataset)
        return self.path("dataset", "manifest.jsonl")

    def manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.manifest_path)

    def dataset_files(self) -> list[Path]:
        """The manifest, its annotations and every image it references."""
        manifest = self.manifest()
        files = [self.manifest_path]
        if annotations_path(self.manifest_path).exists():
            files.append(annotations_path(self.manifest_path))
        return files + [manifest.resolve(entry) for entry in manifest]

    def stage(
        self,
        name: str,
        inputs: Iterable[Path] | Callable[[], Iterable[Path]],
        sections: Iterable[str],
        body: Callable[[], Iterable[Path]],
        extra: dict | None = None,
    ) -> bool:
        """Run ``body`` unless the recorded manifest of stage ``name`` is still current.

        Returns:
            Whether the stage ran.

        Raises:
            MissingArtifactError: If a declared input does not exist.
        """
        if callable(inputs):
            if not self.manifest_path.exists():
                raise MissingArtifactError(self.manifest_path)
            inputs = inputs()
        inputs = list(inputs)
        for path in inputs:
            if not path.exists():
                raise MissingArtifactError(path)

        record_path = self.path("stages", f"{name}.json")
        config_hash = self.config.section_digest(*sections)
        if extra:
            config_hash = hashlib.sha256((config_hash + json.dumps(extra, sort_keys=True)).encode()).hexdigest()
        checksums = {self.relative(path): sha256_file(path) for path in inputs}

        if not self.force and record_path.exists():
            record = json.loads(record_path.read_text())
            outputs = record.get("outputs", {})
            if (
                record.get("config_hash") == config_hash
                and record.get("inputs") == checksums
                and all(
                    (self.root / path).exists() and sha256_file(self.root / path) == digest
                    for path, digest in outputs.items()
                )
            ):
                log.info("Stage %s is up-to-date, skipping", name)
                return False

        log.info("Running stage %s", name)
        start = time.perf_counter()
        outputs = list(body())
        wall_time = time.perf_counter() - start

        record = {
            "stage": name,
            "config_hash": config_hash,
            "inputs": checksums,
            "outputs": {self.relative(path): sha256_file(path) for path in outputs},
            "wall_time": round(wall_time, 3),
        }
        record_path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
        log.info("Stage %s finished in %.1fs", name, wall_time)
        return True


def load_images(manifest: DatasetManifest, entries: Iterable[ManifestEntry], side: int) -> dict[str, Image]:
    entries = list(entries)
    images = parallel_map(lambda entry: resize_longer_side(manifest.load_image(entry), side), entries)
    return {entry.id: image for entry, image in zip(entries, images)}


def checkpoint_path(run: Run, variant: str) -> Path:
    return run.path("checkpoints", f"{variant}.srck")


def embeddings_path(run: Run, variant: str) -> Path:
    return run.path("embeddings", f"{variant}.srem")


def stage_synth(run: Run) -> bool:
    cfg = run.config
    if cfg.paths.dataset:
        log.info("Using dataset %s, nothing to synthesize", cfg.paths.dataset)
        return False

    def body() -> list[Path]:
        manifest = generate(cfg.synth, run.path("dataset"))
        outputs = [run.path("dataset", "manifest.jsonl"), annotations_path(run.path("dataset", "manifest.jsonl"))]
        outputs += [manifest.resolve(entry) for entry in manifest]
        if cfg.eval.cross_distractors:
            distractors = generate_distractors(cfg.synth, run.path("distractors"), cfg.eval.cross_distractors)
            outputs.append(run.path("distractors", "manifest.jsonl"))
            outputs += [distractors.resolve(entry) for entry in distractors]
        return outputs

    return run.stage("synth", [], ("synth", "eval"), body)


def _propose_into(run: Run, proposals: ProposalConfig, out: Path) -> list[Path]:
    cfg = run.config
    manifest = run.manifest()
    entries = manifest.learning_entries(cfg.ssl.use_distractors)
    images = load_images(manifest, entries, cfg.eval.image_side)

    per_image = parallel_map(lambda entry: propose(images[entry.id], proposals, entry.id), entries)
    regions = [region for batch in per_image for region in batch]
    write_regions(out / "regions.jsonl", regions)

    stats = {
        "generator": proposals.generator,
        "images": len(entries),
        "regions": len(regions),
        "mean_regions": len(regions) / len(entries) if entries else 0.0,
    }
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    log.info("%s proposals: %.1f regions per image", proposals.generator, stats["mean_regions"])
    return [out / "regions.jsonl", out / "stats.json"]


def stage_propose(run: Run) -> bool:
    return run.stage(
        "propose",
        run.dataset_files,
        ("proposals", "eval", "ssl"),
        lambda: _propose_into(run, run.config.proposals, run.path("proposals")),
    )


def _train_into(run: Run, regions_path: Path, checkpoint: Path, history: Path) -> list[Path]:
    cfg = run.config
    manifest = run.manifest()
    regions = read_regions(regions_path)
    ids = {region.image_id for region in regions}
    images = load_images(manifest, [entry for entry in manifest if entry.id in ids], cfg.eval.image_side)

    augment = replace(cfg.augment, output_side=cfg.encoder.input_side)
    result = train_ssl(images, regions, cfg.ssl, augment, cfg.encoder)
    if result.skipped_steps:
        log.warning("Skipped %d steps with degenerate embeddings", result.skipped_steps)
    if result.skipped_samples:
        log.warning("Dropped %d samples with degenerate embeddings", result.skipped_samples)

    save_checkpoint(result.params, checkpoint)
    write_history(history, result.history)
    return [checkpoint, history]


def stage_train_ssl(run: Run) -> bool:
    regions = run.path("proposals", "regions.jsonl")
    return run.stage(
        "train-ssl",
        lambda: [regions, *run.dataset_files()],
        ("ssl", "augment", "encoder", "eval"),
        lambda: _train_into(run, regions, checkpoint_path(run, "initial"), run.path("reports", "ssl_history.csv")),
    )


def stage_embed(run: Run, variant: str) -> bool:
    checkpoint = checkpoint_path(run, variant)
    out = embeddings_path(run, variant)

    def body() -> list[Path]:
        params = load_checkpoint(checkpoint)
        table = extract_descriptors(params, run.manifest(), variant, run.config.eval.image_side)
        table.save(out)
        return [out]

    return run.stage(f"embed-{variant}", lambda: [checkpoint, *run.dataset_files()], ("eval",), body)


def stage_mine(run: Run) -> bool:
    cfg = run.config
    embeddings = embeddings_path(run, "initial")

    def body() -> list[Path]:
        manifest = run.manifest()
        ids = [entry.id for entry in manifest.learning_entries(cfg.boost.mine_distractors)]
        table = EmbeddingTable.load(embeddings).subset(ids)

        graph = build_graph(table, min(cfg.diffusion.knn, len(table) - 1), cfg.diffusion.gamma)
        anchors = select_anchors(table, cfg.boost.bandwidth, cfg.boost.mean_shift_iter)
        mining = mine_pseudo_labels(table, anchors, cfg.boost, cfg.diffusion, graph)
        rng = np.random.default_rng([cfg.boost.seed if cfg.boost.seed is not None else 0, 3])
        triplets = assemble_triplets(mining.labels, cfg.boost.max_triplets_per_anchor, rng)
        log.info("Mined %d triplets from %d anchors", len(triplets), len(anchors))

        out = run.path("mining")
        (out / "anchors.json").write_text(json.dumps(anchors, indent=1) + "\n")
        write_pseudo_labels(out / "pseudo_labels.jsonl", mining.labels)
        write_triplets(out / "triplets.jsonl", triplets)
        write_edges(out / "graph.jsonl", graph)
        write_scores(out / "scores.csv", table.ids, mining.scores)
        names = ("anchors.json", "pseudo_labels.jsonl", "triplets.jsonl", "graph.jsonl", "scores.csv")
        return [out / name for name in names]

    return run.stage("mine", lambda: [embeddings, run.manifest_path], ("boost", "diffusion"), body)


def stage_boost(run: Run) -> bool:
    cfg = run.config
    initial = checkpoint_path(run, "initial")
    triplets_path = run.path("mining", "triplets.jsonl")
    boosted = checkpoint_path(run, "boosted")
    history = run.path("reports", "boost_history.csv")

    def body() -> list[Path]:
        manifest = run.manifest()
        triplets = read_triplets(triplets_path)
        ids = {i for t in triplets for i in (t.anchor, t.positive, t.negative)}
        images = load_images(manifest, [entry for entry in manifest if entry.id in ids], cfg.eval.image_side)

        result = fine_tune(load_checkpoint(initial), triplets, images, cfg.boost)
        save_checkpoint(result.params, boosted)
        write_history(history, result.history)
        return [boosted, history]

    return run.stage("boost", lambda: [initial, triplets_path, *run.dataset_files()], ("boost", "eval"), body)


def _evaluate_variant(run: Run, variant: str, settings: list[EvalSetting]) -> dict:
    cfg = run.config
    manifest = run.manifest()
    table = EmbeddingTable.load(embeddings_path(run, variant))

    report = {setting.value: evaluate(table, manifest, setting).to_dict() for setting in settings}

    if cfg.eval.cross_distractors:
        distractors = DatasetManifest.load(run.path("distractors", "manifest.jsonl"))
        params = load_checkpoint(checkpoint_path(run, variant))
        extra = extract_descriptors(params, distractors, variant, cfg.eval.image_side)
        labeled = manifest.subset(entry.id for entry in manifest if entry.label is not None)
        combined = EmbeddingTable(
            [*labeled.index, *extra.ids],
            np.vstack([table.subset(labeled.index).vectors, extra.vectors]),
        )
        report["cross-distractor"] = evaluate_cross_distractor(labeled, distractors, combined).to_dict()

    return report


def stage_eval(run: Run, variants: list[str], settings: list[EvalSetting]) -> bool:
    name = "all" if len(variants) > 1 else variants[0]
    report_path = run.path("reports", "eval.json" if name == "all" else f"eval_{name}.json")
    summary_path = run.path("reports", "summary.csv" if name == "all" else f"summary_{name}.csv")

    inputs = []
    for variant in variants:
        inputs += [checkpoint_path(run, variant), embeddings_path(run, variant)]
    if run.config.eval.cross_distractors:
        inputs.append(run.path("distractors", "manifest.jsonl"))

    def body() -> list[Path]:
        report = {
            "config_hash": run.config.digest(),
            "variants": {variant: _evaluate_variant(run, variant, settings) for variant in variants},
        }
        write_report(report_path, report)
        write_summary(
            summary_path,
            (
                (variant, setting, result["mAP"])
                for variant, results in report["variants"].items()
                for setting, result in results.items()
            ),
        )
        return [report_path, summary_path]

    return run.stage(
        f"eval-{name}",
        lambda: [*inputs, *run.dataset_files()],
        ("eval",),
        body,
        extra={"settings": [s.value for s in settings]},
    )


def stage_ablation(run: Run, generators: list[str]) -> bool:
    """Train one encoder per proposal generator on an identical budget and evaluate each."""
    cfg = run.config
    report_path = run.path("reports", "ablation.json")
    summary_path = run.path("reports", "ablation.csv")
    settings = [EvalSetting(s) for s in cfg.eval.settings]

    def body() -> list[Path]:
        outputs = []
        report = {"config_hash": run.config.digest(), "generators": {}}
        for generator in generators:
            out = run.path("ablation", generator)
            out.mkdir(parents=True, exist_ok=True)
            outputs += _propose_into(run, replace(cfg.proposals, generator=generator), out)
            stats = json.loads((out / "stats.json").read_text())
            outputs += _train_into(run, out / "regions.jsonl", out / "initial.srck", out / "ssl_history.csv")

            manifest = run.manifest()
            table = extract_descriptors(load_checkpoint(out / "initial.srck"), manifest, "initial", cfg.eval.image_side)
            report["generators"][generator] = {
                "mean_regions": stats["mean_regions"],
                **{s.value: evaluate(table, manifest, s).map for s in settings},
            }

        write_report(report_path, report)
        write_summary(
            summary_path,
            (
                (generator, setting, value)
                for generator, results in report["generators"].items()
                for setting, value in results.items()
                if setting != "mean_regions"
            ),
        )
        return [*outputs, report_path, summary_path]

    sections = ("proposals", "ssl", "augment", "encoder", "eval")
    return run.stage("ablation", run.dataset_files, sections, body, extra={"generators": generators})


def stage_pipeline(run: Run, settings: list[EvalSetting]) -> None:
    stage_synth(run)
    stage_propose(run)
    stage_train_ssl(run)
    stage_embed(run, "initial")
    stage_mine(run)
    stage_boost(run)
    stage_embed(run, "boosted")
    stage_eval(run, list(VARIANTS), settings)


def setup_logging(verbose: int, quiet: int) -> None:
    level = logging.INFO - 10 * verbose + 10 * quiet
    log.setLevel(max(logging.DEBUG, min(logging.CRITICAL, level)))
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Self-supervised instance retrieval pipeline")
    parser.add_argument("-c", "--config", type=Path, help="JSON configuration file")
    parser.add_argument("-r", "--run-dir", type=Path, help="run directory (default: runs/<timestamp>-<hash>)")
    parser.add_argument("-s", "--seed", type=int, help="global seed")
    parser.add_argument(
        "-o",
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key, e.g. ssl.epochs=5",
    )
    parser.add_argument("-f", "--force", action="store_true", help="rerun stages that are up-to-date")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="increase verbosity")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="decrease verbosity")

    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "propose", "train-ssl", "mine", "boost"):
        subparsers.add_parser(name)

    embed = subparsers.add_parser("embed")
    embed.add_argument("--variant", choices=VARIANTS, default="initial")

    evaluate_parser = subparsers.add_parser("eval")
    evaluate_parser.add_argument("--variant", choices=(*VARIANTS, "all"), default="all")
    evaluate_parser.add_argument("--setting", choices=[s.value for s in EvalSetting], action="append")

    pipeline = subparsers.add_parser("pipeline")
    pipeline.add_argument("--setting", choices=[s.value for s in EvalSetting], action="append")

    ablation = subparsers.add_parser("ablation")
    ablation.add_argument("--generator", choices=("whole", "grid", "edge"), action="append")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")

    if args.config is None:
        return RunConfig.from_dict(apply_overrides({}, overrides))
    if not args.config.exists():
        raise ConfigurationError(f"file not found: {args.config}", "config")
    return RunConfig.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)

    try:
        config = load_config(args)
        run = Run.open(config, args.run_dir, args.force)
        settings = [EvalSetting(s) for s in (getattr(args, "setting", None) or config.eval.settings)]

        if args.command == "synth":
            stage_synth(run)
        elif args.command == "propose":
            stage_propose(run)
        elif args.command == "train-ssl":
            stage_train_ssl(run)
        elif args.command == "embed":
            stage_embed(run, args.variant)
        elif args.command == "mine":
            stage_mine(run)
        elif args.command == "boost":
            stage_boost(run)
        elif args.command == "eval":
            stage_eval(run, list(VARIANTS) if args.variant == "all" else [args.variant], settings)
        elif args.command == "pipeline":
            stage_pipeline(run, settings)
        elif args.command == "ablation":
            stage_ablation(run, args.generator or ["whole", "grid", "edge"])
    except MissingArtifactError as e:
        print(f"error: missing artifact {e.path}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except ConfigurationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIGURATION
    except Error as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        pass
