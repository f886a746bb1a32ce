"""End-to-end pipelines behind the service endpoints and CLI subcommands.

Each pipeline is a pure function of its config files plus explicit
overrides: validate a manifest, generate synthetic corpora, train
(single-task or joint), probe blocks, and re-render report tables from a
stored run directory. All outputs are deterministic: JSON is written with
sorted keys and no timestamps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .corpus import (
    AugmentationConfig,
    InputSpec,
    augment_corpus,
    compute_balance_target,
    load_block_corpora,
    load_corpus,
    load_stacked_corpus,
)
from .evalreport import (
    TransferRow,
    blockwise_probe,
    render_blockwise_csv,
    render_blockwise_txt,
    render_transfer_csv,
    render_transfer_txt,
    report_self_check,
    write_report,
)
from .featurestore import CorpusManifest, load_manifest, validate_manifest
from .model import ModelConfig
from .synthgen import SynthSpec, gen_pair
from .trainer import RunReport, TaskData, TrainConfig, multi_seed


class ManifestInvalidError(Exception):
    """Manifest failed validation; carries the violation list."""

    def __init__(self, manifest_path: str, violations):
        super().__init__(f"{manifest_path}: {len(violations)} violation(s)")
        self.manifest_path = manifest_path
        self.violations = violations


class ReportCheckError(Exception):
    """An emitted report failed its embedded sanity invariants."""


@dataclass
class InputSelect:
    """Block/modality selection for one task's model input."""

    acoustic_block: int | None = None  # None: highest acoustic block present
    text_block: int | None = None
    pooling: str = "mean"

    def to_json(self) -> dict:
        return {
            "acoustic_block": self.acoustic_block,
            "text_block": self.text_block,
            "pooling": self.pooling,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InputSelect":
        return cls(
            acoustic_block=obj.get("acoustic_block"),
            text_block=obj.get("text_block"),
            pooling=obj.get("pooling", "mean"),
        )


@dataclass
class PipelineConfig:
    """One experiment definition, loadable from a JSON config file."""

    ad_manifest: str
    dep_manifest: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    ad_input: InputSelect = field(default_factory=InputSelect)
    dep_input: InputSelect = field(default_factory=InputSelect)
    balance_dep: bool = True  # match dep sample count to the ad stream
    out_dir: str = "runs/out"

    def to_json(self) -> dict:
        return {
            "ad_manifest": self.ad_manifest,
            "dep_manifest": self.dep_manifest,
            "train": self.train.to_json(),
            "model": self.model.to_json(),
            "augment": {
                "subdialogues_per_dialogue": self.augment.subdialogues_per_dialogue,
                "min_fraction": self.augment.min_fraction,
                "rng_seed": self.augment.rng_seed,
                "balance_target": self.augment.balance_target,
            },
            "ad_input": self.ad_input.to_json(),
            "dep_input": self.dep_input.to_json(),
            "balance_dep": self.balance_dep,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        return cls(
            ad_manifest=obj["ad_manifest"],
            dep_manifest=obj.get("dep_manifest"),
            train=TrainConfig.from_json(obj.get("train", {})),
            model=ModelConfig.from_json(obj.get("model", {})),
            augment=AugmentationConfig(**obj.get("augment", {})),
            ad_input=InputSelect.from_json(obj.get("ad_input", {})),
            dep_input=InputSelect.from_json(obj.get("dep_input", {})),
            balance_dep=obj.get("balance_dep", True),
            out_dir=obj.get("out_dir", "runs/out"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_validate(manifest_path: str | Path) -> tuple[CorpusManifest, list]:
    manifest = load_manifest(manifest_path)
    violations = validate_manifest(manifest, Path(manifest_path).parent)
    return manifest, violations


def run_synth(spec_obj: dict | SynthSpec, out_dir: str | Path) -> dict:
    spec = spec_obj if isinstance(spec_obj, SynthSpec) else SynthSpec.from_json(spec_obj)
    result = gen_pair(spec, out_dir)
    return {
        "base_dir": result.base_dir,
        "ad_manifest": result.ad_manifest_path,
        "dep_manifest": result.dep_manifest_path,
        "num_ad_dialogues": len(result.ad_manifest.dialogues),
        "num_dep_dialogues": len(result.dep_manifest.dialogues),
    }


def _load_validated(manifest_path: str) -> tuple[CorpusManifest, Path]:
    manifest, violations = run_validate(manifest_path)
    if violations:
        raise ManifestInvalidError(str(manifest_path), violations)
    return manifest, Path(manifest_path).parent


def _resolve_block(manifest: CorpusManifest, select: InputSelect) -> InputSpec:
    acoustic = select.acoustic_block
    if acoustic is None and select.text_block is None:
        blocks = {
            r.block_index
            for d in manifest.dialogues
            for r in d.feature_refs
            if r.modality == "acoustic"
        }
        if not blocks:
            raise ValueError(f"{manifest.corpus_id}: no acoustic features")
        acoustic = max(blocks)
    return InputSpec(
        acoustic_block=acoustic, text_block=select.text_block, pooling=select.pooling
    )


def _prepare_task_data(
    cfg: PipelineConfig, mode: str
) -> tuple[TaskData, TaskData | None, list[dict]]:
    ad_manifest, ad_base = _load_validated(cfg.ad_manifest)
    ad_corpus = load_corpus(ad_manifest, ad_base, _resolve_block(ad_manifest, cfg.ad_input))
    ad_aug, ad_log = augment_corpus(ad_corpus, cfg.augment)
    dep_data = None
    log = [{"corpus": ad_corpus.corpus_id, **entry} for entry in ad_log]
    if mode == "joint":
        if not cfg.dep_manifest:
            raise ValueError("joint mode needs dep_manifest in the config")
        dep_manifest, dep_base = _load_validated(cfg.dep_manifest)
        dep_corpus = load_corpus(
            dep_manifest, dep_base, _resolve_block(dep_manifest, cfg.dep_input)
        )
        dep_aug_cfg = cfg.augment
        if cfg.balance_dep and cfg.augment.balance_target is None:
            target = compute_balance_target(len(ad_aug.train), max(1, len(dep_corpus.train)))
            dep_aug_cfg = AugmentationConfig(
                subdialogues_per_dialogue=cfg.augment.subdialogues_per_dialogue,
                min_fraction=cfg.augment.min_fraction,
                rng_seed=cfg.augment.rng_seed,
                balance_target=target,
            )
        dep_aug, dep_log = augment_corpus(dep_corpus, dep_aug_cfg)
        dep_data = TaskData.from_corpus(dep_aug)
        log += [{"corpus": dep_corpus.corpus_id, **entry} for entry in dep_log]
    return TaskData.from_corpus(ad_aug), dep_data, log


def _write_run_outputs(
    out: Path, cfg: PipelineConfig, report: RunReport, augment_log: list[dict]
) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    _write_json(out / "config.json", cfg.to_json())
    files["config"] = str(out / "config.json")
    _write_json(out / "run_report.json", report.to_json())
    files["run_report"] = str(out / "run_report.json")

    results_dir = out / "results"
    results_dir.mkdir(exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for result in report.results:
        _write_json(results_dir / f"seed_{result.seed}.json", result.to_json())
        if result.best_params is not None:
            save_checkpoint(result.best_params, ckpt_dir / f"seed_{result.seed}.sgck")
    files["results_dir"] = str(results_dir)
    files["checkpoints_dir"] = str(ckpt_dir)

    with open(out / "run_log.jsonl", "w", encoding="utf-8") as f:
        for result in report.results:
            for row in result.trace:
                f.write(json.dumps({"seed": result.seed, **row}, sort_keys=True) + "\n")
    files["run_log"] = str(out / "run_log.jsonl")

    with open(out / "augmentation_log.jsonl", "w", encoding="utf-8") as f:
        for entry in augment_log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    files["augmentation_log"] = str(out / "augmentation_log.jsonl")

    agg = report.aggregate
    row = TransferRow(
        uses_ad=True,
        uses_dep=report.mode == "joint",
        f1_avg=agg.f1_avg,
        f1_max=agg.f1_max,
        rmse_avg=agg.rmse_avg,
        rmse_min=agg.rmse_min,
    )
    problems = report_self_check([row])
    if problems:
        raise ReportCheckError("; ".join(problems))
    files.update(
        write_report(
            out,
            "transfer",
            render_transfer_txt([row]),
            render_transfer_csv([row]),
            {"rows": [row.to_json()], "aggregate": agg.to_json(), "mode": report.mode},
        )
    )
    return files


def run_train(
    cfg: PipelineConfig,
    mode: str,
    out_dir: str | None = None,
    seeds: list[int] | None = None,
    lambda_dep: float | None = None,
) -> dict:
    """Train single or joint, write the run directory, return a summary."""
    if mode not in ("single", "joint"):
        raise ValueError(f"unknown training mode {mode!r}")
    train_cfg = cfg.train
    if seeds is not None or lambda_dep is not None:
        payload = train_cfg.to_json()
        if seeds is not None:
            payload["seeds"] = seeds
        if lambda_dep is not None:
            payload["lambda_dep"] = lambda_dep
        train_cfg = TrainConfig.from_json(payload)
        cfg = PipelineConfig.from_json({**cfg.to_json(), "train": payload})
    ad_data, dep_data, augment_log = _prepare_task_data(cfg, mode)
    report = multi_seed(train_cfg, cfg.model, ad_data, dep_data, mode=mode)
    out = Path(out_dir or cfg.out_dir)
    files = _write_run_outputs(out, cfg, report, augment_log)
    return {
        "out_dir": str(out),
        "mode": mode,
        "aggregate": report.aggregate.to_json(),
        "seeds": [r.seed for r in report.results],
        "files": files,
    }


def run_probe(
    cfg: PipelineConfig,
    blocks: list[int],
    out_dir: str | None = None,
    seeds: list[int] | None = None,
    weighted: bool = True,
    weighted_train: TrainConfig | None = None,
) -> dict:
    """Probe each block with the single-task model; optionally train the
    learned weighted combination over all probed blocks."""
    if not blocks:
        raise ValueError("no blocks given")
    train_cfg = cfg.train
    if seeds is not None:
        payload = train_cfg.to_json()
        payload["seeds"] = seeds
        train_cfg = TrainConfig.from_json(payload)
    ad_manifest, ad_base = _load_validated(cfg.ad_manifest)
    per_block = load_block_corpora(
        ad_manifest, ad_base, blocks, pooling=cfg.ad_input.pooling
    )
    block_data = {}
    for b in blocks:
        aug, _ = augment_corpus(per_block[b], cfg.augment)
        block_data[b] = TaskData.from_corpus(aug)
    stacked_data = None
    if weighted:
        stacked = load_stacked_corpus(
            ad_manifest, ad_base, blocks, pooling=cfg.ad_input.pooling
        )
        aug, _ = augment_corpus(stacked, cfg.augment)
        stacked_data = TaskData.from_corpus(aug)

    if weighted_train is None:
        probe = blockwise_probe(block_data, train_cfg, cfg.model, stacked_data)
    else:
        probe = blockwise_probe(block_data, train_cfg, cfg.model, None)
        if stacked_data is not None:
            wrep = multi_seed(weighted_train, cfg.model, stacked_data, None, mode="weighted")
            from .evalreport import BlockProbeResult

            agg = wrep.aggregate
            probe.weighted = BlockProbeResult(
                probe.model_tag, "Weighted", agg.f1_avg, agg.f1_max, agg.f1_std
            )
            weight_lists = [r.block_weights for r in wrep.results if r.block_weights]
            if weight_lists:
                probe.learned_weights = [
                    sum(ws[i] for ws in weight_lists) / len(weight_lists)
                    for i in range(len(weight_lists[0]))
                ]
            probe.per_block["weighted"] = wrep.to_json()

    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = probe.all_rows()
    problems = report_self_check(rows)
    if problems:
        raise ReportCheckError("; ".join(problems))
    files = write_report(
        out,
        "blockwise",
        render_blockwise_txt(rows),
        render_blockwise_csv(rows),
        probe.to_json(),
    )
    _write_json(out / "probe_report.json", probe.to_json())
    files["probe_report"] = str(out / "probe_report.json")
    _write_json(out / "config.json", cfg.to_json())
    files["config"] = str(out / "config.json")
    return {
        "out_dir": str(out),
        "blocks": blocks,
        "argmax_block": probe.argmax_block,
        "learned_weights": probe.learned_weights,
        "rows": [r.to_json() for r in rows],
        "files": files,
    }


def run_report(run_dir: str | Path, out_dir: str | None = None) -> dict:
    """Re-render table files from a stored run directory."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    files: dict[str, str] = {}
    found = False
    report_path = run / "run_report.json"
    if report_path.is_file():
        found = True
        payload = json.loads(report_path.read_text(encoding="utf-8"))
        agg = payload["aggregate"]
        row = TransferRow(
            uses_ad=True,
            uses_dep=payload["mode"] == "joint",
            f1_avg=agg["f1_avg"],
            f1_max=agg["f1_max"],
            rmse_avg=agg["rmse_avg"],
            rmse_min=agg["rmse_min"],
        )
        problems = report_self_check([row])
        if problems:
            raise ReportCheckError("; ".join(problems))
        files.update(
            write_report(
                out,
                "transfer",
                render_transfer_txt([row]),
                render_transfer_csv([row]),
                {"rows": [row.to_json()], "aggregate": agg, "mode": payload["mode"]},
            )
        )
    probe_path = run / "probe_report.json"
    if probe_path.is_file():
        found = True
        payload = json.loads(probe_path.read_text(encoding="utf-8"))
        from .evalreport import BlockProbeResult

        rows = [BlockProbeResult(**r) for r in payload["rows"]]
        if payload.get("weighted"):
            rows.append(BlockProbeResult(**payload["weighted"]))
        problems = report_self_check(rows)
        if problems:
            raise ReportCheckError("; ".join(problems))
        files.update(
            write_report(
                out,
                "blockwise",
                render_blockwise_txt(rows),
                render_blockwise_csv(rows),
                payload,
            )
        )
    if not found:
        raise FileNotFoundError(f"{run}: no run_report.json or probe_report.json")
    return {"out_dir": str(out), "files": files}
