"""
Run orchestration for the surgical image enhancement agent.
Wires prior, context, agent, enhancers and metrics over a benchmark manifest,
persists one record per test image and renders the report tables.
"""

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from scopeagent.config import settings
from scopeagent.core.agent import run_inference, select_models
from scopeagent.core.cache import ResponseCache
from scopeagent.core.context import ContextConfig, FewShotContext, build_context, render_context
from scopeagent.core.enhance import EnhancerRegistry, apply_plan, load_registry
from scopeagent.core.formatter import ReportFormatter, Table
from scopeagent.core.imagecore import (
    DatasetManifest,
    ImageBuf,
    ManifestEntry,
    decode_label,
    encode_label,
    load_image,
    load_manifest,
    save_image,
)
from scopeagent.core.metrics import (
    BrisqueModel,
    NiqeModel,
    accuracy_report,
    brisque_features,
    fit_brisque,
    fit_niqe,
    load_brisque,
    load_niqe,
    niqe,
    psnr,
    quality_proxy,
    save_brisque,
    save_niqe,
    ssim,
)
from scopeagent.core.prior import (
    PriorModel,
    TrainingHyper,
    hard_label,
    load_prior,
    prior_distributions,
    save_prior,
    train_prior,
)
from scopeagent.core.synthesis import load_sidecar
from scopeagent.protocol.prompt import assemble_prompt
from scopeagent.transport import AgentBackendDescriptor, BaseBackend, create_backend
from scopeagent.utils import logger
from scopeagent.utils.error import ConfigError, HarnessError, IncompleteRun, MetricError, ScopeAgentError

MODES = ("prior_only", "agent_direct", "agent_cot")
AGENT_MODES = {"agent_direct": "direct", "agent_cot": "cot"}
METHOD_NAMES = {"prior_only": "Prior model", "agent_direct": "Agent (direct)", "agent_cot": "Agent (CoT)"}
METRIC_NAMES = ("psnr", "ssim", "niqe", "brisque")
VOLATILE_META = ("latency_ms", "cache_hit")

CONFIG_FILE = "config.json"
RECORDS_FILE = "records.jsonl"
TIMINGS_FILE = "timings.json"
REPORTS_DIR = "reports"
PATH_FIELDS = ("manifest", "output", "prior", "registry", "niqe", "brisque", "cache_dir")


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def _default_backend() -> AgentBackendDescriptor:
    return AgentBackendDescriptor.from_dict({})


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; paths are resolved against the config file's directory."""

    manifest: str
    output: str
    prior: Optional[str] = None
    context: ContextConfig = field(default_factory=ContextConfig)
    backend: AgentBackendDescriptor = field(default_factory=_default_backend)
    registry: Optional[str] = None
    modes: Tuple[str, ...] = ("prior_only", "agent_cot")
    seed: int = 0
    resize: Optional[int] = None
    max_parallel: int = 4
    niqe: Optional[str] = None
    brisque: Optional[str] = None
    cache_dir: Optional[str] = None
    save_images: bool = False

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("A run needs at least one mode")
        unknown = [m for m in self.modes if m not in MODES]
        if unknown or len(set(self.modes)) != len(self.modes):
            raise ConfigError(f"Invalid modes {list(self.modes)}", details={"modes": list(MODES)})
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be at least 1")
        if self.resize is not None and self.resize < 1:
            raise ConfigError("resize must be a positive pixel count")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "RunConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown run config keys: {sorted(unknown)}")
        for key in ("manifest", "output"):
            if key not in data:
                raise ConfigError(f"Run config needs {key}")

        kwargs = dict(data)
        for key in PATH_FIELDS:
            value = kwargs.get(key)
            if value is not None and base_dir is not None and not os.path.isabs(value):
                kwargs[key] = str(base_dir / value)
        seed = int(kwargs.get("seed", 0))

        context = dict(kwargs.get("context") or {})
        context.setdefault("seed", seed)
        kwargs["context"] = ContextConfig.from_dict(context)

        backend = dict(kwargs.get("backend") or {})
        if backend.get("kind", "mock") == "mock":
            backend["options"] = {"seed": seed, **(backend.get("options") or {})}
        kwargs["backend"] = AgentBackendDescriptor.from_dict(backend)

        if "modes" in kwargs:
            kwargs["modes"] = tuple(kwargs["modes"])
        kwargs.setdefault("max_parallel", settings.max_parallel)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        data["context"] = self.context.to_dict()
        data["backend"] = self.backend.to_dict()
        data["modes"] = list(self.modes)
        return data

    @property
    def config_hash(self) -> str:
        """Hash of every setting that shapes the records; the output directory is excluded."""
        data = self.to_dict()
        del data["output"]
        return hashlib.sha256(_dumps(data).encode("utf-8")).hexdigest()

    @property
    def agent_modes(self) -> List[str]:
        return [m for m in self.modes if m in AGENT_MODES]

    def check_paths(self) -> None:
        """Every referenced input must exist before the run starts."""
        for key in ("manifest", "prior", "registry", "niqe", "brisque"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"Run config {key} not found: {value}", details={key: value})


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read run config: {e}", details={"path": str(path)})
    return RunConfig.from_dict(data, base_dir=path.parent)


@dataclass
class RunComponents:
    """Shared, read-only state of a run."""

    config: RunConfig
    run_dir: Path
    manifest: DatasetManifest
    prior: PriorModel
    registry: EnhancerRegistry
    context: FewShotContext = field(default_factory=FewShotContext)
    context_blocks: List[Dict[str, str]] = field(default_factory=list)
    backend: Optional[BaseBackend] = None
    cache: Optional[ResponseCache] = None
    niqe_model: Optional[NiqeModel] = None
    brisque_model: Optional[BrisqueModel] = None


@dataclass(frozen=True)
class RunSummary:
    run_dir: Path
    records: int
    processed: int
    backend_calls: int
    cache_stats: Dict[str, int]


def _prepare(config: RunConfig, run_dir: Path, backend_client: Any = None) -> RunComponents:
    manifest = load_manifest(config.manifest)

    if config.prior is not None:
        prior = load_prior(config.prior)
    elif (run_dir / "prior.json").is_file():
        prior = load_prior(run_dir / "prior.json")
    else:
        logger.info("No prior model given, training on the manifest train split")
        prior = train_prior(manifest, dataclasses.replace(TrainingHyper.defaults(), seed=config.seed),
                            resize=config.resize)
        save_prior(prior, run_dir / "prior.json")

    parts = RunComponents(config, run_dir, manifest, prior, load_registry(config.registry))
    if config.agent_modes:
        parts.backend = create_backend(config.backend, client=backend_client)
        parts.cache = ResponseCache(config.cache_dir or run_dir / settings.cache_dirname)
        parts.context = build_context(manifest, config.context)
        if len(parts.context):
            parts.context_blocks = render_context(parts.context, manifest)
    if config.niqe is not None:
        parts.niqe_model = load_niqe(config.niqe)
    if config.brisque is not None:
        parts.brisque_model = load_brisque(config.brisque)
    return parts


def score_image(img: ImageBuf, ref: Optional[ImageBuf], niqe_model: Optional[NiqeModel] = None,
                brisque_model: Optional[BrisqueModel] = None) -> Dict[str, Optional[float]]:
    """All applicable metrics of one image; full-reference ones only when a reference exists."""
    scores: Dict[str, Optional[float]] = dict.fromkeys(METRIC_NAMES)
    jobs = []
    if ref is not None:
        jobs += [("psnr", lambda: psnr(ref, img)), ("ssim", lambda: ssim(ref, img))]
    if niqe_model is not None:
        jobs.append(("niqe", lambda: niqe(niqe_model, img)))
    if brisque_model is not None:
        jobs.append(("brisque", lambda: brisque_model.score(img)))
    for name, job in jobs:
        try:
            scores[name] = round(float(job()), 6)
        except MetricError as e:
            logger.debug("Metric not applicable", metric=name, error=e.message)
    return scores


def _predict(parts: RunComponents, mode: str, entry: ManifestEntry, img: ImageBuf, soft,
             result: Dict[str, Any], timing: Dict[str, float]):
    if mode == "prior_only":
        return hard_label(soft)

    prompt = assemble_prompt(img, soft, parts.context, AGENT_MODES[mode],
                             annotations={"query_id": entry.id, "ground_truth": entry.label},
                             context_blocks=parts.context_blocks)
    prediction = run_inference(parts.backend, prompt, parts.cache)
    meta = dict(prediction.backend_meta)
    timing[f"{mode}_latency_ms"] = float(meta.get("latency_ms", 0.0))
    result["trace"] = list(prediction.trace.steps)
    result["raw_response"] = prediction.raw_response
    result["backend_meta"] = {k: v for k, v in meta.items() if k not in VOLATILE_META}
    return prediction.label


def process_entry(parts: RunComponents, entry: ManifestEntry) -> Tuple[Dict[str, Any], Dict[str, float]]:
    """Priors, per-mode prediction, routing, enhancement and metrics for one test image."""
    started = time.perf_counter()
    config = parts.config
    distorted_file = parts.manifest.distorted_file(entry)
    clean_file = parts.manifest.clean_file(entry)
    record: Dict[str, Any] = {
        "id": entry.id,
        "config_hash": config.config_hash,
        "split": entry.split,
        "ground_truth": encode_label(entry.label),
        "paired": clean_file is not None,
        "error": None,
        "soft_labels": None,
        "distorted": {},
        "modes": {},
    }
    timing: Dict[str, float] = {}

    try:
        img = load_image(distorted_file, resize=config.resize)
        ref = load_image(clean_file, resize=config.resize) if clean_file is not None else None
    except ScopeAgentError as e:
        logger.warning("Cannot load benchmark image", id=entry.id, error=e.message)
        record["error"] = e.to_dict()
        return record, {"seconds": time.perf_counter() - started}

    soft = prior_distributions(parts.prior, img)
    record["soft_labels"] = soft.to_dict()
    record["distorted"] = score_image(img, ref, parts.niqe_model, parts.brisque_model)
    sidecar = load_sidecar(distorted_file)

    for mode in config.modes:
        result: Dict[str, Any] = {"prediction": None, "error": None, "trace": [], "raw_response": None,
                                  "backend_meta": {}, "plan": [], "provenance": []}
        enhanced = img
        try:
            label = _predict(parts, mode, entry, img, soft, result, timing)
            result["prediction"] = encode_label(label)
            plan = select_models(label, parts.registry)
            result["plan"] = [str(step) for step in plan]
            enhanced, result["provenance"] = apply_plan(img, plan, parts.registry, sidecar)
        except ScopeAgentError as e:
            logger.warning("Image failed", id=entry.id, mode=mode, error_type=type(e).__name__, error=e.message)
            result["error"] = e.to_dict()
            enhanced = img
        result["metrics"] = score_image(enhanced, ref, parts.niqe_model, parts.brisque_model)
        if config.save_images:
            save_image(enhanced, parts.run_dir / "images" / mode / f"{entry.id}.png")
        record["modes"][mode] = result

    timing["seconds"] = time.perf_counter() - started
    return record, timing


def read_records(run_dir: Union[str, Path], repair: bool = False) -> List[Dict[str, Any]]:
    """Complete record lines of a run; a torn trailing line is dropped (and truncated when repairing)."""
    path = Path(run_dir) / RECORDS_FILE
    if not path.is_file():
        return []
    raw = path.read_bytes()
    end = raw.rfind(b"\n") + 1
    if end < len(raw):
        logger.warning("Dropping torn record line", path=str(path), bytes=len(raw) - end)
        if repair:
            with open(path, "r+b") as f:
                f.truncate(end)
    records = []
    for number, line in enumerate(raw[:end].splitlines(), start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise HarnessError("Corrupt record line", details={"path": str(path), "line": number})
    return records


def _claim_run_dir(config: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / CONFIG_FILE
    if config_path.is_file():
        with open(config_path, "r", encoding="utf-8") as f:
            stored = json.load(f)
        if stored.get("config_hash") != config.config_hash:
            raise ConfigError("Run directory holds a different configuration",
                              details={"run_dir": str(run_dir), "stored": stored.get("config_hash")})
        return
    document = {"config": config.to_dict(), "config_hash": config.config_hash}
    config_path.write_text(json.dumps(document, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def run_pipeline(config: RunConfig, backend_client: Any = None) -> RunSummary:
    """Process every test entry of the manifest, appending records in manifest order.

    Rerunning on a partial run directory completes only the missing records.
    """
    config.check_paths()
    run_dir = Path(config.output)
    _claim_run_dir(config, run_dir)
    run_id = logger.run_context(config.config_hash[:12])

    parts = _prepare(config, run_dir, backend_client)
    done = {r["id"] for r in read_records(run_dir, repair=True)}
    tests = parts.manifest.split("test")
    pending = [e for e in tests if e.id not in done]
    logger.info("Starting run", run_id=run_id, test_images=len(tests), resumed=len(done),
                pending=len(pending), modes=list(config.modes))

    started = time.perf_counter()
    timings: Dict[str, Dict[str, float]] = {}
    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool, \
            open(run_dir / RECORDS_FILE, "a", encoding="utf-8") as out:
        futures = [pool.submit(process_entry, parts, e) for e in pending]
        for future in tqdm(futures, desc="Images", disable=not settings.progress):
            record, timing = future.result()
            out.write(_dumps(record) + "\n")
            out.flush()
            os.fsync(out.fileno())
            timings[record["id"]] = timing

    calls = parts.backend.calls if parts.backend is not None else 0
    cache_stats = dict(parts.cache.stats) if parts.cache is not None else {}
    if parts.cache is not None:
        parts.cache.log_stats()
    summary = {
        "config_hash": config.config_hash,
        "processed": len(pending),
        "resumed": len(done),
        "elapsed_s": round(time.perf_counter() - started, 3),
        "backend_calls": calls,
        "cache": cache_stats,
        "images": timings,
    }
    (run_dir / TIMINGS_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Run finished", run_dir=str(run_dir), processed=len(pending), backend_calls=calls)
    logger.clear_context()
    return RunSummary(run_dir, len(done) + len(pending), len(pending), calls, cache_stats)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def load_run(run_dir: Union[str, Path]) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Stored config document and records of a complete run."""
    run_dir = Path(run_dir)
    config_path = run_dir / CONFIG_FILE
    if not config_path.is_file():
        raise IncompleteRun("Run directory has no config.json", details={"run_dir": str(run_dir)})
    with open(config_path, "r", encoding="utf-8") as f:
        stored = json.load(f)

    records = read_records(run_dir)
    if not records:
        raise IncompleteRun("Run directory has no records", details={"run_dir": str(run_dir)})
    stale = [r["id"] for r in records if r.get("config_hash") != stored["config_hash"]]
    if stale:
        raise HarnessError("Records do not match the stored config", details={"ids": stale[:10]})

    try:
        expected = len(load_manifest(stored["config"]["manifest"]).split("test"))
    except ScopeAgentError:
        expected = len(records)
    if len(records) < expected:
        raise IncompleteRun(f"Run holds {len(records)} of {expected} records", details={"run_dir": str(run_dir)})
    return stored, records


def mode_predictions(records: Sequence[Dict[str, Any]], mode: str):
    """(prediction or None, ground truth) pairs of one mode, in record order."""
    pairs = []
    for r in records:
        result = r["modes"].get(mode) or {}
        predicted = result.get("prediction")
        pairs.append((decode_label(predicted) if predicted is not None else None, decode_label(r["ground_truth"])))
    return pairs


def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def metric_summary(records: Sequence[Dict[str, Any]], mode: Optional[str]) -> Dict[str, Optional[float]]:
    """Mean metrics split by paired/unpaired records; ``mode`` None summarizes the distorted inputs."""
    summary = {}
    for group, paired in (("paired", True), ("unpaired", False)):
        rows = [r for r in records if r["paired"] is paired and r["error"] is None]
        scores = [r["distorted"] if mode is None else r["modes"][mode]["metrics"] for r in rows]
        for name in METRIC_NAMES:
            summary[f"{group}.{name}"] = _mean([s.get(name) for s in scores])
    return summary


def _is_noisy_mock(backend: Dict[str, Any]) -> bool:
    return backend.get("kind") == "mock" and (backend.get("options") or {}).get("policy") == "noisy"


def _write_table(table: Table, reports_dir: Path, stem: str) -> List[Path]:
    reports_dir.mkdir(parents=True, exist_ok=True)
    md, csv_path = reports_dir / f"{stem}.md", reports_dir / f"{stem}.csv"
    md.write_text(table.to_markdown(), encoding="utf-8")
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    return [md, csv_path]


def emit_report(run_dir: Union[str, Path]) -> List[Path]:
    """Accuracy and enhancement-quality tables of one run, as Markdown and CSV under reports/."""
    run_dir = Path(run_dir)
    stored, records = load_run(run_dir)
    config = stored["config"]
    modes = config["modes"]
    formatter = ReportFormatter()

    reports = [(METHOD_NAMES[m], accuracy_report(mode_predictions(records, m))) for m in modes]
    notes = [f"{len(records)} test images evaluated; the prior and the few-shot context use the train split."]
    if any(m in AGENT_MODES for m in modes) and _is_noisy_mock(config["backend"]):
        notes.append("Agent answers come from the offline noisy policy and are synthetic.")
    accuracy = formatter.accuracy_table(reports, notes)

    summaries = [("Distorted", metric_summary(records, None))]
    summaries += [(f"Enhanced: {METHOD_NAMES[m]}", metric_summary(records, m)) for m in modes]
    paired = sum(1 for r in records if r["paired"])
    quality = formatter.metric_table(summaries, {"paired": paired, "unpaired": len(records) - paired})

    reports_dir = run_dir / REPORTS_DIR
    paths = _write_table(accuracy, reports_dir, "accuracy") + _write_table(quality, reports_dir, "quality")
    logger.info("Wrote report", run_dir=str(run_dir), files=[p.name for p in paths])
    return paths


def emit_ablation_report(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                         mode: Optional[str] = None) -> List[Path]:
    """Few-shot grid: one column per run in the given order, three accuracy rows."""
    columns = []
    synthetic = False
    for run_dir in run_dirs:
        stored, records = load_run(run_dir)
        config = stored["config"]
        if mode is None:
            agent = [m for m in config["modes"] if m in AGENT_MODES]
            mode = agent[0] if agent else config["modes"][0]
        synthetic = synthetic or _is_noisy_mock(config["backend"])
        columns.append((config["context"], accuracy_report(mode_predictions(records, mode))))

    table = ReportFormatter().ablation_table(columns, METHOD_NAMES[mode], synthetic)
    return _write_table(table, Path(out_dir), "ablation")


@dataclass(frozen=True)
class AblationResult:
    run_dirs: List[Path]
    reports: List[Path]


def ablation_sweep(base: RunConfig, contexts: Sequence[ContextConfig], backend_client: Any = None) -> AblationResult:
    """Run the pipeline once per context config with a shared response cache, then emit the grid."""
    if len(contexts) < 2:
        raise ConfigError("An ablation needs at least two context configs")
    root = Path(base.output)
    cache_dir = base.cache_dir or str(root / settings.cache_dirname)

    run_dirs = []
    for i, ctx in enumerate(contexts):
        config = dataclasses.replace(base, context=ctx, output=str(root / f"run{i:02d}"), cache_dir=cache_dir)
        logger.info("Ablation run", index=i, context=ctx.tag)
        summary = run_pipeline(config, backend_client)
        emit_report(summary.run_dir)
        run_dirs.append(summary.run_dir)

    reports = emit_ablation_report(run_dirs, root / REPORTS_DIR)
    return AblationResult(run_dirs, reports)


# ---------------------------------------------------------------------------
# Quality models and standalone evaluation
# ---------------------------------------------------------------------------

def clean_corpus(manifest: DatasetManifest, resize: Optional[int] = None) -> List[ImageBuf]:
    """Distinct clean images of a manifest, in first-seen order."""
    seen, images = set(), []
    for entry in manifest:
        path = manifest.source_file(entry) if entry.label.is_normal else manifest.clean_file(entry)
        if path is None or path in seen:
            continue
        seen.add(path)
        images.append(load_image(path, resize=resize))
    return images


def fit_quality_models(manifest: DatasetManifest, out_dir: Union[str, Path], patch_size: Optional[int] = None,
                       resize: Optional[int] = None) -> Dict[str, Path]:
    """Fit NIQE on the clean corpus and the BRISQUE regressor on the train split; write both as JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = fit_niqe(clean_corpus(manifest, resize), patch_size=patch_size)
    save_niqe(model, out / "niqe.json")

    train = manifest.split("train")
    features = [brisque_features(load_image(manifest.distorted_file(e), resize=resize))
                for e in tqdm(train, desc="BRISQUE features", disable=not settings.progress)]
    regressor = fit_brisque(np.array(features), [quality_proxy(e.label) for e in train])
    save_brisque(regressor, out / "brisque.json")
    logger.info("Fitted quality models", out=str(out), train_images=len(train))
    return {"niqe": out / "niqe.json", "brisque": out / "brisque.json"}


def evaluate_manifest(manifest: DatasetManifest, enhanced_dir: Optional[Union[str, Path]] = None,
                      niqe_model: Optional[NiqeModel] = None, brisque_model: Optional[BrisqueModel] = None,
                      resize: Optional[int] = None) -> Table:
    """Per-image metrics of the test split (and of enhanced outputs named <id>.png), plus mean rows."""
    rows: List[Tuple[str, str, Dict[str, Optional[float]]]] = []
    for entry in manifest.split("test"):
        img = load_image(manifest.distorted_file(entry), resize=resize)
        clean = manifest.clean_file(entry)
        ref = load_image(clean, resize=resize) if clean is not None else None
        rows.append((entry.id, "distorted", score_image(img, ref, niqe_model, brisque_model)))
        if enhanced_dir is not None:
            candidate = Path(enhanced_dir) / f"{entry.id}.png"
            if candidate.is_file():
                out = load_image(candidate, resize=resize)
                rows.append((entry.id, "enhanced", score_image(out, ref, niqe_model, brisque_model)))

    if not rows:
        raise IncompleteRun("Manifest has no test entries to evaluate")

    def cell(value):
        return "" if value is None else f"{value:.4f}"

    body = [[i, variant] + [cell(s[m]) for m in METRIC_NAMES] for i, variant, s in rows]
    for variant in ("distorted", "enhanced"):
        scores = [s for _, v, s in rows if v == variant]
        if scores:
            body.append([f"mean:{variant}", variant] + [cell(_mean([s[m] for s in scores])) for m in METRIC_NAMES])
    return Table("Per-image metrics", ["id", "variant", *METRIC_NAMES], body)
