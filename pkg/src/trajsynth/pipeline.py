"""Config-driven pipeline: stage runners, resumption and the run manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .axtree import TokenBudget
from .backend import ChatBackend, GenParams, backend_from_config, run_parallel
from .env import BUILTIN_SITES, SiteLoadError, SiteSpec, resolve_site, run_episode
from .judge import JudgeError, JudgeOptions, filter_successful, flip_analysis, judge_trajectory
from .model import (
    Persona,
    RunManifest,
    TaskSpec,
    Trajectory,
    Verdict,
    make_id,
    read_jsonl,
    to_agent_task,
    write_jsonl,
)
from .prompts import agent_system_prompt, digest, load_prompt
from .sft import (
    ConversionError,
    SftConversation,
    compute_stats,
    export_jsonl,
    export_unfiltered,
    to_sft_conversation,
)
from .synthesis import (
    AnnotatorInstructions,
    ExplorationTrace,
    explore,
    generate_personas,
    schedule_counts,
    synthesize_tasks,
)

log = logging.getLogger(__name__)

FROZEN_TIMESTAMP = "1970-01-01T00:00:00+00:00"


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage in which every job failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    sites: tuple[str, ...]
    persona_mode: str = "builtin"
    persona_count: int = 5
    k_tasks_per_exploration: int = 2
    backend: dict[str, Any] = field(default_factory=dict)
    workers: int = 1
    temperature: float = 0.0
    budget: TokenBudget = TokenBudget()
    pipeline_seed: int = 0
    judge_seed: int = 0
    include_hints: bool = True
    include_screenshots: bool = False
    retries: int = 10
    export_mode: str = "multiturn"
    output_dir: Path = Path("out")
    base_dir: Path = Path(".")

    def __post_init__(self) -> None:
        if not self.sites:
            raise ConfigError("at least one site is required")
        if self.persona_mode not in ("builtin", "backend"):
            raise ConfigError(f"personas.mode must be 'builtin' or 'backend', got {self.persona_mode!r}")
        for name, value in (
            ("personas.count", self.persona_count),
            ("k_tasks_per_exploration", self.k_tasks_per_exploration),
            ("backend.workers", self.workers),
            ("retries", self.retries),
        ):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.export_mode not in ("multiturn", "per_step"):
            raise ConfigError(f"export.mode must be 'multiturn' or 'per_step', got {self.export_mode!r}")

    def identity(self) -> dict[str, Any]:
        """Everything that can change results. Worker count and paths are left out."""
        return {
            "sites": list(self.sites),
            "personas": {"mode": self.persona_mode, "count": self.persona_count},
            "k_tasks_per_exploration": self.k_tasks_per_exploration,
            "backend": {k: v for k, v in sorted(self.backend.items()) if k != "workers"},
            "temperature": self.temperature,
            "budget": [self.budget.max_total, self.budget.max_prompt, self.budget.max_new],
            "seeds": [self.pipeline_seed, self.judge_seed],
            "judge": [self.include_hints, self.include_screenshots],
            "retries": self.retries,
            "export_mode": self.export_mode,
        }

    def digest(self) -> str:
        return digest(json.dumps(self.identity(), sort_keys=True))

    def schedule(self) -> dict[str, int]:
        counts = schedule_counts(self.persona_count, len(self.sites), self.k_tasks_per_exploration)
        return {
            "personas": self.persona_count,
            "sites": len(self.sites),
            "k": self.k_tasks_per_exploration,
            **counts,
        }


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        path, value = _parse_override(item)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
        node[path[-1]] = value
    return doc


def builtin_script_path(name: str) -> Path:
    path = resources.files("trajsynth") / "data" / "scripts" / f"{name}.json"
    return Path(str(path))


def config_from_dict(doc: dict[str, Any], base_dir: Path) -> PipelineConfig:
    known = {"sites", "personas", "k_tasks_per_exploration", "backend", "budget", "seeds",
             "judge", "retries", "export", "output_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    personas = doc.get("personas", {})
    backend = dict(doc.get("backend", {}))
    budget = doc.get("budget", {})
    seeds = doc.get("seeds", {})
    judge = doc.get("judge", {})
    try:
        cfg = PipelineConfig(
            sites=tuple(doc.get("sites", ())),
            persona_mode=personas.get("mode", "builtin"),
            persona_count=personas.get("count", 5),
            k_tasks_per_exploration=doc.get("k_tasks_per_exploration", 2),
            backend=backend,
            workers=backend.get("workers", 1),
            temperature=float(backend.get("temperature", 0.0)),
            budget=TokenBudget(**budget),
            pipeline_seed=int(seeds.get("pipeline", 0)),
            judge_seed=int(seeds.get("judge_options", 0)),
            include_hints=bool(judge.get("include_hints", True)),
            include_screenshots=bool(judge.get("include_screenshots", False)),
            retries=doc.get("retries", 10),
            export_mode=doc.get("export", {}).get("mode", "multiturn"),
            output_dir=base_dir / doc.get("output_dir", "out"),
            base_dir=base_dir,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    _check_paths(cfg)
    return cfg


def _check_paths(cfg: PipelineConfig) -> None:
    for ref in cfg.sites:
        if ref.startswith("builtin:"):
            if ref[len("builtin:"):] not in BUILTIN_SITES:
                raise ConfigError(f"no bundled site {ref!r}; choose from {BUILTIN_SITES}")
        elif not (cfg.base_dir / ref).is_file():
            raise ConfigError(f"site file {ref!r} not found")
    script = cfg.backend.get("scripted")
    if script:
        if script.startswith("builtin:"):
            if not builtin_script_path(script[len("builtin:"):]).is_file():
                raise ConfigError(f"no bundled script {script!r}")
        elif not (cfg.base_dir / script).is_file():
            raise ConfigError(f"script file {script!r} not found")
    elif not (cfg.backend.get("endpoint") and cfg.backend.get("model")):
        raise ConfigError("backend needs 'scripted' or both 'endpoint' and 'model'")


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> PipelineConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(apply_overrides(doc, overrides), path.resolve().parent)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


STAGE_FILES = {
    "personas": ("personas.jsonl",),
    "explore": ("explorations.jsonl",),
    "tasks": ("tasks.jsonl",),
    "rollout": ("trajectories.jsonl",),
    "judge": ("verdicts.jsonl", "judge_errors.jsonl"),
    "filter": ("retained.jsonl",),
    "export": ("sft.jsonl",),
    "stats": ("stats.json",),
}
STAGE_INPUTS = {
    "personas": (),
    "explore": ("personas.jsonl",),
    "tasks": ("personas.jsonl", "explorations.jsonl"),
    "rollout": ("tasks.jsonl",),
    "judge": ("tasks.jsonl", "trajectories.jsonl"),
    "filter": ("trajectories.jsonl", "verdicts.jsonl"),
    "export": ("tasks.jsonl", "retained.jsonl"),
    "stats": ("sft.jsonl",),
}
STAGES = tuple(STAGE_FILES)


class Pipeline:
    """Runs stages against ``config.output_dir``; each stage reads its inputs from disk."""

    def __init__(
        self,
        config: PipelineConfig,
        backend: ChatBackend | None = None,
        clock: Callable[[], str] | None = None,
    ):
        self.config = config
        self.out = Path(config.output_dir)
        self._backend = backend
        self._sites: dict[str, SiteSpec] = {}
        self._clock = clock

    # -- plumbing ---------------------------------------------------------

    @property
    def backend(self) -> ChatBackend:
        if self._backend is None:
            self._backend = backend_from_config(self._backend_cfg(), self.config.budget, self.config.base_dir)
        return self._backend

    def _backend_cfg(self) -> dict[str, Any]:
        cfg = dict(self.config.backend)
        script = cfg.get("scripted")
        if script and script.startswith("builtin:"):
            cfg["scripted"] = str(builtin_script_path(script[len("builtin:"):]))
        return cfg

    def now(self) -> str:
        if self._clock is not None:
            return self._clock()
        if not self.backend.live:
            return FROZEN_TIMESTAMP
        return datetime.now(timezone.utc).isoformat(timespec="seconds")

    @property
    def params(self) -> GenParams:
        return GenParams(
            max_new_tokens=self.config.budget.max_new,
            temperature=self.config.temperature,
            seed=self.config.pipeline_seed,
            extra=dict(self.config.backend.get("extra", {})),
        )

    def sites(self) -> dict[str, SiteSpec]:
        if not self._sites:
            for ref in self.config.sites:
                try:
                    spec = resolve_site(ref, self.config.base_dir)
                except (SiteLoadError, FileNotFoundError) as exc:
                    raise ConfigError(f"site {ref!r}: {exc}") from exc
                if spec.site in self._sites:
                    raise ConfigError(f"site {spec.site!r} listed twice")
                self._sites[spec.site] = spec
        return self._sites

    def path(self, name: str) -> Path:
        return self.out / name

    def _require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PipelineError(name, "missing input; run the earlier stage first")
        return p

    def _marker(self, stage: str) -> Path:
        return self.out / ".stages" / f"{stage}.json"

    def _input_digest(self, stage: str) -> str:
        parts = {
            "stage": stage,
            "config": self.config.digest(),
            "prompts": {n: digest(load_prompt(n)) for n in sorted(_PROMPTS)},
            "inputs": {n: _file_digest(self._require(n)) for n in STAGE_INPUTS[stage]},
        }
        return digest(json.dumps(parts, sort_keys=True))

    def _cached(self, stage: str, inputs: str) -> dict[str, Any] | None:
        marker = self._marker(stage)
        if not marker.exists():
            return None
        state = json.loads(marker.read_text(encoding="utf-8"))
        if state.get("inputs") != inputs:
            return None
        for name, d in state.get("outputs", {}).items():
            p = self.path(name)
            if not p.exists() or _file_digest(p) != d:
                return None
        return state

    def run_stage(self, stage: str, force: bool = False) -> dict[str, Any]:
        """Run one stage unless an identical earlier run can be reused.

        Returns ``{"counts": ..., "errors": ..., "reused": bool}``.
        """
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        inputs = self._input_digest(stage)
        if not force:
            cached = self._cached(stage, inputs)
            if cached is not None:
                log.info("stage %s: reusing outputs", stage)
                return {"counts": cached["counts"], "errors": cached["errors"], "reused": True}
        counts, errors = getattr(self, f"_stage_{stage}")()
        state = {
            "inputs": inputs,
            "outputs": {n: _file_digest(self.path(n)) for n in STAGE_FILES[stage]},
            "counts": counts,
            "errors": errors,
            "finished": self.now(),
        }
        self._marker(stage).parent.mkdir(parents=True, exist_ok=True)
        self._marker(stage).write_text(json.dumps(state, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return {"counts": counts, "errors": errors, "reused": False}

    def _jobs(self, jobs: list[Callable[[], Any]]) -> list[Any]:
        return run_parallel(jobs, self.config.workers)

    # -- stages -----------------------------------------------------------

    def _stage_personas(self) -> tuple[dict[str, int], dict[str, int]]:
        backend = self.backend if self.config.persona_mode == "backend" else None
        personas = generate_personas(
            self.config.persona_count, backend, self.config.pipeline_seed,
            max_retries=self.config.retries, params=self.params,
        )
        write_jsonl(self.path("personas.jsonl"), personas)
        return {"personas": len(personas)}, {}

    def _stage_explore(self) -> tuple[dict[str, int], dict[str, int]]:
        personas = read_jsonl(self._require("personas.jsonl"), Persona)
        sites = list(self.sites().values())
        jobs = []
        for i, persona in enumerate(personas):
            for j, site in enumerate(sites):
                eid = make_id("expl", i * len(sites) + j + 1)
                jobs.append(lambda p=persona, s=site, e=eid: explore(
                    p, s, self.backend, self.config.budget, exploration_id=e,
                    max_retries=self.config.retries, params=self.params,
                ))
        results = self._jobs(jobs)
        traces = [r for r in results if isinstance(r, ExplorationTrace)]
        crashed = len(results) - len(traces)
        write_jsonl(self.path("explorations.jsonl"), traces)
        env_errors = sum(t.trajectory.terminal.kind == "env_error" for t in traces)
        if jobs and crashed + env_errors == len(jobs):
            raise PipelineError("explore", "every exploration failed")
        counts = {
            "explorations_scheduled": len(jobs),
            "explorations_succeeded": sum(t.succeeded for t in traces),
        }
        return counts, _nonzero({"explore_env_error": env_errors, "explore_crashed": crashed})

    def _stage_tasks(self) -> tuple[dict[str, int], dict[str, int]]:
        personas = {p.id: p for p in read_jsonl(self._require("personas.jsonl"), Persona)}
        traces = read_jsonl(self._require("explorations.jsonl"), ExplorationTrace)
        instructions = AnnotatorInstructions.default()
        k = self.config.k_tasks_per_exploration
        jobs = []
        for n, trace in enumerate(traces):
            if not trace.succeeded:
                continue
            ids = [make_id("task", n * k + j + 1) for j in range(k)]
            jobs.append(lambda t=trace, ids=ids: synthesize_tasks(
                t, personas[t.persona_id], instructions, self.backend, k,
                task_ids=ids, budget=self.config.budget, max_retries=self.config.retries,
                params=self.params,
            ))
        results = self._jobs(jobs)
        tasks: list[TaskSpec] = []
        synth_errors = crashed = 0
        for r in results:
            if isinstance(r, Exception):
                crashed += 1
                continue
            specs, errs = r
            tasks.extend(specs)
            synth_errors += len(errs)
        write_jsonl(self.path("tasks.jsonl"), tasks)
        if jobs and not tasks:
            raise PipelineError("tasks", "no task could be synthesized")
        scheduled = len(personas) * len(self.sites()) * k
        return {"tasks_scheduled": scheduled, "tasks": len(tasks)}, _nonzero(
            {"synthesis_error": synth_errors, "synthesis_crashed": crashed}
        )

    def _stage_rollout(self) -> tuple[dict[str, int], dict[str, int]]:
        tasks = read_jsonl(self._require("tasks.jsonl"), TaskSpec)
        sites = self.sites()
        system = agent_system_prompt()
        jobs = []
        for n, spec in enumerate(tasks):
            if spec.site not in sites:
                raise ConfigError(f"task {spec.id} targets unknown site {spec.site!r}")
            tid = make_id("traj", n + 1)
            jobs.append(lambda s=spec, tid=tid: run_episode(
                self.backend, to_agent_task(s), sites[s.site], self.config.budget,
                self.config.retries, system_prompt=system, params=self.params, trajectory_id=tid,
            ))
        results = self._jobs(jobs)
        trajs = [r for r in results if isinstance(r, Trajectory)]
        crashed = len(results) - len(trajs)
        write_jsonl(self.path("trajectories.jsonl"), trajs)
        env_errors = sum(t.terminal.kind == "env_error" for t in trajs)
        if jobs and crashed + env_errors == len(jobs):
            raise PipelineError("rollout", "every rollout failed")
        return {"trajectories": len(trajs)}, _nonzero({"rollout_env_error": env_errors, "rollout_crashed": crashed})

    def _judge_all(self, opts: JudgeOptions) -> tuple[list[Verdict], list[dict[str, Any]]]:
        tasks = {t.id: t for t in read_jsonl(self._require("tasks.jsonl"), TaskSpec)}
        trajs = read_jsonl(self._require("trajectories.jsonl"), Trajectory)
        jobs = [
            (lambda t=t: judge_trajectory(
                self.backend, t, tasks[t.task_id], opts, max_retries=self.config.retries,
                budget=self.config.budget, params=self.params,
            ))
            for t in trajs
        ]
        verdicts, failures = [], []
        for traj, r in zip(trajs, self._jobs(jobs)):
            if isinstance(r, Verdict):
                verdicts.append(r)
            else:
                attempts = r.attempts if isinstance(r, JudgeError) else 0
                failures.append({"trajectory_id": traj.id, "error": str(r), "attempts": attempts})
        if jobs and not verdicts:
            raise PipelineError("judge", "no trajectory could be judged")
        return verdicts, failures

    def judge_options(self, include_hints: bool | None = None) -> JudgeOptions:
        return JudgeOptions(
            include_hints=self.config.include_hints if include_hints is None else include_hints,
            option_seed=self.config.judge_seed,
            include_screenshots=self.config.include_screenshots,
        )

    def _stage_judge(self) -> tuple[dict[str, int], dict[str, int]]:
        verdicts, failures = self._judge_all(self.judge_options())
        write_jsonl(self.path("verdicts.jsonl"), verdicts)
        write_jsonl(self.path("judge_errors.jsonl"), failures)
        return {"verdicts": len(verdicts), "unjudged": len(failures)}, _nonzero({"judge_error": len(failures)})

    def _stage_filter(self) -> tuple[dict[str, int], dict[str, int]]:
        trajs = read_jsonl(self._require("trajectories.jsonl"), Trajectory)
        by_id = {v.trajectory_id: v for v in read_jsonl(self._require("verdicts.jsonl"), Verdict)}
        kept = filter_successful((t, by_id.get(t.id)) for t in trajs)
        write_jsonl(self.path("retained.jsonl"), [t for t, _ in kept])
        return {"retained": len(kept)}, {}

    def _conversations(self, trajs: list[Trajectory]) -> tuple[list, int]:
        tasks = {t.id: t for t in read_jsonl(self._require("tasks.jsonl"), TaskSpec)}
        system = agent_system_prompt()
        convs, skipped = [], 0
        for t in trajs:
            try:
                convs.append(to_sft_conversation(t, tasks[t.task_id], system, self.config.budget))
            except ConversionError as exc:
                log.warning("skipping %s: %s", t.id, exc)
                skipped += 1
        return convs, skipped

    def _stage_export(self) -> tuple[dict[str, int], dict[str, int]]:
        convs, skipped = self._conversations(read_jsonl(self._require("retained.jsonl"), Trajectory))
        counts = export_jsonl(convs, self.path("sft.jsonl"), self.config.export_mode)
        return (
            {"exported_conversations": counts["conversations"], "exported_examples": counts["examples"]},
            _nonzero({"export_skipped": skipped}),
        )

    def _stage_stats(self) -> tuple[dict[str, int], dict[str, int]]:
        stats = compute_stats(_read_any_conversations(self._require("sft.jsonl")))
        self.path("stats.json").write_text(
            json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
        return {}, {}

    # -- whole runs -------------------------------------------------------

    def run(self, force: bool = False) -> RunManifest:
        manifest = RunManifest(config_digest=self.config.digest(), seed=self.config.pipeline_seed)
        manifest.timestamps["started"] = self.now()
        for stage in STAGES:
            result = self.run_stage(stage, force)
            manifest.counts.update(result["counts"])
            for k, v in result["errors"].items():
                manifest.errors[k] = manifest.errors.get(k, 0) + v
        manifest.timestamps["finished"] = self.now()
        manifest.digests = self.artifact_digests()
        problems = manifest.check()
        if problems:
            raise PipelineError("manifest", "; ".join(problems))
        self.path("manifest.json").write_text(
            json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8"
        )
        return manifest

    def artifact_digests(self) -> dict[str, str]:
        out = {}
        for stage in STAGES:
            for name in STAGE_FILES[stage]:
                if self.path(name).exists():
                    out[name] = _file_digest(self.path(name))
        for name in sorted(_PROMPTS):
            out[f"prompt:{name}"] = digest(load_prompt(name))
        return out

    # -- ablations --------------------------------------------------------

    def ablate_no_hints(self) -> dict[str, Any]:
        """Re-judge every trajectory without hints and compare with the main verdicts."""
        main = read_jsonl(self._require("verdicts.jsonl"), Verdict)
        verdicts, failures = self._judge_all(self.judge_options(include_hints=not self.config.include_hints))
        write_jsonl(self.path("verdicts_no_hints.jsonl"), verdicts)
        with_h, without_h = (main, verdicts) if self.config.include_hints else (verdicts, main)
        report = flip_analysis(with_h, without_h).to_dict()
        report["unjudged"] = len(failures)
        self.path("flip_report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
        return report

    def ablate_no_judge(self) -> dict[str, Any]:
        """Export every judged trajectory regardless of its verdict."""
        trajs = read_jsonl(self._require("trajectories.jsonl"), Trajectory)
        tasks = {t.id: t for t in read_jsonl(self._require("tasks.jsonl"), TaskSpec)}
        verdicts = {v.trajectory_id: v for v in read_jsonl(self._require("verdicts.jsonl"), Verdict)}
        return export_unfiltered(
            ((t, tasks[t.task_id], verdicts.get(t.id)) for t in trajs),
            self.path("sft_unfiltered.jsonl"), agent_system_prompt(), self.config.budget,
            self.config.export_mode,
        )


_PROMPTS = ("agent_system", "exploration", "annotator_instructions", "synthesis", "judge_system", "persona")


def _nonzero(d: dict[str, int]) -> dict[str, int]:
    return {k: v for k, v in d.items() if v}


def _read_any_conversations(path: Path) -> list:
    """Conversations from either export mode (per-step rows are 3-message conversations)."""
    return [SftConversation.from_dict(row) for row in read_jsonl(path)]


def run_pipeline(config: PipelineConfig, backend: ChatBackend | None = None, force: bool = False) -> RunManifest:
    return Pipeline(config, backend).run(force)


def plan(config: PipelineConfig) -> dict[str, int]:
    """Schedule implied by the config; never touches a backend."""
    return config.schedule()

