"""Persona-driven synthesis, judging and export of web-agent training trajectories."""

from .actions import Action, AgentResponse, parse_action, parse_agent_response, render_action, render_agent_response
from .axtree import TokenBudget, compose_observation_prompt, estimate_tokens, truncate_to_budget
from .judge import filter_successful, flip_analysis, judge_trajectory
from .model import AgentTask, Persona, RunManifest, TaskSpec, Trajectory, Verdict, to_agent_task
from .pipeline import Pipeline, PipelineConfig, load_config, run_pipeline
from .sft import SftConversation, compute_stats, read_conversations, subsample, transform_reasoning

__all__ = [
    "Action",
    "AgentResponse",
    "AgentTask",
    "Persona",
    "Pipeline",
    "PipelineConfig",
    "RunManifest",
    "SftConversation",
    "TaskSpec",
    "TokenBudget",
    "Trajectory",
    "Verdict",
    "compose_observation_prompt",
    "compute_stats",
    "estimate_tokens",
    "filter_successful",
    "flip_analysis",
    "judge_trajectory",
    "load_config",
    "parse_action",
    "parse_agent_response",
    "read_conversations",
    "render_action",
    "render_agent_response",
    "run_pipeline",
    "subsample",
    "to_agent_task",
    "transform_reasoning",
    "truncate_to_budget",
]
