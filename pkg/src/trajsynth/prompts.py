"""Editable prompt assets shipped under ``trajsynth/data/prompts``."""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    path = resources.files("trajsynth") / "data" / "prompts" / f"{name}.txt"
    return path.read_text(encoding="utf-8").rstrip("\n")


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def agent_system_prompt() -> str:
    return load_prompt("agent_system")
