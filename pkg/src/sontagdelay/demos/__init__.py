"""Bundled experiment files."""

from importlib import resources


def names() -> list[str]:
    return sorted(p.name for p in resources.files(__name__).iterdir() if p.name.endswith(".dyn"))


def path(name: str):
    return resources.files(__name__) / name


def text(name: str) -> str:
    return path(name).read_text()
