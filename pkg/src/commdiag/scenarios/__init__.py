"""Scenario scripts shipped with the package."""

from __future__ import annotations

from importlib import resources

SUFFIX = ".scn"


def names() -> list[str]:
    return sorted(p.name[:-len(SUFFIX)] for p in resources.files(__name__).iterdir()
                  if p.name.endswith(SUFFIX))


def read(name: str) -> str:
    name = name[:-len(SUFFIX)] if name.endswith(SUFFIX) else name
    if name not in names():
        raise KeyError(f"no bundled scenario {name!r}")
    return resources.files(__name__).joinpath(name + SUFFIX).read_text(encoding="utf-8")


SINGLE_FAULT = {
    "H1": "hang_not_entered",
    "H2": "hang_inconsistent",
    "H3": "hang_hardware",
    "S1": "slow_computation",
    "S2": "slow_communication",
    "S3": "slow_mixed",
}
