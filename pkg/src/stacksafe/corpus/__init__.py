"""Bundled hand-written programs (assembly plus annotation files)."""
from __future__ import annotations

from importlib import resources

from stacksafe.machine import AsmProgram, parse_assembly
from stacksafe.secsem import AnnotationMap, parse_annotations


def _text(fname: str) -> str:
    return resources.files(__name__).joinpath(fname).read_text()


def names(prefix: str = "") -> list[str]:
    return sorted(p.name[:-4] for p in resources.files(__name__).iterdir()
                  if p.name.endswith(".asm") and p.name.startswith(prefix))


def load(name: str) -> tuple[AsmProgram, AnnotationMap]:
    """``name.asm`` with ``name.ann``, falling back to the ``golden.ann`` shared by
    the golden programs."""
    asm = parse_assembly(_text(name + ".asm"))
    root = resources.files(__name__)
    ann_name = name + ".ann" if root.joinpath(name + ".ann").is_file() else name.split("_")[0] + ".ann"
    return asm, parse_annotations(_text(ann_name))
