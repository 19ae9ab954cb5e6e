from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple
import json

from pydantic import BaseModel, validator

from config.settings import settings


class TemplateSpec(BaseModel):
    text: str
    joiner: Optional[str] = None
    targets: Tuple[int, int] = (1, 1)
    distractors: Tuple[int, int] = (0, 0)
    dirt_probability: float = 0.0


class SplitCatalog(BaseModel):
    base_kinds: List[str]
    novel_kinds: List[str]
    held_out_combos: List[Tuple[str, str]]
    held_out_templates: List[str]


class Catalog(BaseModel):
    """Everything the simulator and the vocabulary enumerate over"""

    schema_version: int
    kinds: Dict[str, List[str]]
    colors: List[str]
    object_colors: List[str]
    box_color: str
    dirt_color: str
    palette: Dict[str, Tuple[int, int, int]]
    skills: List[str]
    templates: Dict[str, TemplateSpec]
    splits: SplitCatalog

    @validator("palette")
    def _palette_covers_colors(cls, palette, values):
        missing = [c for c in values.get("colors", []) if c not in palette]
        if missing:
            raise ValueError(f"palette missing colors: {missing}")
        return palette

    @property
    def manipulable_kinds(self) -> List[str]:
        return self.kinds["manipulable"]

    @property
    def container_kinds(self) -> List[str]:
        return self.kinds["containers"]

    @property
    def marker_kinds(self) -> List[str]:
        return self.kinds["markers"]

    @property
    def all_kinds(self) -> List[str]:
        return self.manipulable_kinds + self.container_kinds + self.marker_kinds

    @property
    def template_ids(self) -> List[str]:
        return list(self.templates.keys())

    def kind_id(self, kind: str) -> int:
        return self.all_kinds.index(kind)

    def color_id(self, color: str) -> int:
        return self.colors.index(color)

    def instruction_words(self) -> List[str]:
        """Plain words used by instruction templates, in first-seen order"""
        words = []
        named = set(self.all_kinds) | set(self.colors)
        for spec in self.templates.values():
            pieces = spec.text.split() + ([spec.joiner] if spec.joiner else [])
            for piece in pieces:
                if piece.startswith("{") or piece in named or piece in words:
                    continue
                words.append(piece)
        return words


@lru_cache(maxsize=4)
def _load(path: str) -> Catalog:
    with open(path, "r", encoding="utf-8") as f:
        return Catalog(**json.load(f))


def load_catalog(path: Optional[Path] = None) -> Catalog:
    return _load(str(path or settings.TEMPLATE_PATH))
