"""Structured scene descriptions.

A scene is an unordered set of (kind, color, center) triples. It is written as
a fixed JSON schema whose structural fragments are single atomic tokens; only
the content slots (continuation choice, kind, color, x, y) are ever chosen by
a model.
"""

from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import math

import numpy as np
from pydantic import BaseModel, Field, validator

from core.catalog import Catalog, load_catalog

MAX_OBJECTS = 8
N_BINS = 101

PAD, BOS, EOS, IMG, USER, MODEL, ACT, CONT, END = (
    "<pad>", "<bos>", "<eos>", "<img>", "<user>", "<model>", "<act>", "<cont>", "<end>",
)
SPECIAL_TOKENS = [PAD, BOS, EOS, IMG, USER, MODEL, ACT, CONT, END]

OPEN_SCENE = '{"objects":['
OPEN_OBJECT = '{"o":"'
KIND_TO_COLOR = '","c":"'
COLOR_TO_POS = '","p":['
COMMA = ","
CLOSE = "]}"
STRUCTURAL_TOKENS = [OPEN_SCENE, OPEN_OBJECT, KIND_TO_COLOR, COLOR_TO_POS, COMMA, CLOSE]

# Control tokens that steer the decoder but render as nothing
SILENT_TOKENS = {CONT, END}


class QuantizationRangeError(ValueError):
    pass


class SceneParseError(ValueError):
    pass


class SlotRole(str, Enum):
    FIXED = "fixed"
    DECISION = "decision"
    KIND = "kind"
    COLOR = "color"
    X = "x"
    Y = "y"


CONTENT_ROLES = (SlotRole.DECISION, SlotRole.KIND, SlotRole.COLOR, SlotRole.X, SlotRole.Y)


class SceneObject(BaseModel):
    kind: str
    color: str
    pos: Tuple[float, float]

    @validator("pos")
    def _in_unit_square(cls, pos):
        if not all(0.0 <= v <= 1.0 for v in pos):
            raise ValueError(f"coordinates outside [0,1]: {pos}")
        return pos


class SceneState(BaseModel):
    objects: List[SceneObject] = Field(default_factory=list)

    @validator("objects")
    def _capacity(cls, objects):
        if len(objects) > MAX_OBJECTS:
            raise ValueError(f"scene holds {len(objects)} objects, more than {MAX_OBJECTS}")
        return objects

    def quantized(self) -> "SceneState":
        return SceneState(objects=[
            SceneObject(kind=o.kind, color=o.color, pos=(dequantize_coord(coord_bin(o.pos[0])), dequantize_coord(coord_bin(o.pos[1]))))
            for o in self.objects
        ])

    def canonical_key(self) -> List[Tuple[str, str, int, int]]:
        return sorted((o.kind, o.color, coord_bin(o.pos[0]), coord_bin(o.pos[1])) for o in self.objects)


class TextSegment(BaseModel):
    words: List[str]


class ImageSegment(BaseModel):
    ref: str


class Instruction(BaseModel):
    segments: List[Union[ImageSegment, TextSegment]]

    @validator("segments")
    def _not_empty(cls, segments):
        if not segments:
            raise ValueError("instruction needs at least one segment")
        return segments

    def text(self) -> str:
        return " ".join(
            " ".join(s.words) if isinstance(s, TextSegment) else f"[{s.ref}]"
            for s in self.segments
        )

    def image_refs(self) -> List[str]:
        return [s.ref for s in self.segments if isinstance(s, ImageSegment)]


class TokenSeq(BaseModel):
    ids: List[int]
    roles: List[SlotRole]

    @validator("roles")
    def _aligned(cls, roles, values):
        if "ids" in values and len(roles) != len(values["ids"]):
            raise ValueError("roles must align with ids")
        return roles

    def __len__(self):
        return len(self.ids)

    def content_positions(self) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r != SlotRole.FIXED]


# ---------------------------------------------------------------------------
# Coordinates
# ---------------------------------------------------------------------------

def coord_bin(v: float) -> int:
    if not (0.0 <= v <= 1.0) or math.isnan(v):
        raise QuantizationRangeError(f"coordinate {v} outside [0, 1]")
    # round half away from zero (inputs are non-negative)
    return int(math.floor(v * 100.0 + 0.5))


def quantize_coord(v: float) -> str:
    return f"{coord_bin(v) / 100:.2f}"


def dequantize_coord(token: Union[str, int]) -> float:
    if isinstance(token, str):
        return round(float(token), 2)
    return token / 100.0


def bin_centers() -> np.ndarray:
    return np.arange(N_BINS, dtype=np.float64) / 100.0


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Unified token space: specials, schema fragments, kinds, colors, skills, words, coordinates"""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self.kinds = list(catalog.all_kinds)
        self.colors = list(catalog.colors)
        self.skills = list(catalog.skills)
        named = set(self.kinds) | set(self.colors) | set(self.skills)
        self.words = [w for w in catalog.instruction_words() if w not in named]
        self.coords = [f"{i / 100:.2f}" for i in range(N_BINS)]

        self.tokens: List[str] = (
            SPECIAL_TOKENS + STRUCTURAL_TOKENS + self.kinds + self.colors
            + self.skills + self.words + self.coords
        )
        self.index: Dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise ValueError(f"duplicate token {tok!r}")
            self.index[tok] = i

        self.kind_ids = np.array([self.index[k] for k in self.kinds], dtype=np.int64)
        self.color_ids = np.array([self.index[c] for c in self.colors], dtype=np.int64)
        self.coord_ids = np.array([self.index[c] for c in self.coords], dtype=np.int64)
        self.decision_ids = np.array([self.index[CONT], self.index[END]], dtype=np.int64)
        self.config_hash = hashlib.sha256(json.dumps(self.tokens).encode("utf-8")).hexdigest()[:16]

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    @property
    def coord_offset(self) -> int:
        return int(self.coord_ids[0])

    def coord_token(self, bin_index: int) -> int:
        return self.coord_offset + bin_index

    def text(self, token_id: int) -> str:
        tok = self.tokens[token_id]
        return "" if tok in SILENT_TOKENS else tok

    def legal_ids(self, role: SlotRole) -> np.ndarray:
        return {
            SlotRole.DECISION: self.decision_ids,
            SlotRole.KIND: self.kind_ids,
            SlotRole.COLOR: self.color_ids,
            SlotRole.X: self.coord_ids,
            SlotRole.Y: self.coord_ids,
        }[role]

    def tokenize_words(self, words: Sequence[str]) -> List[int]:
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise KeyError(f"words outside the vocabulary: {unknown}")
        return [self.index[w] for w in words]


_VOCABULARIES: Dict[int, Vocabulary] = {}


def build_vocabulary(catalog: Optional[Catalog] = None) -> Vocabulary:
    catalog = catalog or load_catalog()
    key = id(catalog)
    if key not in _VOCABULARIES:
        _VOCABULARIES[key] = Vocabulary(catalog)
    return _VOCABULARIES[key]


def tokenize_instruction(instruction: Instruction, vocab: Vocabulary, n_image_tokens: int) -> Tuple[List[int], List[Tuple[int, str]]]:
    """Instruction ids with an IMG-slot run per image segment, plus (offset, ref) of each run"""
    ids: List[int] = []
    images: List[Tuple[int, str]] = []
    for segment in instruction.segments:
        if isinstance(segment, ImageSegment):
            images.append((len(ids), segment.ref))
            ids.extend([vocab[IMG]] * n_image_tokens)
        else:
            ids.extend(vocab.tokenize_words(segment.words))
    return ids, images


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def canonical_order(scene: SceneState, vocab: Vocabulary) -> List[SceneObject]:
    return sorted(
        scene.objects,
        key=lambda o: (coord_bin(o.pos[1]), coord_bin(o.pos[0]), vocab.kinds.index(o.kind), vocab.colors.index(o.color)),
    )


def serialize_scene(scene: SceneState, vocab: Vocabulary) -> TokenSeq:
    ids: List[int] = []
    roles: List[SlotRole] = []

    def put(token: int, role: SlotRole = SlotRole.FIXED):
        ids.append(token)
        roles.append(role)

    put(vocab[OPEN_SCENE])
    objects = canonical_order(scene, vocab)
    for i, obj in enumerate(objects):
        put(vocab[CONT], SlotRole.DECISION)
        if i > 0:
            put(vocab[COMMA])
        put(vocab[OPEN_OBJECT])
        put(vocab[obj.kind], SlotRole.KIND)
        put(vocab[KIND_TO_COLOR])
        put(vocab[obj.color], SlotRole.COLOR)
        put(vocab[COLOR_TO_POS])
        put(vocab.coord_token(coord_bin(obj.pos[0])), SlotRole.X)
        put(vocab[COMMA])
        put(vocab.coord_token(coord_bin(obj.pos[1])), SlotRole.Y)
        put(vocab[CLOSE])
    # the list closes on a model decision unless the capacity forces it
    put(vocab[END], SlotRole.DECISION if len(objects) < MAX_OBJECTS else SlotRole.FIXED)
    put(vocab[CLOSE])
    return TokenSeq(ids=ids, roles=roles)


def scene_to_json(scene: Union[SceneState, TokenSeq], vocab: Vocabulary) -> str:
    seq = scene if isinstance(scene, TokenSeq) else serialize_scene(scene, vocab)
    return "".join(vocab.text(t) for t in seq.ids)


def parse_scene(seq: Union[TokenSeq, Sequence[int]], vocab: Vocabulary) -> SceneState:
    ids = list(seq.ids if isinstance(seq, TokenSeq) else seq)
    pos = 0

    def expect(token: str):
        nonlocal pos
        if pos >= len(ids) or ids[pos] != vocab[token]:
            found = vocab.tokens[ids[pos]] if pos < len(ids) else "<eof>"
            raise SceneParseError(f"expected {token!r} at {pos}, found {found!r}")
        pos += 1

    def take(legal: np.ndarray, what: str) -> int:
        nonlocal pos
        if pos >= len(ids) or ids[pos] not in legal:
            raise SceneParseError(f"expected a {what} token at {pos}")
        pos += 1
        return ids[pos - 1]

    expect(OPEN_SCENE)
    objects = []
    while True:
        if pos >= len(ids):
            raise SceneParseError("truncated object list")
        if ids[pos] == vocab[END]:
            pos += 1
            break
        if len(objects) >= MAX_OBJECTS:
            raise SceneParseError(f"more than {MAX_OBJECTS} objects")
        expect(CONT)
        if objects:
            expect(COMMA)
        expect(OPEN_OBJECT)
        kind = vocab.tokens[take(vocab.kind_ids, "kind")]
        expect(KIND_TO_COLOR)
        color = vocab.tokens[take(vocab.color_ids, "color")]
        expect(COLOR_TO_POS)
        x = take(vocab.coord_ids, "coordinate") - vocab.coord_offset
        expect(COMMA)
        y = take(vocab.coord_ids, "coordinate") - vocab.coord_offset
        expect(CLOSE)
        objects.append(SceneObject(kind=kind, color=color, pos=(dequantize_coord(x), dequantize_coord(y))))
    expect(CLOSE)
    if pos != len(ids):
        raise SceneParseError(f"{len(ids) - pos} trailing tokens")
    return SceneState(objects=objects)


# ---------------------------------------------------------------------------
# Constrained decoding
# ---------------------------------------------------------------------------

LogitSource = Callable[[List[int]], np.ndarray]


def _choose(logits: np.ndarray, legal: np.ndarray) -> int:
    # legal ids ascend, so argmax ties resolve to the lower id
    return int(legal[int(np.argmax(np.asarray(logits)[legal]))])


def decode_scene_tokens(
    next_logits: LogitSource,
    n_scenes: int,
    vocab: Vocabulary,
    prefix: Optional[Sequence[int]] = None,
) -> List[TokenSeq]:
    """Greedy schema-constrained generation of ``n_scenes`` descriptions.

    Fixed tokens are written without consulting ``next_logits``; each content
    slot takes the argmax over its legal token class only.
    """
    if n_scenes not in (1, 2):
        raise ValueError("n_scenes must be 1 or 2")
    context = list(prefix or [])
    scenes = []
    for _ in range(n_scenes):
        ids: List[int] = []
        roles: List[SlotRole] = []

        def fixed(token: int):
            ids.append(token)
            roles.append(SlotRole.FIXED)
            context.append(token)

        def content(role: SlotRole) -> int:
            token = _choose(next_logits(context), vocab.legal_ids(role))
            ids.append(token)
            roles.append(role)
            context.append(token)
            return token

        fixed(vocab[OPEN_SCENE])
        n_objects = 0
        while True:
            if n_objects == MAX_OBJECTS:
                fixed(vocab[END])
                break
            if content(SlotRole.DECISION) == vocab[END]:
                break
            if n_objects:
                fixed(vocab[COMMA])
            fixed(vocab[OPEN_OBJECT])
            content(SlotRole.KIND)
            fixed(vocab[KIND_TO_COLOR])
            content(SlotRole.COLOR)
            fixed(vocab[COLOR_TO_POS])
            content(SlotRole.X)
            fixed(vocab[COMMA])
            content(SlotRole.Y)
            fixed(vocab[CLOSE])
            n_objects += 1
        fixed(vocab[CLOSE])
        scenes.append(TokenSeq(ids=ids, roles=roles))
    return scenes


def constrained_decode(
    next_logits: LogitSource,
    n_scenes: int,
    vocab: Optional[Vocabulary] = None,
    prefix: Optional[Sequence[int]] = None,
) -> List[SceneState]:
    vocab = vocab or build_vocabulary()
    return [parse_scene(seq, vocab) for seq in decode_scene_tokens(next_logits, n_scenes, vocab, prefix)]


def teacher_forcing_source(target: TokenSeq, vocab: Vocabulary, prefix_len: int = 0) -> LogitSource:
    """Logit source that puts all mass on ``target``'s next content token"""
    def source(context: List[int]) -> np.ndarray:
        logits = np.zeros(len(vocab))
        logits[target.ids[len(context) - prefix_len]] = 1.0
        return logits
    return source
