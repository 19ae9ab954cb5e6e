"""The scene-action network.

Frozen patch encoder -> linear projection -> causal decoder with bottleneck
adapters -> weight-tied token head, plus the attention-aggregation policy
head that reads hidden states at scene-description positions.
"""

from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import hashlib
import json
import threading

import numpy as np

from config.run_config import ModelConfig
from core.scene_codec import N_BINS, Vocabulary, dequantize_coord
from core.tabletop import Action, SKILLS
from services import autodiff as ad
from services.autodiff import Tensor
from utils.helpers import log, read_json, write_json

CAUSAL_FILL = -1e9
N_SKILLS = len(SKILLS)
POLICY_OUT = N_SKILLS + 4 * N_BINS

# image patch span placed at an IMG-slot run: (first position, encoded patches)
VisualSpan = Tuple[int, np.ndarray]


class ContextOverflowError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


class ModelParams:
    """Named tensors; ``visual.*`` is the frozen encoder"""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]

    def frozen(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if not t.requires_grad]

    def n_trainable(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _lm_block_shapes(prefix: str, d: int, adapter: Optional[int]) -> List[Tuple[str, Tuple[int, ...], str]]:
    shapes = [
        (f"{prefix}.ln1_g", (d,), "ones"), (f"{prefix}.ln1_b", (d,), "zeros"),
        (f"{prefix}.qkv_w", (d, 3 * d), "normal"), (f"{prefix}.qkv_b", (3 * d,), "zeros"),
        (f"{prefix}.out_w", (d, d), "normal_out"), (f"{prefix}.out_b", (d,), "zeros"),
        (f"{prefix}.ln2_g", (d,), "ones"), (f"{prefix}.ln2_b", (d,), "zeros"),
        (f"{prefix}.fc1_w", (d, 4 * d), "normal"), (f"{prefix}.fc1_b", (4 * d,), "zeros"),
        (f"{prefix}.fc2_w", (4 * d, d), "normal_out"), (f"{prefix}.fc2_b", (d,), "zeros"),
    ]
    if adapter:
        shapes += [
            (f"{prefix}.adapter_down_w", (d, adapter), "normal"), (f"{prefix}.adapter_down_b", (adapter,), "zeros"),
            # zero up-projection starts every adapter as the identity
            (f"{prefix}.adapter_up_w", (adapter, d), "zeros"), (f"{prefix}.adapter_up_b", (d,), "zeros"),
        ]
    return shapes


def param_shapes(config: ModelConfig, vocab_size: int) -> List[Tuple[str, Tuple[int, ...], str]]:
    vd, d = config.visual_dim, config.d_model
    patch = config.patch_size * config.patch_size * 3
    shapes = [
        ("visual.patch_w", (patch, vd), "normal"), ("visual.patch_b", (vd,), "zeros"),
        ("visual.pos", (config.n_patches, vd), "normal"),
    ]
    shapes += _lm_block_shapes("visual.block", vd, adapter=None)
    shapes += [("visual.ln_f_g", (vd,), "ones"), ("visual.ln_f_b", (vd,), "zeros")]
    shapes += [
        ("proj.w", (vd, d), "normal"), ("proj.b", (d,), "zeros"),
        ("tok_emb", (vocab_size, d), "normal"), ("pos_emb", (config.max_context, d), "normal"),
    ]
    for i in range(config.n_layers):
        shapes += _lm_block_shapes(f"blocks.{i}", d, adapter=config.adapter_dim)
    shapes += [
        ("ln_f_g", (d,), "ones"), ("ln_f_b", (d,), "zeros"),
        ("policy.W", (d, d), "normal"),
        ("policy.fc1_w", (d, config.policy_hidden), "normal"), ("policy.fc1_b", (config.policy_hidden,), "zeros"),
        ("policy.fc2_w", (config.policy_hidden, POLICY_OUT), "normal"), ("policy.fc2_b", (POLICY_OUT,), "zeros"),
    ]
    return shapes


def _is_trainable(name: str, config: ModelConfig) -> bool:
    if name.startswith("visual."):
        return False
    if config.freeze_lm and (name.startswith("blocks.") and ".adapter_" not in name or name in ("pos_emb", "ln_f_g", "ln_f_b")):
        return False
    return True


def init_params(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> ModelParams:
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng([seed, 1])
    # the frozen encoder has its own stream so it never depends on trainable shapes
    visual_rng = np.random.default_rng([seed, 0])
    out_scale = 0.02 / np.sqrt(2 * max(1, config.n_layers))

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, init in param_shapes(config, len(vocab)):
        source = visual_rng if name.startswith("visual.") else rng
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal_out":
            data = source.normal(0.0, out_scale, size=shape)
        else:
            data = source.normal(0.0, 0.02 if not name.startswith("visual.") else 1.0 / np.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=_is_trainable(name, config), name=name)
    return ModelParams(tensors)


def config_hash(config: ModelConfig, vocab: Vocabulary) -> str:
    payload = json.dumps({"model": config.dict(), "vocab": vocab.config_hash}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _block(params: ModelParams, prefix: str, x: Tensor, n_heads: int, mask: Optional[Tensor]) -> Tensor:
    n, d = x.shape
    dh = d // n_heads

    h = ad.layer_norm(x, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    qkv = h @ params[f"{prefix}.qkv_w"] + params[f"{prefix}.qkv_b"]

    def heads(part: int) -> Tensor:
        cols = qkv[:, part * d:(part + 1) * d]
        return ad.transpose(cols.reshape(n, n_heads, dh), (1, 0, 2))

    q, k, v = heads(0), heads(1), heads(2)
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    attended = ad.softmax(scores) @ v
    merged = ad.transpose(attended, (1, 0, 2)).reshape(n, d)
    x = x + (merged @ params[f"{prefix}.out_w"] + params[f"{prefix}.out_b"])

    h = ad.layer_norm(x, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    ff = ad.gelu(h @ params[f"{prefix}.fc1_w"] + params[f"{prefix}.fc1_b"]) @ params[f"{prefix}.fc2_w"] + params[f"{prefix}.fc2_b"]
    if f"{prefix}.adapter_down_w" in params:
        bottleneck = ad.gelu(ff @ params[f"{prefix}.adapter_down_w"] + params[f"{prefix}.adapter_down_b"])
        ff = ff + (bottleneck @ params[f"{prefix}.adapter_up_w"] + params[f"{prefix}.adapter_up_b"])
    return x + ff


def patchify(obs: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = obs.shape
    grid = obs.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // patch) * (w // patch), patch * patch * c)


def encode_image(params: ModelParams, config: ModelConfig, obs: np.ndarray) -> np.ndarray:
    """Z_V: one visual-dim row per patch, row-major over the patch grid"""
    expected = (config.image_size, config.image_size, 3)
    if obs.shape != expected:
        raise ad.ShapeError(f"image shape {obs.shape} != {expected}")
    with ad.no_grad():
        pixels = patchify(obs.astype(np.float64) / 255.0, config.patch_size)
        x = Tensor(pixels.astype(params["visual.patch_w"].data.dtype))
        x = x @ params["visual.patch_w"] + params["visual.patch_b"] + params["visual.pos"]
        x = _block(params, "visual.block", x, config.visual_heads, mask=None)
        x = ad.layer_norm(x, params["visual.ln_f_g"], params["visual.ln_f_b"])
    return x.data


def project(params: ModelParams, z_v) -> Tensor:
    """Z_T = Z_V P + b"""
    z_v = z_v if isinstance(z_v, Tensor) else Tensor(np.asarray(z_v, dtype=params["proj.w"].data.dtype))
    if z_v.ndim != 2 or z_v.shape[1] != params["proj.w"].shape[0]:
        raise ad.ShapeError(f"visual tokens {z_v.shape} do not match projection {params['proj.w'].shape}")
    return z_v @ params["proj.w"] + params["proj.b"]


def causal_mask(n: int, dtype=np.float32) -> Tensor:
    return Tensor(np.triu(np.full((n, n), CAUSAL_FILL), k=1).astype(dtype))


def embed_context(params: ModelParams, ids: Sequence[int], visual: Sequence[VisualSpan]) -> Tensor:
    tokens = ad.embedding(params["tok_emb"], ids)
    if not visual:
        return tokens
    pieces: List[Tensor] = []
    cursor = 0
    for start, z_v in sorted(visual, key=lambda span: span[0]):
        z_t = project(params, z_v)
        if start < cursor or start + z_t.shape[0] > len(ids):
            raise ad.ShapeError(f"visual span at {start} overlaps or overruns the context")
        if start > cursor:
            pieces.append(tokens[cursor:start])
        pieces.append(z_t)
        cursor = start + z_t.shape[0]
    if cursor < len(ids):
        pieces.append(tokens[cursor:len(ids)])
    return ad.concat(pieces, axis=0)


def lm_forward(
    params: ModelParams,
    config: ModelConfig,
    ids: Sequence[int],
    visual: Sequence[VisualSpan] = (),
) -> Tuple[Tensor, Tensor]:
    """(next-token logits, final hidden states), one row per context position"""
    n = len(ids)
    if n > config.max_context:
        raise ContextOverflowError(f"context of {n} tokens exceeds max_context {config.max_context}")
    if n == 0:
        raise ad.ShapeError("empty context")

    x = embed_context(params, ids, visual) + params["pos_emb"][0:n]
    mask = causal_mask(n, x.data.dtype)
    for i in range(config.n_layers):
        x = _block(params, f"blocks.{i}", x, config.n_heads, mask)
    hidden = ad.layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    logits = hidden @ ad.transpose(params["tok_emb"])
    return logits, hidden


def policy_forward(params: ModelParams, E: Tensor) -> Tuple[Tensor, Tensor]:
    """Q = EW, A = softmax(QQ^T), pooled = mean(AQ) -> MLP -> (skill logits, 4 x coordinate logits)"""
    if E.ndim != 2 or E.shape[0] == 0:
        raise ad.ShapeError(f"policy needs at least one description row, got {E.shape}")
    Q = E @ params["policy.W"]
    A = ad.softmax(Q @ ad.transpose(Q))
    pooled = (A @ Q).mean(axis=0)
    h = ad.gelu(pooled @ params["policy.fc1_w"] + params["policy.fc1_b"])
    out = h @ params["policy.fc2_w"] + params["policy.fc2_b"]
    skill_logits = out[0:N_SKILLS]
    coord_logits = out[N_SKILLS:POLICY_OUT].reshape(4, N_BINS)
    return skill_logits, coord_logits


def decode_action(skill_logits, coord_logits) -> Action:
    skill_logits = np.asarray(skill_logits.data if isinstance(skill_logits, Tensor) else skill_logits)
    coord_logits = np.asarray(coord_logits.data if isinstance(coord_logits, Tensor) else coord_logits)
    bins = [int(np.argmax(row)) for row in coord_logits.reshape(4, N_BINS)]
    x0, y0, x1, y1 = (dequantize_coord(b) for b in bins)
    return Action(skill=SKILLS[int(np.argmax(skill_logits))], p_initial=(x0, y0), p_target=(x1, y1))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    params: ModelParams, config: ModelConfig, vocab: Vocabulary, path: Path, training: Optional[dict] = None,
) -> Path:
    """Writes ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    manifest = {
        "config": config.dict(), "config_hash": config_hash(config, vocab), "training": training or {}, "tensors": {},
    }
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as f:
        for name, t in params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            manifest["tensors"][name] = {"shape": list(t.shape), "dtype": "float32", "offset": offset}
            f.write(raw)
            offset += len(raw)
    write_json(stem.with_suffix(".json"), manifest)
    log(f"💾 Saved checkpoint {stem.with_suffix('.json')}")
    return stem.with_suffix(".json")


def load_checkpoint(path: Path, vocab: Vocabulary) -> Tuple[ModelParams, ModelConfig]:
    stem = Path(path).with_suffix("")
    manifest_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not manifest_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {manifest_path}")

    manifest = read_json(manifest_path)
    config = ModelConfig(**manifest["config"])
    expected_hash = config_hash(config, vocab)
    if manifest.get("config_hash") != expected_hash:
        raise CheckpointMismatchError(
            f"checkpoint hash {manifest.get('config_hash')} does not match config/vocabulary hash {expected_hash}"
        )

    blob = np.fromfile(blob_path, dtype="<f4")
    params = init_params(config, vocab, seed=0)
    for name, t in params.items():
        entry = manifest["tensors"].get(name)
        if entry is None:
            raise CheckpointMismatchError(f"checkpoint lacks tensor {name}")
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointMismatchError(f"{name}: checkpoint shape {entry['shape']} != model shape {list(t.shape)}")
        start = entry["offset"] // 4
        values = blob[start:start + t.size]
        if values.size != t.size:
            raise CheckpointMismatchError(f"{name}: blob truncated")
        t.data = values.reshape(t.shape).astype(t.data.dtype)
    extra = set(manifest["tensors"]) - set(params.tensors)
    if extra:
        raise CheckpointMismatchError(f"checkpoint has unknown tensors: {sorted(extra)}")
    return params, config


# ---------------------------------------------------------------------------
# Inference wrapper
# ---------------------------------------------------------------------------

class SceneActionModel:
    """Read-only inference view used by rollouts: token logits and the policy"""

    def __init__(
        self,
        params: ModelParams,
        config: ModelConfig,
        vocab: Vocabulary,
        no_future_state: bool = False,
        visual_cache_size: Optional[int] = 256,
    ):
        self.params = params
        self.config = config
        self.vocab = vocab
        # trained without next-scene descriptions: rollouts decode only the current one
        self.no_future_state = no_future_state
        # least recently used encodings are evicted past visual_cache_size; None keeps all
        self.visual_cache_size = visual_cache_size
        self._visual_cache: "OrderedDict[bytes, np.ndarray]" = OrderedDict()
        self._cache_lock = threading.Lock()

    @property
    def n_image_tokens(self) -> int:
        return self.config.n_patches

    @property
    def max_context(self) -> int:
        return self.config.max_context

    @classmethod
    def from_checkpoint(cls, path: Path, vocab: Vocabulary) -> "SceneActionModel":
        params, config = load_checkpoint(path, vocab)
        training = read_json(Path(path).with_suffix(".json")).get("training", {})
        return cls(params, config, vocab, no_future_state=bool(training.get("no_future_state", False)))

    def visual_tokens(self, obs: np.ndarray) -> np.ndarray:
        key = hashlib.sha1(np.ascontiguousarray(obs).tobytes()).digest()
        with self._cache_lock:
            cached = self._visual_cache.get(key)
            if cached is not None:
                self._visual_cache.move_to_end(key)
                return cached
        encoded = encode_image(self.params, self.config, obs)
        with self._cache_lock:
            self._visual_cache[key] = encoded
            if self.visual_cache_size is not None:
                while len(self._visual_cache) > self.visual_cache_size:
                    self._visual_cache.popitem(last=False)
        return encoded

    def _spans(self, images: Sequence[Tuple[int, np.ndarray]]) -> List[VisualSpan]:
        return [(start, self.visual_tokens(obs)) for start, obs in images]

    def forward(self, ids: Sequence[int], images: Sequence[Tuple[int, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            logits, hidden = lm_forward(self.params, self.config, ids, self._spans(images))
        return logits.data, hidden.data

    def next_token_logits(self, ids: Sequence[int], images: Sequence[Tuple[int, np.ndarray]]) -> np.ndarray:
        logits, _ = self.forward(ids, images)
        return logits[-1]

    def policy_logits(
        self, ids: Sequence[int], images: Sequence[Tuple[int, np.ndarray]], description_positions: Sequence[int],
    ) -> Tuple[np.ndarray, np.ndarray]:
        _, hidden = self.forward(ids, images)
        with ad.no_grad():
            skill, coords = policy_forward(self.params, Tensor(hidden[list(description_positions)]))
        return skill.data, coords.data
