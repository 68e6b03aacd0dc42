"""Mixture-of-transformer-experts backbone with shared multimodal self-attention.

Two expert parameter sets (understanding / generation) share a single joint
self-attention over the concatenation of all token streams.  Text and
encoder-style visual tokens route to the understanding expert; latent visual
tokens and the noisy target route to the generation expert.  A semantic mask,
when active, biases target-to-reference attention logits in a configurable
band of layers.  The flow head reads the target tokens' final states and
predicts a per-cell velocity in latent space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import bridge, numkit
from .bridge import SemanticMask
from .numkit import DegenerateRowError, Tensor
from .synthworld import Scene, World

MAGIC = b"SCONECKP"
CHECKPOINT_VERSION = 1

MODALITIES = ("text", "vis_und", "vis_gen", "target")
UND_MODALITIES = frozenset({"text", "vis_und"})
GROUPS = ("understanding-expert", "generation-expert", "shared-embeddings", "flow-head")


class ModelError(Exception):
    pass


class ConfigError(ModelError):
    pass


class VocabularyError(ModelError):
    pass


class CapacityError(ModelError):
    pass


class MaskShapeError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    text_vocab: int = 22
    cell_vocab: int = 13
    max_positions: int = 256
    mask_source_layer: int = 2
    masked_layer_lo: int = 3
    masked_layer_hi: int = 5
    ff_mult: int = 2
    n_time_freqs: int = 4

    def __post_init__(self):
        if not (0 <= self.mask_source_layer < self.masked_layer_lo <= self.masked_layer_hi < self.n_layers):
            raise ConfigError(
                "require 0 <= mask_source_layer < masked_layer_lo <= masked_layer_hi < n_layers, got "
                f"{self.mask_source_layer}/{self.masked_layer_lo}/{self.masked_layer_hi}/{self.n_layers}"
            )
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_latent(self) -> int:
        # the toy latent codec is the orthonormal cell-class codebook
        return self.cell_vocab

    @property
    def ff_hidden(self) -> int:
        return self.d_model * self.ff_mult

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenStream:
    modality: str
    vectors: Tensor  # [n, d_model]
    positions: list[int]
    source_image_index: int | None = None
    content_mask: np.ndarray | None = None  # text streams: True where non-sentinel

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ModelError(f"unknown modality {self.modality!r}")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ModelError("positions must be strictly increasing within a stream")

    def __len__(self) -> int:
        return self.vectors.data.shape[0]

    @property
    def expert(self) -> str:
        return "und" if self.modality in UND_MODALITIES else "gen"


@dataclass
class LayerActivations:
    """Post-block hidden states for every layer, with the stream layout."""

    layout: list[tuple[str, int, int, int | None, np.ndarray | None]]  # (modality, lo, hi, image_index, content_mask)
    states: list[np.ndarray] = field(default_factory=list)  # one [N, d] array per layer

    def layer(self, layer: int) -> np.ndarray:
        return self.states[layer]

    def stream_states(self, layer: int, modality: str) -> np.ndarray:
        h = self.states[layer]
        parts = [h[lo:hi] for m, lo, hi, _, _ in self.layout if m == modality]
        if not parts:
            return np.zeros((0, h.shape[1]), dtype=h.dtype)
        return np.concatenate(parts, axis=0)

    def visual_und_states(self, layer: int) -> np.ndarray:
        return self.stream_states(layer, "vis_und")

    def text_content_states(self, layer: int) -> np.ndarray:
        h = self.states[layer]
        parts = []
        for m, lo, hi, _, content in self.layout:
            if m != "text":
                continue
            block = h[lo:hi]
            parts.append(block[content] if content is not None else block)
        if not parts:
            return np.zeros((0, h.shape[1]), dtype=h.dtype)
        return np.concatenate(parts, axis=0)


@dataclass
class ForwardResult:
    activations: LayerActivations
    flow_out: Tensor  # [n_target, d_latent]
    mask: SemanticMask | None
    target_rows: tuple[int, int]
    und_cols: np.ndarray  # indices of reference vis_und tokens
    gen_cols: np.ndarray  # indices of reference vis_gen tokens
    attention: list[list[np.ndarray]] | None = None  # [layer][head] -> [N, N]


# -- parameters --------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.ff_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.text": (cfg.text_vocab, d),
        "embed.cell": (cfg.cell_vocab, d),
        "embed.pos_text": (cfg.max_positions, d),
        "embed.pos_vis": (cfg.max_positions, d),
        "embed.modality": (len(MODALITIES), d),
        "embed.time": (2 * cfg.n_time_freqs, d),
        "connect.gen.in_w": (cfg.d_latent, d),
        "connect.gen.in_b": (d,),
        "final.gen.ln.g": (d,),
        "final.gen.ln.b": (d,),
        "flow.w": (d, cfg.d_latent),
        "flow.b": (cfg.d_latent,),
    }
    for layer in range(cfg.n_layers):
        for e in ("und", "gen"):
            p = f"layer{layer}.{e}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            shapes[p + "attn.wq"] = (d, d)
            shapes[p + "attn.wk"] = (d, d)
            shapes[p + "attn.wv"] = (d, d)
            shapes[p + "attn.wo"] = (d, d)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "ff.w1"] = (d, ff)
            shapes[p + "ff.b1"] = (ff,)
            shapes[p + "ff.w2"] = (ff, d)
            shapes[p + "ff.b2"] = (d,)
    return shapes


def group_of(name: str) -> str:
    if name.startswith("embed."):
        return "shared-embeddings"
    if name.startswith("flow."):
        return "flow-head"
    if ".und." in name:
        return "understanding-expert"
    if ".gen." in name:
        return "generation-expert"
    raise ModelError(f"parameter {name!r} has no group")


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    weights: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln.g") or name.endswith("ln1.g") or name.endswith("ln2.g"):
            data = np.ones(shape)
        elif name.endswith(".b") or name.endswith("ln.b") or name.endswith("ln1.b") or name.endswith("ln2.b") or name.endswith("b1") or name.endswith("b2"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
            if name.endswith("attn.wo") or name.endswith("ff.w2"):
                data *= resid_scale
        weights[name] = Tensor(data.astype(dtype), requires_grad=True)
    return weights


def parameter_groups(weights: dict[str, Tensor]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {g: [] for g in GROUPS}
    for name in weights:
        out[group_of(name)].append(name)
    return out


# -- embeddings --------------------------------------------------------------


def embed_text(tokens: list[int], cfg: ModelConfig, weights: dict[str, Tensor], sentinel_ids=(0, 1)) -> TokenStream:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.text_vocab):
        raise VocabularyError(f"token id out of range for vocab {cfg.text_vocab}")
    if ids.size > cfg.max_positions:
        raise CapacityError(f"{ids.size} text tokens exceed max_positions {cfg.max_positions}")
    n = ids.size
    dtype = weights["embed.text"].dtype
    if n == 0:
        vecs = Tensor(np.zeros((0, cfg.d_model), dtype=dtype))
        return TokenStream("text", vecs, positions=[], content_mask=np.zeros(0, dtype=bool))
    emb = numkit.gather_rows(weights["embed.text"], ids)
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.pos_text"], np.arange(n)))
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.modality"], np.full(n, 0)))
    content = ~np.isin(ids, np.asarray(sentinel_ids))
    return TokenStream("text", emb, positions=list(range(n)), content_mask=content)


def embed_scene_und(
    scene: Scene, cfg: ModelConfig, weights: dict[str, Tensor], world: World, image_index: int = 0
) -> TokenStream:
    classes = world.class_grid(scene).reshape(-1)
    n = classes.size
    if n > cfg.max_positions:
        raise CapacityError(f"scene of {n} cells exceeds max_positions {cfg.max_positions}")
    if classes.size and classes.max() >= cfg.cell_vocab:
        raise VocabularyError("cell class out of range")
    emb = numkit.gather_rows(weights["embed.cell"], classes)
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.pos_vis"], np.arange(n)))
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.modality"], np.full(n, 1)))
    return TokenStream("vis_und", emb, positions=list(range(n)), source_image_index=image_index)


def embed_scene_gen(
    latents: np.ndarray, cfg: ModelConfig, weights: dict[str, Tensor], image_index: int = 0
) -> TokenStream:
    latents = np.asarray(latents)
    n = latents.shape[0]
    if n > cfg.max_positions:
        raise CapacityError(f"{n} latent tokens exceed max_positions {cfg.max_positions}")
    dtype = weights["connect.gen.in_w"].dtype
    x = Tensor(latents.astype(dtype))
    emb = numkit.add(numkit.matmul(x, weights["connect.gen.in_w"]), weights["connect.gen.in_b"])
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.pos_vis"], np.arange(n)))
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.modality"], np.full(n, 2)))
    return TokenStream("vis_gen", emb, positions=list(range(n)), source_image_index=image_index)


def time_features(t: float, n_freqs: int, dtype) -> np.ndarray:
    k = np.arange(n_freqs, dtype=np.float64)
    angles = 2.0 * np.pi * (2.0**k) * float(t)
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(dtype)


def embed_target(
    x_t: np.ndarray, t: float, cfg: ModelConfig, weights: dict[str, Tensor]
) -> TokenStream:
    x_t = np.asarray(x_t)
    n = x_t.shape[0]
    if n > cfg.max_positions:
        raise CapacityError(f"{n} target tokens exceed max_positions {cfg.max_positions}")
    dtype = weights["connect.gen.in_w"].dtype
    x = Tensor(x_t.astype(dtype))
    emb = numkit.add(numkit.matmul(x, weights["connect.gen.in_w"]), weights["connect.gen.in_b"])
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.pos_vis"], np.arange(n)))
    emb = numkit.add(emb, numkit.gather_rows(weights["embed.modality"], np.full(n, 3)))
    tfeat = numkit.matmul(
        Tensor(time_features(t, cfg.n_time_freqs, dtype)[None, :]), weights["embed.time"]
    )
    emb = numkit.add(emb, numkit.reshape(tfeat, (cfg.d_model,)))
    return TokenStream("target", emb, positions=list(range(n)), source_image_index=None)


# -- forward -----------------------------------------------------------------


def _routed_linear(normed: dict[str, Tensor], gates: dict[str, Tensor], weights, name_und, name_gen) -> Tensor:
    out_u = numkit.mul(numkit.matmul(normed["und"], weights[name_und]), gates["und"])
    out_g = numkit.mul(numkit.matmul(normed["gen"], weights[name_gen]), gates["gen"])
    return numkit.add(out_u, out_g)


def forward(
    streams: list[TokenStream],
    mask: SemanticMask | None,
    cfg: ModelConfig,
    weights: dict[str, Tensor],
    *,
    auto_mask_tau: float | None = None,
    capture_attention: bool = False,
    mask_gen_tokens: bool = True,
) -> ForwardResult:
    """Joint self-attention over all streams with per-token expert routing.

    Non-target tokens never attend to target tokens, so conditioning states
    are independent of the noisy target.  When ``auto_mask_tau`` is set and no
    explicit mask is given, the semantic mask is computed on the fly from the
    understanding-expert states at the configured source layer and applied in
    the affected layer band.
    """
    dtype = next(iter(weights.values())).dtype
    layout = []
    lo = 0
    for s in streams:
        layout.append((s.modality, lo, lo + len(s), s.source_image_index, s.content_mask))
        lo += len(s)
    total = lo
    if total > cfg.max_positions:
        raise CapacityError(f"combined length {total} exceeds max_positions {cfg.max_positions}")
    if total == 0:
        raise ModelError("forward: no tokens")

    modality = np.concatenate(
        [np.full(len(s), MODALITIES.index(s.modality)) for s in streams]
    )
    is_target = modality == 3
    und_tokens = (modality == 0) | (modality == 1)
    gate_u = Tensor(und_tokens.astype(dtype)[:, None])
    gate_g = Tensor((~und_tokens).astype(dtype)[:, None])
    gates = {"und": gate_u, "gen": gate_g}

    und_cols = np.nonzero(modality == 1)[0]
    gen_cols = np.nonzero(modality == 2)[0]
    tgt_rows = np.nonzero(is_target)[0]
    target_span = (int(tgt_rows[0]), int(tgt_rows[-1] + 1)) if tgt_rows.size else (total, total)
    if tgt_rows.size and not np.array_equal(tgt_rows, np.arange(target_span[0], target_span[1])):
        raise ModelError("target tokens must form one contiguous stream")

    # structural bias: conditioning tokens never see the noisy target
    struct = np.zeros((total, total), dtype=dtype)
    if tgt_rows.size and tgt_rows.size != total:
        struct[np.ix_(~is_target, is_target)] = -np.inf

    def sem_bias_matrix(m: SemanticMask) -> np.ndarray:
        n_und, n_gen = und_cols.size, gen_cols.size
        if len(m) == n_und:
            und_bias, gen_bias = m.bias, (m.bias if mask_gen_tokens and n_gen == n_und else None)
            if mask_gen_tokens and n_gen and n_gen != n_und:
                raise MaskShapeError(f"mask length {len(m)} cannot cover {n_gen} latent reference tokens")
        elif len(m) == n_und + n_gen:
            und_bias, gen_bias = m.bias[:n_und], m.bias[n_und:]
        else:
            raise MaskShapeError(
                f"mask length {len(m)} does not match reference token counts ({n_und} + {n_gen})"
            )
        if len(m) and not m.visible.any():
            raise DegenerateRowError("semantic mask leaves no reference token visible")
        b = np.zeros((total, total), dtype=dtype)
        if tgt_rows.size:
            if n_und:
                b[np.ix_(is_target, modality == 1)] = und_bias[None, :].astype(dtype)
            if gen_bias is not None and n_gen:
                b[np.ix_(is_target, modality == 2)] = gen_bias[None, :].astype(dtype)
        return b

    sem_bias = sem_bias_matrix(mask) if mask is not None else None

    x = numkit.concat_rows([s.vectors for s in streams])
    acts = LayerActivations(layout=layout)
    attention: list[list[np.ndarray]] | None = [] if capture_attention else None
    n_heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    used_mask = mask

    for layer in range(cfg.n_layers):
        normed = {
            e: numkit.layernorm(x, weights[f"layer{layer}.{e}.ln1.g"], weights[f"layer{layer}.{e}.ln1.b"])
            for e in ("und", "gen")
        }
        q = _routed_linear(normed, gates, weights, f"layer{layer}.und.attn.wq", f"layer{layer}.gen.attn.wq")
        k = _routed_linear(normed, gates, weights, f"layer{layer}.und.attn.wk", f"layer{layer}.gen.attn.wk")
        v = _routed_linear(normed, gates, weights, f"layer{layer}.und.attn.wv", f"layer{layer}.gen.attn.wv")

        bias = struct
        if used_mask is not None and cfg.masked_layer_lo <= layer <= cfg.masked_layer_hi:
            if sem_bias is None:
                sem_bias = sem_bias_matrix(used_mask)
            bias = struct + sem_bias

        heads = []
        layer_attn = [] if capture_attention else None
        for h in range(n_heads):
            qh = numkit.slice_cols(q, h * dh, (h + 1) * dh)
            kh = numkit.slice_cols(k, h * dh, (h + 1) * dh)
            vh = numkit.slice_cols(v, h * dh, (h + 1) * dh)
            logits = numkit.mul(numkit.matmul_nt(qh, kh), inv_sqrt_dh)
            logits = numkit.add(logits, Tensor(bias))
            attn = numkit.softmax_rows(logits)
            if layer_attn is not None:
                layer_attn.append(attn.data.copy())
            heads.append(numkit.matmul(attn, vh))
        ctx = numkit.concat_cols(heads) if len(heads) > 1 else heads[0]
        attn_out = _routed_linear(
            {"und": ctx, "gen": ctx}, gates, weights, f"layer{layer}.und.attn.wo", f"layer{layer}.gen.attn.wo"
        )
        x = numkit.add(x, attn_out)

        normed2 = {
            e: numkit.layernorm(x, weights[f"layer{layer}.{e}.ln2.g"], weights[f"layer{layer}.{e}.ln2.b"])
            for e in ("und", "gen")
        }
        ff_parts = {}
        for e in ("und", "gen"):
            p = f"layer{layer}.{e}."
            hdn = numkit.gelu(numkit.add(numkit.matmul(normed2[e], weights[p + "ff.w1"]), weights[p + "ff.b1"]))
            ff_parts[e] = numkit.add(numkit.matmul(hdn, weights[p + "ff.w2"]), weights[p + "ff.b2"])
        x = numkit.add(x, numkit.add(numkit.mul(ff_parts["und"], gate_u), numkit.mul(ff_parts["gen"], gate_g)))

        acts.states.append(x.data.copy())
        if attention is not None:
            attention.append(layer_attn)

        if (
            layer == cfg.mask_source_layer
            and used_mask is None
            and auto_mask_tau is not None
        ):
            used_mask = bridge.compute_mask_from_activations(acts, cfg, auto_mask_tau)
            # applied from masked_layer_lo (> source layer) onward

    t_lo, t_hi = target_span
    if t_hi > t_lo:
        h_tgt = numkit.slice_rows(x, t_lo, t_hi)
        h_tgt = numkit.layernorm(h_tgt, weights["final.gen.ln.g"], weights["final.gen.ln.b"])
        flow_out = numkit.add(numkit.matmul(h_tgt, weights["flow.w"]), weights["flow.b"])
    else:
        flow_out = Tensor(np.zeros((0, cfg.d_latent), dtype=dtype))
    return ForwardResult(
        activations=acts,
        flow_out=flow_out,
        mask=used_mask,
        target_rows=target_span,
        und_cols=und_cols,
        gen_cols=gen_cols,
        attention=attention,
    )


# -- conditioning assembly ---------------------------------------------------


def condition_streams(
    refs: list[Scene],
    instruction: list[int],
    cfg: ModelConfig,
    weights: dict[str, Tensor],
    world: World,
) -> list[TokenStream]:
    """Text + per-reference understanding and latent streams, in model order."""
    streams = [embed_text(instruction, cfg, weights, sentinel_ids=(world.bos, world.eos))]
    for k, scene in enumerate(refs):
        streams.append(embed_scene_und(scene, cfg, weights, world, image_index=k))
    for k, scene in enumerate(refs):
        streams.append(embed_scene_gen(world.render(scene), cfg, weights, image_index=k))
    return streams


def sample_generate(
    refs: list[Scene],
    instruction: list[int],
    steps: int,
    mask_policy: str,
    cfg: ModelConfig,
    weights: dict[str, Tensor],
    seed: int,
    world: World,
    tau: float = 0.88,
    check_mask_reuse: bool = True,
) -> Scene:
    """Euler-integrate the learned velocity field from Gaussian noise.

    The semantic mask is computed once from the first step's conditioning
    states; conditioning never attends to the target, so it is step-invariant
    (asserted on the last step when ``check_mask_reuse``).
    """
    if steps < 1:
        raise ModelError("sample_generate: steps must be >= 1")
    if mask_policy not in ("active", "off"):
        raise ModelError(f"unknown mask_policy {mask_policy!r}")
    rows, cols = world.grid_size
    n_cells = rows * cols
    rng = np.random.default_rng(seed)
    dtype = next(iter(weights.values())).dtype
    x = rng.standard_normal((n_cells, world.n_classes)).astype(dtype)
    dt = 1.0 / steps
    mask: SemanticMask | None = None
    with numkit.no_grad():
        cond = condition_streams(refs, instruction, cfg, weights, world)
        for step in range(steps):
            t = step * dt
            streams = cond + [embed_target(x, t, cfg, weights)]
            if mask_policy == "active" and mask is None:
                result = forward(streams, None, cfg, weights, auto_mask_tau=tau)
                mask = result.mask
            else:
                result = forward(streams, mask, cfg, weights)
            if (
                mask_policy == "active"
                and check_mask_reuse
                and step == steps - 1
                and steps > 1
            ):
                recomputed = bridge.compute_mask_from_activations(result.activations, cfg, tau)
                assert np.array_equal(recomputed.bias, mask.bias), "semantic mask drifted across sampling steps"
            x = x + dt * result.flow_out.data
    return world.decode(x.astype(np.float64), world.grid_size)


# -- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(weights: dict[str, Tensor], cfg: ModelConfig, path) -> None:
    names = sorted(weights)
    manifest = []
    offset = 0
    for name in names:
        shape = list(weights[name].data.shape)
        size = int(np.prod(shape)) if shape else 1
        manifest.append({"name": name, "shape": shape, "offset": offset, "size": size})
        offset += size * 4
    header = json.dumps({"config": cfg.to_dict(), "params": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(weights[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    version = struct.unpack("<I", blob[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", blob[12:16])[0]
    if len(blob) < 16 + header_len:
        raise CheckpointLengthError("truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"bad header: {e}") from e
    cfg = ModelConfig.from_dict(header["config"])
    payload = blob[16 + header_len :]
    expected = sum(p["size"] for p in header["params"]) * 4
    if len(payload) != expected:
        raise CheckpointLengthError(f"payload length {len(payload)} != manifest total {expected}")
    weights: dict[str, Tensor] = {}
    for p in header["params"]:
        raw = payload[p["offset"] : p["offset"] + p["size"] * 4]
        arr = np.frombuffer(raw, dtype="<f4").reshape(p["shape"]).copy()
        weights[p["name"]] = Tensor(arr, requires_grad=True)
    want = param_shapes(cfg)
    if set(weights) != set(want) or any(weights[n].data.shape != want[n] for n in want):
        raise CheckpointFormatError("parameter manifest does not match the config")
    return weights, cfg
