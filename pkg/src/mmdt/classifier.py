"""Multi-modal (RGB + C + T) transformer with adaptive multi-modal adapters.

The ViT backbone, patch and positional embeddings stay frozen; only the
adapters and the linear classification head are trained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .data import DatasetManifest, manifest_patches
from .disentangler import Disentangler, resize_up
from .errors import ParamError, ShapeError, StateError, TraceError

RGB, C, T = "rgb", "c", "t"
MODALITIES = (RGB, C, T)


@dataclass
class BackboneConfig:
    patch_side: int = 16
    token_dim: int = 768
    depth: int = 12
    heads: int = 12
    ama_hidden: int = 64
    num_classes: int = 2
    mlp_ratio: float = 4.0
    image_side: int = 224
    pretrained_weights: Optional[str] = None

    def validate(self) -> None:
        if self.token_dim % self.heads:
            raise ParamError("token_dim must be divisible by heads")
        if not 0 < self.ama_hidden < self.token_dim:
            raise ParamError("ama_hidden must be positive and below token_dim")
        if self.image_side % self.patch_side:
            raise ParamError("image_side must be a multiple of patch_side")

    @property
    def tokens_per_modality(self) -> int:
        return (self.image_side // self.patch_side) ** 2


def desk_backbone(**overrides) -> BackboneConfig:
    """Small randomly initialized backbone used for CPU-scale experiments."""
    base = dict(token_dim=192, depth=4, heads=3)
    base.update(overrides)
    return BackboneConfig(**base)


@dataclass
class ModalityBundle:
    """Batched inputs, each (B, 3, H, W). ``c_map`` is the upsampled blur-content trace."""

    rgb: torch.Tensor
    c_map: Optional[torch.Tensor] = None
    t_map: Optional[torch.Tensor] = None
    active: tuple = MODALITIES

    def __post_init__(self):
        if RGB not in self.active:
            raise ParamError("RGB must be an active modality")
        unknown = set(self.active) - set(MODALITIES)
        if unknown:
            raise ParamError(f"unknown modalities {sorted(unknown)}")
        self.active = tuple(m for m in MODALITIES if m in self.active)
        for m in self.active:
            x = self.map(m)
            if x is None:
                raise ParamError(f"modality {m!r} active but missing")
            if x.shape != self.rgb.shape:
                raise ShapeError(f"modality {m!r} has shape {tuple(x.shape)}, rgb {tuple(self.rgb.shape)}")

    def map(self, modality: str) -> Optional[torch.Tensor]:
        return {RGB: self.rgb, C: self.c_map, T: self.t_map}[modality]

    @classmethod
    def from_traces(cls, rgb, c, t, active=MODALITIES) -> "ModalityBundle":
        """Build from raw traces; C (B, 3, L, L) is upsampled to the RGB grid."""
        c_map = resize_up(c, rgb.shape[-1]) if c is not None and C in active else None
        return cls(rgb, c_map, t if T in active else None, tuple(active))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer encoder block (timm naming)."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AMA(nn.Module):
    """Adaptive multi-modal adapter.

    Each modality is projected down to ``hidden`` channels; a gate scores the
    pooled features of every modality and the softmax-weighted sum forms a
    cross-modal context that is added back to each stream before a shared
    fusion layer and a zero-initialized up-projection.
    """

    def __init__(self, dim, hidden, modalities=MODALITIES):
        super().__init__()
        self.down = nn.ModuleDict({m: nn.Linear(dim, hidden) for m in modalities})
        self.gate = nn.Linear(hidden, 1)
        self.fuse = nn.Linear(hidden, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def modality_weights(self, hidden_states: dict) -> torch.Tensor:
        scores = torch.cat([self.gate(h.mean(1)) for h in hidden_states.values()], dim=1)
        return scores.softmax(dim=1)

    def forward(self, tokens, spans, return_weights=False):
        _check_spans(tokens, spans)
        hs = {m: F.gelu(self.down[m](tokens[:, s:e])) for m, (s, e) in spans.items()}
        weights = self.modality_weights(hs)
        context = sum(weights[:, i, None, None] * h for i, h in enumerate(hs.values()))
        cls_h = F.gelu(self.down[RGB](tokens[:, :1]))
        pieces = [tokens[:, :1] + self.up(F.gelu(self.fuse(cls_h + context.mean(1, keepdim=True))))]
        for m, (s, e) in spans.items():
            pieces.append(tokens[:, s:e] + self.up(F.gelu(self.fuse(hs[m] + context))))
        out = torch.cat(pieces, dim=1)
        return (out, weights) if return_weights else out


def _check_spans(tokens, spans):
    expected = 1
    for m, (s, e) in spans.items():
        if s != expected or e <= s:
            raise ShapeError(f"span for {m!r} is {(s, e)}, expected to start at {expected}")
        expected = e
    if expected != tokens.shape[1]:
        raise ShapeError(f"spans cover {expected} tokens, sequence has {tokens.shape[1]}")
    lengths = {e - s for s, e in spans.values()}
    if len(lengths) != 1:
        raise ShapeError("every modality must contribute the same number of tokens")


def ama_forward(tokens, spans, ama: AMA, return_weights=False):
    """Residual adapter update; ``spans`` maps modality -> (start, end) after the class token."""
    return ama(tokens, spans, return_weights=return_weights)


class MMDTClassifier(nn.Module):
    def __init__(self, config: BackboneConfig = None, modalities=MODALITIES, initialize=True):
        super().__init__()
        config = config or BackboneConfig()
        config.validate()
        if RGB not in modalities:
            raise ParamError("RGB must be one of the model's modalities")
        self.config = config
        self.modalities = tuple(m for m in MODALITIES if m in modalities)
        dim, p, n = config.token_dim, config.patch_side, config.tokens_per_modality
        self.patch_embed = nn.ModuleDict({m: nn.Conv2d(3, dim, p, stride=p) for m in self.modalities})
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.ParameterDict({RGB: nn.Parameter(torch.zeros(1, n + 1, dim))})
        for m in self.modalities[1:]:
            self.pos_embed[m] = nn.Parameter(torch.zeros(1, n, dim))
        self.blocks = nn.ModuleList([Block(dim, config.heads, config.mlp_ratio) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.adapters = nn.ModuleList([AMA(dim, config.ama_hidden, self.modalities) for _ in range(config.depth)])
        self.head = nn.Linear(dim, config.num_classes)
        self.zero_rgb = False
        self.initialized = False
        if initialize:
            self.reset_backbone()
            if config.pretrained_weights:
                self.load_pretrained(config.pretrained_weights)
        self.freeze_backbone()

    # --- parameters -----------------------------------------------------

    def reset_backbone(self) -> None:
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Linear) and not name.startswith("adapters"):
                nn.init.trunc_normal_(mod.weight, std=0.02)
                nn.init.zeros_(mod.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed[RGB], std=0.02)
        self._copy_rgb_positions()
        self.initialized = True

    def _copy_rgb_positions(self):
        with torch.no_grad():
            for m in self.modalities[1:]:
                self.pos_embed[m].copy_(self.pos_embed[RGB][:, 1:])

    def load_pretrained(self, path) -> None:
        """Load backbone weights stored under timm ViT names (MMDTCKPT archive or torch file).

        ``patch_embed.proj`` and ``pos_embed`` initialize every modality stream.
        """
        path = Path(path)
        if path.read_bytes()[:8] == ckpt.MAGIC:
            tensors, _ = ckpt.load_checkpoint(path)
        else:
            tensors = torch.load(path, map_location="cpu", weights_only=True)
        tensors = {k: torch.as_tensor(np.asarray(v)) if not torch.is_tensor(v) else v for k, v in tensors.items()}
        state = self.state_dict()
        for key in list(state):
            src = key
            for m in self.modalities:
                src = src.replace(f"patch_embed.{m}.", "patch_embed.proj.")
            if key == f"pos_embed.{RGB}":
                src = "pos_embed"
            if src in tensors and not key.startswith(("adapters", "head")):
                state[key] = tensors[src].to(state[key].dtype).reshape(state[key].shape)
        self.load_state_dict(state)
        self._copy_rgb_positions()
        self.initialized = True

    def trainable_prefixes(self):
        return ("adapters.", "head.")

    def freeze_backbone(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(name.startswith(self.trainable_prefixes()))

    def backbone_state(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith(self.trainable_prefixes())}

    def trainable_state(self):
        return {k: v.detach().clone() for k, v in self.state_dict().items() if k.startswith(self.trainable_prefixes())}

    # --- forward ----------------------------------------------------------

    def embed_tokens(self, bundle: ModalityBundle):
        """Token sequence (B, 1 + n * m, D) and the modality spans."""
        self._check_bundle(bundle)
        b = bundle.rgb.shape[0]
        seq = [self.cls_token.expand(b, -1, -1) + self.pos_embed[RGB][:, :1]]
        spans, start = {}, 1
        for m in bundle.active:
            tok = self.patch_embed[m](_normalize(m, bundle.map(m))).flatten(2).transpose(1, 2)
            if m == RGB and self.zero_rgb:
                tok = torch.zeros_like(tok)
            pos = self.pos_embed[m][:, 1:] if m == RGB else self.pos_embed[m]
            seq.append(tok + pos)
            spans[m] = (start, start + tok.shape[1])
            start += tok.shape[1]
        return torch.cat(seq, dim=1), spans

    def _check_bundle(self, bundle):
        if not self.initialized:
            raise StateError("model weights are not initialized")
        missing = set(bundle.active) - set(self.modalities)
        if missing:
            raise ParamError(f"model was built without modalities {sorted(missing)}")
        side = self.config.image_side
        if bundle.rgb.ndim != 4 or bundle.rgb.shape[-2:] != (side, side):
            raise ShapeError(f"expected (B, 3, {side}, {side}) inputs, got {tuple(bundle.rgb.shape)}")

    def forward(self, bundle: ModalityBundle, use_adapters: bool = True) -> torch.Tensor:
        x, spans = self.embed_tokens(bundle)
        for block, ama in zip(self.blocks, self.adapters):
            x = block(x)
            if use_adapters:
                x = ama(x, spans)
        return self.head(self.norm(x[:, 0]))


def _normalize(modality, x):
    # RGB in [0, 1] -> [-1, 1]; traces are already centred on 0
    return x * 2.0 - 1.0 if modality == RGB else x


def classify(bundle: ModalityBundle, model: MMDTClassifier) -> torch.Tensor:
    """Inference probabilities (B, 2): columns are (p_genuine, p_recaptured)."""
    if model is None:
        raise StateError("no model")
    model.eval()
    with torch.no_grad():
        return model(bundle).softmax(dim=-1)


# --- traces ---------------------------------------------------------------


class TraceProvider:
    """Frozen-disentangler traces for batches of patches, with an optional content-hash cache."""

    def __init__(self, disentangler: Optional[Disentangler], batch_size: int = 16, cache_dir=None):
        # disentangler=None serves exported traces from ``cache_dir`` only
        if disentangler is None and cache_dir is None:
            raise ParamError("need a disentangler or a trace cache directory")
        self.model = disentangler.eval() if disentangler is not None else None
        if self.model is not None:
            for p in self.model.parameters():
                p.requires_grad_(False)
        self.batch_size = batch_size
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(patch: torch.Tensor) -> str:
        return hashlib.sha256(patch.detach().to(torch.float32).contiguous().numpy().tobytes()).hexdigest()

    def _compute(self, x):
        if self.model is None:
            raise StateError(f"{len(x)} patch(es) missing from trace cache {self.cache_dir}")
        with torch.no_grad():
            tr = self.model(x.to(memory_format=torch.channels_last))
        return tr.C.contiguous(), tr.T.contiguous()

    def __call__(self, patches: torch.Tensor):
        """(P, 3, N, N) patches -> (C (P, 3, L, L), T (P, 3, N, N))."""
        cs, ts = [], []
        for s in range(0, len(patches), self.batch_size):
            chunk = patches[s:s + self.batch_size]
            if self.cache_dir is None:
                c, t = self._compute(chunk)
            else:
                c, t = self._cached(chunk)
            cs.append(c)
            ts.append(t)
        return torch.cat(cs), torch.cat(ts)

    def _cached(self, chunk):
        keys = [self.key(p) for p in chunk]
        paths = [self.cache_dir / f"{k}.mmdt" for k in keys]
        todo = [i for i, p in enumerate(paths) if not p.exists()]
        if todo:
            c, t = self._compute(chunk[todo])
            for j, i in enumerate(todo):
                ckpt.save_checkpoint({"C": c[j], "T": t[j]}, paths[i])
        cs, ts = [], []
        for p in paths:
            tensors, _ = ckpt.load_checkpoint(p)
            cs.append(torch.from_numpy(tensors["C"]))
            ts.append(torch.from_numpy(tensors["T"]))
        return torch.stack(cs), torch.stack(ts)


def patch_traces(provider, patches: torch.Tensor, refs=None, batch_size: int = 64):
    """Run ``provider`` in chunks, re-raising failures with the offending patch identity."""
    cs, ts = [], []
    for s in range(0, len(patches), batch_size):
        try:
            c, t = provider(patches[s:s + batch_size])
        except Exception as exc:
            ids = refs[s:s + batch_size] if refs is not None else list(range(s, min(s + batch_size, len(patches))))
            raise TraceError(f"trace computation failed for patches {ids}") from exc
        cs.append(c)
        ts.append(t)
    return torch.cat(cs), torch.cat(ts)


# --- fine-tuning ------------------------------------------------------------


@dataclass
class FinetuneConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    active: tuple = MODALITIES

    def validate(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ParamError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ParamError("batch_size, patience must be >= 1 and max_epochs >= 0")


@dataclass
class FinetuneResult:
    model: MMDTClassifier
    history: list = field(default_factory=list)
    best_epoch: int = 0


class PatchSet:
    """Patches of a manifest with their labels and (lazily computed) traces."""

    def __init__(self, manifest: DatasetManifest, provider=None, mode="train", side=224, need_traces=True):
        patches, labels, owners = manifest_patches(manifest, mode, side)
        self.x = torch.from_numpy(patches).permute(0, 3, 1, 2).contiguous()
        self.y = torch.from_numpy(labels)
        self.owners = owners
        self.refs = [f"{manifest.entries[o].image_ref}#{i}" for i, o in enumerate(owners)]
        self.c = self.t = None
        if need_traces:
            if provider is None:
                raise ParamError("a trace provider is required for trace modalities")
            self.c, self.t = patch_traces(provider, self.x, self.refs)

    def __len__(self):
        return len(self.y)

    def bundle(self, idx, active) -> ModalityBundle:
        c = self.c[idx] if self.c is not None and C in active else None
        t = self.t[idx] if self.t is not None and T in active else None
        return ModalityBundle.from_traces(self.x[idx], c, t, active)


def predict_proba(model: MMDTClassifier, data: PatchSet, active, batch_size: int = 32) -> torch.Tensor:
    out = []
    for s in range(0, len(data), batch_size):
        idx = torch.arange(s, min(s + batch_size, len(data)))
        out.append(classify(data.bundle(idx, active), model))
    return torch.cat(out)


def accuracy(model, data: PatchSet, active) -> float:
    probs = predict_proba(model, data, active)
    return float((probs.argmax(1) == data.y).float().mean())


def finetune(model: MMDTClassifier, train_manifest, traces_provider, config: FinetuneConfig = None,
             val_manifest=None, log=None) -> FinetuneResult:
    """Cross-entropy fine-tuning of the adapters and head only.

    Model selection and early stopping use validation accuracy when
    ``val_manifest`` is given, otherwise training accuracy.
    """
    config = config or FinetuneConfig()
    config.validate()
    active = tuple(m for m in MODALITIES if m in config.active)
    need_traces = any(m in active for m in (C, T))
    side = model.config.image_side
    train_set = train_manifest if isinstance(train_manifest, PatchSet) else PatchSet(
        train_manifest, traces_provider, "train", side, need_traces)
    val_set = None
    if val_manifest is not None:
        val_set = val_manifest if isinstance(val_manifest, PatchSet) else PatchSet(
            val_manifest, traces_provider, "train", side, need_traces)

    model.freeze_backbone()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    result = FinetuneResult(model)
    best_acc, best_state, stale = -1.0, model.trainable_state(), 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = torch.randperm(len(train_set), generator=gen)
        total, seen = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = model(train_set.bundle(idx, active))
            loss = F.cross_entropy(logits, train_set.y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        train_acc = accuracy(model, train_set, active)
        val_acc = accuracy(model, val_set, active) if val_set is not None else None
        score = val_acc if val_acc is not None else train_acc
        record = {"epoch": epoch, "loss": total / max(seen, 1), "train_acc": train_acc, "val_acc": val_acc}
        result.history.append(record)
        if log is not None:
            log(record)
        if score > best_acc:
            best_acc, best_state, stale, result.best_epoch = score, model.trainable_state(), 0, epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state, strict=False)
    model.eval()
    return result


# --- persistence ---------------------------------------------------------------


def save_classifier(model: MMDTClassifier, path, provenance: str = "") -> None:
    meta = {
        "kind": "mmdt_classifier",
        "config": json.dumps(asdict(model.config)),
        "modalities": ",".join(model.modalities),
        "provenance": provenance,
    }
    ckpt.save_checkpoint(ckpt.module_tensors(model), path, meta)


def load_classifier(path) -> MMDTClassifier:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "mmdt_classifier":
        raise StateError(f"{path} is not a classifier checkpoint")
    cfg = BackboneConfig(**json.loads(meta["config"]))
    cfg.pretrained_weights = None
    model = MMDTClassifier(cfg, tuple(meta["modalities"].split(",")), initialize=False)
    ckpt.load_module(model, tensors)
    model.initialized = True
    return model.eval()


def checksum(state: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().contiguous().numpy().tobytes())
    return h.hexdigest()
