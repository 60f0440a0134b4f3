"""Gated attention MIL network with two Gleason-pattern heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grading import GleasonPattern, GleasonScore, correct_pattern_pair

PROJ_DIM = 1000
ATTN_IN_DIM = 512
ATTN_HIDDEN_DIM = 384
HEAD_HIDDEN_DIM = 256
N_PATTERNS = 4
DROPOUT_P = 0.2
ENCODER_MODES = ("frozen_file", "trainable_toy")

CHECKPOINT_MAGIC = b"GCK1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    mode: str = "frozen_file"
    embed_dim: int = 64

    def __post_init__(self):
        if self.mode not in ENCODER_MODES:
            raise ModelError(f"encoder mode must be one of {ENCODER_MODES}, got {self.mode!r}")
        if self.embed_dim <= 0:
            raise ModelError("embed_dim must be positive")


@dataclass
class SlideForward:
    attention: torch.Tensor  # (N,)
    slide_vec: torch.Tensor  # (512,)
    logits_primary: torch.Tensor  # (4,)
    logits_secondary: torch.Tensor  # (4,)

    @property
    def probs_primary(self) -> torch.Tensor:
        return torch.softmax(self.logits_primary, dim=-1)

    @property
    def probs_secondary(self) -> torch.Tensor:
        return torch.softmax(self.logits_secondary, dim=-1)


class ToyEncoder(nn.Module):
    """Two 3x3 convolutions, global average pooling and an affine map."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.fc = nn.Linear(16, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.fc(x.mean(dim=(2, 3)))


def _dropout(x: torch.Tensor, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= DROPOUT_P
    return x * keep / (1.0 - DROPOUT_P)


class GatedAbmil(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.encoder = ToyEncoder(spec.embed_dim) if spec.mode == "trainable_toy" else None
        self.proj = nn.Linear(spec.embed_dim, PROJ_DIM)
        self.attn_pre = nn.Linear(PROJ_DIM, ATTN_IN_DIM)
        self.attn_tanh = nn.Linear(ATTN_IN_DIM, ATTN_HIDDEN_DIM)
        self.attn_sigm = nn.Linear(ATTN_IN_DIM, ATTN_HIDDEN_DIM)
        self.attn_w = nn.Linear(ATTN_HIDDEN_DIM, 1)
        self.head_hidden = nn.Linear(ATTN_IN_DIM, HEAD_HIDDEN_DIM)
        self.head_primary = nn.Linear(HEAD_HIDDEN_DIM, N_PATTERNS)
        self.head_secondary = nn.Linear(HEAD_HIDDEN_DIM, N_PATTERNS)

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.weight.dtype

    def prepare(self, bag) -> torch.Tensor:
        """Convert a bag to a model-dtype tensor.

        Toy mode takes uint8 patches (N, H, W, 3); frozen mode takes
        embeddings (N, embed_dim).
        """
        if isinstance(bag, torch.Tensor) and bag.dtype == self.dtype:
            x = bag
        else:
            arr = np.asarray(bag)
            if self.encoder is not None:
                if arr.ndim != 4 or arr.shape[-1] != 3:
                    raise ModelError(f"toy encoder expects (N, H, W, 3) patches, got {arr.shape}")
                x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype) / 255.0
            else:
                x = torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype)
        if x.shape[0] == 0:
            raise ModelError("empty bag")
        if self.encoder is None and (x.ndim != 2 or x.shape[1] != self.spec.embed_dim):
            raise ModelError(f"expected embeddings of shape (N, {self.spec.embed_dim}), got {tuple(x.shape)}")
        if self.encoder is not None and (x.ndim != 4 or x.shape[1] != 3):
            raise ModelError(f"expected patches of shape (N, 3, H, W), got {tuple(x.shape)}")
        return x

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x) if self.encoder is not None else x

    def instance_features(self, x: torch.Tensor, gen: torch.Generator | None = None) -> torch.Tensor:
        return self._project(self.embed(x), gen)

    def _project(self, e: torch.Tensor, gen: torch.Generator | None) -> torch.Tensor:
        return _dropout(self.attn_pre(self.proj(_dropout(e, gen))), gen)

    def heads(self, v: torch.Tensor, gen: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        z = _dropout(F.relu(self.head_hidden(v)), gen)
        return self.head_primary(z), self.head_secondary(z)

    def aggregate(self, e: torch.Tensor, gen: torch.Generator | None = None) -> SlideForward:
        """Gated attention pooling and classification from encoder outputs ``e`` (N, embed_dim)."""
        u = self._project(e, gen)
        gate = _dropout(torch.tanh(self.attn_tanh(u)), gen) * _dropout(torch.sigmoid(self.attn_sigm(u)), gen)
        attention = torch.softmax(self.attn_w(gate)[:, 0], dim=0)
        slide_vec = (attention[:, None] * u).sum(dim=0)
        lp, ls = self.heads(slide_vec[None], gen)
        return SlideForward(attention, slide_vec, lp[0], ls[0])

    def forward_slide(self, bag, dropout_active: bool = False, rng_seed: int = 0) -> SlideForward:
        gen = torch.Generator().manual_seed(int(rng_seed)) if dropout_active else None
        return self.aggregate(self.embed(self.prepare(bag)), gen)

    forward = forward_slide

    def forward_patches(self, bag, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Per-patch pattern probabilities, bypassing attention pooling."""
        x = self.prepare(bag)
        prim, sec = [], []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                u = self.instance_features(x[start : start + batch_size])
                lp, ls = self.heads(u)
                prim.append(torch.softmax(lp, dim=-1))
                sec.append(torch.softmax(ls, dim=-1))
        return torch.cat(prim).numpy(), torch.cat(sec).numpy()

    def encode_batched(self, bag, batch_size: int = 64) -> torch.Tensor:
        """Encoder outputs computed in fixed-size chunks (inference only)."""
        x = self.prepare(bag)
        if self.encoder is None:
            return x
        with torch.no_grad():
            return torch.cat([self.encoder(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def init_params(spec: EncoderSpec, seed: int) -> GatedAbmil:
    """Xavier-uniform weights and zero biases, deterministic per seed."""
    model = GatedAbmil(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                nn.init.xavier_uniform_(p, generator=gen)
    return model


def forward_patch(model: GatedAbmil, item) -> tuple[np.ndarray, np.ndarray]:
    """Pattern probabilities of one patch (or embedding): the singleton-bag forward."""
    with torch.no_grad():
        fwd = model.forward_slide(np.asarray(item)[None])
    return fwd.probs_primary.numpy(), fwd.probs_secondary.numpy()


def predict_patterns(fwd: SlideForward) -> GleasonScore:
    """Argmax of each head (ties to the lower code) followed by pattern correction."""
    p = int(np.argmax(fwd.logits_primary.detach().cpu().numpy()))
    s = int(np.argmax(fwd.logits_secondary.detach().cpu().numpy()))
    return correct_pattern_pair(GleasonPattern(p), GleasonPattern(s))


# -- checkpoints ---------------------------------------------------------------


def encode_checkpoint(model: GatedAbmil, meta: dict | None = None) -> bytes:
    state = model.state_dict()
    table = [[name, list(t.shape)] for name, t in state.items()]
    header = json.dumps(
        {"encoder": asdict(model.spec), "meta": meta or {}, "tensors": table}, sort_keys=True
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header)), header]
    for t in state.values():
        parts.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[GatedAbmil, dict]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ModelError("not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    offset = 10
    header = json.loads(data[offset : offset + hlen])
    offset += hlen
    model = GatedAbmil(EncoderSpec(**header["encoder"]))
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    state = {}
    for name, shape in header["tensors"]:
        if expected.get(name) != shape:
            raise ModelError(f"checkpoint tensor {name} has shape {shape}, model expects {expected.get(name)}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset += 4 * n
    if offset != len(data):
        raise ModelError("trailing bytes in checkpoint")
    model.load_state_dict(state)
    return model, header["meta"]


def save_checkpoint(path, model: GatedAbmil, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def load_checkpoint(path) -> tuple[GatedAbmil, dict]:
    return decode_checkpoint(Path(path).read_bytes())
