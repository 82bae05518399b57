"""Transformer autoencoder for tomography from imperfect measurement data.

Tokens are detector groups: each unmasked group embeds its frequencies plus
its flattened operators; masked groups are represented after encoding by
operator-only remedy tokens, restoring the full token count. A lightweight
frequency decoder (pre-training head) predicts true probabilities, and a
deeper state decoder predicts the Cholesky vector nu or a property vector mu.
"""

import struct
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .measurements import MeasurementSet, measurement_set
from .nnops import kaiming_uniform_

CHECKPOINT_MAGIC = b"QSTC"
CHECKPOINT_VERSION = 1
_SCHEME_TAGS = {"cube": 0, "nn": 1}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_TAGS.items()}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-scale sizes."""

    n_qubits: int
    scheme: str = "cube"
    embed_size: int = 256
    encoder_layers: int = 8
    heads: int = 16
    head_dim: int = 32
    ffn_hidden: int = 256
    freq_decoder_layers: int = 1
    state_decoder_layers_nu: int = 4
    state_decoder_layers_mu: int = 1
    group_size: int = 0  # 0: infer from scheme
    n_groups: int = 0
    k_properties: int = 3
    use_operator_embedding: bool = True

    def __post_init__(self):
        if self.group_size == 0 or self.n_groups == 0:
            ms = measurement_set(self.scheme, self.n_qubits)
            object.__setattr__(self, "group_size", ms.group_size)
            object.__setattr__(self, "n_groups", ms.n_groups)
        for name, value in asdict(self).items():
            if name not in ("scheme", "use_operator_embedding") and int(value) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {value}")

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    @property
    def n_operators(self) -> int:
        return self.n_groups * self.group_size

    @property
    def operator_width(self) -> int:
        # One token's worth of flattened operators: group_size rows of 2 d^2.
        return self.group_size * 2 * self.dim**2

    @property
    def attention_width(self) -> int:
        return self.heads * self.head_dim


def desk_config(n_qubits: int, scheme: str = "cube", **overrides) -> ModelConfig:
    """Reduced architecture for CPU-budget experiments; same topology."""
    base = dict(
        embed_size=96, encoder_layers=3, heads=6, head_dim=16, ffn_hidden=96
    )
    base.update(overrides)
    return ModelConfig(n_qubits=n_qubits, scheme=scheme, **base)


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> nn.Linear:
    kaiming_uniform_(layer.weight, generator=generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class SelfAttention(nn.Module):
    """Multi-head self-attention with projections to/from the token width."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        inner = cfg.attention_width
        self.q_proj = nn.Linear(cfg.embed_size, inner)
        self.k_proj = nn.Linear(cfg.embed_size, inner)
        self.v_proj = nn.Linear(cfg.embed_size, inner)
        self.out_proj = nn.Linear(inner, cfg.embed_size)

    def forward(self, x):
        b, g, _ = x.shape

        def split(t):
            return t.view(b, g, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, g, -1)
        return self.out_proj(out)


class TransformerLayer(nn.Module):
    """Pre-norm residual block: attention then GELU feedforward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_size)
        self.attn = SelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_size)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.embed_size, cfg.ffn_hidden),
            nn.GELU(),
            nn.Linear(cfg.ffn_hidden, cfg.embed_size),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _stack(cfg: ModelConfig, n_layers: int) -> nn.ModuleList:
    return nn.ModuleList(TransformerLayer(cfg) for _ in range(n_layers))


class ILRModel(nn.Module):
    """Encoder + remedy tokens + frequency and state decoders."""

    def __init__(self, config: ModelConfig, ms: MeasurementSet, seed: int = 1):
        super().__init__()
        if (ms.n_groups, ms.group_size) != (config.n_groups, config.group_size):
            raise ValueError("measurement set does not match model config")
        self.config = config
        cfg = config

        self.freq_embed = nn.Linear(cfg.group_size, cfg.embed_size)
        if cfg.use_operator_embedding:
            self.op_embed = nn.Linear(cfg.operator_width, cfg.embed_size, bias=False)
            self.remedy_embed = nn.Linear(cfg.operator_width, cfg.embed_size, bias=False)
        else:
            # Without operator information, masked groups share one token.
            self.mask_token = nn.Parameter(torch.zeros(cfg.embed_size))
        self.encoder = _stack(cfg, cfg.encoder_layers)

        # Pre-norm stacks leave the residual stream unnormalized, so each
        # decoder applies a final LayerNorm before its output head.
        self.freq_decoder = _stack(cfg, cfg.freq_decoder_layers)
        self.freq_norm = nn.LayerNorm(cfg.embed_size)
        self.freq_head = nn.Linear(cfg.embed_size, cfg.group_size)
        self.state_decoder_nu = _stack(cfg, cfg.state_decoder_layers_nu)
        self.nu_norm = nn.LayerNorm(cfg.embed_size)
        self.nu_head = nn.Linear(cfg.n_groups * cfg.embed_size, cfg.dim**2)
        self.state_decoder_mu = _stack(cfg, cfg.state_decoder_layers_mu)
        self.mu_norm = nn.LayerNorm(cfg.embed_size)
        self.mu_head = nn.Linear(cfg.n_groups * cfg.embed_size, cfg.k_properties)

        # Per-group flattened operators, fixed by the measurement set.
        op_groups = torch.tensor(
            ms.operator_matrix.reshape(cfg.n_groups, cfg.operator_width),
            dtype=torch.get_default_dtype(),
        )
        self.register_buffer("op_groups", op_groups)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _init_linear(module, gen)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        if not self.config.use_operator_embedding:
            with torch.no_grad():
                bound = 1.0 / self.config.embed_size**0.5
                self.mask_token.uniform_(-bound, bound, generator=gen)

    # -- parameter groups ---------------------------------------------------

    def encoder_parameters(self):
        mods = [self.freq_embed, self.encoder]
        if self.config.use_operator_embedding:
            mods += [self.op_embed, self.remedy_embed]
        params = [p for m in mods for p in m.parameters()]
        if not self.config.use_operator_embedding:
            params.append(self.mask_token)
        return params

    def freq_decoder_parameters(self):
        return list(self.freq_decoder.parameters()) + list(self.freq_head.parameters())

    def state_decoder_parameters(self, target: str):
        if target == "nu":
            mods = [self.state_decoder_nu, self.nu_head]
        elif target == "mu":
            mods = [self.state_decoder_mu, self.mu_head]
        else:
            raise ValueError(f"target must be 'nu' or 'mu', got {target!r}")
        return [p for m in mods for p in m.parameters()]

    # -- forward pieces -----------------------------------------------------

    def embed_tokens(self, f_groups: torch.Tensor, keep_idx: torch.Tensor):
        """Tokens for unmasked groups.

        f_groups: (B, G, group_size) frequencies of the surviving groups in
        canonical order; keep_idx: (B, G) their group indices.
        """
        if f_groups.shape[-1] != self.config.group_size:
            raise ValueError(
                f"group width {f_groups.shape[-1]} != {self.config.group_size}"
            )
        tokens = self.freq_embed(f_groups)
        if self.config.use_operator_embedding:
            op_tokens = self.op_embed(self.op_groups)  # (G_total, L)
            tokens = tokens + op_tokens[keep_idx]
        return tokens

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        for layer in self.encoder:
            tokens = layer(tokens)
        return tokens

    def insert_remedy_tokens(self, latent, keep_idx, mask_idx):
        """Scatter encoder outputs and remedy tokens back to canonical order.

        Returns (B, G_total, L). Remedy tokens depend only on the masked
        groups' operators (or the shared mask token), never on frequencies.
        """
        b = latent.shape[0]
        cfg = self.config
        full = latent.new_zeros(b, cfg.n_groups, cfg.embed_size).scatter(
            1, keep_idx.unsqueeze(-1).expand(-1, -1, cfg.embed_size), latent
        )
        if mask_idx.shape[1]:
            if cfg.use_operator_embedding:
                remedy = self.remedy_embed(self.op_groups)[mask_idx]
            else:
                remedy = self.mask_token.expand(b, mask_idx.shape[1], cfg.embed_size)
            full = full.scatter(
                1, mask_idx.unsqueeze(-1).expand(-1, -1, cfg.embed_size), remedy
            )
        return full

    def decode_frequencies(self, full_latent: torch.Tensor) -> torch.Tensor:
        """Predicted probabilities (B, M), softmax-normalized per group."""
        x = full_latent
        for layer in self.freq_decoder:
            x = layer(x)
        logits = self.freq_head(self.freq_norm(x))  # (B, G_total, group_size)
        probs = torch.softmax(logits, dim=-1)
        return probs.reshape(x.shape[0], self.config.n_operators)

    def decode_state(self, full_latent: torch.Tensor, target: str) -> torch.Tensor:
        """nu-hat (B, d^2) or mu-hat (B, k) from the full latent."""
        x = full_latent
        stack = self.state_decoder_nu if target == "nu" else self.state_decoder_mu
        head = self.nu_head if target == "nu" else self.mu_head
        if target not in ("nu", "mu"):
            raise ValueError(f"target must be 'nu' or 'mu', got {target!r}")
        norm = self.nu_norm if target == "nu" else self.mu_norm
        for layer in stack:
            x = layer(x)
        x = norm(x)
        return head(x.reshape(x.shape[0], -1))

    def forward(self, f_groups, keep_idx, mask_idx, target: str = "nu"):
        latent = self.encode(self.embed_tokens(f_groups, keep_idx))
        full = self.insert_remedy_tokens(latent, keep_idx, mask_idx)
        if target == "p":
            return self.decode_frequencies(full)
        return self.decode_state(full, target)


# -- checkpoint serialization ----------------------------------------------

_CONFIG_FIELDS = (
    "n_qubits",
    "embed_size",
    "encoder_layers",
    "heads",
    "head_dim",
    "ffn_hidden",
    "freq_decoder_layers",
    "state_decoder_layers_nu",
    "state_decoder_layers_mu",
    "group_size",
    "n_groups",
    "k_properties",
)


def save_checkpoint(model: ILRModel, path):
    """Binary little-endian checkpoint; float32 data, bit-exact round trip."""
    cfg = model.config
    params = [(name, p) for name, p in model.named_parameters()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", _SCHEME_TAGS[cfg.scheme]))
        fh.write(struct.pack("<I", int(cfg.use_operator_embedding)))
        for fname in _CONFIG_FIELDS:
            fh.write(struct.pack("<I", getattr(cfg, fname)))
        fh.write(struct.pack("<Q", len(params)))
        for name, p in params:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.dim()))
            for dim in p.shape:
                fh.write(struct.pack("<I", dim))
            data = p.detach().to(torch.float32).contiguous().numpy()
            fh.write(data.astype("<f4").tobytes())


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, ms: MeasurementSet = None) -> ILRModel:
    """Rebuild a model from a QSTC file; measurement set is re-derived."""
    import numpy as np

    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a QSTC checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (scheme_tag,) = struct.unpack("<I", fh.read(4))
        (use_oe,) = struct.unpack("<I", fh.read(4))
        values = {f: struct.unpack("<I", fh.read(4))[0] for f in _CONFIG_FIELDS}
        cfg = ModelConfig(
            scheme=_SCHEME_NAMES[scheme_tag],
            use_operator_embedding=bool(use_oe),
            **values,
        )
        if ms is None:
            ms = measurement_set(cfg.scheme, cfg.n_qubits)
        model = ILRModel(cfg, ms)
        (n_params,) = struct.unpack("<Q", fh.read(8))
        state = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            count = 1
            for dim in shape:
                count *= dim
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(data.copy())
    missing = model.load_state_dict(state, strict=False)
    unexpected_params = [k for k in missing.missing_keys if "op_groups" not in k]
    if unexpected_params or missing.unexpected_keys:
        raise CheckpointError(
            f"checkpoint/model mismatch: missing={unexpected_params}, "
            f"unexpected={missing.unexpected_keys}"
        )
    return model
