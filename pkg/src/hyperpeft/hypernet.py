"""Conditioning embeddings and weight-generator heads.

A single network owns three embedding tables (task, layer, insertion
position), a two-layer projector that fuses them into one conditioning
vector, and affine generator heads that map that vector to the flat
parameter tensors of adapters, conditional layer norms and LoRA pairs.
The heads are shared across every transformer layer and every task;
which layer and task a generated tensor serves is carried entirely by
the conditioning vector. Adapter and layer-norm heads exist once per
adapter insertion position; the LoRA heads are shared between self- and
cross-attention and emit the query and value pairs side by side.

Everything here is an ``nn.Module`` so gradients reach the embeddings,
the projector and the heads through the generated weights.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .errors import ConfigError, ContractViolationError


class PositionId(enum.IntEnum):
    """The six insertion-site identities of the position embedding."""

    ADAPTER_AFTER_SELF_ATTN = 0
    ADAPTER_AFTER_FFN = 1
    LORA_A_SELF_ATTN = 2
    LORA_B_SELF_ATTN = 3
    LORA_A_CROSS_ATTN = 4
    LORA_B_CROSS_ATTN = 5


ADAPTER_POSITIONS = (PositionId.ADAPTER_AFTER_SELF_ATTN, PositionId.ADAPTER_AFTER_FFN)
LORA_A_POSITIONS = (PositionId.LORA_A_SELF_ATTN, PositionId.LORA_A_CROSS_ATTN)
LORA_PAIRS = {
    PositionId.LORA_A_SELF_ATTN: PositionId.LORA_B_SELF_ATTN,
    PositionId.LORA_A_CROSS_ATTN: PositionId.LORA_B_CROSS_ATTN,
}


class ConditioningInput(NamedTuple):
    task_index: int
    layer_index: int
    position: PositionId


@dataclass(frozen=True)
class HypernetConfig:
    n_tasks: int
    n_layers: int  # encoder blocks + decoder blocks, one shared index space
    host_hidden: int
    d_task: int = 512
    d_layer_pos: int = 64
    d_cond: int = 64
    d_proj_hidden: int = 64
    reduction_factor: int = 32
    lora_rank: int = 8

    def __post_init__(self):
        for name in ("n_tasks", "n_layers", "host_hidden", "d_task",
                     "d_layer_pos", "d_cond", "d_proj_hidden",
                     "reduction_factor", "lora_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.host_hidden % self.reduction_factor != 0:
            raise ConfigError(
                f"host_hidden={self.host_hidden} not divisible by "
                f"reduction_factor={self.reduction_factor}"
            )

    @property
    def bottleneck(self) -> int:
        return self.host_hidden // self.reduction_factor

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HypernetConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class AdapterParams:
    """Bottleneck projections: ``down`` maps h->d, ``up`` maps d->h."""

    down: Tensor  # (d, h)
    up: Tensor    # (h, d)


@dataclass(frozen=True)
class LayerNormParams:
    gamma: Tensor  # (h,)
    beta: Tensor   # (h,)


@dataclass(frozen=True)
class LoraParams:
    """Rank-r factors for the query and value projections of one attention."""

    a_query: Tensor  # (r, k)
    b_query: Tensor  # (d_out, r)
    a_value: Tensor  # (r, k)
    b_value: Tensor  # (d_out, r)


class Hypernetwork(nn.Module):

    def __init__(self, config: HypernetConfig,
                 enable_adapters: bool = True, enable_lora: bool = True):
        super().__init__()
        if not (enable_adapters or enable_lora):
            raise ConfigError("at least one of adapters/LoRA must be enabled")
        self.config = config
        self.enable_adapters = enable_adapters
        self.enable_lora = enable_lora
        h, d, r = config.host_hidden, config.bottleneck, config.lora_rank

        self.task_embedding = nn.Embedding(config.n_tasks, config.d_task)
        self.layer_embedding = nn.Embedding(config.n_layers, config.d_layer_pos)
        self.position_embedding = nn.Embedding(len(PositionId), config.d_layer_pos)
        concat = config.d_task + 2 * config.d_layer_pos
        self.projector = nn.Sequential(
            nn.Linear(concat, config.d_proj_hidden),
            nn.GELU(),
            nn.Linear(config.d_proj_hidden, config.d_cond),
        )

        if enable_adapters:
            self.adapter_down_heads = nn.ModuleDict(
                {p.name: nn.Linear(config.d_cond, d * h) for p in ADAPTER_POSITIONS})
            self.adapter_up_heads = nn.ModuleDict(
                {p.name: nn.Linear(config.d_cond, h * d) for p in ADAPTER_POSITIONS})
            self.layer_norm_heads = nn.ModuleDict(
                {p.name: nn.Linear(config.d_cond, 2 * h) for p in ADAPTER_POSITIONS})
        if enable_lora:
            # doubled width: query pair then value pair
            self.lora_a_head = nn.Linear(config.d_cond, 2 * r * h)
            self.lora_b_head = nn.Linear(config.d_cond, 2 * h * r)

        self._init_parameters()

    def _init_parameters(self) -> None:
        cfg = self.config
        h = cfg.host_hidden
        for emb in (self.task_embedding, self.layer_embedding, self.position_embedding):
            nn.init.normal_(emb.weight, std=0.01)
        for module in self.projector:
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=0.01)
                nn.init.zeros_(module.bias)
        if self.enable_adapters:
            for head in self.adapter_down_heads.values():
                # bias carries the initial down-projection at a sane fan-in scale
                nn.init.normal_(head.weight, std=0.01)
                nn.init.normal_(head.bias, std=h ** -0.5)
            for head in self.adapter_up_heads.values():
                # near-zero so fresh adapters are close to the identity
                nn.init.normal_(head.weight, std=1e-4)
                nn.init.zeros_(head.bias)
            for head in self.layer_norm_heads.values():
                nn.init.normal_(head.weight, std=0.01)
                with torch.no_grad():
                    head.bias[:h].fill_(1.0)  # gamma
                    head.bias[h:].zero_()     # beta
        if self.enable_lora:
            nn.init.normal_(self.lora_a_head.weight, std=0.01)
            nn.init.normal_(self.lora_a_head.bias, std=h ** -0.5)
            # zero B keeps the initial low-rank update the zero function
            nn.init.zeros_(self.lora_b_head.weight)
            nn.init.zeros_(self.lora_b_head.bias)

    # -- conditioning -------------------------------------------------------

    def _check_indices(self, c: ConditioningInput) -> None:
        if not 0 <= c.task_index < self.config.n_tasks:
            raise IndexError(f"task_index {c.task_index} outside [0, {self.config.n_tasks})")
        if not 0 <= c.layer_index < self.config.n_layers:
            raise IndexError(f"layer_index {c.layer_index} outside [0, {self.config.n_layers})")
        if not 0 <= int(c.position) < len(PositionId):
            raise IndexError(f"position {c.position} outside the six insertion sites")

    def conditioning_embedding(self, c: ConditioningInput) -> Tensor:
        """Fuse (task, layer, position) into one d_cond conditioning vector."""
        self._check_indices(c)
        device = self.task_embedding.weight.device
        z = self.task_embedding(torch.tensor(c.task_index, device=device))
        l = self.layer_embedding(torch.tensor(c.layer_index, device=device))
        p = self.position_embedding(torch.tensor(int(c.position), device=device))
        return self.projector(torch.cat([z, l, p], dim=-1))

    def conditioning_batch(self, inputs: "list[ConditioningInput]") -> Tensor:
        """Conditioning vectors for many sites in one pass, shape (N, d_cond)."""
        for c in inputs:
            self._check_indices(c)
        device = self.task_embedding.weight.device
        tasks = torch.tensor([c.task_index for c in inputs], device=device)
        layers = torch.tensor([c.layer_index for c in inputs], device=device)
        positions = torch.tensor([int(c.position) for c in inputs], device=device)
        fused = torch.cat(
            [self.task_embedding(tasks), self.layer_embedding(layers),
             self.position_embedding(positions)],
            dim=-1,
        )
        return self.projector(fused)

    # -- generators ---------------------------------------------------------

    def generate_adapter(self, c: ConditioningInput) -> AdapterParams:
        if not self.enable_adapters:
            raise ContractViolationError("adapter generation is disabled")
        if c.position not in ADAPTER_POSITIONS:
            raise ContractViolationError(f"{c.position.name} is not an adapter position")
        cfg = self.config
        cond = self.conditioning_embedding(c)
        down = self.adapter_down_heads[c.position.name](cond)
        up = self.adapter_up_heads[c.position.name](cond)
        return AdapterParams(
            down=down.view(cfg.bottleneck, cfg.host_hidden),
            up=up.view(cfg.host_hidden, cfg.bottleneck),
        )

    def generate_layernorm(self, c: ConditioningInput) -> LayerNormParams:
        if not self.enable_adapters:
            raise ContractViolationError("layer-norm generation is disabled")
        if c.position not in ADAPTER_POSITIONS:
            raise ContractViolationError(f"{c.position.name} is not an adapter position")
        h = self.config.host_hidden
        out = self.layer_norm_heads[c.position.name](self.conditioning_embedding(c))
        return LayerNormParams(gamma=out[:h], beta=out[h:])

    def generate_lora(self, c_a: ConditioningInput, c_b: ConditioningInput) -> LoraParams:
        if not self.enable_lora:
            raise ContractViolationError("LoRA generation is disabled")
        if c_a.position not in LORA_A_POSITIONS:
            raise ContractViolationError(f"{c_a.position.name} is not a LoRA A position")
        if c_b.position != LORA_PAIRS[c_a.position]:
            raise ContractViolationError(
                f"{c_b.position.name} does not pair with {c_a.position.name}"
            )
        if (c_a.task_index, c_a.layer_index) != (c_b.task_index, c_b.layer_index):
            raise ContractViolationError("LoRA A/B conditioning must share task and layer")
        cfg = self.config
        h, r = cfg.host_hidden, cfg.lora_rank
        a_flat = self.lora_a_head(self.conditioning_embedding(c_a))
        b_flat = self.lora_b_head(self.conditioning_embedding(c_b))
        a_q, a_v = a_flat[: r * h], a_flat[r * h:]
        b_q, b_v = b_flat[: h * r], b_flat[h * r:]
        return LoraParams(
            a_query=a_q.view(r, h),
            b_query=b_q.view(h, r),
            a_value=a_v.view(r, h),
            b_value=b_v.view(h, r),
        )

    # -- diagnostics --------------------------------------------------------

    @torch.no_grad()
    def force_zero_deltas(self) -> None:
        """Pin every generated module to its pass-through state.

        Adapter branches emit exactly zero (up head zeroed, generated LN
        fixed at gamma=1/beta=0) and LoRA deltas vanish (B head zeroed),
        so an instrumented host computes the same function as the bare one.
        """
        h = self.config.host_hidden
        if self.enable_adapters:
            for head in self.adapter_up_heads.values():
                head.weight.zero_()
                head.bias.zero_()
            for head in self.layer_norm_heads.values():
                head.weight.zero_()
                head.bias[:h].fill_(1.0)
                head.bias[h:].zero_()
        if self.enable_lora:
            self.lora_b_head.weight.zero_()
            self.lora_b_head.bias.zero_()


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterBudget:
    task_embedding: int
    layer_embedding: int
    position_embedding: int
    projector: int
    adapter_heads: int
    layer_norm_heads: int
    lora_heads: int

    @property
    def total(self) -> int:
        return (self.task_embedding + self.layer_embedding + self.position_embedding
                + self.projector + self.adapter_heads + self.layer_norm_heads
                + self.lora_heads)

    def as_dict(self) -> dict[str, int]:
        out = asdict(self)
        out["total"] = self.total
        return out


def trainable_parameter_count(
    config: HypernetConfig, enable_adapters: bool = True, enable_lora: bool = True
) -> ParameterBudget:
    """Closed-form count of every hypernetwork parameter tensor."""
    h, d, r = config.host_hidden, config.bottleneck, config.lora_rank
    concat = config.d_task + 2 * config.d_layer_pos

    def linear(n_in: int, n_out: int) -> int:
        return n_in * n_out + n_out

    projector = linear(concat, config.d_proj_hidden) + linear(config.d_proj_hidden, config.d_cond)
    adapter_heads = layer_norm_heads = lora_heads = 0
    if enable_adapters:
        per_position = linear(config.d_cond, d * h) + linear(config.d_cond, h * d)
        adapter_heads = len(ADAPTER_POSITIONS) * per_position
        layer_norm_heads = len(ADAPTER_POSITIONS) * linear(config.d_cond, 2 * h)
    if enable_lora:
        lora_heads = linear(config.d_cond, 2 * r * h) + linear(config.d_cond, 2 * h * r)
    return ParameterBudget(
        task_embedding=config.n_tasks * config.d_task,
        layer_embedding=config.n_layers * config.d_layer_pos,
        position_embedding=len(PositionId) * config.d_layer_pos,
        projector=projector,
        adapter_heads=adapter_heads,
        layer_norm_heads=layer_norm_heads,
        lora_heads=lora_heads,
    )


# ---------------------------------------------------------------------------
# Serialization under the stable "hypernet/<head>/<tensor>" name scheme
# ---------------------------------------------------------------------------

def export_state(hypernet: Hypernetwork) -> dict[str, Tensor]:
    return {
        "hypernet/" + key.replace(".", "/"): tensor.detach().clone()
        for key, tensor in hypernet.state_dict().items()
    }


def import_state(hypernet: Hypernetwork, state: dict[str, Tensor]) -> None:
    prefix = "hypernet/"
    converted = {
        key[len(prefix):].replace("/", "."): tensor
        for key, tensor in state.items()
        if key.startswith(prefix)
    }
    hypernet.load_state_dict(converted)
