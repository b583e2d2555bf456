"""Forward computations of the generated modules and host instrumentation.

The three functional ops implement the conditional adapter (bottleneck
with its own generated layer norm, residual added outside), the
conditional layer norm (activation statistics over the hidden dimension,
epsilon inside the root) and the LoRA projection (frozen base weight plus
the low-rank update, no extra scaling factor).

``instrument_host`` splices hypernetwork-backed modules into a host
encoder-decoder in place: adapter slots (``nn.Identity`` placeholders
after the self-attention and feed-forward sublayers of every block) are
replaced by :class:`HyperAdapter`, and the query/value projections of
every self-attention plus decoder cross-attention are wrapped in
:class:`HyperLoraLinear`. The returned handle owns task routing:
``set_active_task`` regenerates every site's parameters in one batched
hypernetwork pass and installs them on the spliced modules. Routing is
per-instance state, so forward passes for different tasks on the same
instance must be serialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ContractViolationError, InstrumentationError
from .hypernet import (
    AdapterParams,
    ConditioningInput,
    Hypernetwork,
    LayerNormParams,
    PositionId,
)

LN_EPS = 1e-6


def conditional_layer_norm(x: Tensor, ln: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    """gamma * (x - mean) / std + beta over the last dimension."""
    if x.shape[-1] != ln.gamma.shape[-1]:
        raise ContractViolationError(
            f"hidden width {x.shape[-1]} does not match layer-norm width {ln.gamma.shape[-1]}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return ln.gamma * (x - mean) / torch.sqrt(var + eps) + ln.beta


def adapter_forward(x: Tensor, params: AdapterParams, ln: LayerNormParams) -> Tensor:
    """Bottleneck adapter: ``LN(up(gelu(down(x)))) + x``."""
    d, h = params.down.shape
    if params.up.shape != (h, d):
        raise ContractViolationError(
            f"up projection {tuple(params.up.shape)} does not invert down {(d, h)}"
        )
    if x.shape[-1] != h:
        raise ContractViolationError(f"input width {x.shape[-1]} does not match adapter width {h}")
    z = F.gelu(F.linear(x, params.down))
    z = F.linear(z, params.up)
    return conditional_layer_norm(z, ln) + x


def lora_linear_forward(
    x: Tensor, weight: Tensor, a: Tensor, b: Tensor, bias: Tensor | None = None
) -> Tensor:
    """``W0 x + B(A x)`` with a frozen W0; no scaling beyond the matrices."""
    d_out, k = weight.shape
    r = a.shape[0]
    if a.shape != (r, k):
        raise ContractViolationError(f"A is {tuple(a.shape)}, expected ({r}, {k})")
    if b.shape != (d_out, r):
        raise ContractViolationError(f"B is {tuple(b.shape)}, expected ({d_out}, {r})")
    if x.shape[-1] != k:
        raise ContractViolationError(f"input width {x.shape[-1]} does not match W0 width {k}")
    return F.linear(x, weight, bias) + F.linear(F.linear(x, a), b)


# ---------------------------------------------------------------------------
# Insertion plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterSite:
    name: str  # dotted module path of an nn.Identity slot
    layer_index: int
    position: PositionId


@dataclass(frozen=True)
class LoraSite:
    name: str  # dotted module path of an nn.Linear projection
    layer_index: int
    attention: str  # "self" | "cross"
    role: str       # "q" | "v"

    @property
    def a_position(self) -> PositionId:
        return (PositionId.LORA_A_SELF_ATTN if self.attention == "self"
                else PositionId.LORA_A_CROSS_ATTN)

    @property
    def b_position(self) -> PositionId:
        return (PositionId.LORA_B_SELF_ATTN if self.attention == "self"
                else PositionId.LORA_B_CROSS_ATTN)


@dataclass(frozen=True)
class InsertionPlan:
    adapters: tuple[AdapterSite, ...] = ()
    loras: tuple[LoraSite, ...] = ()

    def __post_init__(self):
        names = [s.name for s in self.adapters] + [s.name for s in self.loras]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"sites planned twice: {sorted(dupes)}")
        if not names:
            raise ConfigError("insertion plan is empty")

    @property
    def n_sites(self) -> int:
        return len(self.adapters) + len(self.loras)


def default_insertion_plan(
    host: nn.Module, enable_adapters: bool = True, enable_lora: bool = True
) -> InsertionPlan:
    """Every adapter slot in every block; LoRA on q/v of self- and cross-attention.

    Encoder blocks take layer indices 0..E-1 and decoder blocks E..E+D-1.
    """
    n_enc = len(host.encoder_blocks)
    n_dec = len(host.decoder_blocks)
    adapters: list[AdapterSite] = []
    loras: list[LoraSite] = []

    def add_block(prefix: str, layer: int, cross: bool) -> None:
        if enable_adapters:
            adapters.append(AdapterSite(f"{prefix}.self_attn_adapter", layer,
                                        PositionId.ADAPTER_AFTER_SELF_ATTN))
            adapters.append(AdapterSite(f"{prefix}.ff_adapter", layer,
                                        PositionId.ADAPTER_AFTER_FFN))
        if enable_lora:
            for role in ("q", "v"):
                loras.append(LoraSite(f"{prefix}.self_attn.{role}_proj", layer, "self", role))
            if cross:
                for role in ("q", "v"):
                    loras.append(LoraSite(f"{prefix}.cross_attn.{role}_proj", layer, "cross", role))

    for i in range(n_enc):
        add_block(f"encoder_blocks.{i}", i, cross=False)
    for j in range(n_dec):
        add_block(f"decoder_blocks.{j}", n_enc + j, cross=True)
    return InsertionPlan(adapters=tuple(adapters), loras=tuple(loras))


# ---------------------------------------------------------------------------
# Spliced modules
# ---------------------------------------------------------------------------

class HyperAdapter(nn.Module):
    """Adapter slot fed by installed generated parameters.

    ``Instrumentation.set_active_task`` regenerates and installs the
    parameters for every site in one batched hypernetwork pass. Calling
    it before each training forward also guarantees a fresh autograd
    graph per optimization step.
    """

    def __init__(self, layer_index: int, position: PositionId):
        super().__init__()
        self.layer_index = layer_index
        self.position = position
        self._params: AdapterParams | None = None
        self._ln: LayerNormParams | None = None

    def install(self, params: AdapterParams, ln: LayerNormParams) -> None:
        self._params = params
        self._ln = ln

    def forward(self, x: Tensor) -> Tensor:
        if self._params is None or self._ln is None:
            raise ContractViolationError("no active task; call set_active_task() first")
        return adapter_forward(x, self._params, self._ln)


class HyperLoraLinear(nn.Module):
    """Frozen linear projection plus an installed low-rank update."""

    def __init__(self, base: nn.Linear, layer_index: int, attention: str, role: str):
        super().__init__()
        self.base = base
        self.layer_index = layer_index
        self.attention = attention
        self.role = role
        self._a: Tensor | None = None
        self._b: Tensor | None = None

    def install(self, a: Tensor, b: Tensor) -> None:
        self._a = a
        self._b = b

    def forward(self, x: Tensor) -> Tensor:
        if self._a is None or self._b is None:
            raise ContractViolationError("no active task; call set_active_task() first")
        return lora_linear_forward(x, self.base.weight, self._a, self._b, self.base.bias)


# ---------------------------------------------------------------------------
# Freeze policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreezePolicy:
    """Trainable: hypernetwork (incl. projector) and host layer norms; rest frozen."""

    layer_norm_types: tuple[type, ...] = (nn.LayerNorm,)


@dataclass(frozen=True)
class FreezeReport:
    trainable_host: tuple[str, ...]
    frozen_host: tuple[str, ...]
    trainable_hypernet: tuple[str, ...]


def apply_freeze_policy(host: nn.Module, hypernet: Hypernetwork,
                        policy: FreezePolicy) -> FreezeReport:
    ln_prefixes = {
        name for name, module in host.named_modules()
        if isinstance(module, policy.layer_norm_types)
    }
    trainable, frozen = [], []
    for name, param in host.named_parameters():
        owner = name.rsplit(".", 1)[0] if "." in name else ""
        is_ln = owner in ln_prefixes
        param.requires_grad_(is_ln)
        (trainable if is_ln else frozen).append(name)
    for _, param in hypernet.named_parameters():
        param.requires_grad_(True)
    return FreezeReport(
        trainable_host=tuple(sorted(trainable)),
        frozen_host=tuple(sorted(frozen)),
        trainable_hypernet=tuple(sorted(n for n, _ in hypernet.named_parameters())),
    )


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------

@dataclass
class Instrumentation:
    """Handle over an instrumented host: routing, audit manifest, freeze report."""

    host: nn.Module
    hypernet: Hypernetwork
    plan: InsertionPlan
    manifest: dict[str, dict]
    freeze_report: FreezeReport
    adapter_modules: dict[str, HyperAdapter]
    lora_modules: dict[str, HyperLoraLinear]
    active_task: int | None = None

    def set_active_task(self, task_index: int) -> None:
        """Route every generated module to ``task_index``.

        Regenerates all site parameters in one batched pass; call before
        each training forward so every step backpropagates a fresh graph.
        """
        if not 0 <= task_index < self.hypernet.config.n_tasks:
            raise IndexError(f"task_index {task_index} outside [0, {self.hypernet.config.n_tasks})")
        self.active_task = task_index
        self._install_adapters(task_index)
        self._install_loras(task_index)

    def _install_adapters(self, task: int) -> None:
        if not self.adapter_modules:
            return
        hn = self.hypernet
        h, d = hn.config.host_hidden, hn.config.bottleneck
        by_position: dict[str, list[HyperAdapter]] = {}
        for module in self.adapter_modules.values():
            by_position.setdefault(module.position.name, []).append(module)
        for pos_name, modules in by_position.items():
            position = PositionId[pos_name]
            cond = hn.conditioning_batch(
                [ConditioningInput(task, m.layer_index, position) for m in modules]
            )
            n = len(modules)
            down = hn.adapter_down_heads[pos_name](cond).view(n, d, h)
            up = hn.adapter_up_heads[pos_name](cond).view(n, h, d)
            ln_out = hn.layer_norm_heads[pos_name](cond)
            for i, module in enumerate(modules):
                module.install(
                    AdapterParams(down=down[i], up=up[i]),
                    LayerNormParams(gamma=ln_out[i, :h], beta=ln_out[i, h:]),
                )

    def _install_loras(self, task: int) -> None:
        if not self.lora_modules:
            return
        hn = self.hypernet
        h, r = hn.config.host_hidden, hn.config.lora_rank
        groups: dict[tuple[int, str], list[HyperLoraLinear]] = {}
        for module in self.lora_modules.values():
            groups.setdefault((module.layer_index, module.attention), []).append(module)
        keys = sorted(groups)
        a_cond = hn.conditioning_batch([
            ConditioningInput(
                task, layer,
                PositionId.LORA_A_SELF_ATTN if kind == "self" else PositionId.LORA_A_CROSS_ATTN,
            )
            for layer, kind in keys
        ])
        b_cond = hn.conditioning_batch([
            ConditioningInput(
                task, layer,
                PositionId.LORA_B_SELF_ATTN if kind == "self" else PositionId.LORA_B_CROSS_ATTN,
            )
            for layer, kind in keys
        ])
        a_flat = hn.lora_a_head(a_cond)  # (n, 2*r*h): query pair then value pair
        b_flat = hn.lora_b_head(b_cond)
        for i, key in enumerate(keys):
            a_q = a_flat[i, : r * h].view(r, h)
            a_v = a_flat[i, r * h:].view(r, h)
            b_q = b_flat[i, : h * r].view(h, r)
            b_v = b_flat[i, h * r:].view(h, r)
            for module in groups[key]:
                if module.role == "q":
                    module.install(a_q, b_q)
                else:
                    module.install(a_v, b_v)

    def trainable_parameters(self) -> Iterator[Tensor]:
        seen = set()
        for param in self.hypernet.parameters():
            seen.add(id(param))
            yield param
        for param in self.host.parameters():
            if param.requires_grad and id(param) not in seen:
                yield param

    def trainable_host_tensors(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.host.named_parameters() if p.requires_grad}

    def frozen_host_tensors(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.host.named_parameters() if not p.requires_grad}

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"


def _resolve_parent(host: nn.Module, dotted: str) -> tuple[nn.Module, str]:
    parent_path, _, attr = dotted.rpartition(".")
    parent = host.get_submodule(parent_path) if parent_path else host
    return parent, attr


def instrument_host(
    host: nn.Module,
    hypernet: Hypernetwork,
    plan: InsertionPlan | None = None,
    policy: FreezePolicy | None = None,
) -> Instrumentation:
    """Splice generated modules into ``host`` in place and apply the freeze policy."""
    if getattr(host, "peft_instrumented", False):
        raise InstrumentationError("host is already instrumented")
    if plan is None:
        plan = default_insertion_plan(host)
    if policy is None:
        policy = FreezePolicy()

    max_layer = max(s.layer_index for s in (*plan.adapters, *plan.loras))
    if max_layer >= hypernet.config.n_layers:
        raise ConfigError(
            f"plan uses layer index {max_layer} but the hypernetwork covers "
            f"{hypernet.config.n_layers} layers"
        )
    if plan.adapters and not hypernet.enable_adapters:
        raise ConfigError("plan contains adapter sites but adapter generation is disabled")
    if plan.loras and not hypernet.enable_lora:
        raise ConfigError("plan contains LoRA sites but LoRA generation is disabled")

    missing, wrong_type = [], []
    resolved_adapters, resolved_loras = [], []
    for site in plan.adapters:
        try:
            module = host.get_submodule(site.name)
        except AttributeError:
            missing.append(site.name)
            continue
        if isinstance(module, HyperAdapter):
            raise InstrumentationError(f"site already instrumented: {site.name}")
        if not isinstance(module, nn.Identity):
            wrong_type.append(site.name)
            continue
        resolved_adapters.append(site)
    for site in plan.loras:
        try:
            module = host.get_submodule(site.name)
        except AttributeError:
            missing.append(site.name)
            continue
        if isinstance(module, HyperLoraLinear):
            raise InstrumentationError(f"site already instrumented: {site.name}")
        if not isinstance(module, nn.Linear):
            wrong_type.append(site.name)
            continue
        resolved_loras.append(site)
    if missing:
        raise InstrumentationError("host lacks planned sites", missing_sites=sorted(missing))
    if wrong_type:
        raise InstrumentationError(
            "planned sites have unexpected module types", missing_sites=sorted(wrong_type)
        )

    manifest: dict[str, dict] = {}
    adapter_modules: dict[str, HyperAdapter] = {}
    lora_modules: dict[str, HyperLoraLinear] = {}
    for site in resolved_adapters:
        parent, attr = _resolve_parent(host, site.name)
        module = HyperAdapter(site.layer_index, site.position)
        setattr(parent, attr, module)
        adapter_modules[site.name] = module
        manifest[site.name] = {
            "kind": "adapter",
            "layer_index": site.layer_index,
            "position": site.position.name,
        }
    for site in resolved_loras:
        parent, attr = _resolve_parent(host, site.name)
        base = host.get_submodule(site.name)
        module = HyperLoraLinear(base, site.layer_index, site.attention, site.role)
        setattr(parent, attr, module)
        lora_modules[site.name] = module
        manifest[site.name] = {
            "kind": "lora",
            "layer_index": site.layer_index,
            "attention": site.attention,
            "role": site.role,
            "a_position": site.a_position.name,
            "b_position": site.b_position.name,
        }

    report = apply_freeze_policy(host, hypernet, policy)
    host.peft_instrumented = True
    return Instrumentation(
        host=host, hypernet=hypernet, plan=plan, manifest=manifest,
        freeze_report=report, adapter_modules=adapter_modules, lora_modules=lora_modules,
    )
