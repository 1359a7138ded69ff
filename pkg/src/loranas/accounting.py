"""LoRA parameter accounting over architecture descriptors.

A descriptor lists every adapter-eligible linear layer of a model with its
input/output width, tower and adapter group.  A rank-``r`` adapter on an
``in x out`` layer trains ``r * (in + out)`` parameters.

Descriptor file format (JSON, ``schema_version`` 1)::

    {
      "schema_version": 1,
      "model_name": "...",
      "total_base_params": 10670220835,
      "modules": [
        {"name": "...", "in_dim": 4096, "out_dim": 4096,
         "tower": "language-self", "group": "Q"},
        ...
      ]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

SCHEMA_VERSION = 1
TOWERS = ("vision-local", "vision-global", "language-self", "language-cross")
GROUPS = ("Q", "K", "V", "O", "G", "U", "D", "FC1", "FC2")


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    in_dim: int
    out_dim: int
    tower: str
    group: str


@dataclass
class ArchitectureDescriptor:
    model_name: str
    total_base_params: int
    modules: list[ModuleSpec]

    def __post_init__(self):
        validate(self)

    def groups(self) -> list[str]:
        return [g for g in GROUPS if any(m.group == g for m in self.modules)]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model_name": self.model_name,
            "total_base_params": self.total_base_params,
            "modules": [
                {"name": m.name, "in_dim": m.in_dim, "out_dim": m.out_dim, "tower": m.tower, "group": m.group}
                for m in self.modules
            ],
        }


def validate(desc: ArchitectureDescriptor) -> None:
    if not isinstance(desc.total_base_params, int) or desc.total_base_params <= 0:
        raise DescriptorError("total_base_params: must be a positive integer")
    if not desc.modules:
        raise DescriptorError("modules: descriptor lists no modules")
    seen = set()
    for i, m in enumerate(desc.modules):
        where = f"modules[{i}]"
        if m.name in seen:
            raise DescriptorError(f"{where}.name: duplicate module name {m.name!r}")
        seen.add(m.name)
        for attr in ("in_dim", "out_dim"):
            v = getattr(m, attr)
            if not isinstance(v, int) or v <= 0:
                raise DescriptorError(f"{where}.{attr}: must be a positive integer, got {v!r}")
        if m.tower not in TOWERS:
            raise DescriptorError(f"{where}.tower: {m.tower!r} not one of {', '.join(TOWERS)}")
        if m.group not in GROUPS:
            raise DescriptorError(f"{where}.group: {m.group!r} not one of {', '.join(GROUPS)}")


def descriptor_from_dict(doc) -> ArchitectureDescriptor:
    if not isinstance(doc, dict):
        raise DescriptorError("descriptor: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DescriptorError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    for key in ("model_name", "total_base_params", "modules"):
        if key not in doc:
            raise DescriptorError(f"{key}: missing")
    if not isinstance(doc["modules"], list):
        raise DescriptorError("modules: must be a list")
    mods = []
    for i, m in enumerate(doc["modules"]):
        try:
            mods.append(ModuleSpec(m["name"], m["in_dim"], m["out_dim"], m["tower"], m["group"]))
        except (KeyError, TypeError) as exc:
            raise DescriptorError(f"modules[{i}]: missing field {exc}") from None
    return ArchitectureDescriptor(doc["model_name"], doc["total_base_params"], mods)


def shipped_descriptors() -> list[str]:
    return sorted(p.name for p in resources.files("loranas.descriptors").iterdir() if p.name.endswith(".json"))


def resolve_descriptor_path(path) -> Path:
    """Use ``path`` if it exists, else look it up among the shipped descriptors."""
    p = Path(path)
    if p.exists():
        return p
    shipped = resources.files("loranas.descriptors") / p.name
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(f"descriptor {path} not found (shipped: {', '.join(shipped_descriptors())})")


def load_descriptor(path) -> ArchitectureDescriptor:
    p = resolve_descriptor_path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DescriptorError(f"{p}: not valid JSON ({exc})") from None
    return descriptor_from_dict(doc)


@dataclass
class CountReport:
    per_module: dict[str, int]
    per_group: dict[str, int]
    per_tower: dict[str, int]
    total: int
    base_params: int
    fraction: float = field(init=False)

    def __post_init__(self):
        self.fraction = self.total / self.base_params

    def summary(self) -> str:
        return f"{format_millions(self.total)} ({self.fraction * 100:.1f}%)"


def format_millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def lora_param_count(desc: ArchitectureDescriptor, ranks=None, groups=None) -> CountReport:
    """Adapter parameters for the modules in ``groups`` (all when ``None``).

    ``ranks`` is one integer for a uniform rank or a mapping from module name
    to rank.
    """
    if ranks is None:
        raise ValueError("a uniform rank or a rank map is required")
    wanted = None if groups is None else {g.upper() for g in groups}
    if wanted is not None and not wanted <= set(GROUPS):
        raise ValueError(f"unknown groups: {', '.join(sorted(wanted - set(GROUPS)))}")
    mods = [m for m in desc.modules if wanted is None or m.group in wanted]
    if isinstance(ranks, int):
        rank_of = {m.name: ranks for m in mods}
    else:
        rank_of = dict(ranks)
        missing = [m.name for m in mods if m.name not in rank_of]
        if missing:
            raise ValueError(f"rank map lacks {len(missing)} modules: {', '.join(missing[:10])}")
    per_module, per_group, per_tower = {}, {}, {}
    for m in mods:
        r = int(rank_of[m.name])
        if r < 1:
            raise ValueError(f"{m.name}: rank must be at least 1, got {r}")
        n = r * (m.in_dim + m.out_dim)
        per_module[m.name] = n
        per_group[m.group] = per_group.get(m.group, 0) + n
        per_tower[m.tower] = per_tower.get(m.tower, 0) + n
    return CountReport(per_module, per_group, per_tower, sum(per_module.values()), desc.total_base_params)


def compression_ratio(a, b) -> float:
    """``total(a) / total(b)``; accepts reports or raw counts."""
    ta = a.total if isinstance(a, CountReport) else a
    tb = b.total if isinstance(b, CountReport) else b
    if ta <= 0 or tb <= 0:
        raise ValueError("compression ratio needs two positive totals")
    return ta / tb


# -- descriptor construction -------------------------------------------------

# Published LLaMA-3.2-11B-Vision configuration values used to enumerate the
# adapter-eligible projections.
LLAMA32_11B_VISION = {
    "model_name": "meta-llama/Llama-3.2-11B-Vision-Instruct",
    "total_base_params": 10_670_220_835,
    "text": {
        "hidden_size": 4096,
        "intermediate_size": 14336,
        "num_hidden_layers": 40,
        "num_attention_heads": 32,
        "num_key_value_heads": 8,
        "cross_attention_layers": [3, 8, 13, 18, 23, 28, 33, 38],
    },
    "vision": {
        "hidden_size": 1280,
        "intermediate_size": 5120,
        "num_hidden_layers": 32,
        "num_global_layers": 8,
    },
}


def build_mllama_descriptor(cfg=LLAMA32_11B_VISION) -> ArchitectureDescriptor:
    """Enumerate q/k/v/o/gate/up/down/fc1/fc2 projections of an Mllama-style model."""
    mods = []
    v = cfg["vision"]
    vh, vi = v["hidden_size"], v["intermediate_size"]
    for tower, prefix, n in (
        ("vision-local", "vision_model.transformer.layers", v["num_hidden_layers"]),
        ("vision-global", "vision_model.global_transformer.layers", v["num_global_layers"]),
    ):
        for i in range(n):
            p = f"{prefix}.{i}"
            for g, proj in (("Q", "q_proj"), ("K", "k_proj"), ("V", "v_proj"), ("O", "o_proj")):
                mods.append(ModuleSpec(f"{p}.self_attn.{proj}", vh, vh, tower, g))
            mods.append(ModuleSpec(f"{p}.mlp.fc1", vh, vi, tower, "FC1"))
            mods.append(ModuleSpec(f"{p}.mlp.fc2", vi, vh, tower, "FC2"))
    t = cfg["text"]
    h, ff = t["hidden_size"], t["intermediate_size"]
    kv = t["num_key_value_heads"] * (h // t["num_attention_heads"])
    cross = set(t["cross_attention_layers"])
    for i in range(t["num_hidden_layers"]):
        p = f"language_model.model.layers.{i}"
        tower = "language-cross" if i in cross else "language-self"
        attn = "cross_attn" if i in cross else "self_attn"
        for g, proj, dout in (("Q", "q_proj", h), ("K", "k_proj", kv), ("V", "v_proj", kv), ("O", "o_proj", h)):
            mods.append(ModuleSpec(f"{p}.{attn}.{proj}", h, dout, tower, g))
        mods.append(ModuleSpec(f"{p}.mlp.gate_proj", h, ff, tower, "G"))
        mods.append(ModuleSpec(f"{p}.mlp.up_proj", h, ff, tower, "U"))
        mods.append(ModuleSpec(f"{p}.mlp.down_proj", ff, h, tower, "D"))
    return ArchitectureDescriptor(cfg["model_name"], cfg["total_base_params"], mods)
