"""Search space over point-voxel networks: elastic per-stage depth and
fine-grained per-layer channel counts; kernel size is fixed at 3.

An ArchSpec carries a full genotype (a channel gene for every layer slot,
whether active or not) so mutation and crossover operate uniformly; slots
past the chosen depth are ignored by the network, the cost models, and the
vector encoding (they encode as 0). `canonical` pins the ignored genes so
specs can be compared.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError
from ..models import BlockSpec, ModelConfig


@dataclass(frozen=True)
class StageSpec:
    max_depth: int
    channel_choices: tuple
    resolution: int | None = None
    voxel_size: float | None = None

    def __post_init__(self):
        if self.max_depth < 1:
            raise ConfigError("stage max_depth must be >= 1")
        if not self.channel_choices:
            raise ConfigError("stage channel choice set is empty")
        object.__setattr__(self, "channel_choices", tuple(sorted(self.channel_choices)))

    @property
    def max_channels(self):
        return self.channel_choices[-1]


def default_channel_choices(max_channels, quantum=4):
    """Multiples of `quantum` between 25% and 100% of the stage maximum."""
    lo = max(quantum, int(np.ceil(0.25 * max_channels / quantum)) * quantum)
    choices = list(range(lo, max_channels + 1, quantum))
    if not choices or choices[-1] != max_channels:
        choices.append(max_channels)
    return tuple(choices)


@dataclass(frozen=True)
class SearchSpace:
    stages: tuple
    kind: str = "spvcnn"
    in_channels: int = 3
    num_classes: int = 4
    classifier_hidden: tuple = (32,)
    voxel_depth: int = 2
    use_bn: bool = True
    slope: float = 0.1

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("search space needs at least one stage")
        for stage in self.stages:
            if self.kind == "pvcnn" and stage.resolution is None:
                raise ConfigError("pvcnn stages need a resolution")
            if self.kind == "spvcnn" and stage.voxel_size is None:
                raise ConfigError("spvcnn stages need a voxel_size")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def num_stages(self):
        return len(self.stages)

    @property
    def total_slots(self):
        return sum(s.max_depth for s in self.stages)

    def vector_length(self):
        return self.num_stages + self.total_slots

    def num_candidates(self):
        total = 1
        for stage in self.stages:
            c = len(stage.channel_choices)
            total *= sum(c ** d for d in range(1, stage.max_depth + 1))
        return total

    def to_dict(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "classifier_hidden": list(self.classifier_hidden),
            "voxel_depth": self.voxel_depth,
            "use_bn": self.use_bn,
            "slope": self.slope,
            "stages": [
                {
                    "max_depth": s.max_depth,
                    "channel_choices": list(s.channel_choices),
                    **({"resolution": s.resolution} if s.resolution is not None else {}),
                    **({"voxel_size": s.voxel_size} if s.voxel_size is not None else {}),
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            stages = tuple(
                StageSpec(
                    max_depth=int(s["max_depth"]),
                    channel_choices=tuple(int(c) for c in s["channel_choices"]),
                    resolution=s.get("resolution"),
                    voxel_size=s.get("voxel_size"),
                )
                for s in d["stages"]
            )
            return cls(
                stages=stages,
                kind=d.get("kind", "spvcnn"),
                in_channels=int(d.get("in_channels", 3)),
                num_classes=int(d.get("num_classes", 4)),
                classifier_hidden=tuple(d.get("classifier_hidden", (32,))),
                voxel_depth=int(d.get("voxel_depth", 2)),
                use_bn=bool(d.get("use_bn", True)),
                slope=float(d.get("slope", 0.1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed search space: {exc}") from exc


@dataclass(frozen=True)
class ArchSpec:
    """Per-stage depth plus a channel gene for every layer slot."""

    depths: tuple
    channels: tuple  # tuple per stage, length == stage.max_depth

    def active_channels(self, stage_index):
        return self.channels[stage_index][: self.depths[stage_index]]

    def total_depth(self):
        return sum(self.depths)

    def to_dict(self):
        return {"depths": list(self.depths),
                "channels": [list(c) for c in self.channels]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(int(x) for x in d["depths"]),
                   tuple(tuple(int(c) for c in row) for row in d["channels"]))


def validate_arch(space, arch):
    if len(arch.depths) != space.num_stages or len(arch.channels) != space.num_stages:
        raise ContractError("arch does not match the space's stage count")
    for s, stage in enumerate(space.stages):
        if not 1 <= arch.depths[s] <= stage.max_depth:
            raise ContractError(
                f"stage {s}: depth {arch.depths[s]} outside [1, {stage.max_depth}]"
            )
        if len(arch.channels[s]) != stage.max_depth:
            raise ContractError(f"stage {s}: genotype must carry {stage.max_depth} channel genes")
        for j in range(arch.depths[s]):
            if arch.channels[s][j] not in stage.channel_choices:
                raise ContractError(
                    f"stage {s} layer {j}: channels {arch.channels[s][j]} not in the choice set"
                )


def canonical(space, arch):
    """Pin the ignored (beyond-depth) channel genes to the smallest choice."""
    channels = []
    for s, stage in enumerate(space.stages):
        row = list(arch.channels[s])
        for j in range(arch.depths[s], stage.max_depth):
            row[j] = stage.channel_choices[0]
        channels.append(tuple(row))
    return ArchSpec(tuple(arch.depths), tuple(channels))


def max_arch(space):
    return ArchSpec(
        tuple(s.max_depth for s in space.stages),
        tuple((s.max_channels,) * s.max_depth for s in space.stages),
    )


def min_arch(space):
    return ArchSpec(
        tuple(1 for _ in space.stages),
        tuple((s.channel_choices[0],) * s.max_depth for s in space.stages),
    )


def sample_uniform(space, floors, rng):
    """Uniformly draw depths in [floor_s, m_s] and channels from each choice set."""
    depths, channels = [], []
    for s, stage in enumerate(space.stages):
        floor = floors[s] if not np.isscalar(floors) else floors
        if not 1 <= floor <= stage.max_depth:
            raise ContractError(f"stage {s}: depth floor {floor} outside [1, {stage.max_depth}]")
        depths.append(int(rng.integers(floor, stage.max_depth + 1)))
        row = tuple(
            stage.channel_choices[rng.integers(0, len(stage.channel_choices))]
            for _ in range(stage.max_depth)
        )
        channels.append(row)
    return ArchSpec(tuple(depths), tuple(channels))


def depth_shrink_schedule(max_depth, total_epochs):
    """Per-epoch depth floors: m segments, floor m-k+1 during segment k.

    Segments are as equal as possible (earlier segments take the remainder);
    floors never increase over time.
    """
    if total_epochs < max_depth:
        raise ContractError(f"need at least {max_depth} epochs for {max_depth} depth segments")
    base, extra = divmod(total_epochs, max_depth)
    floors = []
    for k in range(1, max_depth + 1):
        length = base + (1 if k <= extra else 0)
        floors.extend([max_depth - k + 1] * length)
    return floors


def encode(space, arch):
    """Fixed-length vector: depths over max, then per-slot channels over the
    stage maximum; slots past the depth encode as 0."""
    validate_arch(space, arch)
    vec = np.zeros(space.vector_length(), dtype=np.float64)
    for s, stage in enumerate(space.stages):
        vec[s] = arch.depths[s] / stage.max_depth
    pos = space.num_stages
    for s, stage in enumerate(space.stages):
        for j in range(stage.max_depth):
            if j < arch.depths[s]:
                vec[pos] = arch.channels[s][j] / stage.max_channels
            pos += 1
    return vec


def decode(space, vec):
    """Inverse of encode; ignored slots come back as the smallest choice."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (space.vector_length(),):
        raise ContractError(f"vector length {vec.shape} != {space.vector_length()}")
    depths, channels = [], []
    pos = space.num_stages
    for s, stage in enumerate(space.stages):
        d = int(round(vec[s] * stage.max_depth))
        d = min(max(d, 1), stage.max_depth)
        depths.append(d)
        row = []
        choices = np.asarray(stage.channel_choices, dtype=np.float64)
        for j in range(stage.max_depth):
            if j < d:
                target = vec[pos] * stage.max_channels
                row.append(int(stage.channel_choices[int(np.argmin(np.abs(choices - target)))]))
            else:
                row.append(stage.channel_choices[0])
            pos += 1
        channels.append(tuple(row))
    return ArchSpec(tuple(depths), tuple(channels))


def enumerate_archs(space):
    """Yield every canonical candidate; only usable on small spaces."""
    per_stage = []
    for stage in space.stages:
        options = []
        for d in range(1, stage.max_depth + 1):
            for active in itertools.product(stage.channel_choices, repeat=d):
                row = tuple(active) + (stage.channel_choices[0],) * (stage.max_depth - d)
                options.append((d, row))
        per_stage.append(options)
    for combo in itertools.product(*per_stage):
        depths = tuple(d for d, _ in combo)
        channels = tuple(row for _, row in combo)
        yield ArchSpec(depths, channels)


def model_config_for(space, arch):
    """Concrete ModelConfig using only the active layers of an arch."""
    validate_arch(space, arch)
    blocks = []
    for s, stage in enumerate(space.stages):
        for c in arch.active_channels(s):
            blocks.append(BlockSpec(
                out_channels=int(c),
                resolution=stage.resolution,
                voxel_size=stage.voxel_size,
                voxel_depth=space.voxel_depth,
            ))
    return ModelConfig(
        kind=space.kind,
        in_channels=space.in_channels,
        num_classes=space.num_classes,
        blocks=blocks,
        classifier_hidden=space.classifier_hidden,
        use_bn=space.use_bn,
        slope=space.slope,
    )
