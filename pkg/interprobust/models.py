"""
models.py - Records shared by the services, the CLI and the HTTP API
"""

from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator


class Arch(str, Enum):
    SMALL = "Small"
    POOL = "Pool"
    TINY = "Tiny"
    LINEAR = "Linear"


class InterpreterKind(str, Enum):
    CAM = "CAM"
    GRADCAM = "GradCAM"
    GRADCAMPP = "GradCAMpp"
    IG = "IG"
    REPR = "Repr"


class ClassSet(str, Enum):
    ONE_CLASS = "OneClass"
    TWO_CLASS = "TwoClass"
    ALL_CLASS = "AllClass"
    SOFTMAX_WEIGHTED = "SoftmaxWeighted"


class Norm(str, Enum):
    L1 = "L1"
    L2 = "L2"


class TrainMethod(str, Enum):
    NORMAL = "Normal"
    ADV = "Adv"
    INT = "Int"
    INT_ADV = "IntAdv"
    INT2 = "Int2"
    INT2_ADV = "Int2Adv"
    INT_ONE_CLASS = "IntOneClass"


class AaiObjective(str, Enum):
    L1_ONE_CLASS = "L1OneClass"
    TOPK = "TopK"


# =====================================================
# === INTERPRETATION / DISCREPANCY ===
# =====================================================

class InterpMap(BaseModel):
    """Flattened importance scores: u cells (CAM family), d pixels (IG) or K*u (Repr)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    kind: InterpreterKind
    class_label: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.values.ndim != 1:
            raise ValueError(f"map must be flat, got shape {self.values.shape}")
        if self.kind == InterpreterKind.REPR and self.class_label is not None:
            raise ValueError("Repr maps are class-independent")
        return self

    def __len__(self) -> int:
        return int(self.values.shape[0])


class DiscrepancySpec(BaseModel):
    """Which classes, which norm and which interpreter a discrepancy uses"""

    model_config = ConfigDict(frozen=True)

    class_set: ClassSet = ClassSet.TWO_CLASS
    norm: Norm = Norm.L1
    interpreter: InterpreterKind = InterpreterKind.CAM
    ig_steps: int = Field(32, ge=1)

    # Per-example labels, filled by bind()
    y: Optional[int] = None
    y_prime: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.class_set == ClassSet.TWO_CLASS and self.y is not None and self.y == self.y_prime:
            raise ValueError("TwoClass needs y != y_prime")
        return self

    def bind(self, y: int, y_prime: Optional[int] = None) -> "DiscrepancySpec":
        return DiscrepancySpec(**{**self.model_dump(), "y": int(y), "y_prime": y_prime})

    @property
    def label(self) -> str:
        return f"{self.interpreter.value}:{self.norm.value}:{self.class_set.value}"

    @classmethod
    def parse(cls, text: str) -> "DiscrepancySpec":
        """'CAM:L1:TwoClass' -> spec"""
        parts = [p.strip() for p in text.split(":")]
        if len(parts) != 3:
            raise ValueError(f"expected interpreter:norm:class_set, got {text!r}")
        return cls(interpreter=InterpreterKind(parts[0]), norm=Norm(parts[1]), class_set=ClassSet(parts[2]))


class BoundCheck(BaseModel):
    discrepancy: float
    half_margin: float
    holds: bool

    @property
    def ratio(self) -> float:
        return self.discrepancy / self.half_margin if self.half_margin > 0 else float("inf")


# =====================================================
# === ATTACKS ===
# =====================================================

class AttackConfig(BaseModel):
    eps: float = Field(0.3, ge=0)
    steps: int = Field(200, ge=1)
    step_size: float = Field(0.01, gt=0)
    target: Optional[int] = None
    rand_init: bool = False
    seed: int = 0


class AttackOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x_adv: np.ndarray
    success: bool
    margin: float
    prediction: int
    eps: float
    discrepancy: Optional[float] = None
    lambda_used: Optional[float] = None
    topk_displaced: Optional[int] = None
    loss_trace: List[float] = []


# =====================================================
# === TRAINING ===
# =====================================================

class TrainConfig(BaseModel):
    method: TrainMethod = TrainMethod.NORMAL
    gamma: float = Field(0.01, ge=0)
    eps_final: float = Field(0.3, ge=0)
    warmup_steps: int = Field(2000, ge=0)
    inner_steps: int = Field(40, ge=1)
    inner_step_size: float = Field(0.01, gt=0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(50, ge=1)
    lr: float = Field(1e-4, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay_steps: List[int] = []
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0

    def warmup_for(self, total_steps: int) -> int:
        """Warmup length actually used: never past the last step, so the run ends at eps_final."""
        return min(self.warmup_steps, max(total_steps - 1, 0))

    def eps_at(self, step: int, total_steps: int) -> float:
        """0 during warmup, then linear up to eps_final at the last step (total_steps - 1)."""
        warmup = self.warmup_for(total_steps)
        last = total_steps - 1
        if step >= last:
            return self.eps_final
        if step < warmup:
            return 0.0
        return self.eps_final * (step - warmup) / (last - warmup)


class MetricRow(BaseModel):
    step: int
    epoch: int
    eps: float
    loss: float
    clean_acc: float


# =====================================================
# === EVALUATION ===
# =====================================================

AxisValue = Union[float, str]


class SweepResult(BaseModel):
    name: str
    axis: str
    values: List[AxisValue]
    metric: Literal["accuracy", "tau", "nds", "clean_acc", "discrepancy"]
    metric_label: Optional[str] = None  # header of the cells column, metric name when unset
    cells: List[float]
    columns: Dict[str, List[float]] = {}
    n_samples: int
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if len(self.cells) != len(self.values):
            raise ValueError(f"{len(self.cells)} cells for {len(self.values)} axis values")
        for name, col in self.columns.items():
            if len(col) != len(self.values):
                raise ValueError(f"column {name} has {len(col)} entries")
        lo, hi = {"accuracy": (0.0, 1.0), "clean_acc": (0.0, 1.0), "tau": (-1.0, 1.0)}.get(
            self.metric, (-np.inf, np.inf)
        )
        for c in self.cells:
            if not np.isnan(c) and not lo <= c <= hi:
                raise ValueError(f"{self.metric} cell {c} outside [{lo}, {hi}]")
        return self

    def header(self) -> List[str]:
        return [self.axis, self.metric_label or self.metric, *self.columns.keys()]

    def rows(self) -> List[List[AxisValue]]:
        return [
            [v, c, *(col[i] for col in self.columns.values())]
            for i, (v, c) in enumerate(zip(self.values, self.cells))
        ]


class DecileTable(BaseModel):
    levels: List[float]
    discrepancy: List[float]
    margin: List[float]
    n_checked: int
    median_ratio: float

    @model_validator(mode="after")
    def _check(self):
        for name in ("discrepancy", "margin"):
            row = getattr(self, name)
            if len(row) != len(self.levels):
                raise ValueError(f"{name} row has {len(row)} values")
            if any(b < a for a, b in zip(row, row[1:])):
                raise ValueError(f"{name} deciles must be nondecreasing")
        return self


# =====================================================
# === DATA ===
# =====================================================

class Dataset(BaseModel):
    """images [n, 1, H, W] in [0, 1], labels [n]"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    @model_validator(mode="after")
    def _check(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        return self

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n: Optional[int], seed: int = 0) -> "Dataset":
        """First n of a seeded shuffle (all of it when n is None)."""
        order = np.random.default_rng(seed).permutation(len(self))
        if n is not None:
            order = order[:n]
        return Dataset(images=self.images[order], labels=self.labels[order], split=self.split)


# =====================================================
# === RUN CONFIG (cli) ===
# =====================================================

def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


FloatList = Annotated[List[float], BeforeValidator(_split_list)]
IntList = Annotated[List[int], BeforeValidator(_split_list)]
StrList = Annotated[List[str], BeforeValidator(_split_list)]
SweepList = Annotated[
    List[Literal["ata", "multistep", "aai", "prop1", "nds", "isa", "gamma"]], BeforeValidator(_split_list)
]


class RunConfig(BaseModel):
    """Parsed `key = value` run file; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    # data
    dataset: Literal["synth", "mnist"] = "synth"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    synth_n: int = Field(400, ge=2)
    synth_size: int = Field(28, ge=4)
    train_subset: Optional[int] = Field(None, ge=1)
    n_samples: int = Field(200, ge=1)

    # model / training
    arch: Arch = Arch.SMALL
    method: TrainMethod = TrainMethod.NORMAL
    gamma: float = Field(0.01, ge=0)
    eps_final: float = Field(0.3, ge=0)
    warmup_steps: int = Field(2000, ge=0)
    inner_steps: int = Field(40, ge=1)
    inner_step_size: float = Field(0.01, gt=0)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(50, ge=1)
    lr: float = Field(1e-4, gt=0)
    lr_decay_steps: IntList = []
    checkpoint_every: int = Field(0, ge=0)
    checkpoint: Optional[str] = None

    # attacks
    attack: Literal["pgd", "isa", "isa_bisect", "aai"] = "pgd"
    eps: float = Field(0.3, ge=0)
    steps: int = Field(200, ge=1)
    step_size: float = Field(0.01, gt=0)
    target: Optional[int] = None
    rand_init: bool = False
    lam: float = Field(1.0, ge=0)
    lam_hi: float = Field(100.0, gt=0)
    tau: float = Field(0.1, gt=0)
    bisect_iters: int = Field(10, ge=1)
    aai_objective: AaiObjective = AaiObjective.L1_ONE_CLASS
    topk: int = Field(8, ge=1)
    spec: str = "CAM:L1:TwoClass"
    export_maps: bool = False

    # evaluation
    sweeps: SweepList = ["ata"]
    eps_list: FloatList = [0.0, 0.05, 0.1, 0.2, 0.3]
    step_list: IntList = [1, 10, 100, 200]
    gamma_list: FloatList = [0.0, 0.005, 0.01]
    specs: StrList = ["CAM:L1:OneClass", "CAM:L1:TwoClass"]

    # feature visualisation
    neuron_index: int = Field(0, ge=0)
    vis_steps: int = Field(100, ge=0)
    vis_step: float = Field(0.01, gt=0)

    # global
    seed: int = 0
    out_dir: Optional[str] = None
    threads: int = Field(0, ge=0)

    @field_validator("specs")
    @classmethod
    def _specs_parse(cls, value: List[str]) -> List[str]:
        for text in value:
            DiscrepancySpec.parse(text)
        return value

    @field_validator("spec")
    @classmethod
    def _spec_parse(cls, value: str) -> str:
        DiscrepancySpec.parse(value)
        return value

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            gamma=self.gamma,
            eps_final=self.eps_final,
            warmup_steps=self.warmup_steps,
            inner_steps=self.inner_steps,
            inner_step_size=self.inner_step_size,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay_steps=self.lr_decay_steps,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            eps=self.eps,
            steps=self.steps,
            step_size=self.step_size,
            target=self.target,
            rand_init=self.rand_init,
            seed=self.seed,
        )
