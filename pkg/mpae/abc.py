import typing as t

try:
    from typing import NotRequired
except ImportError:
    from typing_extensions import NotRequired


ActivationKind = t.Union[t.Literal["silu"], t.Literal["relu"], t.Literal["tanh"]]
LossKind = t.Union[t.Literal["l1"], t.Literal["mse"]]
RepresentationKind = t.Union[
    t.Literal["sdf"], t.Literal["tanh"], t.Literal["sharp"]
]
Provenance = t.Union[t.Literal["synthetic"], t.Literal["ingested"]]
Split = t.Union[t.Literal["train"], t.Literal["test"], t.Literal["val"]]
PaddingMode = t.Union[t.Literal["zeros"], t.Literal["circular"]]
DebugModel = t.Union[t.Literal["identity"], t.Literal["constant"]]
RunStatus = t.Union[t.Literal["ok"], t.Literal["diverged"], t.Literal["failed"]]


class SidecarTypedDict(t.TypedDict):
    dims: list[int]
    dtype: str
    representation: RepresentationKind
    epsilon: float | None
    byte_order: str


class EvalRowTypedDict(t.TypedDict):
    sample_id: str
    dice: float
    hausdorff_norm: float
    flags: str


class HistogramRowTypedDict(t.TypedDict):
    bin_lo: float
    bin_hi: float
    count_truth: int
    count_pred: int


class SummaryRowTypedDict(t.TypedDict):
    representation: str
    metric: str
    mean: float
    std: float
    ci_lo: float
    ci_hi: float
    n: int


class RunRecordTypedDict(t.TypedDict):
    key: str
    status: RunStatus
    spec: dict
    history: list[float]
    parameter_count: int
    evaluations: dict[str, dict]
    error: NotRequired[str]
    snapshot: NotRequired[dict]
