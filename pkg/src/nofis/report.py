import math
from dataclasses import dataclass, field
from typing import List, Optional


@dataclass
class WeightStatistics:
    """Computed over the importance terms 1[x in Omega] p(x) / q(x)."""
    max_weight_share: Optional[float]
    effective_sample_size: float
    min_log_weight: float
    max_log_weight: float


@dataclass
class EstimateReport:
    """Outcome of one estimator run; `calls` counts every g evaluation it spent."""
    p_est: float
    calls: int
    method: str = 'nofis'
    std_error: Optional[float] = None
    hits: Optional[int] = None
    n_is: Optional[int] = None
    weights: Optional[WeightStatistics] = None
    # (n, estimate from the first n samples) at n = 1, 2, 4, ... and n_is
    running_estimates: List[tuple] = field(default_factory=list)
    training_calls: int = 0
    pilot_calls: int = 0
    steps: list = field(default_factory=list)
    schedule: List[list] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    log10_p_est: Optional[float] = field(init=False, default=None)

    def __post_init__(self):
        self.log10_p_est = math.log10(self.p_est) if self.p_est > 0 else None

    @property
    def zero_hits(self):
        return self.hits == 0
