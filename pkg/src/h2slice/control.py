from dataclasses import dataclass

RELATIVE = "relative"
WEIGHTED = "weighted"


@dataclass(frozen=True)
class TruncationControl:
    """Accuracy settings shared by recompression and the factorization.

    ``mode="weighted"`` expects singular values of weight matrices that were
    already scaled by the per-block tolerances, so the cut is at 1.  In
    ``mode="relative"`` values are compared to the largest one.
    """

    eps: float = 1e-8
    mode: str = WEIGHTED
    max_rank: int = 256

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.mode not in (RELATIVE, WEIGHTED):
            raise ValueError(f"unknown truncation mode {self.mode!r}")
        if self.max_rank < 1:
            raise ValueError("max_rank must be at least 1")
