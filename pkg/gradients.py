"""
Finite-difference probes of reverse-mode gradients.

Each probe perturbs one randomly chosen input element by +-eps (central
difference) and compares the slope with the autograd gradient of a scalar
function. Run in double precision.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import torch

logger = logging.getLogger(__name__)

REL_TOL = 1e-3
ABS_TOL = 1e-7


@dataclass(frozen=True)
class GradientProbe:
    tensor: int
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / scale if scale > 0 else 0.0

    @property
    def passed(self) -> bool:
        diff = abs(self.analytic - self.numeric)
        return diff <= REL_TOL * max(abs(self.analytic), abs(self.numeric)) + ABS_TOL


def finite_difference_probe(fn: Callable[..., torch.Tensor], tensors: Sequence[torch.Tensor],
                            num_probes: int = 10, eps: float = 1e-5,
                            generator: Optional[torch.Generator] = None) -> List[GradientProbe]:
    """
    Args:
        fn: maps the tensors to a scalar
        tensors: double-precision inputs; each gets requires_grad
        num_probes: random elements checked per tensor
    """
    tensors = [t.detach().clone().double().requires_grad_(True) for t in tensors]
    value = fn(*tensors)
    grads = torch.autograd.grad(value, tensors, allow_unused=True)

    probes = []
    with torch.no_grad():
        for k, (t, g) in enumerate(zip(tensors, grads)):
            flat = t.view(-1)
            picks = torch.randint(flat.numel(), (num_probes,), generator=generator).tolist()
            for index in picks:
                original = flat[index].item()
                flat[index] = original + eps
                plus = fn(*tensors).item()
                flat[index] = original - eps
                minus = fn(*tensors).item()
                flat[index] = original

                analytic = 0.0 if g is None else g.reshape(-1)[index].item()
                probes.append(GradientProbe(k, index, analytic, (plus - minus) / (2.0 * eps)))

    failed = [p for p in probes if not p.passed]
    if failed:
        logger.warning(f"⚠️ {len(failed)}/{len(probes)} gradient probes out of tolerance")
    return probes


def max_relative_error(probes: Sequence[GradientProbe]) -> float:
    return max((p.rel_error for p in probes), default=0.0)


def all_passed(probes: Sequence[GradientProbe]) -> bool:
    return all(p.passed for p in probes)
