"""
Dense float64 tensor primitives with a define-by-run tape and Adam updates.

Autodiff and the optimizer are torch's; this module fixes the dtype, checks
shapes and domains up front, records primitive calls on a per-forward Tape
and enforces that a tape is consumed by exactly one backward pass.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from src.errors import ContractError, DomainError, ShapeError

DTYPE = torch.float64

UNARY_OPS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "exp": torch.exp,
    "log": torch.log,
}
BINARY_OPS: Dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "add": torch.add,
    "mul": torch.mul,
}


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[torch.Tensor, ...]
    output: torch.Tensor


@dataclass
class Tape:
    records: List[TapeRecord] = field(default_factory=list)
    consumed: bool = False

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor):
        if self.consumed:
            raise ContractError("Cannot record on a tape that has already been consumed by backward")
        if any(t.requires_grad for t in inputs):
            self.records.append(TapeRecord(op, tuple(inputs), output))

    def __len__(self) -> int:
        return len(self.records)


def _record(tape: Optional[Tape], op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> torch.Tensor:
    if tape is not None:
        tape.record(op, inputs, output)
    return output


def matmul(a: torch.Tensor, b: torch.Tensor, tape: Optional[Tape] = None) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return _record(tape, "matmul", (a, b), a @ b)


def elementwise(op: str, *args: torch.Tensor, tape: Optional[Tape] = None) -> torch.Tensor:
    if op in UNARY_OPS:
        if len(args) != 1:
            raise ContractError(f"{op} takes one argument, got {len(args)}")
        (x,) = args
        if op == "log" and bool((x <= 0).any()):
            raise DomainError("log of a non-positive value")
        return _record(tape, op, args, UNARY_OPS[op](x))
    if op in BINARY_OPS:
        if len(args) != 2:
            raise ContractError(f"{op} takes two arguments, got {len(args)}")
        a, b = args
        if max(a.dim(), b.dim()) > 2:
            raise ShapeError("Broadcasting is supported up to 2-D operands")
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError as e:
            raise ShapeError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from e
        return _record(tape, op, args, BINARY_OPS[op](a, b))
    raise ContractError(f"Unknown elementwise op {op!r}")


def backward(tape: Tape, loss: torch.Tensor):
    if tape.consumed:
        raise ContractError("Tape already consumed; rebuild it with a fresh forward pass")
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("Loss is not reachable from any leaf that requires grad")
    if not tape.records:
        raise ContractError("Tape recorded no forward pass; pass it to the ops that build the loss")
    loss.backward()
    tape.consumed = True


class AdamState:
    def __init__(self, params: Iterable[torch.Tensor], lr: float = 3e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=self.betas, eps=eps)
        self.step_count = 0

    def moments(self, param: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state.get(param, {})
        zeros = torch.zeros_like(param)
        return state.get("exp_avg", zeros), state.get("exp_avg_sq", zeros)

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def state_dict(self) -> Dict:
        return {"optimizer": self.optimizer.state_dict(), "step_count": self.step_count}

    def load_state_dict(self, state: Dict):
        self.optimizer.load_state_dict(state["optimizer"])
        self.step_count = int(state["step_count"])


def adam_step(params: Sequence[torch.Tensor], state: AdamState) -> Sequence[torch.Tensor]:
    tracked = {id(p) for p in state.params}
    for i, p in enumerate(params):
        if id(p) not in tracked:
            raise ContractError(f"Parameter {i} is not managed by this AdamState")
        if p.grad is None:
            raise ContractError(f"Parameter {i} has no gradient")
    state.optimizer.step()
    state.step_count += 1
    return params
