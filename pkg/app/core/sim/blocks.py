"""
Discrete-time linear shift-invariant SISO blocks in state-space form.

    x[k+1] = A x[k] + B u[k]
    y[k]   = C x[k] + D u[k] + offset

Controllers use D for feedthrough. Filters are strictly causal (D = 0), so
the loop has no algebraic dependency of pi[k] on y[k].
"""

from typing import Annotated, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import block_diag

from app.core.exceptions import DomainError, NumericError


STABILITY_MARGIN = 1e-12


def _first_row(mask: np.ndarray) -> Optional[int]:
    mask = np.asarray(mask)
    return None if mask.ndim == 0 else int(np.flatnonzero(mask)[0])


class StateSpaceSiso:
    """
    One SISO channel. With ``batch`` set the state has shape (batch, n) and
    the block steps that many independent signals at once; inputs and
    outputs then have shape (batch,).
    """

    def __init__(
        self,
        a: Sequence[Sequence[float]],
        b: Sequence[float],
        c: Sequence[float],
        d: float = 0.0,
        x0: Sequence[float] | None = None,
        offset: float = 0.0,
        batch: Optional[int] = None,
    ):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
        self.c = np.atleast_1d(np.asarray(c, dtype=float)).ravel()
        self.d = float(d)
        self.offset = float(offset)

        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise DomainError(f"A must be square, got shape {self.a.shape}")
        if self.b.shape != (n,) or self.c.shape != (n,):
            raise DomainError(
                f"B and C must have length {n}, got {self.b.shape[0]} and {self.c.shape[0]}"
            )
        for name, value in (("A", self.a), ("B", self.b), ("C", self.c)):
            if not np.all(np.isfinite(value)):
                raise DomainError(f"{name} has non-finite entries")
        if not (np.isfinite(self.d) and np.isfinite(self.offset)):
            raise DomainError("D and offset must be finite")

        shape = (n,) if batch is None else (batch, n)
        self.x = np.zeros(shape) if x0 is None else np.array(x0, dtype=float)
        if self.x.shape != shape:
            raise DomainError(f"initial state must have shape {shape}")

        # nonzero entries only, summed in index order: a run's trajectory is
        # the same whatever batch it steps in
        self._rows = [[(j, a_ij) for j, a_ij in enumerate(row) if a_ij != 0.0] for row in self.a]
        self._c_terms = [(i, c_i) for i, c_i in enumerate(self.c) if c_i != 0.0]

    @property
    def order(self) -> int:
        return self.a.shape[0]

    @property
    def batch(self) -> Optional[int]:
        return None if self.x.ndim == 1 else self.x.shape[0]

    def batched(self, batch: int) -> "StateSpaceSiso":
        """Zero-state copy stepping ``batch`` signals at once."""
        return StateSpaceSiso(self.a, self.b, self.c, self.d, offset=self.offset, batch=batch)

    def output(self, u=0.0):
        y = np.zeros(self.x.shape[:-1]) + self.d * np.asarray(u, dtype=float)
        for i, c_i in self._c_terms:
            y = y + c_i * self.x[..., i]
        y = y + self.offset
        return float(y) if self.x.ndim == 1 else y

    def update(self, u) -> None:
        u = np.broadcast_to(np.asarray(u, dtype=float), self.x.shape[:-1])
        columns = []
        for i, row in enumerate(self._rows):
            acc = self.b[i] * u
            for j, a_ij in row:
                acc = acc + a_ij * self.x[..., j]
            columns.append(acc)
        self.x = np.stack(columns, axis=-1)

    def step(self, u):
        bad = ~np.isfinite(np.asarray(u, dtype=float))
        if np.any(bad):
            raise NumericError(f"non-finite block input {u!r}", row=_first_row(bad))
        y = self.output(u)
        self.update(u)
        bad = ~np.isfinite(y) | ~np.all(np.isfinite(self.x), axis=-1)
        if np.any(bad):
            raise NumericError("block output or state became non-finite", row=_first_row(bad))
        return y

    def reset(self) -> None:
        self.x = np.zeros(self.x.shape)

    def copy(self) -> "StateSpaceSiso":
        return StateSpaceSiso(self.a, self.b, self.c, self.d, self.x, self.offset, batch=self.batch)

    def __repr__(self):
        return (
            f"StateSpaceSiso(order={self.order}, d={self.d}, "
            f"spectral_radius={spectral_radius(self.a):.6g})"
        )


class LagControllerParams(BaseModel):
    """pi[k] = beta * pi[k-1] + kappa * (e[k] - alpha * e[k-1])"""

    type: Literal["lag"] = "lag"
    alpha: float
    beta: float
    kappa: float

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def dc_gain(self) -> float:
        if self.beta == 1.0:
            return float("inf")
        return self.kappa * (1.0 - self.alpha) / (1.0 - self.beta)


class ConstantControllerParams(BaseModel):
    type: Literal["constant"] = "constant"
    value: float

    model_config = ConfigDict(frozen=True, extra="forbid")


class StateSpaceParams(BaseModel):
    type: Literal["state_space"] = "state_space"
    a: List[List[float]]
    b: List[float]
    c: List[float]
    d: float = 0.0

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def check_dimensions(self) -> "StateSpaceParams":
        n = len(self.a)
        if n == 0 or any(len(row) != n for row in self.a):
            raise ValueError("a must be a non-empty square matrix")
        if len(self.b) != n or len(self.c) != n:
            raise ValueError(f"b and c must have length {n}")
        return self


class DelayFilterParams(BaseModel):
    type: Literal["delay"] = "delay"
    steps: int = Field(default=1, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")


class MovingAverageParams(BaseModel):
    type: Literal["moving_average"] = "moving_average"
    window: int = Field(ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")


ControllerParams = Annotated[
    Union[LagControllerParams, ConstantControllerParams, StateSpaceParams],
    Field(discriminator="type"),
]
FilterParams = Annotated[
    Union[DelayFilterParams, MovingAverageParams, StateSpaceParams],
    Field(discriminator="type"),
]


def lag_to_state_space(params: LagControllerParams) -> StateSpaceSiso:
    # kappa + kappa (beta - alpha) / (z - beta)
    return StateSpaceSiso(
        a=[[params.beta]],
        b=[1.0],
        c=[params.kappa * (params.beta - params.alpha)],
        d=params.kappa,
    )


def _shift_register(length: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.eye(length, k=-1)
    b = np.zeros(length)
    b[0] = 1.0
    return a, b


def delay_filter(steps: int) -> StateSpaceSiso:
    if steps < 1:
        raise DomainError("a delay needs steps >= 1; zero delay has no strictly causal realisation")
    a, b = _shift_register(steps)
    c = np.zeros(steps)
    c[-1] = 1.0
    return StateSpaceSiso(a, b, c, d=0.0)


def moving_average(window: int) -> StateSpaceSiso:
    """Mean of the previous ``window`` inputs (the current input excluded)."""
    if window < 1:
        raise DomainError("moving average window must be >= 1")
    a, b = _shift_register(window)
    return StateSpaceSiso(a, b, np.full(window, 1.0 / window), d=0.0)


def constant_block(value: float) -> StateSpaceSiso:
    return StateSpaceSiso([[0.0]], [0.0], [0.0], d=0.0, offset=value)


def build_block(params: BaseModel) -> StateSpaceSiso:
    match params:
        case LagControllerParams():
            return lag_to_state_space(params)
        case ConstantControllerParams():
            return constant_block(params.value)
        case StateSpaceParams():
            return StateSpaceSiso(params.a, params.b, params.c, params.d)
        case DelayFilterParams():
            return delay_filter(params.steps)
        case MovingAverageParams():
            return moving_average(params.window)
    raise DomainError(f"unknown block parameters: {params!r}")


def spectral_radius(a) -> float:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"spectral radius needs a square matrix, got shape {a.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def dc_gain(block: StateSpaceSiso) -> float:
    """C (I - A)^-1 B + D, the steady-state response to a unit step."""
    n = block.order
    try:
        x_ss = np.linalg.solve(np.eye(n) - block.a, block.b)
    except np.linalg.LinAlgError as exc:
        raise DomainError("block has a pole at z = 1; DC gain undefined") from exc
    return float(block.c @ x_ss) + block.d


def block_diagonal(
    blocks: Sequence[StateSpaceSiso],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Composite (A, B, C, D) of independent channels stacked down the diagonal."""
    if not blocks:
        raise DomainError("cannot compose an empty bank")
    a = block_diag(*[blk.a for blk in blocks])
    b = block_diag(*[blk.b[:, None] for blk in blocks])
    c = block_diag(*[blk.c[None, :] for blk in blocks])
    d = np.diag([blk.d for blk in blocks])
    return a, b, c, d


class BlockBank:
    """M independent SISO channels; channel j only ever sees input j."""

    kind = "bank"

    def __init__(self, channels: Sequence[StateSpaceSiso]):
        if not channels:
            raise DomainError(f"a {self.kind} bank needs at least one channel")
        self.channels: List[StateSpaceSiso] = list(channels)

    def __len__(self) -> int:
        return len(self.channels)

    def state_matrix(self) -> np.ndarray:
        return block_diagonal(self.channels)[0]

    def spectral_radii(self) -> List[float]:
        return [spectral_radius(ch.a) for ch in self.channels]

    def reset(self) -> None:
        for ch in self.channels:
            ch.reset()

    def stability_report(self) -> List[dict]:
        return [
            {
                "bank": self.kind,
                "channel": index,
                "spectral_radius": radius,
                "stable": radius < 1.0 - STABILITY_MARGIN,
            }
            for index, radius in enumerate(self.spectral_radii())
        ]


class ControllerBank(BlockBank):
    kind = "controller"

    @classmethod
    def from_params(cls, params: Sequence[BaseModel], batch: Optional[int] = None) -> "ControllerBank":
        blocks = [build_block(p) for p in params]
        return cls(blocks if batch is None else [blk.batched(batch) for blk in blocks])

    def step(self, errors: np.ndarray) -> np.ndarray:
        errors = np.asarray(errors, dtype=float)
        incentives = np.empty(errors.shape)
        for j, channel in enumerate(self.channels):
            try:
                incentives[..., j] = channel.step(errors[..., j])
            except NumericError as exc:
                raise NumericError(
                    f"controller channel {j}: {exc}", channel=j, row=exc.row
                ) from exc
        return incentives


class FilterBank(BlockBank):
    """
    Filters over the M+1 location counts. The City component is discarded:
    channel j consumes only the Suburb j count.
    """

    kind = "filter"

    def __init__(self, channels: Sequence[StateSpaceSiso]):
        super().__init__(channels)
        for j, ch in enumerate(self.channels):
            if ch.d != 0.0:
                raise DomainError(f"filter channel {j} has feedthrough; filters must be strictly causal")

    @classmethod
    def from_params(cls, params: Sequence[BaseModel], batch: Optional[int] = None) -> "FilterBank":
        blocks = [build_block(p) for p in params]
        return cls(blocks if batch is None else [blk.batched(batch) for blk in blocks])

    @property
    def input_arity(self) -> int:
        return len(self.channels) + 1

    def output(self) -> np.ndarray:
        return np.stack([np.asarray(ch.output(), dtype=float) for ch in self.channels], axis=-1)

    def update(self, counts: np.ndarray) -> None:
        counts = np.asarray(counts, dtype=float)
        if counts.shape[-1] != self.input_arity:
            raise DomainError(f"filter bank expects {self.input_arity} counts, got {counts.shape[-1]}")
        for j, ch in enumerate(self.channels):
            ch.update(counts[..., j])
            bad = ~np.all(np.isfinite(ch.x), axis=-1)
            if np.any(bad):
                raise NumericError(
                    f"filter channel {j} state became non-finite", channel=j, row=_first_row(bad)
                )


def is_stable(target) -> bool:
    """
    Strict stability: spectral radius below 1 - 1e-12. A bank is judged on
    its block-diagonal state matrix.
    """
    if isinstance(target, BlockBank):
        target = target.state_matrix()
    elif isinstance(target, StateSpaceSiso):
        target = target.a
    return spectral_radius(target) < 1.0 - STABILITY_MARGIN
