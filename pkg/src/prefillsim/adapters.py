"""Adapter parameter math: deltas, masked application, init, serialization.

Three adapter families are supported. Writing the per-position update as a
vector function of the module input ``x`` and module output ``h``:

* low-rank (``lora``):        delta = s * B @ (A @ x),  B is (n, r), A is (r, m)
* rank-r subspace (``direft``): delta = s * B.T @ (A @ h + b),  A and B are (r, d)
* projected subspace (``loreft``): delta = s * R.T @ (W @ h + b - R @ h),
  R has orthonormal rows, W is (r, d)

The low-rank family consumes module inputs; the two subspace families
consume module outputs (the residual stream at their hook site). ``s`` is
the scalar from the adapter's scaling rule.

On-disk format (little endian, documented so catalogues round-trip
bit-exactly):

    magic   4 bytes  b"ADP1"
    kind    u8       0 = lora, 1 = direft, 2 = loreft
    rank    u32
    ndims   u8       number of entries in dims
    dims    u32 * ndims
    scaling u8       0 = constant, 1 = alpha_over_r, 2 = inv_sqrt_r
    value   f64      rule constant (alpha or c; 0 for inv_sqrt_r)
    arrays  declaration order (lora: A, B; direft: A, B, b; loreft: R, W, b)
            each as u8 ndim, u32 per axis, then float64 payload row-major
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, RankError, ShapeError
from .linalg import kaiming_uniform, random_orthonormal_rows, sign_quotient

__all__ = [
    "AdapterKind",
    "PositionSchedule",
    "ScalingRule",
    "AdapterParams",
    "scaling_prefactor",
    "init_zero_delta",
    "adapter_delta",
    "delta_for_rows",
    "apply_masked",
    "first_step_delta_norm",
    "adapter_byte_size",
    "save_adapter",
    "load_adapter",
]


class AdapterKind(enum.Enum):
    LORA = "lora"
    DIREFT = "direft"
    LOREFT = "loreft"


class PositionSchedule(enum.Enum):
    """Which token positions of a request receive the adapter delta.

    PREFILL_ONLY covers prompt positions 1..p; ALL_POSITIONS additionally
    covers every generated position.
    """

    PREFILL_ONLY = "prefill_only"
    ALL_POSITIONS = "all_positions"


@dataclass(frozen=True)
class ScalingRule:
    """Scalar prefactor rule applied to every adapter delta.

    kind is one of "constant", "alpha_over_r", "inv_sqrt_r"; value holds the
    constant c or the numerator alpha and is ignored for inv_sqrt_r.
    """

    kind: str
    value: float = 0.0

    _KINDS = ("constant", "alpha_over_r", "inv_sqrt_r")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise DomainError(f"unknown scaling rule {self.kind!r}")
        if self.kind == "constant" and self.value <= 0.0:
            raise DomainError("constant scaling needs a positive value")
        if self.kind == "alpha_over_r" and self.value <= 0.0:
            raise DomainError("alpha_over_r scaling needs a positive alpha")

    @classmethod
    def constant(cls, c: float) -> "ScalingRule":
        return cls("constant", float(c))

    @classmethod
    def alpha_over_r(cls, alpha: float) -> "ScalingRule":
        return cls("alpha_over_r", float(alpha))

    @classmethod
    def inv_sqrt_r(cls) -> "ScalingRule":
        return cls("inv_sqrt_r", 0.0)


def scaling_prefactor(rule: ScalingRule, rank: int) -> float:
    """Evaluate a scaling rule at a given rank. Always positive and finite."""
    if rank < 1:
        raise RankError(f"rank must be >= 1, got {rank}")
    if rule.kind == "constant":
        return rule.value
    if rule.kind == "alpha_over_r":
        return rule.value / rank
    return 1.0 / np.sqrt(rank)


# Default rules per family: alpha/r with alpha = 32 for low-rank adapters,
# 1/sqrt(r) for the subspace families.
DEFAULT_SCALING = {
    AdapterKind.LORA: ScalingRule.alpha_over_r(32.0),
    AdapterKind.DIREFT: ScalingRule.inv_sqrt_r(),
    AdapterKind.LOREFT: ScalingRule.inv_sqrt_r(),
}


@dataclass(frozen=True)
class AdapterParams:
    """Immutable parameter bundle for one adapter at one hook site.

    dims is (n, m) for lora (module output and input widths) and (d,) for
    the subspace families. Unused tensors are None. Arrays are float64 and
    write-protected so a bundle can be shared across threads.
    """

    kind: AdapterKind
    rank: int
    dims: tuple[int, ...]
    scaling: ScalingRule
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    b: np.ndarray | None = None
    R: np.ndarray | None = None
    W: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise RankError(f"rank must be >= 1, got {self.rank}")
        r = self.rank
        if self.kind is AdapterKind.LORA:
            if len(self.dims) != 2:
                raise ShapeError("lora dims must be (n, m)")
            n, m = self.dims
            if r > min(n, m):
                raise RankError(f"rank {r} exceeds min dim of {self.dims}")
            self._expect("A", (r, m))
            self._expect("B", (n, r))
            if self.b is not None or self.R is not None or self.W is not None:
                raise ShapeError("lora carries only A and B")
        else:
            if len(self.dims) != 1:
                raise ShapeError("subspace adapter dims must be (d,)")
            d = self.dims[0]
            if r > d:
                raise RankError(f"rank {r} exceeds dimension {d}")
            if self.kind is AdapterKind.DIREFT:
                self._expect("A", (r, d))
                self._expect("B", (r, d))
                self._expect("b", (r,))
                if self.R is not None or self.W is not None:
                    raise ShapeError("direft carries A, B and b")
            else:
                self._expect("R", (r, d))
                self._expect("W", (r, d))
                self._expect("b", (r,))
                if self.A is not None or self.B is not None:
                    raise ShapeError("loreft carries R, W and b")
        for name in ("A", "B", "b", "R", "W"):
            arr = getattr(self, name)
            if arr is not None:
                if arr.dtype != np.float64:
                    object.__setattr__(self, name, arr.astype(np.float64))
                getattr(self, name).flags.writeable = False

    def _expect(self, name: str, shape: tuple[int, ...]) -> None:
        arr = getattr(self, name)
        if arr is None:
            raise ShapeError(f"{self.kind.value} adapter is missing tensor {name}")
        if arr.shape != shape:
            raise ShapeError(f"tensor {name} has shape {arr.shape}, expected {shape}")

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        """Tensors in declaration order for serialization and byte counts."""
        if self.kind is AdapterKind.LORA:
            return (self.A, self.B)
        if self.kind is AdapterKind.DIREFT:
            return (self.A, self.B, self.b)
        return (self.R, self.W, self.b)

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors))

    @property
    def prefactor(self) -> float:
        return scaling_prefactor(self.scaling, self.rank)


def init_zero_delta(
    kind: AdapterKind,
    rank: int,
    dims: tuple[int, ...],
    seed: int,
    scaling: ScalingRule | None = None,
) -> AdapterParams:
    """Construct an untrained adapter whose delta is (numerically) zero.

    lora: B = 0 and A is Kaiming-uniform, so the product B @ A vanishes.
    direft: B gets random orthonormal rows, A = 0 and b = 0.
    loreft: W is initialised to R itself, so W @ h + b - R @ h cancels to
    rounding error.
    """
    if scaling is None:
        scaling = DEFAULT_SCALING[kind]
    if kind is AdapterKind.LORA:
        n, m = dims
        if rank > min(n, m):
            raise RankError(f"rank {rank} exceeds min dim of {dims}")
        return AdapterParams(
            kind,
            rank,
            (int(n), int(m)),
            scaling,
            A=kaiming_uniform(rank, m, seed),
            B=np.zeros((n, rank)),
        )
    (d,) = dims
    if rank > d:
        raise RankError(f"rank {rank} exceeds dimension {d}")
    basis = random_orthonormal_rows(rank, d, seed)
    if kind is AdapterKind.DIREFT:
        return AdapterParams(
            kind,
            rank,
            (int(d),),
            scaling,
            A=np.zeros((rank, d)),
            B=basis,
            b=np.zeros(rank),
        )
    return AdapterParams(
        kind,
        rank,
        (int(d),),
        scaling,
        R=basis,
        W=basis.copy(),
        b=np.zeros(rank),
    )


def adapter_delta(params: AdapterParams, vec: np.ndarray) -> np.ndarray:
    """Delta for a single position.

    For lora, vec is the module input x (length m) and the result has
    length n. For the subspace families, vec is the module output h
    (length d) and the result has length d.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {vec.shape}")
    return delta_for_rows(params, vec[None, :])[0]


def delta_for_rows(params: AdapterParams, rows: np.ndarray) -> np.ndarray:
    """Vectorised adapter delta for a (positions, dim) block of vectors."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError(f"expected (positions, dim), got shape {rows.shape}")
    s = params.prefactor
    if params.kind is AdapterKind.LORA:
        n, m = params.dims
        if rows.shape[1] != m:
            raise ShapeError(f"lora input width {rows.shape[1]}, expected {m}")
        return s * ((rows @ params.A.T) @ params.B.T)
    d = params.dims[0]
    if rows.shape[1] != d:
        raise ShapeError(f"hidden width {rows.shape[1]}, expected {d}")
    if params.kind is AdapterKind.DIREFT:
        return s * ((rows @ params.A.T + params.b) @ params.B)
    proj = rows @ params.R.T
    return s * ((rows @ params.W.T + params.b - proj) @ params.R)


def apply_masked(
    params: AdapterParams,
    schedule: PositionSchedule,
    module_outputs: np.ndarray,
    module_inputs: np.ndarray | None,
    prompt_len: int,
) -> np.ndarray:
    """Apply an adapter delta to the rows its schedule covers.

    Row i of the arrays is absolute position i + 1 of one sequence. With
    PREFILL_ONLY only rows for positions <= prompt_len are touched; rows
    past the prompt are returned bit-identical to the input. The original
    arrays are never modified.
    """
    out = np.array(module_outputs, dtype=np.float64, copy=True)
    if out.ndim != 2:
        raise ShapeError(f"module_outputs must be 2-D, got {out.shape}")
    if prompt_len < 0:
        raise DomainError(f"prompt_len must be >= 0, got {prompt_len}")
    total = out.shape[0]
    if schedule is PositionSchedule.ALL_POSITIONS:
        cut = total
    else:
        cut = min(prompt_len, total)
    if cut == 0:
        return out
    if params.kind is AdapterKind.LORA:
        if module_inputs is None:
            raise ShapeError("lora application needs module_inputs")
        src = np.asarray(module_inputs, dtype=np.float64)
        if src.shape[0] != total:
            raise ShapeError("module_inputs and module_outputs disagree on positions")
    else:
        src = out
    out[:cut] += delta_for_rows(params, src[:cut])
    return out


def first_step_delta_norm(
    rank: int,
    d: int,
    h: np.ndarray,
    g: np.ndarray,
    eta: float,
    eps: float,
    seed: int,
    scaling: ScalingRule | None = None,
) -> float:
    """Norm of a direft delta after one sign-descent step from zero init.

    Simulates the first optimiser step of the adapter at a single position
    with hidden state h and upstream gradient g on the delta, using the
    smoothed sign update p <- p - eta * grad / (|grad| + eps). At zero init
    the pre-activation A @ h + b is zero, so the gradient with respect to B
    vanishes and B keeps its initial orthonormal value; only A and b move.
    Returns ||s * B.T @ (A1 @ h + b1)||_2.

    With the default 1/sqrt(r) scaling and eps small, the result is
    eta * (||h||_1 + 1) for every rank; with constant scaling 1 it grows as
    sqrt(r).
    """
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if h.shape != (d,) or g.shape != (d,):
        raise ShapeError(f"h and g must have shape ({d},)")
    if eta <= 0.0:
        raise DomainError(f"eta must be positive, got {eta}")
    if scaling is None:
        scaling = ScalingRule.inv_sqrt_r()
    s = scaling_prefactor(scaling, rank)
    B = random_orthonormal_rows(rank, d, seed)
    z = B @ g
    grad_A = s * np.outer(z, h)
    grad_b = s * z
    A1 = -eta * sign_quotient(grad_A, eps)
    b1 = -eta * sign_quotient(grad_b, eps)
    return float(np.linalg.norm(s * (B.T @ (A1 @ h + b1))))


def adapter_byte_size(params: AdapterParams, bytes_per_param: int) -> int:
    """Bytes needed to hold one adapter's tensors at the given precision."""
    if bytes_per_param < 1:
        raise DomainError(f"bytes_per_param must be >= 1, got {bytes_per_param}")
    return params.n_params * bytes_per_param


_KIND_CODE = {AdapterKind.LORA: 0, AdapterKind.DIREFT: 1, AdapterKind.LOREFT: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_RULE_CODE = {"constant": 0, "alpha_over_r": 1, "inv_sqrt_r": 2}
_CODE_RULE = {v: k for k, v in _RULE_CODE.items()}
_MAGIC = b"ADP1"


def save_adapter(params: AdapterParams, path: str | Path) -> None:
    """Write an adapter to disk in the format documented in the module docstring."""
    chunks = [_MAGIC]
    chunks.append(struct.pack("<BIB", _KIND_CODE[params.kind], params.rank, len(params.dims)))
    chunks.append(struct.pack(f"<{len(params.dims)}I", *params.dims))
    chunks.append(struct.pack("<Bd", _RULE_CODE[params.scaling.kind], params.scaling.value))
    for tensor in params.tensors:
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_adapter(path: str | Path) -> AdapterParams:
    """Read an adapter written by save_adapter. Round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ShapeError(f"{path} is not an adapter file")
    off = 4
    kind_code, rank, ndims = struct.unpack_from("<BIB", raw, off)
    off += struct.calcsize("<BIB")
    dims = struct.unpack_from(f"<{ndims}I", raw, off)
    off += 4 * ndims
    rule_code, value = struct.unpack_from("<Bd", raw, off)
    off += struct.calcsize("<Bd")
    kind = _CODE_KIND[kind_code]
    rule_kind = _CODE_RULE[rule_code]
    scaling = ScalingRule("inv_sqrt_r") if rule_kind == "inv_sqrt_r" else ScalingRule(rule_kind, value)
    names = {
        AdapterKind.LORA: ("A", "B"),
        AdapterKind.DIREFT: ("A", "B", "b"),
        AdapterKind.LOREFT: ("R", "W", "b"),
    }[kind]
    tensors: dict[str, np.ndarray] = {}
    for name in names:
        (nd,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        tensors[name] = arr.astype(np.float64)
    if off != len(raw):
        raise ShapeError(f"{path} has {len(raw) - off} trailing bytes")
    return AdapterParams(kind, rank, tuple(int(x) for x in dims), scaling, **tensors)
