"""Stationary kernels, constrained hyperparameters, and analytic block gradients.

Supported families: RBF and Matern 3/2, with a shared lengthscale or one
lengthscale per input dimension, plus observation noise and a constant mean.
Positive hyperparameters are optimized in unconstrained space through a
stabilized softplus; the noise transform adds a configurable floor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import partition

FAMILIES = ("rbf", "matern32")

_SQRT3 = np.sqrt(3.0)

# Rows per internal tile when filling a kernel block; keeps elementwise
# temporaries small so a block needs essentially one buffer.
_TILE_ENTRIES = 1 << 22


@dataclass(frozen=True)
class KernelModel:
    """A kernel family with constrained hyperparameters.

    Attributes
    ----------
    family : "rbf" or "matern32"
    outputscale : prior variance at zero distance (s^2 > 0)
    lengthscales : shape (1,) for a shared lengthscale or (d,) for one per
        input dimension; all entries > 0
    noise : Gaussian observation noise variance (>= noise_floor)
    mean : constant prior mean
    noise_floor : lower bound enforced on the noise by the raw transform
    """

    family: str
    outputscale: float
    lengthscales: np.ndarray
    noise: float
    mean: float = 0.0
    noise_floor: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if not np.all(ls > 0):
            raise ValueError("lengthscales must be positive")
        if not self.outputscale > 0:
            raise ValueError("outputscale must be positive")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")
        if self.noise < self.noise_floor:
            raise ValueError(
                f"noise {self.noise} is below the floor {self.noise_floor}"
            )

    @property
    def ard(self) -> bool:
        return self.lengthscales.shape[0] > 1

    def scale_for(self, d: int) -> np.ndarray:
        """Lengthscale vector broadcast against dimension d."""
        if self.ard and self.lengthscales.shape[0] != d:
            raise ValueError(
                f"model has {self.lengthscales.shape[0]} lengthscales "
                f"but inputs have dimension {d}"
            )
        return self.lengthscales


def default_model(family: str, d: int, *, ard: bool = False,
                  noise_floor: float = 0.0, target_mean: float = 0.0) -> KernelModel:
    """Initialization used before training: unit scales on whitened data,
    mean set to the training-target mean."""
    ls = np.ones(d if ard else 1)
    return KernelModel(
        family=family,
        outputscale=1.0,
        lengthscales=ls,
        noise=max(1.0, noise_floor + 0.5),
        mean=float(target_mean),
        noise_floor=noise_floor,
    )


# ---------------------------------------------------------------------------
# Constraint transforms and the raw (unconstrained) parameter vector.
#
# Raw layout: [outputscale, lengthscale(s)..., noise, mean].
# ---------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inv_softplus requires positive input")
    # log(e^y - 1), stable for large y.
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def param_ids(model: KernelModel) -> list[str]:
    """Trainable hyperparameter identifiers, in raw-vector order."""
    if model.ard:
        ls = [f"lengthscale_{i}" for i in range(model.lengthscales.shape[0])]
    else:
        ls = ["lengthscale"]
    return ["outputscale", *ls, "noise", "mean"]


def param_value(model: KernelModel, pid: str) -> float:
    if pid == "outputscale":
        return model.outputscale
    if pid == "noise":
        return model.noise
    if pid == "mean":
        return model.mean
    if pid == "lengthscale":
        return float(model.lengthscales[0])
    if pid.startswith("lengthscale_"):
        return float(model.lengthscales[int(pid.split("_")[1])])
    raise ValueError(f"unknown hyperparameter {pid!r}")


def with_param(model: KernelModel, pid: str, value: float) -> KernelModel:
    """A copy of the model with one constrained hyperparameter replaced."""
    if pid == "outputscale":
        return replace(model, outputscale=value)
    if pid == "noise":
        return replace(model, noise=value)
    if pid == "mean":
        return replace(model, mean=value)
    if pid == "lengthscale":
        return replace(model, lengthscales=np.array([value]))
    if pid.startswith("lengthscale_"):
        ls = model.lengthscales.copy()
        ls[int(pid.split("_")[1])] = value
        return replace(model, lengthscales=ls)
    raise ValueError(f"unknown hyperparameter {pid!r}")


def model_to_raw(model: KernelModel) -> np.ndarray:
    """Unconstrained parameter vector for optimizers."""
    parts = [
        inv_softplus(model.outputscale),
        *inv_softplus(model.lengthscales),
        inv_softplus(model.noise - model.noise_floor),
        model.mean,
    ]
    return np.asarray(parts, dtype=np.float64)


def raw_to_model(template: KernelModel, raw: np.ndarray) -> KernelModel:
    """Map a raw vector back to constrained hyperparameters."""
    raw = np.asarray(raw, dtype=np.float64)
    nls = template.lengthscales.shape[0]
    if raw.shape != (nls + 3,):
        raise ValueError(f"raw vector has shape {raw.shape}, expected ({nls + 3},)")
    return replace(
        template,
        outputscale=float(softplus(raw[0])),
        lengthscales=softplus(raw[1:1 + nls]),
        noise=template.noise_floor + float(softplus(raw[1 + nls])),
        mean=float(raw[2 + nls]),
    )


def raw_gradient(model: KernelModel, raw: np.ndarray,
                 grads: dict[str, float]) -> np.ndarray:
    """Chain constrained-space gradients through the softplus transforms."""
    nls = model.lengthscales.shape[0]
    out = np.empty(nls + 3)
    out[0] = grads["outputscale"] * _sigmoid(raw[0])
    if nls == 1:
        out[1] = grads["lengthscale"] * _sigmoid(raw[1])
    else:
        for i in range(nls):
            out[1 + i] = grads[f"lengthscale_{i}"] * _sigmoid(raw[1 + i])
    out[1 + nls] = grads["noise"] * _sigmoid(raw[1 + nls])
    out[2 + nls] = grads["mean"]
    return out


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

def kernel_eval(model: KernelModel, x, xp) -> float:
    """Kernel value between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    xp = np.atleast_1d(np.asarray(xp, dtype=np.float64))
    if x.shape != xp.shape:
        raise ValueError(f"point dimensions differ: {x.shape} vs {xp.shape}")
    ls = model.scale_for(x.shape[0])
    r2 = float(np.sum(((x - xp) / ls) ** 2))
    if model.family == "rbf":
        return model.outputscale * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    return model.outputscale * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)


def _fill_sqdist(out, A_scaled, B_scaled, a_norms, b_norms):
    """Scaled squared distances written into out, clamped at zero."""
    np.matmul(A_scaled, B_scaled.T, out=out)
    out *= -2.0
    out += a_norms[:, None]
    out += b_norms[None, :]
    np.maximum(out, 0.0, out=out)


def _sqdist_to_kernel_inplace(family, outputscale, block, scratch=None):
    """Transform a squared-distance block into kernel values in place.

    Matern 3/2 needs one extra buffer of the block's shape; callers that
    tile can pass a reusable scratch.
    """
    if family == "rbf":
        block *= -0.5
        np.exp(block, out=block)
        block *= outputscale
        return
    np.sqrt(block, out=block)  # block now holds r
    if scratch is None:
        scratch = np.empty_like(block)
    np.multiply(block, -_SQRT3, out=scratch)
    np.exp(scratch, out=scratch)  # exp(-sqrt(3) r)
    block *= _SQRT3
    block += 1.0
    block *= scratch
    block *= outputscale


def kernel_block(model: KernelModel, X_rows: np.ndarray, X_cols: np.ndarray,
                 add_noise: bool = False) -> np.ndarray:
    """Dense kernel block between two point sets.

    With add_noise, the block is treated as the square training block and
    the noise variance is added on its diagonal; requesting noise on a
    non-square cross block is an error.
    """
    X_rows = np.atleast_2d(np.asarray(X_rows, dtype=np.float64))
    X_cols = np.atleast_2d(np.asarray(X_cols, dtype=np.float64))
    if X_rows.shape[1] != X_cols.shape[1]:
        raise ValueError(
            f"dimension mismatch: rows have d={X_rows.shape[1]}, "
            f"cols have d={X_cols.shape[1]}"
        )
    if add_noise and X_rows.shape[0] != X_cols.shape[0]:
        raise ValueError("noise can only be added to the square training block")
    ls = model.scale_for(X_rows.shape[1])
    out = _pairwise_into(model, X_rows / ls, X_cols / ls,
                         partition.transient((X_rows.shape[0], X_cols.shape[0])))
    if add_noise:
        idx = np.arange(X_rows.shape[0])
        out[idx, idx] += model.noise
    return out


def _pairwise_into(model, A_scaled, B_scaled, out):
    """Fill out with kernel values, tiling rows to bound scratch."""
    a, b = out.shape
    a_norms = np.einsum("ij,ij->i", A_scaled, A_scaled)
    b_norms = np.einsum("ij,ij->i", B_scaled, B_scaled)
    tile = max(1, min(a, _TILE_ENTRIES // max(1, b)))
    scratch = None
    if model.family == "matern32":
        scratch = partition.transient((tile, b))
    for t0 in range(0, a, tile):
        t1 = min(t0 + tile, a)
        view = out[t0:t1]
        _fill_sqdist(view, A_scaled[t0:t1], B_scaled, a_norms[t0:t1], b_norms)
        sc = scratch[: t1 - t0] if scratch is not None else None
        _sqdist_to_kernel_inplace(model.family, model.outputscale, view, sc)
    if scratch is not None:
        partition.release(scratch)
    return out


def kernel_rows(model: KernelModel, X: np.ndarray, start: int, stop: int,
                *, noise: bool = True) -> np.ndarray:
    """Rows [start, stop) of the training kernel matrix over X.

    With noise, the observation variance is added at the global diagonal
    positions, giving rows of the noise-augmented matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    ls = model.scale_for(X.shape[1])
    Xs = X / ls
    out = _pairwise_into(model, Xs[start:stop], Xs,
                         partition.transient((stop - start, X.shape[0])))
    if noise:
        rows = np.arange(stop - start)
        out[rows, rows + start] += model.noise
    return out


def training_mvm_oracle(model: KernelModel):
    """Row-block oracle over the noise-augmented training matrix, for the
    partitioned executor."""
    def oracle(X, start, stop):
        return kernel_rows(model, X, start, stop, noise=True)
    return oracle


def cross_mvm_oracle(model: KernelModel, X_cols: np.ndarray):
    """Row-block oracle for cross blocks against a fixed column set."""
    X_cols = np.asarray(X_cols, dtype=np.float64)

    def oracle(X, start, stop):
        return kernel_block(model, X[start:stop], X_cols)
    return oracle


# ---------------------------------------------------------------------------
# Analytic gradients with respect to constrained hyperparameters.
# ---------------------------------------------------------------------------

def _grad_factor_blocks(model, A, B, pids):
    """Yield (pid, block) pairs of gradient blocks, sharing distance work.

    Only geometric parameters are supported here; the noise derivative is
    the identity on the training diagonal and is handled by callers.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    d = A.shape[1]
    ls = model.scale_for(d)
    As, Bs = A / ls, B / ls
    D = partition.transient((A.shape[0], B.shape[0]))
    _fill_sqdist(D, As, Bs, np.einsum("ij,ij->i", As, As),
                 np.einsum("ij,ij->i", Bs, Bs))
    s2 = model.outputscale
    if model.family == "rbf":
        base = np.exp(-0.5 * D)  # k / s^2
        envelope = s2 * base     # for lengthscale grads: k itself
    else:
        r = np.sqrt(D)
        expterm = np.exp(-_SQRT3 * r)
        base = (1.0 + _SQRT3 * r) * expterm  # k / s^2
        envelope = (3.0 * s2) * expterm      # lengthscale grads use 3 s^2 e^{-sqrt3 r}
    try:
        for pid in pids:
            if pid == "outputscale":
                yield pid, base
            elif pid == "lengthscale":
                # shared lengthscale: sum_j (a_j-b_j)^2 = D * l^2
                l = float(ls[0])
                yield pid, envelope * (D / l)
            elif pid.startswith("lengthscale_"):
                i = int(pid.split("_")[1])
                S = (A[:, i, None] - B[None, :, i]) ** 2
                S /= float(ls[i]) ** 3
                yield pid, envelope * S
            else:
                raise ValueError(f"unknown hyperparameter {pid!r}")
    finally:
        partition.release(D)


def kernel_block_grad(model: KernelModel, X_rows: np.ndarray, X_cols: np.ndarray,
                      param: str) -> np.ndarray:
    """Partial derivative of a kernel block with respect to one constrained
    hyperparameter. The noise derivative is the identity on the square
    training block and zero on cross blocks."""
    X_rows = np.atleast_2d(np.asarray(X_rows, dtype=np.float64))
    X_cols = np.atleast_2d(np.asarray(X_cols, dtype=np.float64))
    if X_rows.shape[1] != X_cols.shape[1]:
        raise ValueError("dimension mismatch between row and column points")
    if param == "noise":
        out = np.zeros((X_rows.shape[0], X_cols.shape[0]))
        if X_rows.shape[0] == X_cols.shape[0]:
            idx = np.arange(X_rows.shape[0])
            out[idx, idx] = 1.0
        return out
    if param == "mean":
        raise ValueError("the mean has no kernel-block derivative")
    for pid, block in _grad_factor_blocks(model, X_rows, X_cols, [param]):
        return np.ascontiguousarray(block)
    raise ValueError(f"unknown hyperparameter {param!r}")


def grad_row_products(model: KernelModel, X: np.ndarray, start: int, stop: int,
                      R: np.ndarray, pids: list[str]) -> dict[str, np.ndarray]:
    """Products (dK/dtheta)[start:stop, :] @ R for several geometric
    hyperparameters in one pass, tiled so scratch stays far below a full
    row block."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    rows = stop - start
    out = {pid: np.empty((rows, R.shape[1])) for pid in pids}
    tile = max(1, min(rows, _TILE_ENTRIES // max(1, n)))
    for t0 in range(start, stop, tile):
        t1 = min(t0 + tile, stop)
        for pid, block in _grad_factor_blocks(model, X[t0:t1], X, pids):
            np.matmul(block, R, out=out[pid][t0 - start:t1 - start])
    return out


# ---------------------------------------------------------------------------
# Persistence: flat key-value text.
# ---------------------------------------------------------------------------

def model_to_text(model: KernelModel) -> str:
    lines = [
        f"family = {model.family}",
        f"num_lengthscales = {model.lengthscales.shape[0]}",
        f"outputscale = {model.outputscale!r}",
        "lengthscales = " + " ".join(repr(float(v)) for v in model.lengthscales),
        f"noise = {model.noise!r}",
        f"noise_floor = {model.noise_floor!r}",
        f"mean = {model.mean!r}",
    ]
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> KernelModel:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        ls = np.array([float(v) for v in fields["lengthscales"].split()])
        model = KernelModel(
            family=fields["family"],
            outputscale=float(fields["outputscale"]),
            lengthscales=ls,
            noise=float(fields["noise"]),
            mean=float(fields["mean"]),
            noise_floor=float(fields["noise_floor"]),
        )
    except KeyError as exc:
        raise ValueError(f"missing model field {exc.args[0]!r}") from exc
    if int(fields["num_lengthscales"]) != ls.shape[0]:
        raise ValueError("lengthscale count disagrees with num_lengthscales")
    return model


def save_model(model: KernelModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(model_to_text(model))


def load_model(path) -> KernelModel:
    with open(path, "r", encoding="ascii") as fh:
        return model_from_text(fh.read())
