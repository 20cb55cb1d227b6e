"""RBF kernels, conditional kernel mean embeddings and MMD utilities."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

DEFAULT_LAMBDA = 1e-4


@dataclass(frozen=True)
class KernelConfig:
    length_scale: float
    family: str = "rbf"

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array of points, got shape {arr.shape}")
    return arr


def rbf_kernel(x, y, cfg: KernelConfig) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (2.0 * cfg.length_scale**2))


def cross_gram(a, b, cfg: KernelConfig) -> np.ndarray:
    a, b = _as_points(a), _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * cfg.length_scale**2))


def gram_matrix(points, cfg: KernelConfig) -> np.ndarray:
    """Symmetric RBF Gram matrix with an exact unit diagonal."""
    pts = _as_points(points)
    if pts.shape[0] < 1:
        raise ValueError("gram_matrix needs at least one point")
    G = cross_gram(pts, pts, cfg)
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, 1.0)
    return G


def median_heuristic(points) -> float:
    """Median pairwise Euclidean distance over all pairs ``i < j``."""
    pts = _as_points(points)
    if pts.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    med = float(np.median(pdist(pts)))
    if med <= 0.0:
        raise ValueError("median pairwise distance is zero; points are (mostly) identical")
    return med


@dataclass(frozen=True, eq=False)
class CkmeModel:
    """Empirical conditional mean embedding for one lookahead step.

    ``weight_matrix`` holds ``(K_Y + N_s * lam * I)^{-1}`` over the training
    contexts and ``output_gram`` the Gram matrix of the training outputs.
    """

    lookahead: int
    inputs: np.ndarray
    outputs: np.ndarray
    input_kernel: KernelConfig
    output_kernel: KernelConfig
    lam: float
    weight_matrix: np.ndarray
    output_gram: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def context_dim(self) -> int:
        return self.inputs.shape[1]


def ckme_fit(
    inputs,
    outputs,
    lookahead: int,
    lam: float = DEFAULT_LAMBDA,
    input_kernel: KernelConfig | None = None,
    output_kernel: KernelConfig | None = None,
) -> CkmeModel:
    """Fit the empirical CKME on ``(context, obstacle position)`` pairs.

    Kernels default to the median heuristic over the respective point sets
    (falling back to a unit scale when fewer than two distinct points exist).
    """
    Z = _as_points(inputs)
    P = _as_points(outputs)
    if Z.shape[0] < 1:
        raise ValueError("ckme_fit needs at least one sample")
    if Z.shape[0] != P.shape[0]:
        raise ValueError(f"{Z.shape[0]} contexts but {P.shape[0]} outputs")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if input_kernel is None:
        input_kernel = KernelConfig(_safe_median(Z))
    if output_kernel is None:
        output_kernel = KernelConfig(_safe_median(P))

    n = Z.shape[0]
    K_Y = gram_matrix(Z, input_kernel)
    A = K_Y + n * lam * np.eye(n)
    try:
        factor = cho_factor(A, lower=True)
    except LinAlgError as exc:
        cond = np.linalg.cond(A)
        raise LinAlgError(f"regularized Gram not positive definite (cond={cond:.3e})") from exc
    M = cho_solve(factor, np.eye(n))
    M = 0.5 * (M + M.T)
    K_X = gram_matrix(P, output_kernel)
    return CkmeModel(
        lookahead=int(lookahead),
        inputs=Z.copy(),
        outputs=P.copy(),
        input_kernel=input_kernel,
        output_kernel=output_kernel,
        lam=float(lam),
        weight_matrix=M,
        output_gram=K_X,
    )


def _safe_median(points: np.ndarray) -> float:
    try:
        return median_heuristic(points)
    except ValueError:
        return 1.0


def _query(model: CkmeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] != model.context_dim:
        raise ValueError(f"context has dimension {z.shape[0]}, model expects {model.context_dim}")
    return z


def kernel_vector(model: CkmeModel, z) -> np.ndarray:
    """``(k_Y(z_hat_j, z))_j`` over the training contexts."""
    z = _query(model, z)
    d2 = np.sum((model.inputs - z) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * model.input_kernel.length_scale**2))


def ckme_weights(model: CkmeModel, z) -> np.ndarray:
    return model.weight_matrix @ kernel_vector(model, z)


def ckme_predict(model: CkmeModel, z) -> np.ndarray:
    return ckme_weights(model, z) @ model.outputs


def ckme_weights_jacobian(model: CkmeModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Return ``beta(z)`` and its Jacobian ``d beta / d z`` of shape ``(N_s, dim z)``."""
    z = _query(model, z)
    k = kernel_vector(model, z)
    ell2 = model.input_kernel.length_scale**2
    dk = k[:, None] * (model.inputs - z) / ell2
    return model.weight_matrix @ k, model.weight_matrix @ dk


def ckme_predict_gradient(model: CkmeModel, z) -> np.ndarray:
    """Jacobian of :func:`ckme_predict` with respect to ``z``, shape ``(2, dim z)``."""
    _, dbeta = ckme_weights_jacobian(model, z)
    return model.outputs.T @ dbeta


def empirical_mmd(samples_p, samples_q, cfg: KernelConfig) -> float:
    """Biased (V-statistic) MMD estimate; the square is clamped at zero."""
    X, Y = _as_points(samples_p), _as_points(samples_q)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empirical_mmd needs non-empty sample sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    kxx = cross_gram(X, X, cfg).mean()
    kyy = cross_gram(Y, Y, cfg).mean()
    kxy = cross_gram(X, Y, cfg).mean()
    return math.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0))


@dataclass(frozen=True)
class RadiusEstimate:
    epsilon: float
    method: str
    confidence_delta: float


def analytic_radius(C: float, N: int, delta: float) -> float:
    """Finite-sample MMD concentration radius ``sqrt(C/N) + sqrt(2 C log(1/delta) / N)``."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    if C < 0:
        raise ValueError(f"C must be nonnegative, got {C}")
    return math.sqrt(C / N) + math.sqrt(2.0 * C * math.log(1.0 / delta) / N)


def bootstrap_radius(
    samples,
    cfg: KernelConfig,
    n_resamples: int = 1000,
    delta: float = 0.05,
    rng: np.random.Generator | int | None = 0,
) -> float:
    """(1 - delta)-quantile of MMD between ``samples`` and its bootstrap resamples."""
    X = _as_points(samples)
    n = X.shape[0]
    if n < 2:
        raise ValueError("bootstrap radius needs at least two samples")
    if n_resamples < 100:
        raise ValueError(f"use at least 100 resamples, got {n_resamples}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rng = np.random.default_rng(rng)
    # MMD(X, X[idx])^2 = mean K + w^T K w - 2 mean_i (K w)_i with w the resample counts / n
    K = gram_matrix(X, cfg)
    kxx = K.mean()
    row_mean = K.mean(axis=0)
    stats = np.empty(n_resamples)
    for b in range(n_resamples):
        w = np.bincount(rng.integers(0, n, size=n), minlength=n) / n
        sq = kxx + w @ K @ w - 2.0 * row_mean @ w
        stats[b] = math.sqrt(max(sq, 0.0))
    return float(np.quantile(stats, 1.0 - delta, method="linear"))


def estimate_radius(samples, cfg: KernelConfig, method: str = "bootstrap", delta: float = 0.05,
                    n_resamples: int = 1000, rng=0) -> RadiusEstimate:
    if method == "bootstrap":
        eps = bootstrap_radius(samples, cfg, n_resamples=n_resamples, delta=delta, rng=rng)
    elif method == "analytic_bound":
        eps = analytic_radius(1.0, _as_points(samples).shape[0], delta)
    else:
        raise ValueError(f"unknown radius method {method!r}")
    return RadiusEstimate(epsilon=eps, method=method, confidence_delta=delta)


# --- serialization ---------------------------------------------------------

def model_to_dict(model: CkmeModel) -> dict:
    return {
        "lookahead": model.lookahead,
        "lambda": model.lam,
        "input_kernel": {"family": model.input_kernel.family,
                         "length_scale": model.input_kernel.length_scale},
        "output_kernel": {"family": model.output_kernel.family,
                          "length_scale": model.output_kernel.length_scale},
        "inputs": model.inputs.tolist(),
        "outputs": model.outputs.tolist(),
        "weight_matrix": model.weight_matrix.tolist(),
        "output_gram": model.output_gram.tolist(),
        "meta": model.meta,
    }


def model_from_dict(doc: dict) -> CkmeModel:
    return CkmeModel(
        lookahead=int(doc["lookahead"]),
        inputs=np.asarray(doc["inputs"], dtype=float),
        outputs=np.asarray(doc["outputs"], dtype=float),
        input_kernel=KernelConfig(**_kernel_fields(doc["input_kernel"])),
        output_kernel=KernelConfig(**_kernel_fields(doc["output_kernel"])),
        lam=float(doc["lambda"]),
        weight_matrix=np.asarray(doc["weight_matrix"], dtype=float),
        output_gram=np.asarray(doc["output_gram"], dtype=float),
        meta=dict(doc.get("meta", {})),
    )


def _kernel_fields(d: dict) -> dict:
    return {"family": d.get("family", "rbf"), "length_scale": float(d["length_scale"])}


def save_model(model: CkmeModel, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> CkmeModel:
    return model_from_dict(json.loads(Path(path).read_text()))
