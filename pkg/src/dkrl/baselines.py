"""Single-kernel comparison estimators: product kernel and single-input KRR variants."""

from dataclasses import dataclass

import numpy as np

from .estimators import matrix_from_json, matrix_to_json
from .kernels import KernelSpec, as_points, gram, resolve, solve_shifted
from .numerics import check_finite

KINDS = ("prod_kernel", "z_only", "x_only", "zx_concat")


@dataclass(frozen=True)
class BaselineModel:
    kind: str
    weights: np.ndarray
    train_z: np.ndarray
    train_x: np.ndarray
    spec_g: KernelSpec
    spec_h: KernelSpec
    lam: float
    # per-block scale factors used by zx_concat
    z_scale: float = 1.0
    x_scale: float = 1.0


def _unit_average_norm(pts):
    avg = float(np.mean(np.linalg.norm(pts, axis=1)))
    return 1.0 / avg if avg > 0 else 1.0


def _train_gram(model_or_parts, z, x):
    kind, spec_g, spec_h, train_z, train_x, zs, xs = model_or_parts
    if kind == "prod_kernel":
        return gram(spec_g, z, train_z).values * gram(spec_h, x, train_x).values
    if kind == "z_only":
        return gram(spec_g, z, train_z).values
    if kind == "x_only":
        return gram(spec_h, x, train_x).values
    joint_q = np.hstack([z * zs, x * xs])
    joint_t = np.hstack([train_z * zs, train_x * xs])
    return gram(spec_g, joint_q, joint_t).values


def baseline_fit(z, x, y, kind, spec_g=None, spec_h=None, lam=1e-3):
    """Kernel ridge regression with a composed kernel, ``(K + n lam I) alpha = y``.

    ``zx_concat`` rescales each block to unit average row norm, then applies
    ``spec_g`` to the concatenated vectors.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")
    if not lam > 0:
        raise ValueError("lam must be positive")
    zp, xp = as_points(z, "z"), as_points(x, "x")
    yv = check_finite(np.asarray(y, dtype=float).ravel(), "y")
    n = yv.shape[0]
    if zp.shape[0] != n or xp.shape[0] != n:
        raise ValueError("z, x and y must have the same number of samples")
    spec_g = spec_g or KernelSpec()
    spec_h = spec_h or KernelSpec()
    zs = xs = 1.0
    if kind == "zx_concat":
        zs, xs = _unit_average_norm(zp), _unit_average_norm(xp)
        spec_g = resolve(spec_g, np.hstack([zp * zs, xp * xs]))
    else:
        spec_g = resolve(spec_g, zp)
        spec_h = resolve(spec_h, xp)
    k = _train_gram((kind, spec_g, spec_h, zp, xp, zs, xs), zp, xp)
    k = 0.5 * (k + k.T)
    weights = solve_shifted(k, n * lam, yv)
    return BaselineModel(kind, weights, zp, xp, spec_g, spec_h, float(lam), zs, xs)


def baseline_predict(model, z, x):
    zq, xq = as_points(z, "z"), as_points(x, "x")
    if zq.shape[1] != model.train_z.shape[1] or xq.shape[1] != model.train_x.shape[1]:
        raise ValueError("query dimensions do not match training data")
    if zq.shape[0] != xq.shape[0]:
        raise ValueError("z and x queries must pair up")
    parts = (model.kind, model.spec_g, model.spec_h, model.train_z, model.train_x,
             model.z_scale, model.x_scale)
    return _train_gram(parts, zq, xq) @ model.weights


def baseline_to_dict(model):
    return {
        "kind": model.kind,
        "spec_g": model.spec_g.to_dict(),
        "spec_h": model.spec_h.to_dict(),
        "lambda": model.lam,
        "z_scale": model.z_scale,
        "x_scale": model.x_scale,
        "train_z": matrix_to_json(model.train_z),
        "train_x": matrix_to_json(model.train_x),
        "weights": [float(w) for w in model.weights],
    }


def baseline_from_dict(d):
    if d.get("kind") not in KINDS:
        raise ValueError(f"not a baseline model document (kind={d.get('kind')!r})")
    return BaselineModel(
        d["kind"], np.asarray(d["weights"], dtype=float), matrix_from_json(d["train_z"]),
        matrix_from_json(d["train_x"]), KernelSpec.from_dict(d["spec_g"]),
        KernelSpec.from_dict(d["spec_h"]), float(d["lambda"]), float(d["z_scale"]), float(d["x_scale"]),
    )
