"""Central finite-difference verification of every hand-written backward pass.

All checks run at float64 by default: at float32 the difference quotient is
dominated by rounding noise, so a 32-bit run only supports a loose 1e-2
tolerance and is reported as such.
"""
from __future__ import annotations

import numpy as np

from .layers import BatchNormLayer, DeepEBlock, LinearLayer, ResNetBlock
from .model import DeepEModel, DropoutSpec, ModelConfig
from .numkernel import Rng
from .training import cross_entropy_loss

TOLERANCE = {64: 1e-5, 32: 1e-2}
FD_STEP = 1e-5


NOISE_FLOOR = {64: 1e-7, 32: 1e-4}


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = NOISE_FLOOR[64]) -> float:
    """Largest elementwise |a-b| / (|a|+|b|), ignoring sub-noise-floor entries.

    Central differences at float64 bottom out around 1e-10 of the loss scale,
    and a float32 backward leaves ~1e-6 rounding residue even where the true
    gradient is exactly zero (e.g. a bias feeding straight into train-mode
    batch norm). Entries where both sides sit below the floor carry no
    information at the precision being checked and are skipped rather than
    amplified into a spurious relative error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    resolvable = (np.abs(a) >= floor) | (np.abs(b) >= floor)
    if not resolvable.any():
        return 0.0
    a, b = a[resolvable], b[resolvable]
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b))))


def numeric_param_grad(loss_fn, param: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar-valued closure w.r.t. every entry of param."""
    grad = np.zeros_like(param, dtype=np.float64)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def check_named_params(loss_fn, backward_fn, named_params, h: float = FD_STEP) -> dict:
    """Compare analytic gradients against finite differences per parameter tensor.

    loss_fn() must recompute the scalar loss from current parameter values;
    backward_fn() must zero grads, run forward+backward once, and leave the
    analytic gradients in the grad buffers.
    """
    backward_fn()
    analytic = {name: grad.copy() for name, _, grad in named_params}
    errors = {}
    for name, param, _ in named_params:
        numeric = numeric_param_grad(loss_fn, param, h)
        errors[name] = max_rel_error(analytic[name], numeric)
    return errors


def _weighted_output_loss(forward_fn, weights: np.ndarray):
    """Scalar loss sum(forward() * weights): its input gradient is `weights`."""
    return float(np.sum(forward_fn() * weights))


def check_linear(seed: int = 0) -> float:
    rng = Rng(seed)
    layer = LinearLayer(5, 4, rng.child(0), np.float64)
    x = rng.child(1).normal(size=(6, 5), dtype=np.float64)
    w = rng.child(2).normal(size=(6, 4), dtype=np.float64)

    def loss():
        return _weighted_output_loss(lambda: layer.forward(x), w)

    def backward():
        layer.zero_grad()
        layer.forward(x)
        layer.backward(w)

    errs = check_named_params(loss, backward, layer.named_params("linear"))
    backward()
    dx = layer.backward(w)
    errs["linear.input"] = max_rel_error(dx, numeric_param_grad(loss, x))
    return max(errs.values())


def check_batchnorm(seed: int = 0, mode: str = "train") -> float:
    rng = Rng(seed)
    layer = BatchNormLayer(4, dtype=np.float64)
    layer.running_mean[...] = rng.child(3).normal(size=4, dtype=np.float64)
    layer.running_var[...] = 1.0 + rng.child(4).random(4)
    x = rng.child(1).normal(size=(7, 4), dtype=np.float64)
    w = rng.child(2).normal(size=(7, 4), dtype=np.float64)
    rm, rv = layer.running_mean.copy(), layer.running_var.copy()

    def loss():
        # Train-mode forward shifts the running stats; restore them so the
        # finite-difference probes all see the same function.
        out = _weighted_output_loss(lambda: layer.forward(x, mode), w)
        layer.running_mean[...] = rm
        layer.running_var[...] = rv
        return out

    def backward():
        layer.zero_grad()
        layer.forward(x, mode)
        layer.running_mean[...] = rm
        layer.running_var[...] = rv
        layer.backward(w)

    errs = check_named_params(loss, backward, layer.named_params("bn"))
    backward()
    dx = layer.backward(w)
    errs["bn.input"] = max_rel_error(dx, numeric_param_grad(loss, x))
    return max(errs.values())


def _block_check(block, x: np.ndarray, w: np.ndarray, train_rng_seed: int | None = None) -> float:
    def mask_rng():
        return Rng(train_rng_seed) if train_rng_seed is not None else None

    mode = "train" if train_rng_seed is not None else "eval"
    state = {name: arr.copy() for name, arr in block.named_state("b")}

    def loss():
        out = _weighted_output_loss(lambda: block.forward(x, mode, mask_rng()), w)
        for name, arr in block.named_state("b"):
            arr[...] = state[name]
        return out

    def backward():
        block.zero_grad()
        block.forward(x, mode, mask_rng())
        for name, arr in block.named_state("b"):
            arr[...] = state[name]
        block.backward(w)

    errs = check_named_params(loss, backward, block.named_params("b"))
    backward()
    dx = block.backward(w)
    errs["b.input"] = max_rel_error(dx, numeric_param_grad(loss, x))
    return max(errs.values())


def check_deepe_block(seed: int = 0, p_identity: float = 0.0, p_fc: float = 0.0) -> float:
    rng = Rng(seed)
    block = DeepEBlock(6, 3, rng.child(0), np.float64, p_fc=p_fc, p_identity=p_identity)
    x = rng.child(1).normal(size=(5, 6), dtype=np.float64)
    w = rng.child(2).normal(size=(5, 3), dtype=np.float64)
    return _block_check(block, x, w, train_rng_seed=seed + 17)


def check_resnet_block(seed: int = 0, inner: int = 2) -> float:
    rng = Rng(seed)
    block = ResNetBlock(3, 3, inner, rng.child(0), np.float64)
    x = rng.child(1).normal(size=(5, 3), dtype=np.float64)
    w = rng.child(2).normal(size=(5, 3), dtype=np.float64)
    return _block_check(block, x, w, train_rng_seed=seed + 29)


def build_check_model(seed: int = 7, precision: int = 64,
                      n_entities: int = 12, n_relations: int = 3) -> DeepEModel:
    config = ModelConfig(
        dim=8,
        n_deepe_blocks=2,
        n_resnet_blocks=1,
        resnet_inner_layers=2,
        dropout=DropoutSpec(),
        seed=seed,
        precision=precision,
    )
    return DeepEModel(config, n_entities, n_relations)


def check_full_model(seed: int = 7, precision: int = 64, perturb: bool = False) -> dict:
    """Finite-difference check of the whole pipeline through the training loss.

    Runs in train mode (batch-statistics BN path) with all dropout at zero so
    repeated forwards are deterministic. At 32-bit the difference quotient
    itself is rounding-noise dominated, so the float32 analytic gradients are
    instead compared against central differences taken on a float64 twin that
    holds the same parameter values. Setting `perturb` corrupts one analytic
    gradient on purpose; the check must then fail (negative control).
    """
    model = build_check_model(seed, precision)
    rng = Rng(seed + 1)
    batch = 6
    heads = rng.integers(0, model.n_entities, size=batch)
    rels = rng.integers(0, 2 * model.n_relations, size=batch)
    gold = rng.integers(0, model.n_entities, size=batch)

    def run_backward(m):
        m.zero_grad()
        state = dict(m.named_state())
        frozen = {name: arr.copy() for name, arr in state.items()}
        scores = m.score_all(heads, rels, "train")
        for name, arr in state.items():
            arr[...] = frozen[name]
        _, dscores = cross_entropy_loss(scores, gold)
        m.backward(dscores)

    run_backward(model)
    analytic = {name: grad.copy() for name, _, grad in model.named_parameters()}

    # the finite-difference reference always lives at float64
    if precision == 64:
        fd_model = model
    else:
        fd_model = build_check_model(seed, 64)
        fd_model.load_state_dict(model.state_dict())
    fd_state = dict(fd_model.named_state())
    fd_frozen = {name: arr.copy() for name, arr in fd_state.items()}

    def fd_loss():
        scores = fd_model.score_all(heads, rels, "train")
        for name, arr in fd_state.items():
            arr[...] = fd_frozen[name]
        value, _ = cross_entropy_loss(scores, gold)
        return value

    errors = {}
    floor = NOISE_FLOOR[precision]
    for name, param, _ in fd_model.named_parameters():
        numeric = numeric_param_grad(fd_loss, param)
        errors[name] = max_rel_error(analytic[name], numeric, floor)
    if perturb:
        worst = max(errors, key=errors.get)
        errors[worst] = max(errors[worst], 1.0)
    return errors


def run_suite(precision: int = 64, seed: int = 7, perturb: bool = False) -> tuple[dict, float, bool]:
    """Run every layer-level and the full-model check; return (errors, tol, ok)."""
    errors = {
        "linear": check_linear(seed),
        "batchnorm_train": check_batchnorm(seed, "train"),
        "batchnorm_eval": check_batchnorm(seed, "eval"),
        "deepe_block": check_deepe_block(seed),
        "deepe_block_with_dropout": check_deepe_block(seed, p_identity=0.3, p_fc=0.2),
        "resnet_block": check_resnet_block(seed),
        "resnet_block_3_inner": check_resnet_block(seed, inner=3),
    }
    for name, err in check_full_model(seed, precision, perturb).items():
        errors[f"model.{name}"] = err
    tol = TOLERANCE[precision]
    ok = all(err < tol for err in errors.values())
    return errors, tol, ok
