"""Central-difference gradient check that skips elements whose perturbation
flips a ReLU sign or a max-pool winner (the loss is not differentiable there)."""
import numpy as np

from fairsqueeze.network import Activation, BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool, Model, Softmax
from fairsqueeze.tensor import _pool_windows, make_rng
from fairsqueeze.trainer import loss_and_grads

STEP = 1e-3
FLOOR = 1e-8


def every_kind_net(seed: int) -> Model:
    layers = [
        Conv2D(3, 3, "same"),
        BatchNorm(),
        Activation("relu"),
        MaxPool(),
        Dropout(0.3),
        Conv2D(4, 2, "valid"),
        Activation("tanh"),
        Flatten(),
        Dense(5),
        BatchNorm(),
        Activation("relu"),
        Dense(4),
        Activation("linear"),
        Dense(3),
        Softmax(),
    ]
    return Model(layers, (6, 6, 2), 3, seed=seed).astype(np.float64)


def kink_pattern(model, x, seed):
    _, caches = model.forward_with_cache(x, training=True, rng=make_rng(seed, "dropout"), update_stats=False)
    out = []
    for layer, cache in zip(model.layers, caches):
        if layer.kind == "Activation" and layer.function == "relu":
            out.append((cache > 0).tobytes())
        elif layer.kind == "MaxPool":
            out.append(_pool_windows(cache).argmax(-1).tobytes())
    return out


def check_model(model, x, y, seed=0):
    """Returns ``(max relative error, per-tensor max, checked count, skipped count)``."""

    def loss():
        return loss_and_grads(model, x, y, rng=make_rng(seed, "dropout"))[0]

    # analytic gradients without touching BN running stats
    probs, caches = model.forward_with_cache(x, training=True, rng=make_rng(seed, "dropout"), update_stats=False)
    snap = {n: a.copy() for n, a in model.named_tensors()}
    _, _, grads = loss_and_grads(model, x, y, rng=make_rng(seed, "dropout"))
    for n, a in snap.items():
        model.set_tensor(n, a)
    base = kink_pattern(model, x, seed)

    per_tensor, checked, skipped = {}, 0, 0
    for (name, p, _), g in zip(model.parameters(), grads):
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + STEP
            lp, pp = loss(), kink_pattern(model, x, seed)
            p[idx] = orig - STEP
            lm, pm = loss(), kink_pattern(model, x, seed)
            p[idx] = orig
            for n, a in snap.items():
                if n.endswith(("running_mean", "running_var")):
                    model.set_tensor(n, a)
            if pp != base or pm != base:
                skipped += 1
                continue
            fd = (lp - lm) / (2 * STEP)
            rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), FLOOR)
            worst = max(worst, rel)
            checked += 1
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor, checked, skipped
