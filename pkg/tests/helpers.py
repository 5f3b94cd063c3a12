"""Small fixtures shared by several test modules."""
import numpy as np

from anchordiff.denoiser import DenoiserInput, PatchRegressor, train_step
from anchordiff.forward import forward_marginal_array
from anchordiff.schedule import lookup, make_schedule
from anchordiff.synth import RaterModel, ShapeSpec, make_case, make_raters, make_shape_sdf
from anchordiff.volume import BinaryMask, Volume


def random_mask(rng, dims, p=0.3, spacing=(1.0, 1.0, 1.0)):
    return BinaryMask(rng.random(dims) < p, spacing)


def sphere_spec(size=16, radius=6.0):
    c = (size - 1) / 2.0
    return ShapeSpec("sphere", [(c, c, c)], [radius], (size,) * 3)


def sphere_case(size=16, radius=6.0, offsets=(0.0,), degrade="none", image=False):
    return make_case("sphere", sphere_spec(size, radius), RaterModel(tuple(offsets)), degrade, image)


def sphere_raters(size=16, radius=6.0, offsets=(0.0,)):
    return make_raters(make_shape_sdf(sphere_spec(size, radius)), RaterModel(tuple(offsets)), radius)


SCHEDULE = make_schedule("cosine", 50, 1e-6)

# acceptance id -> (passed, detail); printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def make_batch(rng, shape=(6, 6, 6), t=10, n=1, image=False):
    out = []
    for _ in range(n):
        y0 = np.where(rng.random(shape) < 0.4, 1.0, -1.0)
        y_hat = np.clip(y0 + rng.normal(0, 0.5, shape), -1, 1)
        _, ab, bb = lookup(SCHEDULE, t)
        eps = rng.standard_normal(shape)
        y_t = forward_marginal_array(y0, y_hat, ab, bb, eps)
        x = rng.uniform(-1, 1, shape) if image else None
        image_vol = None if x is None else Volume(x, kind="image")
        inp = DenoiserInput(Volume(y_t, kind="noise"), Volume(y_hat), t, image_vol)
        out.append((inp, Volume(eps, kind="noise")))
    return out


def overfit_one_batch(rng, steps=200, lr=1.0):
    """Gradient descent on one example; a step that raises the loss is undone and ``lr`` halved."""
    batch = make_batch(rng, (5, 5, 5), t=10, n=1)
    model = PatchRegressor.init(1, 16, seed=0)
    first = current = train_step(model, batch, 0.0)[1]
    for _ in range(steps):
        candidate, _ = train_step(model, batch, lr)
        loss = train_step(candidate, batch, 0.0)[1]
        if loss > current:
            lr /= 2
            continue
        model, current = candidate, loss
    return first, current
