"""Model assembly, ray-batch sampling, the training loop, checkpoints and fine-tuning."""
import csv
import json
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .ccvi import CCVI
from .encoder import Encoder
from .field import RadianceNet, gather_pixel_features, radiance
from .geometry import adjacent_pixel, rays_for_pixels
from .metrics import psnr
from .numerics import Adam, Module, ShapeError, backward, clip_grad_norm, load_arrays, no_grad, save_arrays
from .numerics import tensor as T
from .render import render_rays
from .scene import pixel_grid

ABLATIONS = {
    # name: (use_ccvi, lambda_geo, lambda_app)
    "baseline": (False, 0.0, 0.0),
    "vi": (True, 0.0, 0.0),
    "vi-geo": (True, 1e-4, 0.0),
    "vi-app": (True, 0.0, 2e-4),
    "full": (True, 1e-4, 2e-4),
}

METRIC_COLUMNS = ["iter", "loss_rec", "loss_geo", "loss_app", "loss_total", "psnr_eval", "wallclock_s"]


@dataclass
class TrainConfig:
    rays_per_iter: int = 128
    random_rays: int = 112
    reference_rays: int = 16
    neighbor_rays: int = 16
    max_offset: int = 7
    batch_scenes: int = 3
    n_source_views: int = 3
    learning_rate: float = 1e-4
    iterations: int = 1000
    seed: int = 0
    lambda_geo: float = 1e-4
    lambda_app: float = 2e-4
    tau: float = 0.1
    eps_color: float = 1e-3
    n_coarse: int = 32
    n_fine: int = 32
    d: int = 32
    width: int = 64
    n_freqs: int = 6
    omega: float = 1.5
    patch: int = 5
    band: int = 3
    use_ccvi: bool = True
    grad_clip: float = 10.0
    eval_every: int = 250
    eval_views: int = 4
    checkpoint_every: int = 0
    render_chunk: int = 1024

    def __post_init__(self):
        if self.random_rays + self.neighbor_rays != self.rays_per_iter:
            raise ValueError(f"random_rays ({self.random_rays}) + neighbor_rays ({self.neighbor_rays}) "
                             f"must equal rays_per_iter ({self.rays_per_iter})")
        if self.reference_rays != self.neighbor_rays:
            raise ValueError("every neighbour ray pairs with one reference ray: reference_rays must equal neighbor_rays")
        if self.reference_rays > self.random_rays:
            raise ValueError("reference rays are a subset of the random rays")
        for name in ("random_rays", "batch_scenes", "n_source_views", "n_coarse", "d", "width", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_offset < 1:
            raise ValueError("max_offset must be >= 1")
        if self.n_fine < 0 or self.iterations < 0:
            raise ValueError("n_fine and iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        L.LossWeights(self.lambda_geo, self.lambda_app)

    @property
    def weights(self):
        return L.LossWeights(self.lambda_geo, self.lambda_app)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def ablation_config(name, base=None):
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    use_ccvi, geo, app = ABLATIONS[name]
    return replace(base or TrainConfig(), use_ccvi=use_ccvi, lambda_geo=geo, lambda_app=app)


# ------------------------------------------------------------------- model
class FieldPair(Module):
    def __init__(self, cfg, rng):
        self.coarse = RadianceNet(cfg.d, cfg.width, rng, cfg.n_freqs, cfg.omega)
        self.fine = RadianceNet(cfg.d, cfg.width, rng, cfg.n_freqs, cfg.omega)


class ColfModel(Module):
    """Encoder, cross-view fusion and coarse/fine radiance networks.

    The fusion block is always built so that every ablation starts from the same
    initial weights for the shared parts; with ``use_ccvi`` off it is bypassed
    and excluded from optimisation.
    """

    def __init__(self, cfg, rng):
        self.encoder = Encoder(cfg.d, rng)
        self.ccvi = CCVI(cfg.d, rng, patch=cfg.patch, band=cfg.band)
        self.field = FieldPair(cfg, rng)
        self.use_ccvi = cfg.use_ccvi

    def trainable(self):
        return {k: p for k, p in self.named_parameters()
                if self.use_ccvi or not k.startswith("ccvi.")}

    def volumes(self, images):
        feats = self.encoder(images)
        return self.ccvi(feats) if self.use_ccvi else feats


def field_fn(net, volumes, cameras):
    """Adapter from (points (R, S, 3), dirs (R, 3)) to (sigma (R, S), rgb (R, S, 3))."""
    def fn(pts, dirs):
        r, s, _ = pts.shape
        flat = pts.reshape(-1, 3)
        feats, _ = gather_pixel_features(flat, volumes, cameras)
        rgb, sigma = radiance(flat, np.repeat(dirs, s, axis=0), feats, net)
        return sigma.reshape((r, s)), rgb.reshape((r, s, 3))
    return fn


# ------------------------------------------------------------------ scenes
class SceneContext:
    """Per-scene views: first N views are sources, the rest (minus "test") the target pool."""

    def __init__(self, dataset, n_source):
        if len(dataset) < n_source + 1:
            raise ValueError(f"scene {dataset.name!r} has {len(dataset)} views; need {n_source} sources + 1 target")
        self.dataset = dataset
        self.source = list(range(n_source))
        self.targets = [i for i in range(n_source, len(dataset)) if dataset.splits[i] != "test"]
        self.test = [i for i in range(n_source, len(dataset)) if dataset.splits[i] == "test"]
        if not self.targets:
            raise ValueError(f"scene {dataset.name!r} has no training target view")
        self.src_images = np.stack([dataset.images[i] for i in self.source])
        self.src_cameras = [dataset.cameras[i] for i in self.source]


@dataclass
class RayBatch:
    view: int
    pixels: np.ndarray     # (R, 2) integer pixel coordinates
    origins: np.ndarray    # (R, 3)
    dirs: np.ndarray       # (R, 3)
    colors: np.ndarray     # (R, 3) ground truth
    ref_idx: np.ndarray    # (P,) reference ray indices (tail of the random block)
    adj_idx: np.ndarray    # (P,) paired neighbour ray indices


def sample_ray_batch(ctx, config, rng):
    """Random pixels of one random target view plus neighbours of the last few."""
    ds = ctx.dataset
    view = ctx.targets[int(rng.integers(len(ctx.targets)))]
    cam = ds.cameras[view]
    n = config.random_rays
    pix = np.stack([rng.integers(0, cam.width, n), rng.integers(0, cam.height, n)], axis=1)
    ref_idx = np.arange(n - config.reference_rays, n)
    adj = [adjacent_pixel(pix[i], config.max_offset, rng, cam.width, cam.height) for i in ref_idx]
    pixels = np.concatenate([pix, np.asarray(adj, dtype=np.int64).reshape(-1, 2)], axis=0)
    adj_idx = np.arange(n, n + config.neighbor_rays)
    origins, dirs = rays_for_pixels(cam, pixels.astype(np.float64))
    colors = ds.images[view][pixels[:, 1], pixels[:, 0]]
    return RayBatch(view, pixels, origins, dirs, colors, ref_idx, adj_idx)


# ------------------------------------------------------------------ losses
@dataclass
class StepLosses:
    rec: float
    geo: float
    app: float
    total: float
    grad_norm: float = float("nan")


def batch_losses(model, config, ctx, batch, rng, volumes=None):
    """Render one ray batch and assemble (rec, geo, app) loss tensors."""
    ds = ctx.dataset
    if volumes is None:
        volumes = model.volumes(ctx.src_images)
    coarse, fine = render_rays(batch.origins, batch.dirs, ds.near, ds.far,
                               field_fn(model.field.coarse, volumes, ctx.src_cameras),
                               field_fn(model.field.fine, volumes, ctx.src_cameras),
                               config.n_coarse, config.n_fine, rng, ds.background)
    renders = [coarse.color] if fine is coarse else [coarse.color, fine.color]
    rec = L.loss_reconstruction(renders, batch.colors)
    zero = T.as_tensor(0.0)
    geo = app = zero
    if config.lambda_geo > 0:
        q = fine.Q.data
        mask = L.geometry_mask(q[batch.ref_idx], q[batch.adj_idx], config.tau)
        geo = L.loss_geometry(fine.depth, batch.ref_idx, batch.adj_idx, mask)
    if config.lambda_app > 0:
        pts = batch.origins[:, None, :] + fine.t[:, :, None] * batch.dirs[:, None, :]
        labels = L.build_pseudo_label(pts, ctx.src_images, ctx.src_cameras)
        app = L.loss_appearance(fine.rgb, labels, config.eps_color)
    return rec, geo, app


def _check_finite(name, value, iteration):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {name} loss ({value}) at iteration {iteration}")


# ----------------------------------------------------------------- trainer
class Trainer:
    """Holds model, optimiser and iteration counter for a list of scenes.

    Randomness for iteration ``k`` comes from ``default_rng([seed, k])`` so a
    resumed run needs no saved generator state.
    """

    def __init__(self, config, scenes, model=None, optimizer=None, iteration=0):
        self.config = config
        self.contexts = [SceneContext(s, config.n_source_views) for s in scenes]
        self.model = model or ColfModel(config, np.random.default_rng(config.seed))
        self.model.use_ccvi = config.use_ccvi
        self.optimizer = optimizer or Adam(self.model.trainable(), lr=config.learning_rate)
        self.iteration = iteration

    def iteration_rng(self, k):
        return np.random.default_rng([self.config.seed, k])

    def choose_scenes(self, rng):
        n = len(self.contexts)
        k = min(self.config.batch_scenes, n)
        return [int(i) for i in rng.choice(n, size=k, replace=False)]

    def train_step(self):
        cfg = self.config
        it = self.iteration
        rng = self.iteration_rng(it)
        rec = geo = app = None
        for si in self.choose_scenes(rng):
            ctx = self.contexts[si]
            batch = sample_ray_batch(ctx, cfg, rng)
            r, g, a = batch_losses(self.model, cfg, ctx, batch, rng)
            rec, geo, app = (r, g, a) if rec is None else (rec + r, geo + g, app + a)
        total = L.loss_total(rec, geo, app, cfg.weights)
        for name, t in (("reconstruction", rec), ("geometry", geo), ("appearance", app), ("total", total)):
            _check_finite(name, float(t.data), it)
        self.model.zero_grad()
        backward(total)
        params = list(self.optimizer.params.values())
        norm = clip_grad_norm(params, cfg.grad_clip)
        if not np.isfinite(norm):
            raise FloatingPointError(f"non-finite gradient norm at iteration {it}")
        self.optimizer.step()
        self.iteration += 1
        return StepLosses(float(rec.data), float(geo.data), float(app.data), float(total.data), norm)

    def evaluate(self, max_views=None):
        """Mean PSNR over held-out ("test") views of every scene; NaN if there are none."""
        max_views = self.config.eval_views if max_views is None else max_views
        scores = []
        for ctx in self.contexts:
            for v in ctx.test[:max_views]:
                img, _, _ = render_view(self.model, self.config, ctx, ctx.dataset.cameras[v])
                scores.append(psnr(img, ctx.dataset.images[v]))
        return float(np.mean(scores)) if scores else float("nan")

    def train(self, iterations=None, log_path=None, checkpoint_path=None, verbose=False):
        cfg = self.config
        end = self.iteration + (cfg.iterations if iterations is None else iterations)
        start = time.perf_counter()
        writer = fh = None
        if log_path is not None:
            new = not Path(log_path).exists() or self.iteration == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRIC_COLUMNS)
        history = []
        try:
            while self.iteration < end:
                s = self.train_step()
                it = self.iteration
                ev = ""
                if cfg.eval_every and (it % cfg.eval_every == 0 or it == end):
                    ev = self.evaluate()
                history.append(s)
                if writer is not None:
                    writer.writerow([it, repr(s.rec), repr(s.geo), repr(s.app), repr(s.total),
                                     "" if ev == "" else repr(ev), f"{time.perf_counter() - start:.3f}"])
                    fh.flush()
                if verbose and (ev != "" or it % 50 == 0):
                    print(f"iter {it:6d} loss {s.total:.5f} rec {s.rec:.5f} geo {s.geo:.4f} app {s.app:.4f}"
                          + ("" if ev == "" else f" psnr {ev:.2f}"), flush=True)
                if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, self)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self)
        return history


# ----------------------------------------------------------------- render
def render_view(model, config, ctx, camera, chunk=None):
    """Deterministic full-image render: (rgb (H, W, 3), depth (H, W), opacity (H, W))."""
    chunk = chunk or config.render_chunk
    ds = ctx.dataset
    uv = pixel_grid(camera.width, camera.height).reshape(-1, 2)
    origins, dirs = rays_for_pixels(camera, uv)
    cols, deps, ops = [], [], []
    with no_grad():
        volumes = model.volumes(ctx.src_images)
        fc = field_fn(model.field.coarse, volumes, ctx.src_cameras)
        ff = field_fn(model.field.fine, volumes, ctx.src_cameras)
        for s in range(0, len(uv), chunk):
            _, fine = render_rays(origins[s:s + chunk], dirs[s:s + chunk], ds.near, ds.far, fc, ff,
                                  config.n_coarse, config.n_fine, None, ds.background)
            cols.append(fine.color.data)
            deps.append(fine.depth.data)
            ops.append(fine.opacity.data)
    shape = (camera.height, camera.width)
    return (np.concatenate(cols).reshape(shape + (3,)), np.concatenate(deps).reshape(shape),
            np.concatenate(ops).reshape(shape))


# ------------------------------------------------------------ checkpoints
def sidecar_path(path):
    return Path(str(path) + ".json")


def save_checkpoint(path, trainer):
    arrays = dict(trainer.model.state_dict())
    for k, v in trainer.optimizer.state_dict().items():
        arrays[f"optim.{k}"] = v
    arrays["meta.iteration"] = np.array(float(trainer.iteration))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_arrays(tmp, arrays)
    os.replace(tmp, path)
    sidecar_path(path).write_text(json.dumps({"iteration": trainer.iteration, "config": trainer.config.to_dict()},
                                             indent=1))
    return path


def load_checkpoint(path, scenes, config=None):
    """Rebuild a Trainer from ``path`` for ``scenes``.

    ``config`` may override run settings (iterations, seed, loss weights, ...)
    but must agree with the stored network dimensions.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta = json.loads(sidecar_path(path).read_text())
    stored = TrainConfig.from_dict(meta["config"])
    if config is None:
        config = stored
    for key in ("d", "width", "n_freqs", "patch", "band"):
        if getattr(config, key) != getattr(stored, key):
            raise ShapeError(f"checkpoint {path} has {key}={getattr(stored, key)}, config asks for {getattr(config, key)}")
    arrays = load_arrays(path)
    model = ColfModel(stored, np.random.default_rng(0))
    model.load_state_dict(arrays)
    model.use_ccvi = config.use_ccvi
    optim = Adam(model.trainable(), lr=config.learning_rate)
    prefix = "optim."
    ostate = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    if ostate:
        ostate = {k: v for k, v in ostate.items()
                  if k == "step" or k.split(".", 1)[1] in optim.params}
        missing = [k for k in optim.params if f"m.{k}" not in ostate]
        if not missing:
            optim.load_state_dict(ostate)
    it = int(arrays.get("meta.iteration", np.array(0.0)))
    return Trainer(config, scenes, model=model, optimizer=optim, iteration=it)


def fine_tune(checkpoint, scene, iterations, out_path, config=None, log_path=None):
    """Continue optimisation of ``checkpoint`` on a single scene; the input file is left untouched."""
    if Path(out_path).resolve() == Path(checkpoint).resolve():
        raise ValueError("fine_tune writes a new checkpoint; out_path must differ from the input")
    tr = load_checkpoint(checkpoint, [scene], config)
    tr.train(iterations, log_path=log_path)
    save_checkpoint(out_path, tr)
    return tr
