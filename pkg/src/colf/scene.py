"""Analytic scenes, the dense-quadrature oracle renderer, and dataset I/O."""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, look_at, rays_for_pixels

FORMAT_VERSION = 1
LIGHT_DIR = np.array([0.4, -0.3, 0.85]) / np.linalg.norm([0.4, -0.3, 0.85])
AMBIENT = 0.35


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = half extents)."""
    shape: str
    center: tuple
    size: object
    density: float
    color: tuple
    shaded: bool = False
    shell: float = 0.1  # soft edge width as a fraction of radius / smallest half extent

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.density < 0:
            raise ValueError("primitive density must be >= 0")
        c = np.asarray(self.color, dtype=np.float64)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ValueError(f"primitive color must be RGB in [0,1], got {self.color}")

    def evaluate(self, x):
        """(density (P,), inside (P,), rgb (P, 3)) at points x (P, 3)."""
        c = np.asarray(self.center, dtype=np.float64)
        off = x - c
        if self.shape == "sphere":
            r = float(self.size)
            dist = np.linalg.norm(off, axis=-1)
            inside = dist <= r
            width = self.shell * r
            frac = np.clip((r - dist) / width, 0.0, 1.0) if width > 0 else inside.astype(float)
            normal = off / np.maximum(dist, 1e-12)[:, None]
        else:
            h = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            margin = h - np.abs(off)
            inside = np.all(margin >= 0, axis=-1)
            width = self.shell * h.min()
            m = margin.min(axis=-1)
            frac = np.clip(m / width, 0.0, 1.0) if width > 0 else inside.astype(float)
            axis = np.argmax(np.abs(off) / h, axis=-1)
            normal = np.zeros_like(off)
            normal[np.arange(len(off)), axis] = np.sign(off[np.arange(len(off)), axis])
        rgb = np.broadcast_to(np.asarray(self.color, dtype=np.float64), off.shape)
        if self.shaded:
            lam = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
            rgb = rgb * lam[:, None]
        return self.density * frac, inside, rgb

    def to_dict(self):
        size = self.size if np.isscalar(self.size) else list(map(float, self.size))
        return {"shape": self.shape, "center": list(map(float, self.center)), "size": size,
                "density": self.density, "color": list(map(float, self.color)),
                "shaded": self.shaded, "shell": self.shell}


@dataclass(frozen=True)
class AnalyticField:
    primitives: tuple
    background: tuple = (0.0, 0.0, 0.0)

    def __call__(self, x):
        return field_eval_batch(self, x)


def field_eval_batch(fld, x):
    """Density and colour at points x (..., 3) -> (sigma (...), rgb (..., 3))."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    n = len(pts)
    sigma = np.zeros(n)
    acc = np.zeros((n, 3))
    first = np.full((n, 3), np.nan)
    for prim in fld.primitives:
        s, inside, rgb = prim.evaluate(pts)
        sigma += s
        acc += s[:, None] * rgb
        take = inside & np.isnan(first[:, 0])
        first[take] = rgb[take]
    bg = np.asarray(fld.background, dtype=np.float64)
    out = np.where(np.isnan(first), bg, first)
    pos = sigma > 0
    out[pos] = acc[pos] / sigma[pos, None]
    return sigma.reshape(lead), out.reshape(lead + (3,))


def field_eval(fld, x):
    sigma, rgb = field_eval_batch(fld, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return float(sigma[0]), rgb[0]


# ------------------------------------------------------------ oracle render
def quadrature(sigma, rgb, t, delta, background):
    """Plain numpy compositing: returns (color, depth, opacity)."""
    tau = sigma * delta
    alpha = 1.0 - np.exp(-tau)
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    w = trans * alpha
    color = (w[..., None] * rgb).sum(axis=-2)
    opacity = w.sum(axis=-1)
    color = color + (1.0 - opacity)[..., None] * np.asarray(background)
    return color, (w * t).sum(axis=-1), opacity


def oracle_render_rays(fld, origins, dirs, near, far, n_samples, chunk=2048):
    """Midpoint-rule volume rendering of the analytic field along rays."""
    if n_samples < 2:
        raise ValueError("oracle render needs at least 2 samples per ray")
    step = (far - near) / n_samples
    t = near + (np.arange(n_samples) + 0.5) * step
    colors, depths, opac = [], [], []
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk]
        d = dirs[s:s + chunk]
        x = o[:, None, :] + t[None, :, None] * d[:, None, :]
        sigma, rgb = field_eval_batch(fld, x)
        c, dep, op = quadrature(sigma, rgb, t[None, :], step, fld.background)
        colors.append(c)
        depths.append(dep)
        opac.append(op)
    return np.concatenate(colors), np.concatenate(depths), np.concatenate(opac)


def pixel_grid(width, height):
    jj, ii = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([ii, jj], axis=-1)


def oracle_render(fld, camera, n_samples, near, far, return_opacity=False):
    """Ground-truth image (H, W, 3) and depth map (H, W) by dense quadrature."""
    uv = pixel_grid(camera.width, camera.height).reshape(-1, 2)
    o, d = rays_for_pixels(camera, uv)
    c, dep, op = oracle_render_rays(fld, o, d, near, far, n_samples)
    shape = (camera.height, camera.width)
    out = (c.reshape(shape + (3,)), dep.reshape(shape))
    return out + (op.reshape(shape),) if return_opacity else out


# ------------------------------------------------------------------ presets
def tri_sphere(density=25.0, shell=0.1):
    """Three disjoint shaded spheres of distinct radii inside the unit cube."""
    return AnalyticField((
        Primitive("sphere", (0.25, -0.2, 0.0), 0.25, density, (0.9, 0.25, 0.2), True, shell),
        Primitive("sphere", (-0.25, 0.1, 0.1), 0.2, density, (0.2, 0.8, 0.3), True, shell),
        Primitive("sphere", (0.0, 0.3, -0.2), 0.15, density, (0.25, 0.35, 0.95), True, shell),
    ))


def random_spheres(seed, n=3, density=25.0, shell=0.1):
    """Seeded scene of ``n`` disjoint shaded spheres inside the unit cube."""
    rng = np.random.default_rng([seed, 7919])
    prims = []
    while len(prims) < n:
        r = rng.uniform(0.12, 0.28)
        c = rng.uniform(-0.5 + r, 0.5 - r, size=3)
        if all(np.linalg.norm(c - np.asarray(p.center)) > r + p.size + 0.02 for p in prims):
            col = tuple(float(v) for v in rng.uniform(0.1, 0.95, size=3))
            prims.append(Primitive("sphere", tuple(float(v) for v in c), float(r), density, col, True, shell))
    return AnalyticField(tuple(prims))


PRESETS = {"tri-sphere": lambda seed: tri_sphere(), "random-spheres": random_spheres}


# ------------------------------------------------------------------ datasets
@dataclass
class SceneDataset:
    cameras: list
    images: list
    near: float
    far: float
    splits: list
    background: tuple = (0.0, 0.0, 0.0)
    depths: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DatasetError(f"{len(self.images)} images for {len(self.cameras)} cameras")
        for i, (img, cam) in enumerate(zip(self.images, self.cameras)):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"image {i} has shape {img.shape}, camera expects {(cam.height, cam.width, 3)}")
        if len(self.splits) != len(self.cameras):
            raise DatasetError("one split label per view required")

    def __len__(self):
        return len(self.cameras)

    def indices(self, label):
        return [i for i, s in enumerate(self.splits) if s == label]


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def ring_poses(n_views, n_source, seed, radius=4.0, arc_deg=120.0, elevation_deg=25.0, jitter_deg=10.0):
    """Sources evenly spaced over the arc; further views at seeded random azimuths."""
    rng = np.random.default_rng([seed, 104729])
    half = np.deg2rad(arc_deg) / 2
    if n_source > 1:
        az = list(np.linspace(-half, half, n_source))
    else:
        az = [0.0] * n_source
    el = [np.deg2rad(elevation_deg)] * n_source
    for _ in range(n_views - n_source):
        az.append(rng.uniform(-half, half))
        el.append(np.deg2rad(elevation_deg + rng.uniform(-jitter_deg, jitter_deg)))
    eyes = [radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)]) for a, e in zip(az, el)]
    return eyes


def hemisphere_poses(n_views, n_source, seed, radius=4.0):
    rng = np.random.default_rng([seed, 15485863])
    eyes = []
    golden = np.pi * (3 - np.sqrt(5))
    for k in range(n_views):
        if k < n_source:
            z = 0.2 + 0.6 * (k + 0.5) / max(n_source, 1)
            a = k * golden
        else:
            z = rng.uniform(0.15, 0.9)
            a = rng.uniform(0, 2 * np.pi)
        rxy = np.sqrt(1 - z * z)
        eyes.append(radius * np.array([rxy * np.cos(a), rxy * np.sin(a), z]))
    return eyes


def make_scene(fld, n_views, size=64, seed=0, layout="ring", n_source=3, n_test=0,
               near=2.5, far=5.5, radius=4.0, focal_scale=3.0, n_samples=512, name=""):
    """Render a posed multi-view dataset of an analytic field.

    The first ``n_source`` views are labelled "source", the last ``n_test``
    "test", the rest "target". Images are quantised to 8 bits so that the PNG
    round trip is exact; depth maps stay float64.
    """
    if n_views < 2:
        raise DatasetError("a scene needs at least 2 views")
    n_source = min(n_source, n_views)
    if layout == "ring":
        eyes = ring_poses(n_views, n_source, seed, radius)
    elif layout == "hemisphere":
        eyes = hemisphere_poses(n_views, n_source, seed, radius)
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    for i in range(n_views):
        for j in range(i):
            if np.linalg.norm(eyes[i] - eyes[j]) < 1e-6:
                raise DatasetError(f"degenerate layout: cameras {j} and {i} coincide")
    f = focal_scale * size
    c = (size - 1) / 2.0
    cams, imgs, deps = [], [], []
    for eye in eyes:
        cam = Camera(f, f, c, c, look_at(eye, (0.0, 0.0, 0.0)), size, size)
        img, dep = oracle_render(fld, cam, n_samples, near, far)
        cams.append(cam)
        imgs.append(quantize(img))
        deps.append(dep)
    n_test = min(n_test, n_views - n_source)
    splits = ["source"] * n_source + ["target"] * (n_views - n_source - n_test) + ["test"] * n_test
    return SceneDataset(cams, imgs, near, far, splits, tuple(fld.background), deps, name)


# ---------------------------------------------------------------- persistence
def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_depth(path, depth):
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f8").tobytes())


def read_depth(path):
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DatasetError(f"{path}: depth file truncated (no header)")
    w, h = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 8 * w * h:
        raise DatasetError(f"{path}: depth file truncated ({len(buf)} bytes for {w}x{h})")
    return np.frombuffer(buf, dtype="<f8", offset=8).reshape(h, w).astype(np.float64)


def save_png(path, img):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_dataset(ds, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images, depths, sums = [], [], {}
    for i, img in enumerate(ds.images):
        name = f"view_{i:03d}.png"
        save_png(root / name, img)
        images.append(name)
        sums[name] = _sha256(root / name)
    for i, dep in enumerate(ds.depths):
        name = f"view_{i:03d}.depth"
        write_depth(root / name, dep)
        depths.append(name)
        sums[name] = _sha256(root / name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "background": list(map(float, ds.background)),
        "near": ds.near,
        "far": ds.far,
        "cameras": [c.to_dict() for c in ds.cameras],
        "images": images,
        "depths": depths,
        "splits": list(ds.splits),
        "checksums": sums,
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(path, verify=True):
    root = Path(path)
    mpath = root / "scene.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing manifest {mpath}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {mpath}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    for key in ("near", "far", "cameras", "images", "splits"):
        if key not in manifest:
            raise DatasetError(f"malformed manifest {mpath}: missing field {key!r}")
    sums = manifest.get("checksums", {})
    cams = [Camera.from_dict(c) for c in manifest["cameras"]]

    def _read(name, reader):
        fpath = root / name
        if not fpath.exists():
            raise DatasetError(f"missing file {fpath}")
        if verify and name in sums and _sha256(fpath) != sums[name]:
            raise DatasetError(f"checksum mismatch for {fpath}")
        return reader(fpath)

    imgs = [_read(n, load_png) for n in manifest["images"]]
    deps = [_read(n, read_depth) for n in manifest.get("depths", [])]
    return SceneDataset(cams, imgs, float(manifest["near"]), float(manifest["far"]), list(manifest["splits"]),
                        tuple(manifest.get("background", (0.0, 0.0, 0.0))), deps, manifest.get("name", ""))
