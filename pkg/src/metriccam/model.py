"""Small fully-convolutional depth regressor and its training loop.

The network maps an image (plus optional camera-geometry channels) to a
positive depth map through three 3x3 conv+ReLU stages, a 1x1 head, and
a softplus. All arithmetic is float64 numpy/our kernels; gradients are
exact. With a 7x7 receptive field the model can only exploit local
appearance, which is precisely the regime where the choice of
canonicalization decides whether metric depth is learnable at all.

Training variants:

  canon_label  train on raw images against depth scaled by f_c / f;
               at inference scale the output back by f / f_c.
  canon_image  resample the image (and labels) to the canonical focal
               length; the network sees one consistent focal and
               predicts metric depth on the canonical grid.
  none         raw image to metric depth with no focal handling.
  camconvs     raw image plus per-pixel camera-geometry channels.

Determinism: every stochastic consumer draws from its own generator
seeded as [seed, stream, iteration, ...], so adding or removing one
never shifts the draws of another.
"""

from dataclasses import dataclass, field, replace
import math
from pathlib import Path

import numpy as np

from . import fileio, kernels, synthscene
from .camera import (CameraIntrinsics, DepthMap, ImageMap, camconvs_encoding,
                     canonicalize_image, canonicalize_labels, crop_padded,
                     decanonicalize_image, decanonicalize_labels,
                     effective_focal, mirror_intrinsics, resize_nearest)
from .errors import DivergenceError, DomainError, FileFormatError, StateError
from .evalmetrics import depth_metrics
from .losses import total_loss

VARIANTS = ("canon_label", "canon_image", "none", "camconvs")

INIT_STREAM = 30
DATA_STREAM = 31
CROP_STREAM = 32
PATCH_STREAM = 11
TRIPLET_STREAM = 12
PAIR_STREAM = 13

DEFAULT_WIDTHS = (16, 32, 16)
FINAL_BIAS = 40.0   # softplus(b) ~= b here; start near the corpus median
                    # canonical depth, since Adam moves the raw-scale head
                    # only about lr units per step
MAX_PARAMS = 20000


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class TinyDepthNet:
    """conv3x3 -> relu, x3, then 1x1 conv and softplus.

    Parameters live in ``params`` as [w0, b0, w1, b1, w2, b2, w3, b3];
    layer i owns params[2i] and params[2i+1].
    """

    def __init__(self, in_channels: int = 1, widths: tuple = DEFAULT_WIDTHS,
                 rng: np.random.Generator | None = None,
                 final_bias: float = FINAL_BIAS):
        if in_channels < 1:
            raise DomainError("in_channels must be >= 1")
        if len(widths) != 3 or any(w < 1 for w in widths):
            raise DomainError("widths must be three positive channel counts")
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        chans = (self.in_channels, *self.widths)
        self.params = []
        for i in range(3):
            fan_in = chans[i] * 9
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                           size=(chans[i + 1], chans[i], 3, 3))
            self.params.append(w)
            self.params.append(np.zeros(chans[i + 1]))
        w_head = rng.normal(0.0, 1e-2, size=(1, self.widths[-1], 1, 1))
        self.params.append(w_head)
        self.params.append(np.full(1, float(final_bias)))
        if self.n_params > MAX_PARAMS:
            raise DomainError(
                f"parameter count {self.n_params} exceeds {MAX_PARAMS}")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def n_layers(self) -> int:
        return 4

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: (N, C, H, W) float64. Returns depth (N, 1, H, W) > 0."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DomainError(
                f"input must be (N, {self.in_channels}, H, W), got {x.shape}")
        acts = [x]
        cur = x
        for i in range(3):
            z = kernels.conv2d_forward(cur, self.params[2 * i],
                                       self.params[2 * i + 1])
            cur = np.maximum(z, 0.0)
            acts.append(z)
            acts.append(cur)
        z4 = kernels.conv2d_forward(cur, self.params[6], self.params[7])
        y = _softplus(z4)
        if want_cache:
            return y, (acts, z4)
        return y

    def backward(self, cache, grad_y: np.ndarray, want_input_grad: bool = False):
        """Gradient of sum(grad_y * y) w.r.t. all parameters.

        ``cache`` must be the second return of ``forward(x, want_cache=True)``
        from a matching call; with ``want_input_grad`` the gradient w.r.t.
        the input is returned as a second value.
        """
        if (not isinstance(cache, tuple) or len(cache) != 2
                or not isinstance(cache[0], list) or len(cache[0]) != 7):
            raise StateError("backward needs the cache from forward(want_cache=True)")
        acts, z4 = cache
        gz = grad_y * _sigmoid(z4)
        grads = [None] * 8
        grads[6], grads[7] = kernels.conv2d_backward_params(gz, acts[6], 1, 1)
        ga = kernels.conv2d_backward_input(gz, self.params[6])
        for i in (2, 1, 0):
            z = acts[1 + 2 * i]
            gz = ga * (z > 0)
            grads[2 * i], grads[2 * i + 1] = kernels.conv2d_backward_params(
                gz, acts[2 * i], 3, 3)
            if i > 0 or want_input_grad:
                ga = kernels.conv2d_backward_input(gz, self.params[2 * i])
        if want_input_grad:
            return grads, ga
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        """(C, H, W) or (N, C, H, W) in, (H, W) or (N, H, W) out."""
        single = x.ndim == 3
        if single:
            x = x[None]
        y = self.forward(x)[:, 0]
        return y[0] if single else y


def layer_gradcheck(net: TinyDepthNet, x: np.ndarray,
                    rng: np.random.Generator | None = None,
                    sample: int | None = None,
                    rel_tol: float = 1e-4,
                    eps: tuple = (1e-4, 1e-6, 1e-3),
                    abs_floor: float = 1e-7) -> dict:
    """Finite-difference check of every parameter tensor of ``net``.

    Probes the scalar sum(v * net(x)) for a fixed random v; its exact
    parameter gradient is one backward call. Keys are w0/b0 .. w3/b3 in
    layer order. ``sample`` caps the coordinates checked per tensor.
    The step ladder covers the failure modes of a fresh ReLU net: some
    preactivation always sits within ~1e-4 of a kink, so the standard
    step flags spurious errors that the 1e-6 retry clears, while
    weights on mostly-dead paths carry gradients so small that only
    the coarse 1e-3 step rises above rounding noise. A wrong gradient
    fails at every step. The floor is above gradcheck's default for
    the same dead-path reason.
    """
    from .losses import gradcheck

    if rng is None:
        rng = np.random.default_rng(0)
    x = np.ascontiguousarray(x, dtype=np.float64)
    vec = rng.normal(size=(x.shape[0], 1, x.shape[2], x.shape[3]))
    # subtracting the unperturbed output keeps the probe scalar near
    # zero; a large constant part would drown the finite differences
    # in rounding error without changing the gradient
    y_ref = net.forward(x)
    reports = {}
    for idx in range(len(net.params)):
        name = f"{'w' if idx % 2 == 0 else 'b'}{idx // 2}"
        shape = net.params[idx].shape

        def fn(flat, idx=idx, shape=shape):
            saved = net.params[idx]
            net.params[idx] = flat.reshape(shape)
            try:
                y, cache = net.forward(x, want_cache=True)
                grads = net.backward(cache, vec)
            finally:
                net.params[idx] = saved
            return float(np.sum((y - y_ref) * vec)), grads[idx].ravel()

        size = net.params[idx].size
        take = None if sample is None or sample >= size else sample
        reports[name] = gradcheck(fn, net.params[idx].ravel().copy(),
                                  eps=eps, rel_tol=rel_tol, sample=take,
                                  rng=rng, abs_floor=abs_floor)
    return reports


class Adam:
    def __init__(self, params: list, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0 < lr and math.isfinite(lr)):
            raise DomainError("lr must be finite and positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list, grads: list, frozen: frozenset = frozenset()):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if i in frozen:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)


def save_model(path, model: TinyDepthNet, extra: dict | None = None) -> None:
    from . import __version__

    header = {
        "kind": "tinydepthnet",
        "version": __version__,
        "in_channels": model.in_channels,
        "widths": list(model.widths),
    }
    if extra:
        overlap = set(extra) & set(header)
        if overlap:
            raise DomainError(f"extra header keys collide: {sorted(overlap)}")
        header.update(extra)
    fileio.write_checkpoint(path, header, model.params)


def load_model(path) -> tuple[TinyDepthNet, dict]:
    header, flat = fileio.read_checkpoint(path)
    if header.get("kind") != "tinydepthnet":
        raise FileFormatError("checkpoint does not hold a depth model")
    model = TinyDepthNet(int(header["in_channels"]),
                         tuple(header["widths"]))
    offset = 0
    for i, p in enumerate(model.params):
        chunk = flat[offset:offset + p.size]
        if chunk.size != p.size:
            raise FileFormatError("checkpoint parameter block truncated")
        model.params[i] = chunk.reshape(p.shape).copy()
        offset += p.size
    if offset != flat.size:
        raise FileFormatError("checkpoint has trailing parameter data")
    return model, header


@dataclass
class TrainConfig:
    manifest: str
    variant: str = "canon_label"
    canonical_focal: float = 1000.0
    iterations: int = 3000
    batch_size: int = 8
    lr: float = 3e-4
    crop_width: int = 48
    crop_height: int = 36
    hflip_prob: float = 0.5
    seed: int = 0
    train_focals: tuple | None = None
    loss_weights: dict | None = None
    widths: tuple = DEFAULT_WIDTHS
    freeze_layers: tuple = ()
    log_every: int = 10
    divergence_limit: float = 1e4

    def validate(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; "
                              f"expected one of {VARIANTS}")
        if not (math.isfinite(self.canonical_focal) and self.canonical_focal > 0):
            raise DomainError("canonical focal must be finite and positive")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.crop_width < 8 or self.crop_height < 8:
            raise DomainError("crop must be at least 8x8")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise DomainError("hflip_prob must lie in [0, 1]")
        if any(i not in range(4) for i in self.freeze_layers):
            raise DomainError("freeze_layers indices must be in 0..3")
        if self.log_every < 1:
            raise DomainError("log_every must be >= 1")


@dataclass
class _Sample:
    """One frame in network space, before crop/flip/encoding."""

    image: np.ndarray          # (C, H, W)
    depth: np.ndarray          # (H, W)
    mask: np.ndarray           # (H, W) bool
    normals: np.ndarray        # (H, W, 3)
    plane_id: np.ndarray       # (H, W) int32
    k: CameraIntrinsics
    metric_reliable: bool


def _prepare_sample(frame: synthscene.RenderedFrame, metric_reliable: bool,
                    variant: str, canonical_focal: float) -> _Sample:
    k = frame.intrinsics
    if variant == "canon_label":
        depth_c, k_c, _ = canonicalize_labels(frame.depth, k, canonical_focal)
        return _Sample(frame.image.channels, depth_c.values, depth_c.mask,
                       frame.normals, frame.plane_id, k_c, metric_reliable)
    if variant == "canon_image":
        img_c, depth_c, k_c, scale = canonicalize_image(
            frame.image, frame.depth, k, canonical_focal)
        normals = np.stack(
            [resize_nearest(frame.normals[:, :, i], k_c.height, k_c.width, scale)
             for i in range(3)], axis=-1)
        plane_id = resize_nearest(frame.plane_id, k_c.height, k_c.width, scale)
        return _Sample(img_c.channels, depth_c.values, depth_c.mask,
                       normals, plane_id, k_c, metric_reliable)
    return _Sample(frame.image.channels, frame.depth.values, frame.depth.mask,
                   frame.normals, frame.plane_id, k, metric_reliable)


def _crop_rect(rng: np.random.Generator, width: int, height: int,
               cw: int, ch: int) -> tuple[int, int]:
    lo_x, hi_x = min(0, width - cw), max(0, width - cw)
    lo_y, hi_y = min(0, height - ch), max(0, height - ch)
    x0 = int(rng.integers(lo_x, hi_x + 1))
    y0 = int(rng.integers(lo_y, hi_y + 1))
    return x0, y0


def _slice_pad(arr: np.ndarray, x0: int, y0: int, w: int, h: int, fill):
    """Crop arr (H, W, ...) to the rect, padding out-of-range with fill."""
    out_shape = (h, w) + arr.shape[2:]
    out = np.full(out_shape, fill, dtype=arr.dtype)
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(arr.shape[1], x0 + w), min(arr.shape[0], y0 + h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = arr[sy0:sy1, sx0:sx1]
    return out


def _augment(sample: _Sample, variant: str, cw: int, ch: int,
             rng: np.random.Generator, hflip_prob: float) -> _Sample:
    """Random crop (padded when the frame is smaller), random horizontal
    flip, then append camera channels if the variant wants them. The
    returned intrinsics describe the cropped/flipped view exactly, so
    geometric losses stay consistent under augmentation."""
    x0, y0 = _crop_rect(rng, sample.k.width, sample.k.height, cw, ch)
    img, dep, k = crop_padded(ImageMap(sample.image),
                              DepthMap(sample.depth, sample.mask),
                              sample.k, (x0, y0, cw, ch))
    image = img.channels
    depth, mask = dep.values, dep.mask
    normals = _slice_pad(sample.normals, x0, y0, cw, ch, 0.0)
    plane_id = _slice_pad(sample.plane_id, x0, y0, cw, ch,
                          np.int32(-1))
    if rng.random() < hflip_prob:
        image = image[:, :, ::-1].copy()
        depth = depth[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
        normals = normals[:, ::-1].copy()
        normals[:, :, 0] = -normals[:, :, 0]
        plane_id = plane_id[:, ::-1].copy()
        k = mirror_intrinsics(k)
    if variant == "camconvs":
        image = np.concatenate((image, camconvs_encoding(k)), axis=0)
    return _Sample(image, depth, mask, normals, plane_id, k,
                   sample.metric_reliable)


def load_manifest_frames(manifest_path) -> list:
    """Read a dataset manifest into (RenderedFrame, focal_group,
    metric_reliable) tuples."""
    path = Path(manifest_path)
    manifest = fileio.read_json(path)
    if "frames" not in manifest:
        raise FileFormatError("manifest has no frames list")
    out = []
    for rec in manifest["frames"]:
        fr = synthscene.load_frame(path.parent, rec)
        out.append((fr, float(rec["focal_group"]),
                    bool(rec.get("metric_reliable", True))))
    return out


def variant_in_channels(variant: str, image_channels: int) -> int:
    return image_channels + (4 if variant == "camconvs" else 0)


@dataclass
class TrainResult:
    model: TinyDepthNet
    history: list
    groups: tuple
    in_channels: int


def train(config: TrainConfig) -> TrainResult:
    """Train one variant; raises DivergenceError on a non-finite or
    exploding batch loss."""
    config.validate()
    frames = load_manifest_frames(config.manifest)
    by_group = {}
    for fr, group, reliable in frames:
        by_group.setdefault(group, []).append((fr, reliable))
    groups = (tuple(float(g) for g in config.train_focals)
              if config.train_focals else tuple(sorted(by_group)))
    for g in groups:
        if g not in by_group:
            raise DomainError(f"focal group {g} not present in the manifest")
    if config.batch_size % len(groups) != 0:
        raise DomainError("batch_size must be divisible by the number of "
                          "focal groups for balanced batches")
    per_group = config.batch_size // len(groups)

    prepared = {
        g: [_prepare_sample(fr, reliable, config.variant, config.canonical_focal)
            for fr, reliable in by_group[g]]
        for g in groups
    }
    image_channels = prepared[groups[0]][0].image.shape[0]
    in_ch = variant_in_channels(config.variant, image_channels)
    model = TinyDepthNet(
        in_ch, config.widths,
        rng=np.random.default_rng([config.seed, INIT_STREAM]))
    opt = Adam(model.params, lr=config.lr)
    frozen = frozenset(j for i in config.freeze_layers for j in (2 * i, 2 * i + 1))

    cw, ch = config.crop_width, config.crop_height
    history = []
    for it in range(config.iterations):
        rng_data = np.random.default_rng([config.seed, DATA_STREAM, it])
        rng_crop = np.random.default_rng([config.seed, CROP_STREAM, it])
        batch = []
        for g in groups:
            pool = prepared[g]
            for _ in range(per_group):
                s = pool[int(rng_data.integers(0, len(pool)))]
                batch.append(_augment(s, config.variant, cw, ch, rng_crop,
                                      config.hflip_prob))
        x = np.stack([b.image for b in batch])
        y, cache = model.forward(x, want_cache=True)

        b_n = len(batch)
        value = 0.0
        comps = {"silog": 0.0, "patchnorm": 0.0, "vnl": 0.0, "pwn": 0.0}
        gy = np.zeros_like(y)
        for j, b in enumerate(batch):
            res = total_loss(
                y[j, 0], DepthMap(b.depth, b.mask), b.k, b.normals, b.plane_id,
                rng_patch=np.random.default_rng([config.seed, PATCH_STREAM, it, j]),
                rng_triplet=np.random.default_rng([config.seed, TRIPLET_STREAM, it, j]),
                rng_pair=np.random.default_rng([config.seed, PAIR_STREAM, it, j]),
                weights=config.loss_weights,
                metric_reliable=b.metric_reliable)
            value += res.value / b_n
            gy[j, 0] = res.grad / b_n
            for name in comps:
                comps[name] += res.components[name] / b_n
        if not math.isfinite(value) or value > config.divergence_limit:
            raise DivergenceError(it)
        grads = model.backward(cache, gy)
        opt.step(model.params, grads, frozen)
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iter": it, "total": value, **comps})
    return TrainResult(model, history, groups, in_ch)


def predict_metric(model: TinyDepthNet, image: ImageMap, k: CameraIntrinsics,
                   variant: str, canonical_focal: float) -> DepthMap:
    """Metric depth for one frame, handling the variant's bookkeeping:
    scaling predictions back (canon_label), resampling in and out
    (canon_image), or passing through (none, camconvs)."""
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    expected = variant_in_channels(variant, image.channels.shape[0])
    if model.in_channels != expected:
        raise DomainError(
            f"model expects {model.in_channels} input channels, variant "
            f"{variant!r} on this image provides {expected}")
    if variant == "canon_label":
        y = model.predict(image.channels)
        scale = canonical_focal / effective_focal(k)
        return decanonicalize_labels(
            DepthMap(y, np.ones_like(y, dtype=bool)), scale)
    if variant == "canon_image":
        img_c, _, _, scale = canonicalize_image(image, None, k, canonical_focal)
        y = model.predict(img_c.channels)
        return decanonicalize_image(
            DepthMap(y, np.ones_like(y, dtype=bool)), scale,
            (k.width, k.height))
    if variant == "camconvs":
        x = np.concatenate((image.channels, camconvs_encoding(k)), axis=0)
        y = model.predict(x)
        return DepthMap(y, np.ones_like(y, dtype=bool))
    y = model.predict(image.channels)
    return DepthMap(y, np.ones_like(y, dtype=bool))


def evaluate_groups(model: TinyDepthNet, frames: list, variant: str,
                    canonical_focal: float) -> dict:
    """Mean per-frame AbsRel within each focal group, then the
    unweighted mean across groups (so sparse groups count equally)."""
    by_group = {}
    for fr, group, _ in frames:
        pred = predict_metric(model, fr.image, fr.intrinsics, variant,
                              canonical_focal)
        m = depth_metrics(pred.values, fr.depth)
        by_group.setdefault(group, []).append(m.absrel)
    groups = {
        str(g): {"absrel": float(np.mean(v)), "n_frames": len(v)}
        for g, v in sorted(by_group.items())
    }
    mean_absrel = float(np.mean([g["absrel"] for g in groups.values()]))
    return {"groups": groups, "mean_absrel": mean_absrel}


def ablate(config: TrainConfig, eval_manifest,
           variants: tuple = VARIANTS) -> dict:
    """Train every variant with identical data and budget, then score
    each on the evaluation manifest. A diverging variant is recorded
    as such and the sweep continues; divergence of one arm is a result,
    not a reason to lose the others."""
    eval_frames = load_manifest_frames(eval_manifest)
    report = {}
    for variant in variants:
        if variant not in VARIANTS:
            raise DomainError(f"unknown variant {variant!r}")
        cfg = replace(config, variant=variant)
        try:
            result = train(cfg)
        except DivergenceError as err:
            report[variant] = {"diverged": True, "iteration": err.iteration}
            continue
        scores = evaluate_groups(result.model, eval_frames, variant,
                                 cfg.canonical_focal)
        report[variant] = {
            "diverged": False,
            "final_loss": result.history[-1]["total"],
            **scores,
        }
    return report
