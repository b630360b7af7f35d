"""Procedural scene world plus the frozen text/image encoders and the oracle classifier.

Scenes are one colored shape (circle / square / triangle / cross, in one of
four colors) on a plain or striped background, centered on a 3x3 grid of
cells. Rendering is deterministic and every palette value is an exact
multiple of 1/255, so a PNG round trip reproduces the float image bit for
bit. The ground-truth object mask comes for free from the rasterizer.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Field
from .errors import ConfigError, DimensionError, FrozenError

SIZE = 32

SHAPES = ("circle", "square", "triangle", "cross")
COLOR_NAMES = ("red", "green", "blue", "yellow")
BACKGROUNDS = ("plain", "striped")

COLORS = {
    "red": (220, 38, 38),
    "green": (34, 197, 94),
    "blue": (59, 130, 246),
    "yellow": (234, 179, 8),
}
BG_PLAIN = (235, 235, 235)
BG_STRIPE = (211, 211, 211)

CELL_CENTERS = (8, 16, 24)

NULL = "<null>"
VOCAB = {NULL: 0}
for _w in COLOR_NAMES + SHAPES + BACKGROUNDS:
    VOCAB[_w] = len(VOCAB)
VOCAB_SIZE = len(VOCAB)
PROMPT_LEN = 4  # null slot + color + shape + background
EMBED_DIM = 64
IMAGE_TOKENS = 17  # 16 patch tokens + 1 leading global token


def _rgb(ints):
    return np.array(ints, dtype=np.float32) / 255.0


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    cell: tuple  # (row, col), each in 0..2
    background: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.color not in COLOR_NAMES:
            raise ConfigError(f"unknown color {self.color!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")
        r, c = self.cell
        if not (0 <= r <= 2 and 0 <= c <= 2):
            raise ConfigError(f"cell {self.cell} outside 3x3 grid")

    @property
    def prompt(self):
        return f"{self.color} {self.shape} {self.background}"


def all_specs():
    return [SceneSpec(s, c, (r, q), b)
            for s in SHAPES for c in COLOR_NAMES
            for r in range(3) for q in range(3) for b in BACKGROUNDS]


def tokens_for(spec):
    return np.array([VOCAB[NULL], VOCAB[spec.color], VOCAB[spec.shape],
                     VOCAB[spec.background]], dtype=np.int64)


def parse_prompt(text):
    """'red circle plain' -> fixed-slot token ids [null, color, shape, background]."""
    words = text.split()
    if len(words) != 3:
        raise ConfigError(f"prompt must be 'color shape background', got {text!r}")
    color, shape, background = words
    if color not in COLOR_NAMES or shape not in SHAPES or background not in BACKGROUNDS:
        raise ConfigError(f"prompt words outside vocabulary: {text!r}")
    return np.array([VOCAB[NULL], VOCAB[color], VOCAB[shape], VOCAB[background]],
                    dtype=np.int64)


def shape_mask(shape, cell, size=SIZE):
    cy = CELL_CENTERS[cell[0]]
    cx = CELL_CENTERS[cell[1]]
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    if shape == "circle":
        m = dy * dy + dx * dx <= 60
    elif shape == "square":
        m = np.maximum(np.abs(dy), np.abs(dx)) <= 8
    elif shape == "triangle":
        m = (np.abs(dx) <= (dy + 8) * 0.6) & (dy >= -8) & (dy <= 8)
    elif shape == "cross":
        m = ((np.abs(dx) <= 2) & (np.abs(dy) <= 8)) | ((np.abs(dy) <= 2) & (np.abs(dx) <= 8))
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m.astype(np.float32)


def render(spec, size=SIZE):
    """Deterministic raster of a scene; returns (image in [0,1], object mask)."""
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = _rgb(BG_PLAIN)
    if spec.background == "striped":
        rows = (np.arange(size) // 4) % 2 == 1
        img[rows] = _rgb(BG_STRIPE)
    mask = shape_mask(spec.shape, spec.cell, size)
    img[mask > 0] = _rgb(COLORS[spec.color])
    return img, mask


def object_mask(image):
    """Palette-distance segmentation; works on renders and on sampled images."""
    img = np.asarray(image, dtype=np.float32)
    bg = np.stack([_rgb(BG_PLAIN), _rgb(BG_STRIPE)])
    obj = np.stack([_rgb(COLORS[c]) for c in COLOR_NAMES])
    d_bg = ((img[:, :, None, :] - bg) ** 2).sum(-1).min(-1)
    d_obj = ((img[:, :, None, :] - obj) ** 2).sum(-1).min(-1)
    return (d_obj < d_bg).astype(np.float32)


@dataclass
class Scene:
    spec: SceneSpec
    image: np.ndarray
    mask: np.ndarray
    tokens: np.ndarray

    @classmethod
    def from_spec(cls, spec):
        image, mask = render(spec)
        return cls(spec=spec, image=image, mask=mask, tokens=tokens_for(spec))


def make_dataset(n, seed):
    """n distinct scenes, seed-reproducible bit for bit."""
    specs = all_specs()
    if n > len(specs):
        raise ConfigError(f"dataset size {n} exceeds {len(specs)} distinct scenes")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(specs))[:n]
    return [Scene.from_spec(specs[i]) for i in idx]


def export_dataset(scenes, outdir, seed):
    """PNG per scene plus a manifest line: seed, spec fields, file name."""
    import os

    from .images import write_image

    os.makedirs(outdir, exist_ok=True)
    lines = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}.png"
        write_image(os.path.join(outdir, name), sc.image)
        r, c = sc.spec.cell
        lines.append(f"{seed}\t{sc.spec.shape}\t{sc.spec.color}\t{r}\t{c}\t{sc.spec.background}\t{name}")
    with open(os.path.join(outdir, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return lines


def _params_checksum(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


class TextEncoder:
    """Frozen embedding table standing in for the prompt encoder.

    Row 0 is the learned null token used by the unconditional branch. The
    table trains jointly with the denoiser, then freezes.
    """

    def __init__(self, d_e=EMBED_DIM, seed=0):
        rng = np.random.default_rng(seed)
        self.table = Field(rng.normal(0.0, 0.5, (VOCAB_SIZE, d_e)).astype(np.float32),
                           requires_grad=True)
        self.d_e = d_e
        self._frozen_sum = None

    def encode(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        return ad.embed(self.table, tokens)

    def null_tokens(self, length=PROMPT_LEN):
        return np.zeros(length, dtype=np.int64)

    def freeze(self):
        self.table.requires_grad = False
        self._frozen_sum = self.checksum()

    def checksum(self):
        return _params_checksum({"table": self.table})

    def assert_frozen(self):
        if self._frozen_sum is None:
            raise FrozenError("text encoder was never frozen")
        if self.checksum() != self._frozen_sum:
            raise FrozenError("text encoder weights changed after freeze")

    def state(self):
        return {"table": self.table.data.copy()}

    def load_state(self, state):
        self.table.data = np.asarray(state["table"], dtype=np.float32).copy()


class ImageEncoder:
    """Small convolutional encoder to 17 tokens x 64 (16 patches + 1 global).

    Pretrained as an autoencoder over the toy set, then frozen; the decoder
    only exists during pretraining.
    """

    def __init__(self, d_e=EMBED_DIM, seed=0):
        rng = np.random.default_rng(seed)
        self.d_e = d_e
        self.params = {}

        def conv(name, cin, cout):
            std = np.sqrt(2.0 / (9 * cin))
            self.params[f"{name}.w"] = Field(
                rng.normal(0.0, std, (3, 3, cin, cout)).astype(np.float32), requires_grad=True)
            self.params[f"{name}.b"] = Field(np.zeros(cout, dtype=np.float32), requires_grad=True)

        conv("c1", 3, 16)
        conv("c2", 16, 32)
        conv("c3", 32, d_e)
        self._pool_w = Field(np.full((1, 16), 1.0 / 16.0, dtype=np.float32))
        self._frozen_sum = None

    def parameters(self):
        return list(self.params.values())

    def encode(self, image):
        x = image if isinstance(image, Field) else Field(np.asarray(image, dtype=np.float32))
        if x.shape != (SIZE, SIZE, 3):
            raise DimensionError(f"image encoder expects ({SIZE}, {SIZE}, 3), got {x.shape}")
        p = self.params
        h = ad.avg_pool2(ad.silu(ad.conv2d3(x, p["c1.w"], p["c1.b"])))    # 16x16x16
        h = ad.avg_pool2(ad.silu(ad.conv2d3(h, p["c2.w"], p["c2.b"])))    # 8x8x32
        h = ad.avg_pool2(ad.silu(ad.conv2d3(h, p["c3.w"], p["c3.b"])))    # 4x4x64
        patches = ad.reshape(h, (16, self.d_e))
        global_tok = ad.matmul(self._pool_w, patches)                      # (1, 64)
        return ad.concat((global_tok, patches), axis=0)                    # (17, 64)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        self._frozen_sum = self.checksum()

    def checksum(self):
        return _params_checksum(self.params)

    def assert_frozen(self):
        if self._frozen_sum is None:
            raise FrozenError("image encoder was never frozen")
        if self.checksum() != self._frozen_sum:
            raise FrozenError("image encoder weights changed after freeze")

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=np.float32).copy()


def pretrain_image_encoder(encoder, dataset, steps, seed, lr=1e-3):
    """Autoencoder pretraining for the image encoder; returns the loss curve."""
    from .optim import Adam

    rng = np.random.default_rng(seed)
    dec_rng = np.random.default_rng(seed + 1)
    dec = {}

    def conv(name, cin, cout):
        std = np.sqrt(2.0 / (9 * cin))
        dec[f"{name}.w"] = Field(dec_rng.normal(0.0, std, (3, 3, cin, cout)).astype(np.float32),
                                 requires_grad=True)
        dec[f"{name}.b"] = Field(np.zeros(cout, dtype=np.float32), requires_grad=True)

    conv("d1", encoder.d_e, 32)
    conv("d2", 32, 16)
    conv("d3", 16, 3)
    opt = Adam(encoder.parameters() + list(dec.values()), lr=lr, betas=(0.9, 0.999))
    losses = []
    for _ in range(steps):
        scene = dataset[rng.integers(len(dataset))]
        with ad.Tape():
            tokens = encoder.encode(scene.image)
            # the global token is skipped on the spatial decode path
            grid = ad.reshape(_rows(tokens, 1, IMAGE_TOKENS), (4, 4, encoder.d_e))
            y = ad.silu(ad.conv2d3(ad.upsample2(grid), dec["d1.w"], dec["d1.b"]))   # 8x8x32
            y = ad.silu(ad.conv2d3(ad.upsample2(y), dec["d2.w"], dec["d2.b"]))      # 16x16x16
            y = ad.conv2d3(ad.upsample2(y), dec["d3.w"], dec["d3.b"])               # 32x32x3
            loss = ad.mse(y, Field(scene.image))
            ad.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return losses


def _rows(x, start, stop):
    """Row slice as an autodiff op, via a constant selector matrix."""
    n = x.shape[0]
    sel = np.zeros((stop - start, n), dtype=np.float32)
    sel[np.arange(stop - start), np.arange(start, stop)] = 1.0
    return ad.matmul(Field(sel), x)


class ClassifierOutput:
    def __init__(self, shape_probs, color_probs, background_probs):
        self.shape_probs = shape_probs
        self.color_probs = color_probs
        self.background_probs = background_probs

    @property
    def shape(self):
        return SHAPES[int(np.argmax(self.shape_probs))]

    @property
    def color(self):
        return COLOR_NAMES[int(np.argmax(self.color_probs))]

    @property
    def background(self):
        return BACKGROUNDS[int(np.argmax(self.background_probs))]


class ToyClassifier:
    """Shape/color (and background) probabilities; the Clipscore stand-in."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {}

        def conv(name, cin, cout):
            std = np.sqrt(2.0 / (9 * cin))
            self.params[f"{name}.w"] = Field(
                rng.normal(0.0, std, (3, 3, cin, cout)).astype(np.float32), requires_grad=True)
            self.params[f"{name}.b"] = Field(np.zeros(cout, dtype=np.float32), requires_grad=True)

        def lin(name, din, dout):
            std = np.sqrt(2.0 / (din + dout))
            self.params[f"{name}.w"] = Field(
                rng.normal(0.0, std, (din, dout)).astype(np.float32), requires_grad=True)
            self.params[f"{name}.b"] = Field(np.zeros(dout, dtype=np.float32), requires_grad=True)

        conv("c1", 3, 24)
        conv("c2", 24, 48)
        conv("c3", 48, 48)
        lin("hidden", 768, 128)
        lin("shape", 128, 4)
        lin("color", 128, 4)
        lin("background", 128, 2)
        self._frozen_sum = None

    def parameters(self):
        return list(self.params.values())

    def _features(self, image):
        x = image if isinstance(image, Field) else Field(np.asarray(image, dtype=np.float32))
        p = self.params
        h = ad.avg_pool2(ad.silu(ad.conv2d3(x, p["c1.w"], p["c1.b"])))
        h = ad.avg_pool2(ad.silu(ad.conv2d3(h, p["c2.w"], p["c2.b"])))
        h = ad.avg_pool2(ad.silu(ad.conv2d3(h, p["c3.w"], p["c3.b"])))
        flat = ad.reshape(h, (1, 768))   # flattened 4x4x48, keeps spatial layout
        return ad.silu(ad.linear(flat, p["hidden.w"], p["hidden.b"]))

    def logits(self, image):
        f = self._features(image)
        p = self.params
        return {
            "shape": ad.reshape(ad.linear(f, p["shape.w"], p["shape.b"]), (4,)),
            "color": ad.reshape(ad.linear(f, p["color.w"], p["color.b"]), (4,)),
            "background": ad.reshape(ad.linear(f, p["background.w"], p["background.b"]),
                                     (2,)),
        }

    def classify(self, image):
        lg = self.logits(image)

        def probs(f):
            z = f.data - f.data.max()
            e = np.exp(z)
            return e / e.sum()

        return ClassifierOutput(probs(lg["shape"]), probs(lg["color"]), probs(lg["background"]))

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        self._frozen_sum = _params_checksum(self.params)

    def checksum(self):
        return _params_checksum(self.params)

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=np.float32).copy()


def train_classifier(clf, dataset, steps, seed, lr=1.5e-3, noise_frac=0.08, smooth=0.03):
    """Train the oracle classifier on (augmented) renders.

    A noise_frac share of steps feeds pure uniform noise with uniform
    targets so the classifier stays calibrated away from the data manifold.
    """
    from .optim import Adam

    rng = np.random.default_rng(seed)
    opt = Adam(clf.parameters(), lr=lr, betas=(0.9, 0.999))
    losses = []

    def onehot(n, i):
        t = np.full(n, smooth / n, dtype=np.float32)
        t[i] += 1.0 - smooth
        return t

    for _ in range(steps):
        if rng.random() < noise_frac:
            img = rng.random((SIZE, SIZE, 3)).astype(np.float32)
            targets = {"shape": np.full(4, 0.25), "color": np.full(4, 0.25),
                       "background": np.full(2, 0.5)}
        else:
            scene = dataset[rng.integers(len(dataset))]
            sigma = rng.uniform(0.0, 0.12)
            img = scene.image + rng.standard_normal((SIZE, SIZE, 3)).astype(np.float32) * sigma
            targets = {
                "shape": onehot(4, SHAPES.index(scene.spec.shape)),
                "color": onehot(4, COLOR_NAMES.index(scene.spec.color)),
                "background": onehot(2, BACKGROUNDS.index(scene.spec.background)),
            }
        with ad.Tape():
            lg = clf.logits(img.astype(np.float32))
            loss = ad.add(ad.add(ad.cross_entropy_logits(lg["shape"], targets["shape"]),
                                 ad.cross_entropy_logits(lg["color"], targets["color"])),
                          ad.cross_entropy_logits(lg["background"], targets["background"]))
            ad.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return losses
