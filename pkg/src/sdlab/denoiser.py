"""Noise-prediction network for 32x32x3 pixel-space diffusion.

Three-level encoder/decoder (channels 32/64/64) with one self-attention and
one cross-attention block at each of the two coarsest resolutions on both
paths, so four cross-attention layers in total: enc16, enc8, dec8, dec16.
The decoder residual-block outputs at dec8/dec16 are the spatial-feature
sites used for feature-injection style transfer.

Every attention map can be captured into an AttentionTape and replaced or
rewritten through an overrides dict before the map @ v product.
"""

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Field
from .attention import COND, CROSS, SELF, UNCOND, AttentionLayer, Conditioning, attend
from .errors import DimensionError, InjectionError, NumericAbort

ATTN_SITES = ("enc16", "enc8", "dec8", "dec16")
FEATURE_SITES = ("dec8", "dec16")


def time_embedding(t, dim):
    """Sinusoidal timestep features, (dim,) float32."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


class Denoiser:
    """UNet-style eps predictor with settable key/value conditioning."""

    def __init__(self, embed_dim=64, heads=2, d=32, time_dim=64, groups=8, seed=0):
        self.embed_dim = embed_dim
        self.heads = heads
        self.d = d
        self.time_dim = time_dim
        self.groups = groups
        self.params = {}
        self.layers = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------ parameters

    def _p(self, name, arr):
        f = Field(arr.astype(np.float32), requires_grad=True)
        self.params[name] = f
        return f

    def _conv(self, name, cin, cout, rng):
        std = np.sqrt(2.0 / (9 * cin))
        self._p(f"{name}.w", rng.normal(0.0, std, (3, 3, cin, cout)))
        self._p(f"{name}.b", np.zeros(cout))

    def _norm(self, name, c):
        self._p(f"{name}.g", np.ones(c))
        self._p(f"{name}.b", np.zeros(c))

    def _lin(self, name, din, dout, rng, zero=False):
        std = 0.0 if zero else np.sqrt(2.0 / (din + dout))
        self._p(f"{name}.w", rng.normal(0.0, std, (din, dout)) if std else np.zeros((din, dout)))
        self._p(f"{name}.b", np.zeros(dout))

    def _res_params(self, name, cin, cout, rng):
        self._norm(f"{name}.gn1", cin)
        self._conv(f"{name}.conv1", cin, cout, rng)
        self._lin(f"{name}.temb", self.time_dim, cout, rng)
        self._norm(f"{name}.gn2", cout)
        self._conv(f"{name}.conv2", cout, cout, rng)
        if cin != cout:
            std = np.sqrt(2.0 / (cin + cout))
            self._p(f"{name}.skip.w", rng.normal(0.0, std, (cin, cout)))

    def _attn_params(self, name, c, rng):
        for kind, embed_dim in ((SELF, c), (CROSS, self.embed_dim)):
            self._norm(f"{name}.{kind}.gn", c)
            layer = AttentionLayer(f"{name}.{kind}", c, embed_dim, self.d, self.heads, c, rng)
            self.layers[f"{name}.{kind}"] = layer
            for pname, p in (("wq", layer.wq), ("wk", layer.wk), ("wv", layer.wv)):
                self.params[f"{name}.{kind}.{pname}"] = p
            self._lin(f"{name}.{kind}.out", c, c, rng)

    def _build(self, rng):
        self._lin("temb.fc1", self.time_dim, self.time_dim, rng)
        self._lin("temb.fc2", self.time_dim, self.time_dim, rng)
        self._conv("stem", 3, 32, rng)
        self._res_params("enc32", 32, 32, rng)
        self._res_params("enc16", 32, 64, rng)
        self._attn_params("enc16", 64, rng)
        self._res_params("enc8", 64, 64, rng)
        self._attn_params("enc8", 64, rng)
        self._res_params("mid", 64, 64, rng)
        self._res_params("dec8", 128, 64, rng)
        self._attn_params("dec8", 64, rng)
        self._res_params("dec16", 128, 64, rng)
        self._attn_params("dec16", 64, rng)
        self._res_params("dec32", 96, 32, rng)
        self._norm("head.gn", 32)
        self._conv("head", 32, 3, rng)
        # zero the final conv so the untrained net predicts zero noise
        self.params["head.w"].data[:] = 0.0

    def parameters(self):
        return list(self.params.values())

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = bool(flag)

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise DimensionError(f"denoiser state {name}: {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    # --------------------------------------------------------------- forward

    def _res(self, name, x, temb):
        p = self.params
        cin = x.shape[2]
        h = ad.silu(ad.group_norm(x, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"], self.groups))
        h = ad.conv2d3(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
        cout = h.shape[2]
        tb = ad.linear(temb, p[f"{name}.temb.w"], p[f"{name}.temb.b"])
        h = ad.add_channel_bias(h, ad.reshape(tb, (cout,)))
        h = ad.silu(ad.group_norm(h, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"], self.groups))
        h = ad.conv2d3(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
        if cin != cout:
            hw = x.shape[0] * x.shape[1]
            skip = ad.reshape(ad.linear(ad.reshape(x, (hw, cin)), p[f"{name}.skip.w"]),
                              (x.shape[0], x.shape[1], cout))
        else:
            skip = x
        return ad.add(h, skip)

    def _attn_one(self, name, kind, x, cond, t, branch, tape, overrides):
        p = self.params
        hh, ww, c = x.shape
        n = hh * ww
        nrm = ad.group_norm(x, p[f"{name}.{kind}.gn.g"], p[f"{name}.{kind}.gn.b"], self.groups)
        tok = ad.reshape(nrm, (n, c))
        site_cond = Conditioning(tok, tok) if cond is None else cond
        transform = overrides.get((name, kind)) if overrides else None
        sink = (lambda m: tape.put(name, t, branch, kind, m)) if tape is not None else None
        out, amap = attend(tok, site_cond, self.layers[f"{name}.{kind}"],
                           map_transform=transform, sink=sink)
        out = ad.linear(out, p[f"{name}.{kind}.out.w"], p[f"{name}.{kind}.out.b"])
        return ad.add(x, ad.reshape(out, (hh, ww, c))), amap

    def _attn(self, name, x, cond, t, branch, tape, overrides):
        x, _ = self._attn_one(name, SELF, x, None, t, branch, tape, overrides)
        x, _ = self._attn_one(name, CROSS, x, cond, t, branch, tape, overrides)
        return x

    def prefix(self, z, t):
        """Precompute the value-independent front of the net for one (z, t).

        Everything up to and including the enc16 self-attention depends only
        on the latent and the timestep, so the inversion inner loop shares
        one prefix across its iterations and branches. Only valid while no
        override targets (enc16, self).
        """
        p = self.params
        te = Field(time_embedding(t, self.time_dim)[None, :])
        temb = ad.linear(ad.silu(ad.linear(te, p["temb.fc1.w"], p["temb.fc1.b"])),
                         p["temb.fc2.w"], p["temb.fc2.b"])
        h0 = ad.conv2d3(z, p["stem.w"], p["stem.b"])
        h0 = self._res("enc32", h0, temb)
        h1 = self._res("enc16", ad.avg_pool2(h0), temb)
        h1, self_map = self._attn_one("enc16", SELF, h1, None, t, COND, None, None)
        return {"t": t, "temb": temb, "h0": h0, "h1": h1, "enc16.self": self_map}

    def forward(self, z, t, cond, tape=None, branch=COND, overrides=None,
                feature_overrides=None, feature_sink=None, prefix=None):
        if z is not None and z.shape != (32, 32, 3):
            raise DimensionError(f"denoiser expects (32, 32, 3), got {z.shape}")
        if overrides:
            for key in overrides:
                if key[0] not in ATTN_SITES or key[1] not in (SELF, CROSS):
                    raise InjectionError(f"unknown attention site {key}")
        p = self.params
        if prefix is not None:
            if prefix["t"] != t:
                raise InjectionError(f"prefix computed for t={prefix['t']}, used at t={t}")
            if overrides and ("enc16", SELF) in overrides:
                raise InjectionError("prefix reuse cannot honor an (enc16, self) override")
            temb, h0, h1 = prefix["temb"], prefix["h0"], prefix["h1"]
            if tape is not None:
                tape.put("enc16", t, branch, SELF, prefix["enc16.self"])
        else:
            te = Field(time_embedding(t, self.time_dim)[None, :])
            temb = ad.linear(ad.silu(ad.linear(te, p["temb.fc1.w"], p["temb.fc1.b"])),
                             p["temb.fc2.w"], p["temb.fc2.b"])
            h0 = ad.conv2d3(z, p["stem.w"], p["stem.b"])
            h0 = self._res("enc32", h0, temb)
            h1 = self._res("enc16", ad.avg_pool2(h0), temb)
            h1, _ = self._attn_one("enc16", SELF, h1, None, t, branch, tape, overrides)
        h1, _ = self._attn_one("enc16", CROSS, h1, cond, t, branch, tape, overrides)
        h2 = self._res("enc8", ad.avg_pool2(h1), temb)
        h2 = self._attn("enc8", h2, cond, t, branch, tape, overrides)
        m = self._res("mid", h2, temb)

        d2 = self._res("dec8", ad.concat((m, h2), axis=2), temb)
        d2 = self._feature("dec8", d2, feature_overrides, feature_sink)
        d2 = self._attn("dec8", d2, cond, t, branch, tape, overrides)
        d1 = self._res("dec16", ad.concat((ad.upsample2(d2), h1), axis=2), temb)
        d1 = self._feature("dec16", d1, feature_overrides, feature_sink)
        d1 = self._attn("dec16", d1, cond, t, branch, tape, overrides)
        d0 = self._res("dec32", ad.concat((ad.upsample2(d1), h0), axis=2), temb)

        out = ad.silu(ad.group_norm(d0, p["head.gn.g"], p["head.gn.b"], self.groups))
        return ad.conv2d3(out, p["head.w"], p["head.b"])

    def _feature(self, name, h, feature_overrides, feature_sink):
        if feature_sink is not None:
            feature_sink[name] = h.data.copy()
        if feature_overrides and name in feature_overrides:
            repl = np.asarray(feature_overrides[name], dtype=np.float32)
            if repl.shape != h.shape:
                raise InjectionError(
                    f"feature override {name}: shape {repl.shape} != {h.shape}")
            return Field(repl)
        return h


def denoise(model, z_t, t, cond, tape=None, branch=COND, overrides=None,
            feature_overrides=None, feature_sink=None, prefix=None):
    """Predict noise for z_t at timestep t under the given conditioning.

    All attention maps of the pass are recorded into tape (when given);
    overrides replace designated maps before the map @ v product.
    """
    return model.forward(z_t, t, cond, tape=tape, branch=branch, overrides=overrides,
                         feature_overrides=feature_overrides, feature_sink=feature_sink,
                         prefix=prefix)


def cfg_eps(model, z_t, t, cond, uncond, w, tapes=None, overrides=None,
            feature_overrides=None, feature_sink=None):
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u).

    w == 1 and w == 0 short-circuit to the single relevant branch so the
    degenerate cases are bit-identical to a lone denoise call (and the
    irrelevant branch is never evaluated).

    tapes / overrides / feature_* are per-branch dicts keyed "cond"/"uncond".
    """
    def _kw(branch):
        return dict(
            tape=None if tapes is None else tapes.get(branch),
            branch=branch,
            overrides=None if overrides is None else overrides.get(branch),
            feature_overrides=None if feature_overrides is None else feature_overrides.get(branch),
            feature_sink=None if feature_sink is None else feature_sink.get(branch),
        )

    w = float(w)
    if w == 1.0:
        return denoise(model, z_t, t, cond, **_kw(COND))
    if w == 0.0:
        return denoise(model, z_t, t, uncond, **_kw(UNCOND))
    eps_u = denoise(model, z_t, t, uncond, **_kw(UNCOND))
    eps_c = denoise(model, z_t, t, cond, **_kw(COND))
    return ad.add(eps_u, ad.mul(ad.sub(eps_c, eps_u), w))


def train_denoiser(model, text_encoder, dataset, sched, steps, seed, lr=4e-4,
                   null_prob=0.1, ema_decay=0.999, log_every=0):
    """Noise-prediction training: sample t, corrupt, regress the noise.

    z_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps with t uniform in 1..T; a
    null_prob fraction of steps swaps in the null prompt so the model also
    learns the unconditional branch for guidance. Batch size is 1 by
    construction. The learning rate cosine-decays to 5% of lr and an
    exponential moving average of the weights is loaded at the end (both
    deterministic, so fixed seeds still give bit-identical weights).
    Returns the per-step loss history.
    """
    from .optim import Adam

    rng = np.random.default_rng(seed)
    model.set_trainable(True)
    params = model.parameters() + [text_encoder.table]
    text_encoder.table.requires_grad = True
    opt = Adam(params, lr=lr, betas=(0.9, 0.999))
    ema = [p.data.copy() for p in params]
    losses = []
    abar = sched.alpha_bar
    for step in range(steps):
        opt.lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * step / steps)))
        scene = dataset[rng.integers(len(dataset))]
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal((32, 32, 3)).astype(np.float32)
        zt = np.sqrt(float(abar[t])) * scene.image + np.sqrt(1.0 - float(abar[t])) * eps
        tokens = scene.tokens if rng.random() >= null_prob else text_encoder.null_tokens()
        with ad.Tape():
            c = text_encoder.encode(tokens)
            pred = denoise(model, Field(zt), t, Conditioning(c, c))
            loss = ad.mse(pred, Field(eps))
            val = loss.item()
            if not np.isfinite(val):
                raise NumericAbort(f"denoiser training diverged at step {step}")
            ad.backward(loss)
        opt.step()
        opt.zero_grad()
        for shadow, p in zip(ema, params):
            shadow += (1.0 - ema_decay) * (p.data - shadow)
        losses.append(val)
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            print(f"[train] step {step + 1}/{steps} loss {recent:.4f}")
    for shadow, p in zip(ema, params):
        p.data = shadow.astype(np.float32)
    return losses
