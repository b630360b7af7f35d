"""Prompt-editing controller: lock-step dual sampling with attention injection.

The source branch replays the inversion's reconstruction path; the target
branch samples under the target prompt while selected attention maps are
replaced by the source branch's captured maps. Cross-attention and
conditional self-attention replacement is the classic injection protocol;
replacing self-attention in the unconditional branch as well (tau_u) frees
the target structure from the source prompt, which is what makes large
shape changes land. A separate threshold tau_v controls when the value
branch switches from the learned per-timestep embeddings to the target
prompt embedding.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Field
from .attention import (COND, CROSS, SELF, UNCOND, AttentionTape, Conditioning,
                        steps_active)
from .denoiser import cfg_eps
from .errors import AlignmentError, ConfigError, InjectionError, NumericAbort
from .schedule import SampleHooks, ddim_invert, ddim_sample, ddim_step

MODES = ("replace", "refine", "reweight")


@dataclass
class EditSpec:
    mode: str
    source_tokens: np.ndarray
    target_tokens: np.ndarray
    tau_c: float = 0.8
    tau_s: float = 0.8
    tau_u: float = 0.5
    tau_v: float = 0.5
    reweight: tuple = None       # (token index, scale)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown edit mode {self.mode!r}")
        for name in ("tau_c", "tau_s", "tau_u", "tau_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.reweight is not None:
            token, scale = self.reweight
            if not np.isfinite(scale):
                raise ConfigError("reweight scale must be finite")
        self.source_tokens = np.asarray(self.source_tokens, dtype=np.int64)
        self.target_tokens = np.asarray(self.target_tokens, dtype=np.int64)

    def aligned_slots(self):
        """Slots whose token is unchanged between the prompts (exact matching)."""
        if self.source_tokens.shape != self.target_tokens.shape:
            raise AlignmentError(
                f"prompt length mismatch: {self.source_tokens.shape} vs "
                f"{self.target_tokens.shape}")
        return np.nonzero(self.source_tokens == self.target_tokens)[0]


@dataclass
class DualRun:
    """Lock-stepped source/target sampling state and captured tapes."""

    z_source: np.ndarray = None
    z_target: np.ndarray = None
    source_tapes: list = field(default_factory=list)   # per step {branch: tape}
    target_tapes: list = field(default_factory=list)
    injected_steps: dict = field(default_factory=dict)


def _renorm_rows(data):
    sums = data.sum(axis=-1, keepdims=True)
    uniform = np.full_like(data, 1.0 / data.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sums > 0, data / np.where(sums > 0, sums, 1.0), uniform)
    return out


def reweight_map(amap, token, scale):
    """Scale one token's attention column, renormalizing rows; scale 1 is a no-op."""
    if not 0 <= token < amap.shape[-1]:
        raise InjectionError(f"reweight token {token} outside 0..{amap.shape[-1] - 1}")
    if float(scale) == 1.0:
        return amap
    data = amap.data.copy()
    data[..., token] *= float(scale)
    return Field(_renorm_rows(data))


def reweight_attention(tape, token, scale, t):
    """Apply reweight_map to every cross map captured at step t (in place)."""
    for key, m in list(tape.maps.items()):
        layer, tt, branch, kind = key
        if tt == int(t) and kind == CROSS:
            tape.maps[key] = reweight_map(m, token, scale)
    return tape


def _refine_transform(source_map, aligned):
    """Replace only aligned-token columns with the source columns, then renormalize."""
    def transform(computed):
        data = computed.data.copy()
        data[..., aligned] = source_map.data[..., aligned]
        return Field(_renorm_rows(data))
    return transform


def inject_cross(source_tape, target_overrides, t, spec):
    """Cross-attention replacement (full in replace mode, aligned slots in refine)."""
    aligned = spec.aligned_slots() if spec.mode == "refine" else None
    for layer, m in source_tape.maps_at(t, COND, CROSS).items():
        if spec.mode == "refine":
            target_overrides[(layer, CROSS)] = _refine_transform(m, aligned)
        else:
            target_overrides[(layer, CROSS)] = m
    return target_overrides


def inject_self_cond(source_tape, target_overrides, t, spec):
    for layer, m in source_tape.maps_at(t, COND, SELF).items():
        target_overrides[(layer, SELF)] = m
    return target_overrides


def inject_self_uncond(source_tape, target_overrides, t, spec):
    for layer, m in source_tape.maps_at(t, UNCOND, SELF).items():
        target_overrides[(layer, SELF)] = m
    return target_overrides


def _compose_reweight(overrides, source_tape, t, token, scale):
    """Re-weighting applies on top of whatever the cross override produced."""
    for layer in source_tape.maps_at(t, COND, CROSS):
        base = overrides.get((layer, CROSS))

        def transform(computed, _base=base):
            m = computed
            if _base is not None:
                m = _base(m) if callable(_base) else _base
            return reweight_map(m, token, scale)

        overrides[(layer, CROSS)] = transform
    return overrides


def edit(run, spec, model, sched, text_encoder, w=7.5):
    """Run the dual lock-step edit; returns (edited image, DualRun)."""
    T = sched.T
    if run.tokens is not None and not np.array_equal(np.asarray(run.tokens),
                                                     spec.source_tokens):
        raise AlignmentError("edit spec's source prompt differs from the run's")
    spec.aligned_slots()  # validates prompt alignment up front
    c_tgt = text_encoder.encode(spec.target_tokens)
    nullc = text_encoder.encode(text_encoder.null_tokens())
    uncond = Conditioning(nullc, nullc)
    n_cross = steps_active(spec.tau_c, T)
    n_self = steps_active(spec.tau_s, T)
    n_uncond = steps_active(spec.tau_u, T)
    n_value = steps_active(spec.tau_v, T)

    dual = DualRun(injected_steps={"cross": n_cross, "self_cond": n_self,
                                   "self_uncond": n_uncond, "value": n_value})
    z_s = Field(run.trajectory.latents[T].copy())
    z_t = Field(run.trajectory.latents[T].copy())
    for i, t in enumerate(range(T, 0, -1)):
        s_tapes = {COND: AttentionTape(), UNCOND: AttentionTape()}
        eps_s = cfg_eps(model, z_s, t, run.conditioning_at(t), uncond, w, tapes=s_tapes)
        if not np.isfinite(eps_s.data).all():
            raise NumericAbort(f"edit: non-finite source eps at t={t}")
        z_s = ddim_step(z_s, eps_s, t, sched)
        dual.source_tapes.append(s_tapes)

        ov_cond = {}
        ov_uncond = {}
        if i < n_cross:
            inject_cross(s_tapes[COND], ov_cond, t, spec)
        if i < n_self:
            inject_self_cond(s_tapes[COND], ov_cond, t, spec)
        if i < n_uncond:
            inject_self_uncond(s_tapes[UNCOND], ov_uncond, t, spec)
        if spec.mode == "reweight" and spec.reweight is not None:
            _compose_reweight(ov_cond, s_tapes[COND], t, *spec.reweight)

        value = Field(run.value_embeds[t]) if i < n_value else c_tgt
        t_tapes = {COND: AttentionTape(), UNCOND: AttentionTape()}
        eps_t = cfg_eps(model, z_t, t, Conditioning(c_tgt, value), uncond, w,
                        tapes=t_tapes, overrides={COND: ov_cond, UNCOND: ov_uncond})
        if not np.isfinite(eps_t.data).all():
            raise NumericAbort(f"edit: non-finite target eps at t={t}")
        z_t = ddim_step(z_t, eps_t, t, sched)
        dual.target_tapes.append(t_tapes)

    dual.z_source = z_s.data
    dual.z_target = z_t.data
    return np.clip(z_t.data, 0.0, 1.0), dual


class _FeatureHooks(SampleHooks):
    """Capture decoder features per step, or replay a captured set."""

    def __init__(self, capture=None, replay=None):
        self.capture = capture
        self.replay = replay

    def feature_sink(self, t, branch):
        if self.capture is None:
            return None
        return self.capture.setdefault(t, {}).setdefault(branch, {})

    def feature_overrides(self, t, branch):
        if self.replay is None:
            return None
        return self.replay[t]


def style_transfer(content_image, content_embedding, style_run, model, sched,
                   null_embedding, w=7.5):
    """Repaint the content image's structure with a style run's conditioning.

    The content image is DDIM-inverted at guidance 1 and resampled, capturing
    the decoder residual-block features per timestep; sampling then restarts
    from the style run's z_T under the style run's learned value embeddings
    with those spatial features injected into both guidance branches.
    """
    if np.asarray(content_image).shape != style_run.image.shape:
        raise ConfigError("style transfer needs matching resolutions")
    c = Field(np.asarray(content_embedding, dtype=np.float32))
    nullc = Field(np.asarray(null_embedding, dtype=np.float32))
    uncond = Conditioning(nullc, nullc)
    cond = Conditioning(c, c)
    traj = ddim_invert(content_image, cond, sched, model, w=1.0, uncond=uncond)

    captured = {}
    ddim_sample(traj.latents[sched.T], cond, sched, model, 1.0, uncond=uncond,
                hooks=_FeatureHooks(capture=captured))
    features = {t: captured[t][COND] for t in captured}

    out = ddim_sample(style_run.trajectory.latents[sched.T],
                      lambda t: style_run.conditioning_at(t), sched, model, w,
                      uncond=uncond, hooks=_FeatureHooks(replay=features))
    return np.clip(out, 0.0, 1.0)
