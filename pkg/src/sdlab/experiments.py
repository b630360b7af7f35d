"""Scripted studies: key/value role separation, and the ablation battery."""

import os

import numpy as np

from .attention import Conditioning
from .autodiff import Field
from .editing import EditSpec, edit
from .images import write_image
from .inversion import reconstruct
from .metrics import attention_mask, layout_iou, psnr, target_alignment
from .pipeline import _invert_scene
from .schedule import ddim_sample
from .toyworld import (BACKGROUNDS, COLOR_NAMES, SHAPES, VOCAB, object_mask,
                       tokens_for)


def sample_prompt_pair(rng):
    """Two prompts differing in exactly one attribute (color or shape)."""
    color = COLOR_NAMES[rng.integers(4)]
    shape = SHAPES[rng.integers(4)]
    background = BACKGROUNDS[rng.integers(2)]
    t1 = np.array([VOCAB["<null>"], VOCAB[color], VOCAB[shape], VOCAB[background]],
                  dtype=np.int64)
    t2 = t1.copy()
    if rng.random() < 0.5:
        other = [c for c in COLOR_NAMES if c != color]
        t2[1] = VOCAB[other[rng.integers(3)]]
        changed = "color"
    else:
        other = [s for s in SHAPES if s != shape]
        t2[2] = VOCAB[other[rng.integers(3)]]
        changed = "shape"
    return t1, t2, changed


def generate(stack, key_tokens, value_tokens, z_T, w=7.5):
    """Sample from noise with independently chosen key/value prompt embeddings."""
    key = Field(stack.prompt_embedding_of(key_tokens))
    value = Field(stack.prompt_embedding_of(value_tokens))
    nullc = Field(stack.null_embedding())
    z0 = ddim_sample(z_T, Conditioning(key, value), stack.sched, stack.denoiser,
                     w, uncond=Conditioning(nullc, nullc))
    return np.clip(z0, 0.0, 1.0)


def _label(clf_out, attribute):
    return clf_out.color if attribute == "color" else clf_out.shape


def _word(tokens, attribute):
    if attribute == "color":
        return COLOR_NAMES[int(tokens[1]) - VOCAB[COLOR_NAMES[0]]]
    return SHAPES[int(tokens[2]) - VOCAB[SHAPES[0]]]


def kv_swap_study(stack, pairs=12, seed=0, w=7.5, outdir=None):
    """Fix value / swap key, and fix key / swap value, over seeded prompt pairs.

    Reports the fraction of pairs whose value-swapped sample takes the value
    prompt's changed attribute, and the median object-mask IoU between each
    key-swapped sample and its fixed-value baseline.
    """
    rng = np.random.default_rng(seed)
    flips = []
    ious = []
    outputs = []
    rows = []
    for i in range(pairs):
        t1, t2, changed = sample_prompt_pair(rng)
        z_T = rng.standard_normal((32, 32, 3)).astype(np.float32)
        base = generate(stack, t1, t1, z_T, w)            # key p1, value p1
        other = generate(stack, t2, t2, z_T, w)
        key_swapped = generate(stack, t2, t1, z_T, w)     # key swapped, value fixed
        value_swapped = generate(stack, t1, t2, z_T, w)   # key fixed, value swapped
        flip = _label(stack.classifier.classify(value_swapped), changed) == _word(t2, changed)
        iou = layout_iou(object_mask(key_swapped), object_mask(base))
        flips.append(bool(flip))
        ious.append(iou)
        rows.append({"pair": i, "changed": changed, "value_swap_flips": bool(flip),
                     "key_swap_layout_iou": iou})
        if outdir:
            grid = np.concatenate([base, other, key_swapped, value_swapped], axis=1)
            png = os.path.join(outdir, f"kvswap_{i:02d}.png")
            write_image(png, grid)
            outputs.append(png)
    return {
        "pairs": pairs,
        "value_swap_flip_rate": float(np.mean(flips)),
        "key_swap_iou_median": float(np.median(ious)),
        "rows": rows,
        "outputs": outputs,
    }


def shape_edit_target(tokens, rng):
    """A target prompt changing only the shape slot."""
    shape_word = SHAPES[int(tokens[2]) - VOCAB[SHAPES[0]]]
    others = [s for s in SHAPES if s != shape_word]
    target = np.asarray(tokens, dtype=np.int64).copy()
    target[2] = VOCAB[others[rng.integers(len(others))]]
    return target


def ablation_study(stack, image_index=0, target=None, seed=0):
    """Regularization on/off, mapping vs direct embeddings, tau_u on/off."""
    from .toyworld import parse_prompt

    scene = stack.dataset[image_index]
    rng = np.random.default_rng(seed)
    target_tokens = parse_prompt(target) if target else shape_edit_target(scene.tokens, rng)
    rows = []
    runs = {}
    for name, kwargs in (("full", {}),
                         ("no_att_reg", {"att_reg": False}),
                         ("direct_embedding", {"value_param": "direct"})):
        run = _invert_scene(stack, scene, seed, **kwargs)
        runs[name] = run
        tapes = []
        img = reconstruct(run, stack.denoiser, stack.sched, stack.null_embedding(),
                          w=stack.config.w_edit, tape_sink=tapes)
        mask = attention_mask(tapes, token=2)
        rows.append({
            "variant": name,
            "reconstruction_psnr": psnr(scene.image, img),
            "attention_mask_iou": layout_iou(mask, scene.mask),
        })
    for tau_u, name in ((0.0, "edit_without_uncond_injection"),
                        (stack.config.tau_u, "edit_with_uncond_injection")):
        spec = EditSpec(mode="replace", source_tokens=scene.tokens,
                        target_tokens=target_tokens, tau_c=stack.config.tau_c,
                        tau_s=stack.config.tau_s, tau_u=tau_u,
                        tau_v=stack.config.tau_v, seed=seed)
        img, _ = edit(runs["full"], spec, stack.denoiser, stack.sched,
                      stack.text_encoder, w=stack.config.w_edit)
        rows.append({
            "variant": name,
            "tau_u": tau_u,
            "target_alignment": target_alignment(img, target_tokens, stack.classifier),
        })
    return {"rows": rows, "target_tokens": [int(x) for x in target_tokens]}
