"""End-to-end plumbing shared by the CLI and the test suite.

Builds the trained stack (dataset, frozen encoders, denoiser, oracle
classifier), serializes stacks and inversion runs into the checkpoint
container, and fans independent per-image inversions out over worker
processes with deterministic per-image seeds and input-order results.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attention import AttentionTape, COND, CROSS, Conditioning
from .autodiff import Field
from .checkpoint import load as load_container
from .checkpoint import save as save_container
from .config import RunConfig
from .denoiser import Denoiser, train_denoiser
from .errors import CheckpointError
from .inversion import InversionRun, MappingNetworkSet, invert, reconstruct
from .schedule import Trajectory, ddim_invert, ddim_sample, make_schedule
from .toyworld import (ImageEncoder, Scene, SceneSpec, TextEncoder, ToyClassifier,
                       make_dataset, pretrain_image_encoder, train_classifier)


@dataclass
class TrainedStack:
    config: RunConfig
    sched: object
    dataset: list
    denoiser: Denoiser
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    classifier: ToyClassifier

    def null_embedding(self):
        return self.text_encoder.encode(self.text_encoder.null_tokens()).data

    def prompt_embedding_of(self, tokens):
        return self.text_encoder.encode(np.asarray(tokens, dtype=np.int64)).data


def build_stack(cfg, log=None):
    """Train everything from scratch, deterministically from cfg.seed."""
    def say(msg):
        if log:
            log(msg)

    dataset = make_dataset(cfg.dataset_size, cfg.seed)
    sched = make_schedule(cfg.T)
    image_encoder = ImageEncoder(seed=cfg.seed + 11)
    say(f"pretraining image encoder ({cfg.encoder_steps} steps)")
    pretrain_image_encoder(image_encoder, dataset, cfg.encoder_steps, cfg.seed + 12)
    image_encoder.freeze()

    denoiser = Denoiser(seed=cfg.seed + 21)
    text_encoder = TextEncoder(seed=cfg.seed + 22)
    say(f"training denoiser ({cfg.train_steps} steps)")
    train_denoiser(denoiser, text_encoder, dataset, sched, cfg.train_steps,
                   cfg.seed + 23, lr=cfg.train_lr,
                   log_every=max(1, cfg.train_steps // 10) if log else 0)
    denoiser.set_trainable(False)
    text_encoder.freeze()

    classifier = ToyClassifier(seed=cfg.seed + 31)
    say(f"training classifier ({cfg.classifier_steps} steps)")
    train_classifier(classifier, dataset, cfg.classifier_steps, cfg.seed + 32)
    classifier.freeze()
    return TrainedStack(cfg, sched, dataset, denoiser, text_encoder,
                        image_encoder, classifier)


# ------------------------------------------------------------- serialization

def stack_entries(stack):
    entries = {"meta.T": np.array([stack.sched.T], dtype=np.float32),
               "meta.seed": np.array([stack.config.seed], dtype=np.float32)}
    for k, v in stack.denoiser.state().items():
        entries[f"denoiser.{k}"] = v
    for k, v in stack.text_encoder.state().items():
        entries[f"text.{k}"] = v
    for k, v in stack.image_encoder.state().items():
        entries[f"imgenc.{k}"] = v
    for k, v in stack.classifier.state().items():
        entries[f"clf.{k}"] = v
    return entries


def stack_from_entries(cfg, entries):
    def sub(prefix):
        plen = len(prefix)
        return {k[plen:]: v for k, v in entries.items() if k.startswith(prefix)}

    T = int(entries["meta.T"][0])
    if T != cfg.T:
        raise CheckpointError(f"checkpoint was trained with T={T}, config says {cfg.T}")
    stack = TrainedStack(cfg, make_schedule(T), make_dataset(cfg.dataset_size, cfg.seed),
                         Denoiser(seed=0), TextEncoder(seed=0), ImageEncoder(seed=0),
                         ToyClassifier(seed=0))
    stack.denoiser.load_state(sub("denoiser."))
    stack.denoiser.set_trainable(False)
    stack.text_encoder.load_state(sub("text."))
    stack.text_encoder.freeze()
    stack.image_encoder.load_state(sub("imgenc."))
    stack.image_encoder.freeze()
    stack.classifier.load_state(sub("clf."))
    stack.classifier.freeze()
    return stack


def save_stack(path, stack):
    return save_container(path, stack_entries(stack))


def load_stack(path, cfg):
    return stack_from_entries(cfg, load_container(path))


def run_entries(run):
    """InversionRun -> checkpoint entries (weights, trajectory, config, curves).

    Reference attention tapes keep their cross maps only; that is all the
    regularizer and the mask metrics consume downstream.
    """
    entries = {
        "image": run.image,
        "tokens": run.tokens.astype(np.float32),
        "c": run.source_embedding,
        "ex": run.image_tokens,
        "traj.z": np.stack(run.trajectory.latents),
        "cfg.json": np.frombuffer(json.dumps(run.config, sort_keys=True).encode(),
                                  dtype=np.uint8).astype(np.float32),
    }
    for i, tape in enumerate(run.trajectory.attn):
        t = i + 1
        for layer, m in tape.maps_at(t, COND, CROSS).items():
            entries[f"atape.{t:03d}.{layer}"] = m.data
    for t, net in enumerate(run.nets.nets, start=1):
        for k, v in net.state().items():
            entries[f"net.{t:03d}.{k}"] = v
    for t, ve in run.value_embeds.items():
        entries[f"ve.{t:03d}"] = ve
    for t, curve in run.loss_curves.items():
        entries[f"curve.{t:03d}"] = np.asarray(curve, dtype=np.float32)
    return entries


def run_from_entries(entries):
    latents = [z for z in entries["traj.z"]]
    T = len(latents) - 1
    attn = []
    for t in range(1, T + 1):
        tape = AttentionTape()
        prefix = f"atape.{t:03d}."
        for k, v in entries.items():
            if k.startswith(prefix):
                tape.put(k[len(prefix):], t, COND, CROSS, Field(v))
        attn.append(tape)
    cfg = json.loads(bytes(entries["cfg.json"].astype(np.uint8)).decode())
    nets = MappingNetworkSet(T, tokens_in=entries["ex"].shape[0],
                             tokens_out=entries["c"].shape[0],
                             width=entries["c"].shape[1], seed=cfg.get("seed", 0))
    for t, net in enumerate(nets.nets, start=1):
        net.load_state({k[len(f"net.{t:03d}."):]: v for k, v in entries.items()
                        if k.startswith(f"net.{t:03d}.")})
    value_embeds = {int(k.split(".")[1]): v for k, v in entries.items()
                    if k.startswith("ve.")}
    curves = {int(k.split(".")[1]): [float(x) for x in v] for k, v in entries.items()
              if k.startswith("curve.")}
    return InversionRun(
        image=entries["image"], tokens=entries["tokens"].astype(np.int64),
        source_embedding=entries["c"], image_tokens=entries["ex"],
        trajectory=Trajectory(latents=latents, attn=attn), nets=nets,
        value_embeds=value_embeds, loss_curves=curves, config=cfg)


def save_run(path, run):
    return save_container(path, run_entries(run))


def load_run(path):
    return run_from_entries(load_container(path))


# ------------------------------------------------------- batched inversions

_WORKER_STACK = None
_WORKER_OPTS = None


def _worker_init(stack, opts):
    global _WORKER_STACK, _WORKER_OPTS
    _WORKER_STACK = stack
    _WORKER_OPTS = opts


def _invert_scene(stack, scene, seed, att_reg=True, value_param="mapping"):
    cfg = stack.config
    ex = stack.image_encoder.encode(scene.image).data
    c = stack.prompt_embedding_of(scene.tokens)
    return invert(scene.image, c, stack.denoiser, stack.sched, ex,
                  stack.null_embedding(), K=cfg.K, lr=cfg.lr,
                  betas=(cfg.beta1, cfg.beta2), w_traj=cfg.w_invert,
                  w_opt=cfg.w_edit, att_reg=att_reg, k_schedule=cfg.k_schedule,
                  value_param=value_param, seed=seed, tokens=scene.tokens)


def _worker_task(args):
    index, seed = args
    scene = _WORKER_STACK.dataset[index] if isinstance(index, (int, np.integer)) else index
    run = _invert_scene(_WORKER_STACK, scene, seed, **_WORKER_OPTS)
    return run_entries(run)


def invert_many(stack, scenes, seeds, workers=0, att_reg=True, value_param="mapping"):
    """Invert scenes independently; results come back in input order.

    scenes may be Scene objects or dataset indices. workers=0 picks the
    machine's count, 1 forces in-process execution.
    """
    scene_list = list(scenes)
    seed_list = list(seeds)
    assert len(scene_list) == len(seed_list)
    opts = {"att_reg": att_reg, "value_param": value_param}
    if workers == 0:
        env = os.environ.get("SDLB_THREADS", "0")
        workers = int(env) if env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(scene_list)))
    if workers == 1:
        _worker_init(stack, opts)
        return [run_from_entries(_worker_task(a)) for a in zip(scene_list, seed_list)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(stack, opts)) as pool:
        results = list(pool.map(_worker_task, list(zip(scene_list, seed_list))))
    return [run_from_entries(r) for r in results]


def resample_baseline(run, stack, w=7.5):
    """Plain re-sampling of the inversion trajectory under the given guidance."""
    c = Field(run.source_embedding)
    nullc = Field(stack.null_embedding())
    z0 = ddim_sample(run.trajectory.latents[stack.sched.T],
                     Conditioning(c, c), stack.sched, stack.denoiser, w,
                     uncond=Conditioning(nullc, nullc))
    return np.clip(z0, 0.0, 1.0)


def round_trip(scene, stack):
    """DDIM inversion then sampling at guidance 1; the fidelity floor."""
    c = Field(stack.prompt_embedding_of(scene.tokens))
    cond = Conditioning(c, c)
    traj = ddim_invert(scene.image, cond, stack.sched, stack.denoiser, w=1.0)
    z0 = ddim_sample(traj.latents[stack.sched.T], cond, stack.sched,
                     stack.denoiser, 1.0)
    return np.clip(z0, 0.0, 1.0), traj
