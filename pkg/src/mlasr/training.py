"""Optimisation recipe: label-smoothed CE, warmup schedule, clipped Adam.

Gradients come from torch autograd; the update rule, the schedule, clipping,
checkpoint averaging and transfer initialisation are implemented here over
plain dictionaries of named tensors.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import DataError, NumericalError
from .lexicon import PAD_ID
from .model import VOCAB_TENSORS, ASRTransformer, Checkpoint, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

GradientSet = dict[str, torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    epsilon_ls: float = 0.1
    warmup_steps: int = 12000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    batch_frames: int = 2000
    max_batch_utts: int = 64
    epochs: int = 1
    max_steps: int | None = None
    checkpoint_every: int = 500
    average_last: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon_ls < 1.0:
            raise ValueError("epsilon_ls must be in [0, 1)")
        if self.warmup_steps < 1 or self.average_last < 1:
            raise ValueError("warmup_steps and average_last must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def label_smoothed_ce(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID, epsilon: float = 0.1) -> torch.Tensor:
    """Mean over non-pad positions of -sum_c q(c) log p(c).

    ``q = (1 - epsilon) * onehot(target) + epsilon / V`` so the smoothing
    mass covers the whole vocabulary, the true class included.
    """
    keep = targets != pad_id
    if not torch.any(keep):
        raise DataError("empty target")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    smooth = -logp.mean(dim=-1)
    loss = (1.0 - epsilon) * nll + epsilon * smooth
    return loss[keep].mean()


def smoothed_target_entropy(vocab_size: int, epsilon: float) -> float:
    """Entropy of the smoothed target distribution: the loss floor."""
    hi = 1.0 - epsilon + epsilon / vocab_size
    lo = epsilon / vocab_size
    out = -hi * math.log(hi)
    if lo > 0:
        out -= (vocab_size - 1) * lo * math.log(lo)
    return out


def lr_schedule(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def global_norm(grads: GradientSet) -> float:
    total = sum(float(torch.sum(g.double() ** 2)) for g in grads.values())
    return math.sqrt(total)


def clip_gradients(grads: GradientSet, max_norm: float) -> GradientSet:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient")
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: GradientSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> AdamState:
    """Bias-corrected Adam; updates ``params`` in place and returns the new state."""
    t = state.step + 1
    m_new, v_new = {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
        m_new[name], v_new[name] = m, v
    return AdamState(t, m_new, v_new)


def average_params(param_sets: Sequence[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    if not param_sets:
        raise ValueError("need at least one parameter set")
    first = param_sets[0]
    for other in param_sets[1:]:
        if other.keys() != first.keys() or any(other[k].shape != first[k].shape for k in first):
            raise DataError("checkpoints are not shape-compatible")
    return {
        k: (torch.stack([p[k].double() for p in param_sets]).sum(0) / len(param_sets)).to(first[k].dtype)
        for k in first
    }


def average_checkpoints(ckpts: Sequence[Checkpoint | str | Path]) -> Checkpoint:
    """Elementwise mean of the given checkpoints (paths are loaded)."""
    loaded = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in ckpts]
    if not loaded:
        raise DataError("need at least one checkpoint")
    hashes = {c.vocab_hash for c in loaded}
    if len(hashes) > 1:
        raise DataError("checkpoints were trained with different vocabularies")
    if len({c.config for c in loaded}) > 1:
        raise DataError("checkpoints have different model configs")
    params = average_params([c.params for c in loaded])
    steps = [c.step for c in loaded]
    meta = {**loaded[0].meta, "averaged_steps": steps}
    return Checkpoint(loaded[0].config, params, loaded[0].vocab_hash, max(steps), meta)


def transfer_init(
    pretrained: Checkpoint,
    new_vocab_size: int,
    seed: int = 0,
    target: ModelConfig | None = None,
    vocab_hash: str = "",
) -> Checkpoint:
    """Copy every tensor except the vocabulary-sized ones, which are re-drawn.

    The target embedding and the output (softmax) projection get fresh
    random initialisation at ``new_vocab_size``.
    """
    src = pretrained.config
    if target is not None:
        if target.d_model != src.d_model:
            raise DataError(f"d_model mismatch: pretrained {src.d_model}, target {target.d_model}")
        same = {k: v for k, v in vars(target).items() if k != "vocab_size"} == {
            k: v for k, v in vars(src).items() if k != "vocab_size"
        }
        if not same:
            raise DataError("pretrained config differs from target beyond vocab_size")
    cfg = ModelConfig(**{**vars(src), "vocab_size": new_vocab_size})
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        fresh = ASRTransformer(cfg).state_dict()
    params = {
        k: (fresh[k].clone() if k in VOCAB_TENSORS else v.detach().clone())
        for k, v in pretrained.params.items()
    }
    meta = {"transfer_from_step": pretrained.step, "transfer_from_vocab": pretrained.vocab_hash}
    return Checkpoint(cfg, params, vocab_hash, 0, meta)


# Data ---------------------------------------------------------------------------


@dataclass
class Example:
    utt_id: str
    feats: np.ndarray
    ids: list[int]
    language: str | None = None


def collate(batch: Sequence[Example]):
    """Pad features and split ids into decoder input and shifted targets."""
    t = max(len(e.feats) for e in batch)
    n = max(len(e.ids) for e in batch) - 1
    d = batch[0].feats.shape[1]
    feats = torch.zeros(len(batch), t, d)
    lens = torch.zeros(len(batch), dtype=torch.long)
    dec_in = torch.full((len(batch), n), PAD_ID, dtype=torch.long)
    targets = torch.full((len(batch), n), PAD_ID, dtype=torch.long)
    for i, e in enumerate(batch):
        feats[i, : len(e.feats)] = torch.from_numpy(np.asarray(e.feats, dtype=np.float32))
        lens[i] = len(e.feats)
        ids = torch.tensor(e.ids, dtype=torch.long)
        dec_in[i, : len(ids) - 1] = ids[:-1]
        targets[i, : len(ids) - 1] = ids[1:]
    return feats, lens, dec_in, targets


def make_batches(examples: Sequence[Example], batch_frames: int, max_utts: int, rng: np.random.Generator) -> list[list[Example]]:
    """Length-bucketed batches whose padded frame count stays within budget."""
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].feats), rng.random()))
    batches, current, longest = [], [], 0
    for i in order:
        e = examples[i]
        longest_if = max(longest, len(e.feats))
        if current and (longest_if * (len(current) + 1) > batch_frames or len(current) >= max_utts):
            batches.append(current)
            current, longest_if = [], len(e.feats)
        current.append(e)
        longest = longest_if
    if current:
        batches.append(current)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class TrainResult:
    model: ASRTransformer
    losses: list[float]
    checkpoints: list[Path]
    steps: int

    def steps_to(self, threshold: float) -> int | None:
        return steps_to_threshold(self.losses, threshold)


def steps_to_threshold(losses: Sequence[float], threshold: float) -> int | None:
    for i, loss in enumerate(losses, start=1):
        if loss < threshold:
            return i
    return None


def train(
    examples: Sequence[Example],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    *,
    vocab_hash: str = "",
    out_dir: str | Path | None = None,
    init: Checkpoint | None = None,
    stop_below: float | None = None,
    on_step: Callable[[dict], None] | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Teacher-forced training for a fixed number of epochs (or ``max_steps``).

    Every step: forward, loss, backward, clip, schedule, Adam.  Checkpoints go
    to ``out_dir/ckpt-<step>.bin`` every ``checkpoint_every`` steps and a
    JSON-lines log to ``out_dir/train.log.jsonl``.  ``stop_below`` ends
    training once a step's loss falls under it.  ``meta`` is stored in every
    checkpoint header.
    """
    if not examples:
        raise DataError("no training examples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        if init.config != model_cfg:
            raise DataError("initial checkpoint config does not match the model config")
        model = init.build()
    else:
        model = ASRTransformer(model_cfg)
    model.train()
    params = model.params()
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log.jsonl", "w", encoding="utf-8")
    else:
        log_fh = None

    losses: list[float] = []
    ckpts: list[Path] = []
    step = 0

    def checkpoint() -> None:
        if out is None:
            return
        path = out / f"ckpt-{step:06d}.bin"
        save_checkpoint(Checkpoint.from_model(model, vocab_hash, step, meta), path)
        ckpts.append(path)

    try:
        done = False
        for epoch in range(cfg.epochs):
            for batch in make_batches(examples, cfg.batch_frames, cfg.max_batch_utts, rng):
                step += 1
                t0 = time.perf_counter()
                feats, lens, dec_in, targets = collate(batch)
                logits = model(feats, lens, dec_in)
                loss = label_smoothed_ce(logits, targets, PAD_ID, cfg.epsilon_ls)
                if not torch.isfinite(loss):
                    raise NumericalError(f"loss diverged at step {step}")
                model.zero_grad(set_to_none=True)
                loss.backward()
                grads = {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in params.items()}
                norm = global_norm(grads)
                grads = clip_gradients(grads, cfg.clip_norm)
                lr = lr_schedule(step, model_cfg.d_model, cfg.warmup_steps, cfg.lr_scale)
                state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                value = loss.item()
                losses.append(value)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": value,
                    "grad_norm": norm,
                    "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
                }
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(record)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    checkpoint()
                if (cfg.max_steps is not None and step >= cfg.max_steps) or (
                    stop_below is not None and value < stop_below
                ):
                    done = True
                    break
            if done:
                break
        if not ckpts or ckpts[-1].name != f"ckpt-{step:06d}.bin":
            checkpoint()
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, losses, ckpts, step)


def last_checkpoints(out_dir: str | Path, k: int) -> list[Path]:
    paths = sorted(Path(out_dir).glob("ckpt-*.bin"))
    if not paths:
        raise DataError(f"no checkpoints in {out_dir}")
    return paths[-k:]


def iter_losses(log_path: str | Path) -> Iterable[float]:
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            yield json.loads(line)["loss"]
