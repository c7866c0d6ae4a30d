"""Training: weighted binary cross-entropy, Adam, linear warmup + cosine
decay, and the end-to-end loop over the pipeline's trainable components."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .evaluator import ConfusionCounts, accumulate, f1
from .ops import ShapeError, sigmoid

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_pos: float | None = None  # None: class-frequency balance from the train set
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup must be shorter than the run")


def weighted_bce_loss(probabilities: np.ndarray, target: np.ndarray, w_pos: float):
    """Loss and its analytic gradient w.r.t. the pre-sigmoid logits.

    loss = -mean(w_pos * y * log p + (1 - y) * log(1 - p)), p clamped away
    from {0, 1}. The gradient treats the clamp as identity.
    """
    if probabilities.shape != target.shape:
        raise ShapeError(f"shape mismatch: {probabilities.shape} vs {target.shape}")
    if w_pos <= 0:
        raise ValueError("w_pos must be positive")
    p = np.clip(probabilities, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target.astype(p.dtype)
    n = p.size
    loss = -float(np.mean(w_pos * y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    grad = (p * (1.0 - y + w_pos * y) - w_pos * y) / n
    return loss, grad


def bce_with_logits(logits: ad.Tensor, target: np.ndarray, w_pos: float) -> ad.Tensor:
    """Autodiff node wrapping weighted_bce_loss for the training graph."""
    probs = sigmoid(logits.data)
    loss, grad = weighted_bce_loss(probs, target, w_pos)
    out = ad.Tensor(np.asarray(loss, dtype=logits.data.dtype))
    if logits.requires_grad or logits._parents:
        out.requires_grad = True
        out._parents = (logits,)
        out._backward = lambda g: logits._accumulate(float(g) * grad)
    return out


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.learning_rate * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, ad.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self, lr_t: float) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1**t)
            v_hat = self.v[name] / (1 - c.beta2**t)
            p.data = p.data - (lr_t * m_hat / (np.sqrt(v_hat) + c.adam_eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = {f"adam.m.{k}": v for k, v in self.m.items()}
        blocks.update({f"adam.v.{k}": v for k, v in self.v.items()})
        blocks["adam.step"] = np.array([float(self.step_count)])
        return blocks


def adam_step(params, grads, state: Adam, lr_t: float) -> None:
    """Functional wrapper: assign grads then advance the optimizer."""
    for name, p in state.params.items():
        p.grad = np.asarray(grads[name], dtype=np.float64)
    state.step(lr_t)


def default_pos_weight(samples) -> float:
    """negatives/positives over the training masks, clamped to [1, 100]."""
    pos = sum(int(s.gt_mask.sum()) for s in samples)
    neg = sum(s.gt_mask.size - int(s.gt_mask.sum()) for s in samples)
    if pos == 0:
        return 100.0
    return float(np.clip(neg / pos, 1.0, 100.0))


class DivergenceError(RuntimeError):
    pass


def evaluate_f1(model, samples, batch_size: int = 16) -> float:
    acc = ConfusionCounts()
    if hasattr(model, "predict_batch"):
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            for mask, s in zip(model.predict_batch(chunk), chunk):
                acc = accumulate(mask, s.gt_mask, acc)
    else:
        for s in samples:
            pred = model.predict(s.query_enc, s.ref_encs)
            acc = accumulate(pred.mask[0], s.gt_mask, acc)
    return f1(acc)


def train(model, train_samples, val_samples, cfg: TrainConfig):
    """Optimize the model's trainable parameters; frozen encoder features and
    retrievals live inside the samples. Returns (best parameter blocks,
    per-epoch history). Deterministic in cfg.seed."""
    if not train_samples or not val_samples:
        raise ValueError("empty dataset")
    w_pos = cfg.w_pos if cfg.w_pos is not None else default_pos_weight(train_samples)
    params = model.trainable_params()
    opt = Adam(params, cfg)

    history = []
    best = {"val_f1": -1.0, "blocks": None, "epoch": -1}
    global_step = 0
    for epoch in range(cfg.epochs):
        lr_t = lr_at_epoch(epoch, cfg)
        order = np.random.Generator(np.random.Philox(key=(cfg.seed, epoch))).permutation(
            len(train_samples)
        )
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            rng = np.random.Generator(np.random.Philox(key=(cfg.seed, global_step)))
            # one graph per batch; mean pixel BCE over the stacked masks equals
            # the mean of the per-sample losses (equal mask sizes)
            logits = model.forward_logits_batch(batch, training=True, rng=rng)
            target = np.stack([s.gt_mask for s in batch])
            loss = bce_with_logits(logits[:, 0], target, w_pos)
            loss.backward()
            batch_loss = float(loss.data)
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at step {global_step}")
            opt.step(lr_t)
            losses.append(batch_loss)
            global_step += 1
        val = evaluate_f1(model, val_samples)
        history.append(
            {"epoch": epoch, "lr": lr_t, "train_loss": float(np.mean(losses)), "val_f1": val}
        )
        if val > best["val_f1"]:
            best = {
                "val_f1": val,
                "epoch": epoch,
                "blocks": {k: np.array(p.data) for k, p in params.items()},
            }
    if best["blocks"] is not None:
        for k, p in params.items():
            p.data = np.array(best["blocks"][k], dtype=p.data.dtype)
    return best, history
