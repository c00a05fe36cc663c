"""VQ-VAE over 32x32 scalograms: model, loss, training loop and scoring."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import SGD, Adam, BatchNorm2d, Conv2d, ConvTranspose2d, ReLU, Tanh

log = logging.getLogger(__name__)

CODEBOOK_SIZE = 64
EMBED_DIM = 32


class TrainingDiverged(RuntimeError):
    pass


def quantize(z: np.ndarray, codebook: np.ndarray):
    """Nearest codebook rows for z of shape (m, d); ties go to the lowest index."""
    z = np.atleast_2d(z)
    d2 = (
        np.sum(z * z, axis=1, keepdims=True)
        - 2.0 * z @ codebook.T
        + np.sum(codebook * codebook, axis=1)[None, :]
    )
    idx = np.argmin(d2, axis=1)
    return idx, codebook[idx]


def vq_loss(x, recon, z_e, e_k, beta=0.25):
    """(total, reconstruction, codebook, commitment) with mean reductions.

    The commitment term is returned already multiplied by beta.
    """
    x, recon, z_e, e_k = (np.asarray(a, dtype=np.float64) for a in (x, recon, z_e, e_k))
    rec = float(np.mean((x - recon) ** 2))
    cb = float(np.mean((z_e - e_k) ** 2))
    commit = beta * cb
    return rec + cb + commit, rec, cb, commit


def to_model_range(spec01: np.ndarray) -> np.ndarray:
    """Map [0, 1] scalograms to the tanh range [-1, 1]."""
    return 2.0 * spec01 - 1.0


class VQVAE:
    def __init__(self, beta=0.25, codebook_size=CODEBOOK_SIZE, embed_dim=EMBED_DIM, seed=0, dtype=np.float32,
                 reduction="mean"):
        rng = np.random.default_rng(seed)
        self.beta = beta
        self.reduction = reduction
        self.dtype = dtype
        self.enc1 = Conv2d(1, 64, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(64, dtype=dtype)
        self.enc2 = Conv2d(64, 32, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(32, dtype=dtype)
        self.pre = Conv2d(32, embed_dim, 1, rng=rng, dtype=dtype)
        self.post = Conv2d(embed_dim, 8, 1, rng=rng, dtype=dtype)
        self.dec1 = ConvTranspose2d(8, 64, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(64, dtype=dtype)
        self.dec2 = ConvTranspose2d(64, 1, 4, 2, 1, rng=rng, dtype=dtype)
        self.encoder = [self.enc1, self.bn1, ReLU(), self.enc2, self.bn2, ReLU(), self.pre]
        self.decoder = [self.post, self.dec1, self.bn3, ReLU(), self.dec2, Tanh()]
        k = codebook_size
        self.codebook = rng.uniform(-1.0 / k, 1.0 / k, size=(k, embed_dim)).astype(dtype)
        self.codebook_grad = np.zeros_like(self.codebook)

    # -- parameters ---------------------------------------------------------
    @property
    def layers(self):
        return [l for l in self.encoder + self.decoder if l.params]

    _NAMED = ("enc1", "bn1", "enc2", "bn2", "pre", "post", "dec1", "bn3", "dec2")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"codebook": self.codebook.copy()}
        for lname in self._NAMED:
            layer = getattr(self, lname)
            for pname, p in layer.params.items():
                state[f"{lname}.{pname}"] = p.copy()
            if isinstance(layer, BatchNorm2d):
                state[f"{lname}.running_mean"] = layer.running_mean.copy()
                state[f"{lname}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.codebook = np.array(state["codebook"], dtype=self.dtype)
        self.codebook_grad = np.zeros_like(self.codebook)
        for lname in self._NAMED:
            layer = getattr(self, lname)
            for pname in layer.params:
                layer.params[pname] = np.array(state[f"{lname}.{pname}"], dtype=self.dtype)
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = np.array(state[f"{lname}.running_mean"], dtype=self.dtype)
                layer.running_var = np.array(state[f"{lname}.running_var"], dtype=self.dtype)
            layer.zero_grad()

    def astype(self, dtype):
        self.dtype = dtype
        for layer in self.layers:
            layer.astype(dtype)
        self.codebook = self.codebook.astype(dtype)
        self.codebook_grad = np.zeros_like(self.codebook)
        return self

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()
        self.codebook_grad[...] = 0

    # -- passes -------------------------------------------------------------
    def encode(self, x, train=False):
        h = x
        for layer in self.encoder:
            h = layer.forward(h, train)
        return h

    def decode(self, z, train=False):
        h = z
        for layer in self.decoder:
            h = layer.forward(h, train)
        return h

    def quantize_latent(self, z_e):
        n, c, h, w = z_e.shape
        flat = z_e.transpose(0, 2, 3, 1).reshape(-1, c)
        idx, e = quantize(flat, self.codebook)
        z_q = e.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return idx.reshape(n, h, w), np.ascontiguousarray(z_q)

    def forward(self, x, train=False):
        """x in model range [-1, 1], shape (n, 1, 32, 32)."""
        x = np.asarray(x, dtype=self.dtype)
        z_e = self.encode(x, train)
        idx, z_q = self.quantize_latent(z_e)
        recon = self.decode(z_q, train)
        return {"recon": recon, "z_e": z_e, "z_q": z_q, "indices": idx}

    def loss_and_grad(self, x, train=True):
        """Forward + backward on a batch; gradients accumulate into the layers.

        The decoder-input gradient is copied straight through the quantizer
        to the encoder output; the codebook only receives the codebook term.
        """
        x = np.asarray(x, dtype=self.dtype)
        out = self.forward(x, train)
        recon, z_e, z_q, idx = out["recon"], out["z_e"], out["z_q"], out["indices"]
        total, rec, cb, commit = vq_loss(x, recon, z_e, z_q, self.beta)
        if self.reduction == "sum":
            # squared norms per sample, averaged over the batch
            scale_x, scale_z = recon[0].size, z_e[0].size
            total, rec, cb, commit = total, rec * scale_x, cb * scale_z, commit * scale_z
            total = rec + cb + commit
        n_x = len(x) if self.reduction == "sum" else recon.size
        n_z = len(x) if self.reduction == "sum" else z_e.size

        d_recon = (2.0 / n_x) * (recon - x)
        d = d_recon
        for layer in reversed(self.decoder):
            d = layer.backward(d)
        diff = z_e - z_q
        dz_e = d + (2.0 * self.beta / n_z) * diff
        d_e = (-2.0 / n_z) * diff.transpose(0, 2, 3, 1).reshape(-1, z_e.shape[1])
        np.add.at(self.codebook_grad, idx.reshape(-1), d_e.astype(self.dtype, copy=False))
        d = dz_e.astype(self.dtype, copy=False)
        for layer in reversed(self.encoder):
            d = layer.backward(d)
        return {"total": total, "recon": rec, "codebook": cb, "commit": commit, "indices": idx}

    def reconstruction_errors(self, spec01: np.ndarray, batch_size=256) -> np.ndarray:
        """Per-sample MSE in model range, eval mode."""
        spec01 = np.asarray(spec01)
        errs = []
        for i in range(0, len(spec01), batch_size):
            x = to_model_range(spec01[i:i + batch_size]).reshape(-1, 1, 32, 32).astype(self.dtype)
            recon = self.forward(x, train=False)["recon"]
            errs.append(np.mean((recon.astype(np.float64) - x) ** 2, axis=(1, 2, 3)))
        return np.concatenate(errs) if errs else np.zeros(0)

    def eval_loss(self, spec01: np.ndarray, batch_size=256) -> float:
        total, n = 0.0, 0
        for i in range(0, len(spec01), batch_size):
            x = to_model_range(spec01[i:i + batch_size]).reshape(-1, 1, 32, 32).astype(self.dtype)
            out = self.forward(x, train=False)
            total += vq_loss(x, out["recon"], out["z_e"], out["z_q"], self.beta)[0] * len(x)
            n += len(x)
        return total / n


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    momentum: float = 0.0
    batch_size: int = 128
    max_epochs: int = 150
    patience: int = 10
    min_delta: float = 1e-5
    beta: float = 0.25
    seed: int = 0
    reduction: str = "mean"
    optimizer: str = "adam"


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    errors_by_group: dict = field(default_factory=dict)

    def loss_log(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{t:.8g},{v:.8g}")
        return "\n".join(lines) + "\n"


class EarlyStopping:
    def __init__(self, patience=10, min_delta=1e-5):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = loss, self.epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batchnorm cannot train on a single sample
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(train_specs: np.ndarray, val_specs: np.ndarray, config: TrainConfig | None = None,
          on_epoch=None) -> tuple[VQVAE, TrainReport]:
    """Fit a VQ-VAE on [0, 1] scalograms (n, 32, 32), keeping the best-validation weights."""
    config = config or TrainConfig()
    train_specs = np.asarray(train_specs)
    val_specs = np.asarray(val_specs)
    if len(train_specs) < 2:
        raise ValueError("training set needs at least two spectrograms")
    if len(val_specs) == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(config.seed)
    model = VQVAE(beta=config.beta, seed=int(rng.integers(2**31)), reduction=config.reduction)
    if config.optimizer == "sgd":
        opt = SGD(model.layers, lr=config.lr, weight_decay=config.weight_decay, momentum=config.momentum)
    elif config.optimizer == "adam":
        opt = Adam(model.layers, lr=config.lr, weight_decay=config.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    xs = to_model_range(train_specs).reshape(-1, 1, 32, 32).astype(np.float32)
    stopper = EarlyStopping(config.patience, config.min_delta)
    report = TrainReport()
    best_state = model.state_dict()

    for epoch in range(1, config.max_epochs + 1):
        losses, sizes = [], []
        for batch in _batches(len(xs), config.batch_size, rng):
            model.zero_grad()
            stats = model.loss_and_grad(xs[batch], train=True)
            if not np.isfinite(stats["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: recon={stats['recon']} "
                    f"codebook={stats['codebook']} commit={stats['commit']}"
                )
            opt.step(extra=[(model.codebook, model.codebook_grad)])
            losses.append(stats["total"])
            sizes.append(len(batch))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss = model.eval_loss(val_specs)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
        if stop:
            break
    report.stopping_epoch = epoch
    report.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    return model, report
