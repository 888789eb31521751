"""Alternating minibatch training with owner-group freezing.

Each iteration of the full method runs a discriminator update (D-Net groups
only; the reconstruction is computed with no gradient tracked into the
feature extractor or generator) followed by a generator update (feature
extractor, classifier and generator groups only, against the combined
objective). The discriminator minimizes binary cross-entropy of its patch
map toward labels 1 (original) / 0 (reconstructed) plus the class-head
cross-entropy over the combined batch; the generator side uses the
non-saturating adversarial term. Ablation arms simply skip the absent
pieces, and zero-weight loss branches are skipped outright so that the
lambda1 = lambda2 = 0 configuration executes the same float ops as the
baseline arm.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, streams
from .data import (
    AugmentConfig,
    Dataset,
    MinibatchSampler,
    prepare_eval_image,
    prepare_training_image,
    stratified_fraction,
)
from .engine import ParameterStore
from .errors import CheckpointError, ConfigError, NumericError
from .evaluation import classification_metrics, confusion_matrix
from .networks import ModelBundle
from .losses import FocalParams, LossWeights

log = logging.getLogger(__name__)

MODES = ("baseline", "+ros", "+focal", "+hem", "+rnet", "+rnet+dnet")
GEN_GROUPS = ("F", "C", "R")
DISC_GROUPS = ("D", "D_disc", "D_cls")

CHECKPOINT_MAGIC = b"AUXCNN01"
LOG_HEADER = ["epoch", "iter", "L_cls", "L_rec", "L_adv", "L_cmb", "D_loss"]
EVAL_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "+rnet+dnet"
    batch_size: int = 8
    epochs: int = 200
    learning_rate: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    hem_fraction: float = 0.25
    dataset_fraction: float = 1.0
    seed: int = 0
    deterministic: bool = True
    check_freeze: bool = False   # assert freeze invariants on every iteration

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_parameters(bundle_or_store, seed: int) -> None:
    """Xavier-uniform weights, zero biases, unit norm scales, reset statistics.

    Each tensor draws from its own stream keyed by (seed, parameter name), in
    sorted-name order, so the values do not depend on which other networks
    exist in the store.
    """
    store = bundle_or_store.store if isinstance(bundle_or_store, ModelBundle) \
        else bundle_or_store
    for name in sorted(store.names()):
        fans, fill = store.init_spec(name)
        arr = store[name]
        if fans is not None:
            fan_in, fan_out = fans
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            rng = streams.stream(seed, streams.INIT, name)
            arr[...] = rng.uniform(-bound, bound, arr.shape).astype(store.dtype)
        else:
            arr.fill(fill)
        store.mark_initialized(name)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

try:  # single-pass fused update; the numpy path below computes the same values
    from numba import njit

    @njit(cache=True)
    def _adam_kernel(p, g, m, v, b1, a1, b2, a2, lr_eff, eps_eff):  # pragma: no cover
        for i in range(p.size):
            m[i] = b1 * m[i] + a1 * g[i]
            v[i] = b2 * v[i] + a2 * (g[i] * g[i])
            step = (m[i] / (np.sqrt(v[i]) + eps_eff)) * lr_eff
            p[i] = p[i] - step
except ImportError:  # pragma: no cover
    _adam_kernel = None


class AdamState:
    """Bias-corrected Adam over owner groups, with per-group step counters.

    ``step(groups)`` touches exactly the trainable parameters of those groups
    and nothing else; every other tensor in the store stays bitwise intact.
    """

    def __init__(self, store: ParameterStore, beta1=0.5, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = {g: 0 for g in ("F", "C", "R", "D", "D_disc", "D_cls")}
        self.m = {}
        self.v = {}
        max_size = 1
        for name in store.names(trainable_only=True):
            arr = store[name]
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)
            max_size = max(max_size, arr.size)
        self._scratch = np.empty(max_size, dtype=store.dtype)

    def step(self, groups, lr: float) -> None:
        groups = tuple(groups)
        for g in groups:
            self.steps[g] += 1
        ty = self.store.dtype.type
        b1, b2 = self.beta1, self.beta2
        for name in self.store.names(groups=groups, trainable_only=True):
            t = self.steps[self.store.owner(name)]
            bc1 = 1.0 - b1 ** t
            bc2 = 1.0 - b2 ** t
            # p -= lr*sqrt(bc2)/bc1 * m / (sqrt(v) + eps*sqrt(bc2)), algebraically
            # the standard m_hat / (sqrt(v_hat) + eps) update
            lr_eff = ty(lr * np.sqrt(bc2) / bc1)
            eps_eff = ty(self.eps * np.sqrt(bc2))
            p = self.store[name].reshape(-1)
            g_ = self.store.grad(name).reshape(-1)
            m = self.m[name].reshape(-1)
            v = self.v[name].reshape(-1)
            if _adam_kernel is not None:
                _adam_kernel(p, g_, m, v, ty(b1), ty(1.0 - b1), ty(b2), ty(1.0 - b2),
                             lr_eff, eps_eff)
                continue
            s = self._scratch[: p.size]
            np.multiply(m, ty(b1), out=m)
            np.multiply(g_, ty(1.0 - b1), out=s)
            np.add(m, s, out=m)
            np.multiply(v, ty(b2), out=v)
            np.multiply(g_, g_, out=s)
            np.multiply(s, ty(1.0 - b2), out=s)
            np.add(v, s, out=v)
            np.sqrt(v, out=s)
            np.add(s, eps_eff, out=s)
            np.divide(m, s, out=s)
            np.multiply(s, lr_eff, out=s)
            np.subtract(p, s, out=p)


# ---------------------------------------------------------------------------
# Hard example mining
# ---------------------------------------------------------------------------

def hem_select(per_sample_losses, fraction: float = 0.25) -> np.ndarray:
    """Indices of the ceil(fraction * n) largest losses; ties to lower index."""
    vals = np.asarray(per_sample_losses, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("hem_select needs a non-empty loss vector")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    count = int(np.ceil(fraction * vals.size))
    order = np.argsort(-vals, kind="stable")
    return np.sort(order[:count])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParameterStore, path) -> None:
    """Magic, a text manifest (name dtype shape) ending in a blank line, then
    raw little-endian float32 data in manifest order."""
    names = sorted(store.names())
    lines = [f"{n} float32 {','.join(map(str, store[n].shape))}" for n in names]
    payload = b"".join(
        np.ascontiguousarray(store[n], dtype="<f4").tobytes() for n in names
    )
    Path(path).write_bytes(
        CHECKPOINT_MAGIC + ("\n".join(lines) + "\n\n").encode() + payload
    )


def load_checkpoint(path, store: ParameterStore) -> None:
    """Load a checkpoint into a store built from a matching configuration."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    sep = raw.find(b"\n\n", len(CHECKPOINT_MAGIC))
    if sep < 0:
        raise CheckpointError(f"{path}: corrupt header (no manifest terminator)")
    manifest = raw[len(CHECKPOINT_MAGIC):sep].decode().splitlines()
    expected = set(store.names())
    seen = []
    for line in manifest:
        try:
            name, dtype, shape_s = line.rsplit(" ", 2)
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        except ValueError as exc:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}") from exc
        if dtype != "float32":
            raise CheckpointError(f"{path}: unsupported dtype {dtype!r}")
        if name not in expected:
            raise CheckpointError(f"{path}: parameter {name!r} not in this model")
        if shape != store[name].shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: file {shape}, model "
                f"{store[name].shape}"
            )
        seen.append((name, shape))
    missing = expected - {n for n, _ in seen}
    if missing:
        raise CheckpointError(f"{path}: missing parameters, e.g. {sorted(missing)[:4]}")
    pos = sep + 2
    for name, shape in seen:
        n_items = int(np.prod(shape)) if shape else 1
        block = raw[pos:pos + 4 * n_items]
        if len(block) != 4 * n_items:
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        store.set(name, np.frombuffer(block, dtype="<f4").reshape(shape))
        pos += 4 * n_items
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")


# ---------------------------------------------------------------------------
# The trainer
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_l_cls: float
    val_accuracy: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_accuracy: float
    iterations: int
    epoch_records: list[EpochRecord]
    checkpoint_path: str | None
    log_path: str | None


class Trainer:
    """Drives one training run of a built bundle over prepared splits."""

    def __init__(self, config: TrainConfig, bundle: ModelBundle,
                 train_ds: Dataset, val_ds: Dataset,
                 augment: AugmentConfig | None = None, run_dir=None):
        self.cfg = config
        self.bundle = bundle
        self.store = bundle.store
        if config.dataset_fraction != 1.0:
            train_ds = stratified_fraction(train_ds, config.dataset_fraction, config.seed)
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.augment = augment or AugmentConfig(target_size=bundle.image_size)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.adam = AdamState(self.store, config.beta1, config.beta2, config.adam_eps)
        self.eye = np.eye(bundle.class_count, dtype=self.store.dtype)
        mode = "ros" if config.mode == "+ros" else "plain"
        self.sampler = MinibatchSampler(train_ds.labels(), bundle.class_count,
                                        config.batch_size, mode)
        self.gen_groups = tuple(
            g for g in GEN_GROUPS
            if g != "R" or bundle.rnet is not None
        )
        self.iteration = 0
        self.epoch = 0
        self._hem_next_pool: list[int] = []

    # -- batch preparation ---------------------------------------------------

    def _train_batch(self, indices, position0):
        imgs = np.empty((len(indices), 1, self.bundle.image_size, self.bundle.image_size),
                        dtype=self.store.dtype)
        labels = np.empty(len(indices), dtype=np.int64)
        for j, idx in enumerate(indices):
            item = self.train_ds.items[idx]
            rng = streams.stream(self.cfg.seed, streams.AUGMENT, self.epoch, position0 + j)
            imgs[j, 0] = prepare_training_image(item.pixels, self.augment, rng)
            labels[j] = item.class_label
        return imgs, self.eye[labels], labels

    # -- the two alternating updates ------------------------------------------

    def discriminator_update(self, x, y_onehot, xhat=None):
        """One D-Net step on the combined original/reconstructed batch.

        No gradient reaches the frozen feature extractor or generator: when
        ``xhat`` is not supplied it is formed by plain (tape-free) forwards,
        and either way only the D groups are stepped. The training loop
        passes the reconstruction of its shared forward pass, which is
        bitwise the value this method would recompute.
        """
        cfg = self.cfg
        m = x.shape[0]
        if xhat is None:
            feats = self.bundle.fnet.forward(x, mode="train", update_stats=False)
            xhat = self.bundle.rnet.forward(feats, mode="train", update_stats=False)
        xcomb = np.concatenate([x, xhat])
        ycomb = np.concatenate([y_onehot, y_onehot])
        (patch, pcls), tape = self.bundle.dnet.forward(
            xcomb, mode="train", update_stats=True, want_tape=True)
        bce, g_real, g_fake = losses.discrimination_bce_and_grads(patch[:m], patch[m:])
        ce, g_cls = losses.adversarial_classification_loss_and_grad(pcls, ycomb)
        lam = cfg.weights.lam
        d_loss = lam * bce + (1.0 - lam) * ce
        self._abort_if_not_finite(D_loss=d_loss, disc_bce=bce, disc_cls=ce)
        g_patch = np.concatenate([g_real, g_fake]) * self.store.dtype.type(lam)
        self.store.zero_grads(DISC_GROUPS)
        self.bundle.dnet.backward(tape, [g_patch, (1.0 - lam) * g_cls])
        self.adam.step(DISC_GROUPS, cfg.learning_rate)
        return {"D_loss": d_loss, "disc_bce": bce, "disc_cls": ce}

    def generator_update(self, x, y_onehot, shared=None):
        """One combined-objective step on the feature extractor, classifier
        and (when present) generator, with the D-Net frozen.

        ``shared`` carries (features, feature tape, reconstruction, its tape)
        from the training loop's single canonical forward pass; without it
        the forwards are run here.
        """
        cfg = self.cfg
        w = cfg.weights
        m = x.shape[0]
        if shared is None:
            feats, tape_f = self.bundle.fnet.forward(
                x, mode="train", update_stats=True, want_tape=True)
            xhat = tape_r = None
        else:
            feats, tape_f, xhat, tape_r = shared
        probs, tape_c = self.bundle.classifier.forward(
            feats, mode="train", want_tape=True)
        if cfg.mode == "+focal":
            l_cls, g_probs = losses.focal_loss_and_grad(probs, y_onehot, cfg.focal)
        else:
            l_cls, g_probs = losses.cross_entropy_loss_and_grad(probs, y_onehot)
        l_rec = 0.0
        l_adv = 0.0
        use_rec = self.bundle.rnet is not None and w.lambda1 != 0.0
        use_adv = (self.bundle.rnet is not None and self.bundle.dnet is not None
                   and w.lambda2 != 0.0)
        if (use_rec or use_adv) and tape_r is None:
            xhat, tape_r = self.bundle.rnet.forward(
                feats, mode="train", update_stats=True, want_tape=True)
        if use_rec or use_adv:
            g_xhat = np.zeros_like(xhat)
            if use_rec:
                l_rec, g_rec = losses.reconstruction_loss_and_grad(
                    x, xhat, w.eps1, w.eps2)
                g_xhat += self.store.dtype.type(w.lambda1) * g_rec
            if use_adv:
                xcomb = np.concatenate([x, xhat])
                ycomb = np.concatenate([y_onehot, y_onehot])
                (patch, pcls), tape_d = self.bundle.dnet.forward(
                    xcomb, mode="train", update_stats=False, want_tape=True)
                disc_term, g_fake = losses.generator_disc_term_and_grad(patch[m:])
                cls_term, g_cls = losses.adversarial_classification_loss_and_grad(
                    pcls, ycomb)
                l_adv = losses.adversarial_loss(disc_term, cls_term, w.lam)
                g_patch = np.zeros_like(patch)
                g_patch[m:] = g_fake
                scale = self.store.dtype.type(w.lambda2)
                d_in = self.bundle.dnet.backward(
                    tape_d,
                    [g_patch * (scale * self.store.dtype.type(w.lam)),
                     g_cls * (scale * self.store.dtype.type(1.0 - w.lam))],
                    param_grads=False,
                )[0]
                g_xhat += d_in[m:]  # gradient through the real half stops at the data
        l_cmb = losses.combined_loss(l_cls, l_rec, l_adv, w.lambda1, w.lambda2)
        self._abort_if_not_finite(L_cls=l_cls, L_rec=l_rec, L_adv=l_adv, L_cmb=l_cmb)
        self.store.zero_grads(GEN_GROUPS)
        d_feats = self.bundle.classifier.backward(tape_c, g_probs)[0]
        if use_rec or use_adv:
            d_feats = d_feats + self.bundle.rnet.backward(tape_r, g_xhat)[0]
        self.bundle.fnet.backward(tape_f, d_feats)
        self.adam.step(self.gen_groups, cfg.learning_rate)
        return {"L_cls": l_cls, "L_rec": l_rec, "L_adv": l_adv, "L_cmb": l_cmb,
                "probs": probs}

    def _abort_if_not_finite(self, **components):
        if all(np.isfinite(v) for v in components.values()):
            return
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        raise NumericError(
            f"non-finite loss at epoch {self.epoch} iteration {self.iteration}: {detail}"
        )

    # -- evaluation -----------------------------------------------------------

    def predict_dataset(self, ds: Dataset) -> np.ndarray:
        return np.argmax(predict_probabilities(self.bundle, ds), axis=1)

    def validation_accuracy(self) -> float:
        preds = self.predict_dataset(self.val_ds)
        return float((preds == self.val_ds.labels()).mean())

    # -- main loop ------------------------------------------------------------

    def run(self, log_writer=None, iteration_hook=None) -> TrainResult:
        cfg = self.cfg
        best_acc = -1.0
        best_epoch = -1
        ckpt_path = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = self.run_dir / "best.ckpt"
        records = []
        for epoch in range(cfg.epochs):
            self.epoch = epoch
            extra_pool = tuple(self._hem_next_pool)
            self._hem_next_pool = []
            if self.sampler.mode == "ros":
                epoch_rng = streams.stream(cfg.seed, streams.SAMPLER, epoch)
            else:
                epoch_rng = streams.stream(cfg.seed, streams.SHUFFLE, epoch)
            position = 0
            cls_sum = 0.0
            n_batches = 0
            for indices in self.sampler.epoch_batches(epoch_rng, extra_pool):
                x, y1h, labels = self._train_batch(indices, position)
                position += len(indices)
                # one canonical forward per iteration; the D step consumes the
                # reconstruction values, the generator step the tapes
                feats, tape_f = self.bundle.fnet.forward(
                    x, mode="train", update_stats=True, want_tape=True)
                xhat = tape_r = None
                if self.bundle.rnet is not None:
                    xhat, tape_r = self.bundle.rnet.forward(
                        feats, mode="train", update_stats=True, want_tape=True)
                before = self._freeze_snapshot(GEN_GROUPS) if cfg.check_freeze else None
                d_stats = {"D_loss": 0.0}
                if self.bundle.dnet is not None:
                    d_stats = self.discriminator_update(x, y1h, xhat=xhat)
                    if cfg.check_freeze:
                        self._assert_frozen(GEN_GROUPS, before, "discriminator_update")
                before = self._freeze_snapshot(DISC_GROUPS) if cfg.check_freeze else None
                g_stats = self.generator_update(x, y1h,
                                                shared=(feats, tape_f, xhat, tape_r))
                if cfg.check_freeze and self.bundle.dnet is not None:
                    self._assert_frozen(DISC_GROUPS, before, "generator_update")
                if cfg.mode == "+hem":
                    per_sample = -np.log(
                        np.maximum((g_stats["probs"] * y1h).sum(axis=1), losses.LOG_CLAMP)
                    )
                    chosen = hem_select(per_sample, cfg.hem_fraction)
                    self._hem_next_pool.extend(int(indices[i]) for i in chosen)
                if log_writer is not None:
                    log_writer.writerow([
                        epoch, self.iteration,
                        repr(g_stats["L_cls"]), repr(g_stats["L_rec"]),
                        repr(g_stats["L_adv"]), repr(g_stats["L_cmb"]),
                        repr(d_stats["D_loss"]),
                    ])
                if iteration_hook is not None:
                    iteration_hook(self, g_stats, d_stats)
                cls_sum += g_stats["L_cls"]
                n_batches += 1
                self.iteration += 1
            acc = self.validation_accuracy()
            records.append(EpochRecord(epoch, cls_sum / max(n_batches, 1), acc))
            if acc > best_acc:  # strict improvement; ties keep the earlier epoch
                best_acc = acc
                best_epoch = epoch
                if ckpt_path is not None:
                    save_checkpoint(self.store, ckpt_path)
        return TrainResult(best_epoch, best_acc, self.iteration, records,
                           str(ckpt_path) if ckpt_path else None, None)

    # -- freeze checking (test mode) -------------------------------------------

    def _freeze_snapshot(self, groups):
        return self.store.group_bytes(groups)

    def _assert_frozen(self, groups, before, during):
        if self.store.group_bytes(groups) != before:
            raise AssertionError(
                f"freeze invariant violated: groups {groups} changed during {during}"
            )


def train(config: TrainConfig, bundle: ModelBundle, train_ds: Dataset,
          val_ds: Dataset, augment: AugmentConfig | None = None,
          run_dir=None, iteration_hook=None) -> TrainResult:
    """Initialize, run all epochs with per-iteration logging, track the best
    validation checkpoint. Returns the run summary."""
    init_parameters(bundle, config.seed)
    trainer = Trainer(config, bundle, train_ds, val_ds, augment, run_dir)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(run_dir) / "train_log.csv"
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
            result = trainer.run(log_writer=writer, iteration_hook=iteration_hook)
        result.log_path = str(log_path)
        summary = {
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "iterations": result.iterations,
            "mode": config.mode,
            "seed": config.seed,
        }
        with open(Path(run_dir) / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return result
    return trainer.run(iteration_hook=iteration_hook)


def predict_probabilities(bundle: ModelBundle, ds: Dataset) -> np.ndarray:
    """Evaluation-mode class probabilities for every item of a dataset."""
    m = bundle.image_size
    out = np.empty((len(ds), bundle.class_count), dtype=np.float64)
    for start in range(0, len(ds), EVAL_BATCH):
        chunk = ds.items[start:start + EVAL_BATCH]
        x = np.stack([prepare_eval_image(it.pixels, m) for it in chunk])[:, None]
        feats = bundle.fnet.forward(x.astype(bundle.store.dtype), mode="eval")
        out[start:start + len(chunk)] = bundle.classifier.forward(feats, mode="eval")
    return out


def evaluate_bundle(bundle: ModelBundle, ds: Dataset):
    """Confusion matrix, metrics report and (for binary tasks) the
    positive-class scores of a trained bundle on a dataset."""
    probs = predict_probabilities(bundle, ds)
    preds = np.argmax(probs, axis=1)
    labels = ds.labels()
    cm = confusion_matrix(preds, labels, bundle.class_count)
    auc = None
    scores = None
    if bundle.class_count == 2:
        from .evaluation import roc_auc
        scores = probs[:, 1]
        auc = roc_auc(scores, labels)
    report = classification_metrics(cm, auc=auc)
    return cm, report, (scores, labels) if scores is not None else None
