"""Pre-training and tomography fine-tuning loops with masking strategies.

Separate training uses one fixed masked-operator count m; Unified samples m
per batch from a predefined set. Strategy combos pair the two stages: S2S,
U2S (default), U2U. Shot noise is resampled from the stored true
probabilities each epoch with seeds derived from (master seed, epoch), so
runs are bit-reproducible in a single-threaded process.
"""

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import properties as qprops
from .dataset import Dataset
from .measurements import MeasurementSet
from .model import ILRModel
from .nnops import AdamState, adam_step, cosine_warmup_lr, grad_of, zero_grads
from .seeding import rng_for
from .states import vector_to_density

STRATEGIES = ("S2S", "U2S", "U2U")


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    stage: str  # "pretrain" or "qst"
    strategy: str  # "separate" or "unified"
    n_t: int
    epochs: int
    m: int = 0  # fixed masked-operator count (separate)
    mask_set: tuple = ()  # masked-operator counts (unified)
    batch_size: int = 256
    base_lr: float = 5e-3
    warmup_epochs: int = 4
    seed: int = 1
    target: str = "nu"  # qst target: "nu" or "mu"
    resample_noise: bool = True  # False: one fixed f per sample (ablation)

    def __post_init__(self):
        if self.stage not in ("pretrain", "qst"):
            raise TrainError(f"unknown stage {self.stage!r}")
        if self.strategy == "separate":
            if self.mask_set:
                raise TrainError("separate strategy takes a single m, not a mask set")
        elif self.strategy == "unified":
            if not self.mask_set:
                raise TrainError("unified strategy requires a nonempty mask set")
        else:
            raise TrainError(f"unknown strategy {self.strategy!r}")
        if self.target not in ("nu", "mu"):
            raise TrainError(f"target must be 'nu' or 'mu', got {self.target!r}")


def default_mask_set(ms: MeasurementSet) -> tuple:
    """Multiples of the group size from 0 up to ~45% of M."""
    limit = int(0.45 * ms.n_operators)
    return tuple(range(0, limit + 1, ms.group_size))


@dataclass
class Batch:
    f_groups: torch.Tensor  # (B, G, group_size)
    keep_idx: torch.Tensor  # (B, G) long
    mask_idx: torch.Tensor  # (B, n_masked) long
    rows: np.ndarray  # dataset row indices


def sample_batch_masks(
    n_samples: int, n_groups: int, n_masked: int, rng: np.random.Generator
):
    """Per-sample uniform masked groups; kept/masked indices sorted."""
    order = np.argsort(rng.random((n_samples, n_groups)), axis=1)
    mask_idx = np.sort(order[:, :n_masked], axis=1)
    keep_idx = np.sort(order[:, n_masked:], axis=1)
    return keep_idx, mask_idx


def resample_frequencies(
    p: np.ndarray, ms: MeasurementSet, n_t: int, rng: np.random.Generator
) -> np.ndarray:
    """Multinomial shot noise for every sample: (N, G, group_size)."""
    pg = p.reshape(p.shape[0], ms.n_groups, ms.group_size)
    pg = pg / pg.sum(axis=2, keepdims=True)
    return rng.multinomial(n_t, pg) / n_t


def _pick_m(plan: TrainPlan, rng: np.random.Generator) -> int:
    if plan.strategy == "separate":
        return plan.m
    return int(rng.choice(plan.mask_set))


def _make_batch(
    f_all: np.ndarray, rows: np.ndarray, ms: MeasurementSet, m: int,
    rng: np.random.Generator, dtype,
) -> Batch:
    n_masked, rem = divmod(m, ms.group_size)
    if rem:
        raise TrainError(f"mask count {m} is not a multiple of group size {ms.group_size}")
    keep, mask = sample_batch_masks(rows.size, ms.n_groups, n_masked, rng)
    f_groups = f_all[rows[:, None], keep]
    return Batch(
        f_groups=torch.tensor(f_groups, dtype=dtype),
        keep_idx=torch.tensor(keep, dtype=torch.long),
        mask_idx=torch.tensor(mask, dtype=torch.long),
        rows=rows,
    )


def _targets(ds: Dataset, plan: TrainPlan) -> np.ndarray:
    if plan.stage == "pretrain":
        return ds.p
    return ds.nu if plan.target == "nu" else ds.mu


def train(
    model: ILRModel,
    ds: Dataset,
    ms: MeasurementSet,
    plan: TrainPlan,
    freeze_encoder: bool = True,
    log=None,
):
    """Run one training stage; returns per-epoch mean loss history.

    pretrain: updates encoder + frequency decoder.
    qst: updates the state decoder for plan.target; the encoder is frozen
    (bitwise) unless freeze_encoder=False (no-pretraining ablation).
    """
    dtype = next(model.parameters()).dtype
    if plan.stage == "pretrain":
        params = model.encoder_parameters() + model.freq_decoder_parameters()
        frozen = []
    else:
        params = model.state_decoder_parameters(plan.target)
        frozen = model.encoder_parameters() + model.freq_decoder_parameters()
        if not freeze_encoder:
            params = model.encoder_parameters() + params
            frozen = model.freq_decoder_parameters()
    for p in frozen:
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)

    targets_np = _targets(ds, plan)
    n = ds.n_samples
    steps_per_epoch = max(1, n // plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch
    warmup_steps = plan.warmup_epochs * steps_per_epoch
    state = AdamState()
    history = []
    global_step = 0
    fixed_f = None
    for epoch in range(plan.epochs):
        if plan.resample_noise or fixed_f is None:
            freq_rng = rng_for(plan.seed, "freq", 0 if not plan.resample_noise else epoch)
            fixed_f = resample_frequencies(ds.p, ms, plan.n_t, freq_rng)
        f_all = fixed_f
        perm = rng_for(plan.seed, "shuffle", epoch).permutation(n)
        mask_rng = rng_for(plan.seed, "mask", epoch)
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            rows = perm[step * plan.batch_size : (step + 1) * plan.batch_size]
            m = _pick_m(plan, mask_rng)
            batch = _make_batch(f_all, rows, ms, m, mask_rng, dtype)
            target = torch.tensor(targets_np[batch.rows], dtype=dtype)
            out = model(
                batch.f_groups,
                batch.keep_idx,
                batch.mask_idx,
                target="p" if plan.stage == "pretrain" else plan.target,
            )
            loss = torch.mean((out - target) ** 2)
            if not torch.isfinite(loss):
                raise TrainError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss.item()}"
                )
            zero_grads(params)
            loss.backward()
            global_step += 1
            lr = cosine_warmup_lr(global_step, total_steps, warmup_steps, plan.base_lr)
            adam_step(params, [grad_of(p) for p in params], state, lr)
            epoch_loss += loss.item()
        history.append(epoch_loss / steps_per_epoch)
        if log is not None:
            log(epoch, history[-1])
    return history


def pretrain(model: ILRModel, ds: Dataset, ms: MeasurementSet, plan: TrainPlan, log=None):
    if plan.stage != "pretrain":
        raise TrainError("plan.stage must be 'pretrain'")
    return train(model, ds, ms, plan, log=log)


def finetune_qst(
    model: ILRModel, ds: Dataset, ms: MeasurementSet, plan: TrainPlan,
    freeze_encoder: bool = True, log=None,
):
    if plan.stage != "qst":
        raise TrainError("plan.stage must be 'qst'")
    return train(model, ds, ms, plan, freeze_encoder=freeze_encoder, log=log)


def parameter_digest(params) -> str:
    """SHA-256 over raw parameter bytes; used to assert bitwise freezing."""
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.detach().to(torch.float32).contiguous().numpy().tobytes())
    return digest.hexdigest()


# -- evaluation -------------------------------------------------------------


def _test_batches(
    ds: Dataset, ms: MeasurementSet, n_t: int, m: int, seed: int, dtype,
    batch_size: int = 512,
):
    f_all = resample_frequencies(ds.p, ms, n_t, rng_for(seed, "eval-freq"))
    mask_rng = rng_for(seed, "eval-mask")
    n_masked = m // ms.group_size
    keep, mask = sample_batch_masks(ds.n_samples, ms.n_groups, n_masked, mask_rng)
    for start in range(0, ds.n_samples, batch_size):
        rows = np.arange(start, min(start + batch_size, ds.n_samples))
        yield Batch(
            f_groups=torch.tensor(f_all[rows[:, None], keep[rows]], dtype=dtype),
            keep_idx=torch.tensor(keep[rows], dtype=torch.long),
            mask_idx=torch.tensor(mask[rows], dtype=torch.long),
            rows=rows,
        ), f_all[rows]


def predict(
    model: ILRModel, ds: Dataset, ms: MeasurementSet, n_t: int, m: int,
    seed: int = 1, target: str = "nu",
):
    """Model outputs over a test set under fixed (n_t, m) conditions.

    Returns (outputs, f) where f holds the sampled frequencies used.
    """
    dtype = next(model.parameters()).dtype
    outs, fs = [], []
    with torch.no_grad():
        for batch, f_rows in _test_batches(ds, ms, n_t, m, seed, dtype):
            outs.append(
                model(batch.f_groups, batch.keep_idx, batch.mask_idx, target=target)
                .double()
                .numpy()
            )
            fs.append(f_rows.reshape(f_rows.shape[0], ms.n_operators))
    return np.concatenate(outs), np.concatenate(fs)


def reconstruction_metrics(true_nu: np.ndarray, pred_nu: np.ndarray) -> dict:
    """Fidelity statistics between true and predicted Cholesky vectors."""
    fids = []
    for nu_t, nu_p in zip(true_nu, pred_nu):
        rho = vector_to_density(nu_t)
        rho_hat = vector_to_density(nu_p)
        fids.append(qprops.fidelity(rho, rho_hat))
    fids = np.array(fids)
    infids = np.maximum(1e-16, 1 - fids)
    return {
        "mean_fidelity": float(fids.mean()),
        "min_fidelity": float(fids.min()),
        "max_fidelity": float(fids.max()),
        "var_fidelity": float(fids.var()),
        "mean_infidelity": float(infids.mean()),
        "stderr_infidelity": float(infids.std(ddof=1) / np.sqrt(infids.size)),
        "mean_log_infidelity": float(np.log10(infids).mean()),
    }


def property_metrics(true_mu: np.ndarray, pred_mu: np.ndarray, names) -> dict:
    out = {}
    for j, name in enumerate(names):
        out[f"mse_{name}"] = qprops.mse(true_mu[:, j], pred_mu[:, j])
    return out


def evaluate_model(
    model: ILRModel, ds: Dataset, ms: MeasurementSet, n_t: int, m: int,
    seed: int = 1, target: str = "nu", property_names=None,
) -> dict:
    """Aggregate metrics for the ILR path (nu head or mu head)."""
    preds, f = predict(model, ds, ms, n_t, m, seed=seed, target=target)
    if target == "nu":
        metrics = reconstruction_metrics(ds.nu, preds)
    else:
        names = property_names or [f"prop{j}" for j in range(ds.k_properties)]
        metrics = property_metrics(ds.mu, preds, names)
    metrics.update({"n_t": n_t, "m": m, "n_samples": ds.n_samples})
    return metrics


def evaluate_baseline(
    method: str, ds: Dataset, ms: MeasurementSet, n_t: int, m: int,
    seed: int = 1, property_names=None, max_iters: int = 5000,
) -> dict:
    """LRE/MLE metrics through the same masking/noise path as the model."""
    from .baselines import lre_reconstruct, mle_reconstruct

    f_all = resample_frequencies(ds.p, ms, n_t, rng_for(seed, "eval-freq"))
    mask_rng = rng_for(seed, "eval-mask")
    n_masked = m // ms.group_size
    _, mask = sample_batch_masks(ds.n_samples, ms.n_groups, n_masked, mask_rng)
    fids, mus = [], []
    names = property_names or []
    for i in range(ds.n_samples):
        f = f_all[i].reshape(ms.n_operators)
        groups = tuple(mask[i])
        if method == "lre":
            rho_hat = lre_reconstruct(f, ms, groups)
        elif method == "mle":
            rho_hat = mle_reconstruct(f, ms, groups, max_iters=max_iters)
        else:
            raise TrainError(f"unknown baseline {method!r}")
        rho = vector_to_density(ds.nu[i])
        fids.append(qprops.fidelity(rho, rho_hat))
        if names:
            mus.append(qprops.property_vector(rho_hat, names))
    fids = np.array(fids)
    infids = np.maximum(1e-16, 1 - fids)
    metrics = {
        "mean_fidelity": float(fids.mean()),
        "min_fidelity": float(fids.min()),
        "max_fidelity": float(fids.max()),
        "var_fidelity": float(fids.var()),
        "mean_infidelity": float(infids.mean()),
        "stderr_infidelity": float(infids.std(ddof=1) / np.sqrt(infids.size)),
        "mean_log_infidelity": float(np.log10(infids).mean()),
        "n_t": n_t,
        "m": m,
        "n_samples": ds.n_samples,
    }
    if names:
        metrics.update(property_metrics(ds.mu, np.array(mus), names))
    return metrics


# -- strategy grids ---------------------------------------------------------


def strategy_plans(
    combo: str, ms: MeasurementSet, n_t: int, m_grid, epochs: int, seed: int = 1,
    **overrides,
):
    """(pretrain plan, per-m QST plans) for a strategy combination.

    Unified stages share one model across the mask grid; Separate stages
    need one run per m. S2U is excluded (impractical per the source method).
    """
    if combo not in STRATEGIES:
        raise TrainError(f"strategy must be one of {STRATEGIES}, got {combo!r}")
    mask_set = default_mask_set(ms)
    pre_strategy = "separate" if combo[0] == "S" else "unified"
    qst_strategy = "separate" if combo[2] == "S" else "unified"
    common = dict(n_t=n_t, epochs=epochs, seed=seed, **overrides)
    if pre_strategy == "separate":
        pre_plans = {
            m: TrainPlan(stage="pretrain", strategy="separate", m=m, **common)
            for m in m_grid
        }
    else:
        plan = TrainPlan(stage="pretrain", strategy="unified", mask_set=mask_set, **common)
        pre_plans = {m: plan for m in m_grid}
    if qst_strategy == "separate":
        qst_plans = {
            m: TrainPlan(stage="qst", strategy="separate", m=m, **common)
            for m in m_grid
        }
    else:
        plan = TrainPlan(stage="qst", strategy="unified", mask_set=mask_set, **common)
        qst_plans = {m: plan for m in m_grid}
    return pre_plans, qst_plans


# -- run directory bookkeeping ---------------------------------------------


def write_kv(path, mapping: dict):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    lines = [f"{key}={mapping[key]}" for key in sorted(mapping)]
    tmp.write_text("\n".join(lines) + "\n")
    tmp.rename(path)


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key] = value
    return out


def write_loss_history(path, histories: dict):
    """histories: {split_name: [loss per epoch]}."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss"])
        for split in sorted(histories):
            for epoch, loss in enumerate(histories[split]):
                writer.writerow([epoch, split, f"{loss:.10e}"])
    tmp.rename(path)


def write_metrics_csv(path, rows: list):
    """rows: list of dicts with at least method/n_t/m keys; stable-sorted."""
    path = Path(path)
    rows = sorted(rows, key=lambda r: (str(r.get("method")), r.get("n_t", 0), r.get("m", 0)))
    keys = ["method", "n_t", "m"]
    extra = sorted({k for row in rows for k in row} - set(keys))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys + extra)
        writer.writeheader()
        writer.writerows(rows)
    tmp.rename(path)
