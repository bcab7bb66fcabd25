"""Experiment driver: data fixtures, end-to-end seeded runs, and metric
emission as delimited text plus JSON summaries."""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import analysis
from .core import (
    DeviceConfig,
    Hyperparams,
    InvalidValue,
    RoundTrace,
    derive_stream,
    validate_config,
)
from .learner import (
    Dataset,
    MlpSoftmax,
    QuadraticModel,
    local_gradient,
    partition_dataset,
)
from .scheduler import (
    POLICIES,
    EnergyLedger,
    PenaltyCoeffs,
    SimState,
    run_round,
)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

HARNESS_KEYS = frozenset(
    {
        "dataset",
        "partition",
        "non_iid_m",
        "policy",
        "obs_error",
        "seeds",
        "estimator",
        "sigma_mode",
        "sigma_fixed",
        "channel_scale",
        "mnist_dir",
        "train_count",
        "test_count",
        "samples_per_device",
        "center_spread",
        "noise_spread",
        "curvature_low",
        "curvature_high",
        "hidden_units",
        "init_scale",
    }
)


class BadMagic(ValueError):
    """IDX file starts with the wrong magic number."""


class TruncatedFile(ValueError):
    """IDX payload is shorter than its header promises."""


class CountMismatch(ValueError):
    """Image and label files disagree on the number of items."""


@dataclass(frozen=True)
class QuadraticFixture:
    """Synthetic strongly convex task with every constant known exactly."""

    shards: tuple[Dataset, ...]
    model: QuadraticModel
    l_smooth: float
    mu: float
    G_sq: float
    G_sq_local: tuple[float, ...]
    w_star: np.ndarray
    F_star: float


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved experiment: hyperparameters, devices, data recipe,
    policy, and environment knobs."""

    hp: Hyperparams
    devices: tuple[DeviceConfig, ...]
    dataset: str
    partition: str = "iid"
    non_iid_m: int = 1
    policy: str = "dynamic"
    obs_error: float = 0.0
    estimator: str = "est_p"
    sigma_mode: str = "paper"
    sigma_fixed: float | None = None
    channel_scale: float = 1.0
    mnist_dir: str | None = None
    train_count: int = 6000
    test_count: int = 1000
    samples_per_device: int = 256
    center_spread: float = 1.0
    noise_spread: float = 0.5
    curvature_low: float = 0.5
    curvature_high: float = 2.0
    hidden_units: int = 64
    init_scale: float = 1.0


def spec_from_config(raw: Mapping, **overrides) -> ExperimentSpec:
    """Split a flat config document into harness fields and the validated
    core hyperparameters. CLI overrides land before validation."""
    doc = dict(raw)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    harness_kwargs = {}
    for key in list(doc):
        if key in HARNESS_KEYS:
            harness_kwargs[key] = doc.pop(key)
    hp, devices = validate_config(doc)
    dataset = harness_kwargs.pop("dataset", "quadratic")
    if dataset not in ("quadratic", "mnist", "digits784"):
        raise InvalidValue("dataset", f"unknown dataset {dataset!r}")
    policy = harness_kwargs.pop("policy", "dynamic")
    if policy not in POLICIES:
        raise InvalidValue("policy", f"unknown policy {policy!r}")
    partition = harness_kwargs.pop("partition", "iid")
    if partition not in ("iid", "non_iid"):
        raise InvalidValue("partition", f"unknown partition {partition!r}")
    harness_kwargs.pop("seeds", None)
    return ExperimentSpec(
        hp=hp,
        devices=tuple(devices),
        dataset=dataset,
        partition=partition,
        policy=policy,
        **harness_kwargs,
    )


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair into features scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise TruncatedFile(f"{images_path}: header truncated")
        magic, count, rows, cols = struct.unpack(">llll", header)
        if magic != 0x803:
            raise BadMagic(f"{images_path}: magic {magic:#x}, expected 0x803")
        payload = fh.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise TruncatedFile(f"{images_path}: payload shorter than header claims")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise TruncatedFile(f"{labels_path}: header truncated")
        magic, label_count = struct.unpack(">ll", header)
        if magic != 0x801:
            raise BadMagic(f"{labels_path}: magic {magic:#x}, expected 0x801")
        payload = fh.read(label_count)
        if len(payload) < label_count:
            raise TruncatedFile(f"{labels_path}: payload shorter than header claims")
        labels = np.frombuffer(payload, dtype=np.uint8)
    if count != label_count:
        raise CountMismatch(f"{count} images vs {label_count} labels")
    return Dataset(
        features=images.astype(float) / 255.0,
        labels=labels.astype(np.int64),
        class_count=10,
    )


def find_mnist_dir(configured: str | None = None) -> Path | None:
    """Directory holding the four IDX files, if one is available."""
    candidates = []
    if configured:
        candidates.append(Path(configured))
    env = os.environ.get("OAFEL_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    for cand in candidates:
        if all((cand / name).exists() for name in MNIST_FILES.values()):
            return cand
    return None


def synth_digits784(
    train_count: int, test_count: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Deterministic offline 28x28 digit corpus built from the bundled
    8x8 handwritten-digits scans: bilinear upsampling to 784 features plus
    seeded sub-pixel shifts and noise, balanced across the 10 classes."""
    from scipy.ndimage import shift as nd_shift
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    if train_count % 10 or test_count % 10:
        raise ValueError("train_count and test_count must be multiples of 10")
    raw = load_digits()
    base = raw.images / 16.0
    labels = raw.target
    rng = derive_stream(seed, "digits784")
    per_class_train = train_count // 10
    per_class_test = test_count // 10
    feats, labs = [], []
    for cls in range(10):
        pool = base[labels == cls]
        big = np.stack([zoom(img, 3.5, order=1) for img in pool])
        need = per_class_train + per_class_test
        picks = rng.integers(0, big.shape[0], size=need)
        shifts = rng.uniform(-1.5, 1.5, size=(need, 2))
        noise = rng.normal(0.0, 0.05, size=(need, 28, 28))
        for i in range(need):
            img = nd_shift(big[picks[i]], shifts[i], order=1, mode="constant")
            feats.append(np.clip(img + noise[i], 0.0, 1.0).ravel())
            labs.append(cls)
    feats = np.asarray(feats)
    labs = np.asarray(labs, dtype=np.int64)
    train_idx, test_idx = [], []
    for cls in range(10):
        block = np.flatnonzero(labs == cls)
        train_idx.append(block[:per_class_train])
        test_idx.append(block[per_class_train:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    order = rng.permutation(train_idx.size)
    train = Dataset(feats[train_idx][order], labs[train_idx][order], 10)
    test = Dataset(feats[test_idx], labs[test_idx], 10)
    return train, test


def balanced_subset(data: Dataset, count: int, rng: np.random.Generator) -> Dataset:
    """Class-balanced random subset of ``count`` samples."""
    if count % data.class_count:
        raise ValueError("count must be a multiple of class_count")
    per = count // data.class_count
    picks = []
    for cls in range(data.class_count):
        pool = np.flatnonzero(data.labels == cls)
        if pool.size < per:
            raise ValueError(f"class {cls} has only {pool.size} samples, need {per}")
        picks.append(rng.choice(pool, size=per, replace=False))
    idx = np.concatenate(picks)
    return data.subset(idx[rng.permutation(idx.size)])


def synth_quadratic(
    N: int,
    s: int,
    samples_per_device: int,
    center_spread: float,
    noise_spread: float,
    curvature_low: float,
    curvature_high: float,
    rng: np.random.Generator,
) -> QuadraticFixture:
    """Per-sample loss 0.5 (w - x)^T A (w - x) over device clouds centered at
    seeded points. Every analysis constant is computed exactly from the data.
    w* is the global sample mean and F* the loss there. Single-sample
    gradients are A(w - x), so their deviations are w-independent: G_sq is
    the worst per-device mean squared deviation around the *global* gradient
    (the bound the descent analysis assumes), while G_sq_local[n] centers on
    device n's own gradient (the constant the probe estimator's bias obeys).
    """
    if N < 1 or s < 1 or samples_per_device < 2:
        raise ValueError("need N >= 1, s >= 1, samples_per_device >= 2")
    if not 0 < curvature_low <= curvature_high:
        raise ValueError("need 0 < curvature_low <= curvature_high")
    diag = rng.uniform(curvature_low, curvature_high, size=s)
    diag[0] = curvature_high
    diag[-1] = curvature_low
    model = QuadraticModel(diag)
    centers = rng.normal(0.0, center_spread, size=(N, s))
    shards = []
    for n in range(N):
        X = centers[n] + rng.normal(0.0, noise_spread, size=(samples_per_device, s))
        shards.append(Dataset(X, np.zeros(X.shape[0], dtype=np.int64), 1))
    all_X = np.concatenate([sh.features for sh in shards])
    w_star = all_X.mean(axis=0)
    F_star = model.loss(w_star, all_X)
    G_sq_local = []
    G_sq_global = []
    global_grad = model.gradient(w_star, all_X)
    for sh in shards:
        per = model.gradient_per_sample(w_star, sh.features)
        local_centered = per - per.mean(axis=0)
        G_sq_local.append(
            float(np.mean(np.sum(local_centered * local_centered, axis=1)))
        )
        global_centered = per - global_grad
        G_sq_global.append(
            float(np.mean(np.sum(global_centered * global_centered, axis=1)))
        )
    return QuadraticFixture(
        shards=tuple(shards),
        model=model,
        l_smooth=model.l_smooth,
        mu=model.mu,
        G_sq=float(max(G_sq_global)),
        G_sq_local=tuple(G_sq_local),
        w_star=w_star,
        F_star=F_star,
    )


def _build_state(spec: ExperimentSpec, seed: int) -> tuple[SimState, dict]:
    hp = spec.hp
    meta: dict = {"seed": seed, "dataset": spec.dataset, "policy": spec.policy}
    data_rng = derive_stream(seed, "data")
    if spec.dataset == "quadratic":
        fixture = synth_quadratic(
            hp.N,
            hp.s,
            spec.samples_per_device,
            spec.center_spread,
            spec.noise_spread,
            spec.curvature_low,
            spec.curvature_high,
            data_rng,
        )
        shards = list(fixture.shards)
        model = fixture.model
        # analysis constants are exact for this family; fill unset ones
        hp = replace(
            hp,
            l_smooth=hp.l_smooth if hp.l_smooth is not None else fixture.l_smooth,
            mu=hp.mu if hp.mu is not None else fixture.mu,
            G_sq=hp.G_sq if hp.G_sq is not None else fixture.G_sq,
        )
        train_X = np.concatenate([sh.features for sh in shards])
        train_y = np.concatenate([sh.labels for sh in shards])
        test_X = test_y = None
        meta["F_star"] = fixture.F_star
        meta["fixture"] = fixture
        w0 = fixture.w_star + spec.init_scale * derive_stream(seed, "model_init").normal(
            0.0, 1.0, size=hp.s
        )
    else:
        mnist_dir = find_mnist_dir(spec.mnist_dir)
        if spec.dataset == "mnist" and mnist_dir is None:
            meta["dataset_substituted"] = True
        if mnist_dir is not None and spec.dataset == "mnist":
            train_full = load_mnist_idx(
                mnist_dir / MNIST_FILES["train_images"],
                mnist_dir / MNIST_FILES["train_labels"],
            )
            test_full = load_mnist_idx(
                mnist_dir / MNIST_FILES["test_images"],
                mnist_dir / MNIST_FILES["test_labels"],
            )
            train = balanced_subset(train_full, spec.train_count, data_rng)
            test = balanced_subset(test_full, spec.test_count, data_rng)
            meta["corpus"] = "mnist"
        else:
            train, test = synth_digits784(spec.train_count, spec.test_count, seed)
            meta["corpus"] = "digits784"
        model = MlpSoftmax((train.features.shape[1], spec.hidden_units, 10))
        if hp.s != model.dim:
            raise InvalidValue(
                "s", f"model has {model.dim} parameters but config says {hp.s}"
            )
        part = partition_dataset(
            train,
            hp.N,
            spec.partition,
            derive_stream(seed, "partition"),
            m=spec.non_iid_m if spec.partition == "non_iid" else None,
        )
        shards = part.shards(train)
        train_X, train_y = train.features, train.labels
        test_X, test_y = test.features, test.labels
        w0 = model.init_params(derive_stream(seed, "model_init"))

    if spec.policy == "dynamic" and (hp.l_smooth is None or hp.G_sq is None):
        raise InvalidValue("l_smooth", "dynamic policy needs l_smooth and G_sq")

    ledger = EnergyLedger(budget=np.array([d.E_bar_n for d in spec.devices]))
    last_norm_sq = np.empty(hp.N)
    for n in range(hp.N):
        boot = local_gradient(
            model, w0, shards[n], hp.L_b, derive_stream(seed, "batch", n, 0)
        )
        # the bootstrap handshake report is not charged to any budget
        last_norm_sq[n] = boot.norm_sq
    state = SimState(
        hp=hp,
        devices=list(spec.devices),
        model=model,
        shards=shards,
        w=w0,
        q=np.full(hp.N, hp.q_min),
        ledger=ledger,
        last_norm_sq=last_norm_sq,
        master_seed=seed,
        obs_error=spec.obs_error,
        channel_scale=spec.channel_scale,
        sigma_mode=spec.sigma_mode,
        sigma_fixed=spec.sigma_fixed,
        estimator=spec.estimator,
        train_X=train_X,
        train_y=train_y,
        test_X=test_X,
        test_y=test_y,
    )
    return state, meta


def run_single_seed(spec: ExperimentSpec, seed: int) -> tuple[list[RoundTrace], dict]:
    """One full T-round run. Returns the trace and a summary dictionary."""
    state, meta = _build_state(spec, seed)
    hp = state.hp
    traces = [run_round(state, spec.policy) for _ in range(hp.T)]
    E_bar = state.E_bar
    constants = analysis.theorem2_constants(traces, E_bar, hp.T)

    def coeffs_for(tr: RoundTrace) -> PenaltyCoeffs:
        return PenaltyCoeffs(
            V=hp.V,
            l_smooth=hp.l_smooth if hp.l_smooth is not None else 1.0,
            eta_t=hp.eta_at(tr.t),
            G_sq=hp.G_sq if hp.G_sq is not None else 0.0,
            L_b=hp.L_b,
            sigma0_sq=hp.sigma0_sq,
            s=hp.s,
            sigma_t=tr.sigma_t,
        )

    U_sum = analysis.cumulative_penalty(traces, coeffs_for)
    caps = analysis.theorem2_energy_bound(constants, hp.V, U_sum, hp.T, E_bar)
    queue_report = analysis.queue_identity_report(
        traces, np.full(hp.N, hp.q_min), E_bar, hp.T, hp.q_min
    )
    # the drift inequalities are exact only with the floor at zero; above it
    # only the recursion replay is a correctness check
    queues_ok = (
        queue_report["ok"]
        if hp.q_min == 0.0
        else queue_report["max_recursion_mismatch"] <= 1e-12
    )
    summary = {
        "seed": seed,
        "policy": spec.policy,
        "dataset": spec.dataset,
        "corpus": meta.get("corpus", spec.dataset),
        "rounds": hp.T,
        "final_loss": traces[-1].loss,
        "final_accuracy": traces[-1].accuracy,
        "unified_energy_final": traces[-1].unified_energy,
        "total_energy": [float(x) for x in state.ledger.spent],
        "budget": [float(x) for x in E_bar],
        "theorem2": {
            "delta_0": constants.delta_0,
            "theta_n": [float(x) for x in constants.theta_n],
            "theta_0": constants.theta_0,
            "U_sum_policy": U_sum,
            "energy_cap": [float(x) for x in caps],
            "cap_violated": [
                bool(spent > cap) for spent, cap in zip(state.ledger.spent, caps)
            ],
            "min_cap_slack": float(np.min(caps - state.ledger.spent)),
        },
        "violations": {
            "budget_exceeded": [
                bool(spent > bar) for spent, bar in zip(state.ledger.spent, E_bar)
            ],
            "queue_identities_ok": bool(queues_ok),
            "ledger_mismatch": analysis.ledger_reconciliation(
                traces, state.ledger.spent
            ),
        },
    }
    if "F_star" in meta:
        summary["final_gap"] = traces[-1].loss - meta["F_star"]
    if meta.get("dataset_substituted"):
        summary["dataset_substituted"] = True
    return traces, summary


def _worker(args) -> tuple[int, list[RoundTrace], dict]:
    spec, seed = args
    traces, summary = run_single_seed(spec, seed)
    return seed, traces, summary


def run_experiment(
    spec: ExperimentSpec, seeds: Sequence[int]
) -> dict[int, tuple[list[RoundTrace], dict]]:
    """Run every seed, in parallel when OAFEL_THREADS requests it (0 = one
    worker per available CPU)."""
    threads = int(os.environ.get("OAFEL_THREADS", "1") or "1")
    if threads == 0:
        threads = os.cpu_count() or 1
    seeds = list(seeds)
    out: dict[int, tuple[list[RoundTrace], dict]] = {}
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for seed, traces, summary in pool.map(
                _worker, [(spec, s) for s in seeds]
            ):
                out[seed] = (traces, summary)
    else:
        for seed in seeds:
            out[seed] = run_single_seed(spec, seed)
    return out


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def trace_csv_lines(traces: Sequence[RoundTrace], N: int) -> list[str]:
    header = ["t", "loss", "accuracy", "sigma_t", "k_star", "snr", "unified_energy"]
    for stem in ("q", "E_est", "E_cp", "E_tr", "sched"):
        header.extend(f"{stem}_{n}" for n in range(N))
    lines = [",".join(header)]
    for tr in traces:
        sched = [1 if n in tr.scheduled else 0 for n in range(N)]
        row = [
            str(tr.t),
            _fmt(tr.loss),
            _fmt(tr.accuracy),
            _fmt(tr.sigma_t),
            str(tr.k_star),
            _fmt(tr.snr),
            _fmt(tr.unified_energy),
        ]
        row.extend(_fmt(x) for x in tr.q)
        row.extend(_fmt(x) for x in tr.E_est)
        row.extend(_fmt(x) for x in tr.E_cp)
        row.extend(_fmt(x) for x in tr.E_tr)
        row.extend(str(x) for x in sched)
        lines.append(",".join(row))
    return lines


def emit_metrics(
    traces: Sequence[RoundTrace],
    summary: Mapping,
    out_dir,
    stem: str,
) -> tuple[Path, Path]:
    """Write <stem>.csv (per-round trace, 17 significant digits) and
    <stem>.json (run summary). Output bytes are a pure function of inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    N = len(summary["budget"])
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_bytes(
        ("\n".join(trace_csv_lines(traces, N)) + "\n").encode("ascii")
    )
    json_path = out_dir / f"{stem}.json"
    json_path.write_bytes(
        (json.dumps(summary, sort_keys=True, indent=2) + "\n").encode("ascii")
    )
    return csv_path, json_path
