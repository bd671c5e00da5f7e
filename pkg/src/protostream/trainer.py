"""Per-task training loop, optimizer, checkpointing and gradient checking.

Each task runs the same per-batch recipe: prototype posterior, balanced
transport targets, prototype cross-entropy, granularity alignment on the
class head, replay and separation terms against old centers, one Adam step,
then re-projection of means and centers onto the unit sphere. At the end of
a task the prototypes are consolidated into memory and the session is
evaluated on every test split seen so far.

Runs are deterministic: every random stream is derived from (seed, task,
purpose), so resuming from a task-boundary checkpoint reproduces an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .classifier import (
    ClassCenters,
    Projector,
    append_centers,
    center_logits,
    head_grads,
    identity_projector,
    init_projector,
    joint_table,
    align_loss,
    projector_forward,
    softmax_rows,
)
from .data import StreamManifest, batch_iter, read_features_unlabeled
from .errors import NumericalError, ValidationError
from .evaluation import SessionReport, evaluate_session, forgetting_score
from .memory import (
    ExemplarMemory,
    PrototypeMemory,
    ProtoStat,
    consolidate_task,
    reduct_loss,
    sample_old,
)
from .prototypes import PrototypeSet, init_prototypes, log_posterior, proto_grads, proto_loss
from .sinkhorn import sinkhorn_balanced, to_per_sample_targets

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# purpose tags for deriving independent random streams from (seed, task)
_TAG_PROTO, _TAG_CENTERS, _TAG_REPLAY, _TAG_BATCH, _TAG_EXEMPLAR = 0, 1, 2, 3, 4
_TAG_PROJECTOR = 100


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the full-scale profile."""

    pnum: int = 1000
    epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-3
    lambda_old: float = 10.0
    lambda_ga: float = 4.0
    tau: float = 0.1
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    proj_hidden: int = 768
    proj_out: int = 128
    seed: int = 0
    sigma_trainable: bool = True
    var_mode: str = "diagonal"  # diagonal | scalar
    memory_mode: str = "proto"  # proto | exemplar:<K>
    replay_per_class: int = 0  # 0 = max(1, ceil(batch_size / classes seen))
    projector_enabled: bool = True
    align_enabled: bool = True
    sep_enabled: bool = True
    replay_enabled: bool = True
    freeze_old_centers: bool = False
    lr_cosine_decay: bool = False
    eval_every: int = 0  # epochs between mid-task evaluations; 0 = session end only

    def validate(self) -> None:
        positive = ["pnum", "epochs", "batch_size", "lr", "tau", "epsilon", "sinkhorn_iters",
                    "proj_hidden", "proj_out"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        for name in ["lambda_old", "lambda_ga", "replay_per_class", "eval_every"]:
            if getattr(self, name) < 0:
                raise ValidationError(f"config field {name} must be non-negative")
        if self.var_mode not in ("diagonal", "scalar"):
            raise ValidationError(f"unknown var_mode {self.var_mode!r}")
        if self.memory_mode != "proto":
            kind, _, arg = self.memory_mode.partition(":")
            if kind != "exemplar" or not arg.isdigit() or int(arg) < 1:
                raise ValidationError(f"unknown memory_mode {self.memory_mode!r}")

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Small profile sized so full streams train in seconds, not hours."""
        base = dict(pnum=50, epochs=50, batch_size=128)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


@dataclass
class AdamState:
    """Per-parameter first/second moments and step counts."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def drop(self, *keys: str) -> None:
        for key in keys:
            self.m.pop(key, None)
            self.v.pop(key, None)
            self.t.pop(key, None)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive-moment update, in place on the params."""
    for key, grad in grads.items():
        param = params[key]
        if param.shape != grad.shape:
            raise ValidationError(f"gradient shape {grad.shape} != param shape {param.shape} for {key}")
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
            state.t[key] = 0
        state.t[key] += 1
        t = state.t[key]
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainerState:
    """Everything that survives across tasks."""

    dim: int
    projector: Projector
    centers: Optional[ClassCenters] = None
    memory: PrototypeMemory | ExemplarMemory = field(default_factory=PrototypeMemory)
    adam: AdamState = field(default_factory=AdamState)
    reports: list[SessionReport] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    next_task: int = 0


def init_state(dim: int, config: TrainConfig) -> TrainerState:
    if config.projector_enabled:
        projector = init_projector(dim, config.proj_hidden, config.proj_out,
                                   derive_seed(config.seed, _TAG_PROJECTOR))
    else:
        projector = identity_projector()
    if config.memory_mode.startswith("exemplar"):
        memory = ExemplarMemory(per_class=int(config.memory_mode.split(":")[1]))
    else:
        memory = PrototypeMemory()
    return TrainerState(dim=dim, projector=projector, memory=memory)


def _center_param_keys(centers: ClassCenters, freeze_old: bool) -> dict[str, np.ndarray]:
    """One param entry per session block so fresh blocks get fresh moments."""
    out = {}
    start = 0
    for s, count in enumerate(centers.counts):
        block = centers.c[start : start + count]
        if not (freeze_old and s < len(centers.counts) - 1):
            out[f"centers.{s}"] = block
        start += count
    return out


def _split_center_grad(grad: np.ndarray, centers: ClassCenters, freeze_old: bool) -> dict[str, np.ndarray]:
    out = {}
    start = 0
    for s, count in enumerate(centers.counts):
        if not (freeze_old and s < len(centers.counts) - 1):
            out[f"centers.{s}"] = grad[start : start + count]
        start += count
    return out


def train_task(manifest: StreamManifest, t: int, state: TrainerState, config: TrainConfig) -> SessionReport:
    """Run one full session on task `t` (0-based) and evaluate it."""
    config.validate()
    if t != state.next_task:
        raise ValidationError(f"state expects task {state.next_task}, got {t}")
    if t >= len(manifest.tasks):
        raise ValidationError(f"manifest has {len(manifest.tasks)} tasks, task {t} requested")

    z_train = read_features_unlabeled(manifest.train_path(t)).astype(np.float64)
    if z_train.shape[1] != state.dim:
        raise ValidationError(f"task {t} features have dim {z_train.shape[1]}, state has {state.dim}")

    k = manifest.tasks[t].cnum
    class_offset = state.centers.total if state.centers else 0
    m = config.proj_out if config.projector_enabled else state.dim

    protos = init_prototypes(config.pnum, state.dim, derive_seed(config.seed, t, _TAG_PROTO), z_train)
    state.centers = append_centers(state.centers, k, m, config.tau, derive_seed(config.seed, t, _TAG_CENTERS))
    centers = state.centers
    state.adam.drop("mu", "log_sigma")

    params: dict[str, np.ndarray] = {"mu": protos.mu, **state.projector.params()}
    if config.sigma_trainable:
        params["log_sigma"] = protos.log_sigma
    params.update(_center_param_keys(centers, config.freeze_old_centers))

    replay_rng = np.random.default_rng(derive_seed(config.seed, t, _TAG_REPLAY))
    replay_active = config.replay_enabled and t > 0 and len(state.memory) > 0
    per_class = config.replay_per_class or max(1, math.ceil(config.batch_size / centers.total))
    batch_seed = derive_seed(config.seed, t, _TAG_BATCH)

    for epoch in range(config.epochs):
        lr = config.lr
        if config.lr_cosine_decay:
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        sums = np.zeros(5)
        n_batches = 0
        for b_idx, batch in enumerate(batch_iter(z_train, config.batch_size, batch_seed, epoch)):
            z = batch.z
            log_p = log_posterior(z, protos)
            plan = sinkhorn_balanced(log_p, config.epsilon, config.sinkhorn_iters)
            w_target = to_per_sample_targets(plan)

            l_proto = proto_loss(w_target, log_p)
            dmu, dls = proto_grads(z, protos, w_target)

            replay = sample_old(state.memory, per_class, replay_rng) if replay_active else None
            head = head_grads(
                z,
                w_target,
                state.projector,
                centers,
                lambda_ga=config.lambda_ga,
                lambda_old=config.lambda_old,
                replay=replay,
                align_weight=1.0 if config.align_enabled else 0.0,
                sep_weight=1.0 if (config.sep_enabled and t > 0) else 0.0,
            )
            l_reduct = reduct_loss(head.l_old, head.l_sep, config.lambda_old)
            total = l_proto + head.l_align + l_reduct
            if not np.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at task {t + 1} epoch {epoch + 1} batch {b_idx}: "
                    f"l_proto={l_proto} l_align={head.l_align} l_old={head.l_old} l_sep={head.l_sep}"
                )

            grads = {"mu": dmu, **head.grads}
            if config.sigma_trainable:
                grads["log_sigma"] = dls
            grads.update(_split_center_grad(grads.pop("centers"), centers, config.freeze_old_centers))
            adam_step(params, grads, state.adam, lr)
            protos.project()
            centers.project()

            sums += (l_proto, head.l_align, head.l_old, head.l_sep, total)
            n_batches += 1

        means = sums / n_batches
        record = {
            "task": t + 1,
            "epoch": epoch + 1,
            "l_proto": float(means[0]),
            "l_align": float(means[1]),
            "l_old": float(means[2]),
            "l_sep": float(means[3]),
            "total": float(means[4]),
        }
        if config.eval_every and (epoch + 1) % config.eval_every == 0 and epoch + 1 < config.epochs:
            record["acc_overall"] = evaluate_session(state.projector, centers, manifest, t + 1).acc_overall
        state.metrics.append(record)

    stats = consolidate_task(
        z_train, protos, state.projector, centers,
        task_id=t, class_offset=class_offset, var_mode=config.var_mode,
    )
    if isinstance(state.memory, ExemplarMemory):
        e, _ = projector_forward(state.projector, z_train)
        local = np.argmax(center_logits(e, centers, centers.current_slice()), axis=1)
        state.memory.add_task(z_train, local + class_offset,
                              np.random.default_rng(derive_seed(config.seed, t, _TAG_EXEMPLAR)))
    else:
        state.memory.add(stats)

    report = evaluate_session(state.projector, centers, manifest, t + 1)
    state.reports.append(report)
    if len(state.reports) >= 2:
        report.forgetting = forgetting_score(state.reports)
        report.forgetting_restricted = forgetting_score(state.reports, restricted=True)
    state.next_task = t + 1
    stored_classes = max(len(state.memory.class_ids()), 1)
    logger.info(
        "task %d done: acc_overall=%.4f forgetting=%s memory=%.1f exemplar-equivalents/class",
        t + 1, report.acc_overall, report.forgetting,
        state.memory.budget_floats() / state.dim / stored_classes,
    )
    return report


def run_stream(
    manifest: StreamManifest,
    config: TrainConfig,
    out_dir=None,
    *,
    resume: Optional["TrainerState"] = None,
    stop_after: Optional[int] = None,
) -> tuple[TrainerState, list[SessionReport]]:
    """Train every task in order; optionally checkpoint/report under `out_dir`."""
    config.validate()
    manifest.validate()
    state = resume if resume is not None else init_state(manifest.dim, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")

    last = len(manifest.tasks) if stop_after is None else min(stop_after, len(manifest.tasks))
    for t in range(state.next_task, last):
        report = train_task(manifest, t, state, config)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.psck", state, config)
            with open(out_dir / "reports.jsonl", "a") as fh:
                fh.write(json.dumps(report.to_record()) + "\n")
            with open(out_dir / "metrics.jsonl", "w") as fh:
                for rec in state.metrics:
                    fh.write(json.dumps(rec) + "\n")
    if out_dir is not None and state.reports:
        (out_dir / "summary.json").write_text(json.dumps(state.reports[-1].to_record(), indent=2) + "\n")
    return state, state.reports


# --- checkpoint container -------------------------------------------------

def _zip_array(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, arr)
    zf.writestr(name, buf.getvalue())


def _unzip_array(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    return np.load(io.BytesIO(zf.read(name)))


def save_checkpoint(path, state: TrainerState, config: TrainConfig) -> None:
    """Single-file archive: json metadata plus named binary array sections."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "dim": state.dim,
        "next_task": state.next_task,
        "center_counts": state.centers.counts if state.centers else [],
        "metrics": state.metrics,
        "reports": [r.to_record() for r in state.reports],
        "adam_t": state.adam.t,
        "memory_kind": "exemplar" if isinstance(state.memory, ExemplarMemory) else "proto",
        "seed_streams": {"root": config.seed, "projector_tag": _TAG_PROJECTOR},
    }
    if isinstance(state.memory, ExemplarMemory):
        meta["exemplar_per_class"] = state.memory.per_class
        meta["exemplar_classes"] = state.memory.class_ids()
    else:
        meta["proto_meta"] = [
            {"count": s.count, "purity": s.purity, "class_id": s.class_id, "task_id": s.task_id}
            for s in state.memory.stats
        ]

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2))
        if not state.projector.identity:
            for key, arr in state.projector.params().items():
                _zip_array(zf, f"params/{key}.npy", arr)
        if state.centers is not None:
            _zip_array(zf, "params/centers.npy", state.centers.c)
        for key, arr in state.adam.m.items():
            _zip_array(zf, f"adam/m/{key}.npy", arr)
        for key, arr in state.adam.v.items():
            _zip_array(zf, f"adam/v/{key}.npy", arr)
        if isinstance(state.memory, ExemplarMemory):
            for cls, rows in state.memory.rows.items():
                _zip_array(zf, f"exemplar/{cls}.npy", rows)
        else:
            for i, s in enumerate(state.memory.stats):
                _zip_array(zf, f"memory/{i}_mean.npy", s.mean)
                _zip_array(zf, f"memory/{i}_var.npy", s.var)
        for i, r in enumerate(state.reports):
            _zip_array(zf, f"reports/{i}_confusion.npy", r.confusion)
            _zip_array(zf, f"reports/{i}_mapping.npy", r.mapping)


def load_checkpoint(path) -> tuple[TrainerState, TrainConfig]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ValidationError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"checkpoint version {meta.get('version')} unsupported")
        config = TrainConfig.from_dict(meta["config"])

        if config.projector_enabled:
            projector = Projector(
                w1=_unzip_array(zf, "params/proj.w1.npy"),
                b1=_unzip_array(zf, "params/proj.b1.npy"),
                w2=_unzip_array(zf, "params/proj.w2.npy"),
                b2=_unzip_array(zf, "params/proj.b2.npy"),
            )
        else:
            projector = identity_projector()

        centers = None
        if meta["center_counts"]:
            centers = ClassCenters(
                c=_unzip_array(zf, "params/centers.npy"),
                counts=list(meta["center_counts"]),
                tau=config.tau,
            )

        if meta["memory_kind"] == "exemplar":
            memory = ExemplarMemory(per_class=meta["exemplar_per_class"])
            for cls in meta["exemplar_classes"]:
                memory.rows[int(cls)] = _unzip_array(zf, f"exemplar/{cls}.npy")
        else:
            memory = PrototypeMemory()
            for i, rec in enumerate(meta["proto_meta"]):
                memory.stats.append(
                    ProtoStat(
                        mean=_unzip_array(zf, f"memory/{i}_mean.npy"),
                        var=_unzip_array(zf, f"memory/{i}_var.npy"),
                        count=rec["count"],
                        purity=rec["purity"],
                        class_id=rec["class_id"],
                        task_id=rec["task_id"],
                    )
                )

        adam = AdamState(t={k: int(v) for k, v in meta["adam_t"].items()})
        for name in zf.namelist():
            if name.startswith("adam/m/"):
                adam.m[name[len("adam/m/") : -len(".npy")]] = _unzip_array(zf, name)
            elif name.startswith("adam/v/"):
                adam.v[name[len("adam/v/") : -len(".npy")]] = _unzip_array(zf, name)

        reports = []
        for i, rec in enumerate(meta["reports"]):
            reports.append(
                SessionReport(
                    session=rec["session"],
                    acc_overall=rec["acc_overall"],
                    per_task_acc=[rec[f"acc_task_{j + 1}"] for j in range(rec["session"])],
                    per_task_acc_restricted=[
                        rec[f"acc_task_{j + 1}_restricted"] for j in range(rec["session"])
                    ],
                    mapping=_unzip_array(zf, f"reports/{i}_mapping.npy"),
                    confusion=_unzip_array(zf, f"reports/{i}_confusion.npy"),
                    k_total=rec["k_total"],
                    forgetting=rec["forgetting"],
                    forgetting_restricted=rec["forgetting_restricted"],
                )
            )

    state = TrainerState(
        dim=meta["dim"],
        projector=projector,
        centers=centers,
        memory=memory,
        adam=adam,
        reports=reports,
        metrics=list(meta["metrics"]),
        next_task=meta["next_task"],
    )
    # param views must alias the freshly loaded arrays; nothing to rebind here
    # because views are reconstructed at the start of each task.
    return state, config


# --- finite-difference gradient audit --------------------------------------

def grad_check(
    seed: int = 0,
    *,
    n: int = 6,
    r: int = 5,
    k_old: int = 2,
    k_new: int = 3,
    d: int = 8,
    hidden: int = 8,
    m_dim: int = 4,
    lambda_ga: float = 4.0,
    lambda_old: float = 10.0,
    step: float = 1e-4,
    tol: float = 1e-4,
    corrupt_group: Optional[str] = None,
) -> dict:
    """Compare every analytic gradient against central finite differences.

    Builds one small seeded instance with all loss terms active and returns
    per-parameter-group max relative errors plus a pass flag. Useful both as
    a test oracle and as a field diagnostic.
    """
    rng = np.random.default_rng(seed)

    def unit_rows(count, dim):
        x = rng.standard_normal((count, dim))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    z = unit_rows(n, d)
    z_old = unit_rows(n, d)
    y_old = rng.integers(0, k_old, size=n)
    w_target = rng.dirichlet(np.ones(r), size=n)

    protos = PrototypeSet(mu=unit_rows(r, d), log_sigma=rng.uniform(np.log(0.5), np.log(1.5), size=r))
    projector = init_projector(d, hidden, m_dim, rng.integers(2**32))
    centers = ClassCenters(c=unit_rows(k_old + k_new, m_dim), counts=[k_old, k_new], tau=0.5)

    params = {"mu": protos.mu, "log_sigma": protos.log_sigma, **projector.params(),
              "centers": centers.c}

    def total_loss() -> float:
        lp = proto_loss(w_target, log_posterior(z, protos))
        e, _ = projector_forward(projector, z)
        y = softmax_rows(center_logits(e, centers, centers.current_slice()))
        la = align_loss(joint_table(w_target, y), lambda_ga)
        p_all = softmax_rows(center_logits(e, centers))
        ls = float(-np.mean(np.log(p_all[:, centers.current_slice()].sum(axis=1))))
        e_old, _ = projector_forward(projector, z_old)
        p_old = softmax_rows(center_logits(e_old, centers))
        lo = float(-np.mean(np.log(p_old[np.arange(n), y_old])))
        return lp + la + lambda_old * lo + ls

    dmu, dls = proto_grads(z, protos, w_target)
    head = head_grads(z, w_target, projector, centers, lambda_ga=lambda_ga,
                      lambda_old=lambda_old, replay=(z_old, y_old))
    analytic = {"mu": dmu, "log_sigma": dls, **head.grads}
    if corrupt_group is not None:
        analytic[corrupt_group] = analytic[corrupt_group].copy()
        analytic[corrupt_group].flat[0] *= 1.1

    errors = {}
    for key, param in params.items():
        fd = np.zeros_like(param)
        flat = param.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = total_loss()
            flat[idx] = orig - step
            f_minus = total_loss()
            flat[idx] = orig
            fd_flat[idx] = (f_plus - f_minus) / (2 * step)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        errors[key] = float(np.max(np.abs(analytic[key] - fd)) / scale)

    failing = sorted(key for key, err in errors.items() if err > tol)
    return {"errors": errors, "tol": tol, "passed": not failing, "failing": failing}
