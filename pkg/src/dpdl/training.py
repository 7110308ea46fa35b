"""Training loop, optimizer, and checkpointing.

One optimizer step per iteration updates the prototype parameters and the
three scoring heads jointly.  Batches mix sampled normal items, the
observed training anomalies (all of them while there are at most ten), and
rectangle-paste pseudo-anomalies.  The dispersion loss is computed on the
unit-normalized batch features and contributes to the reported total;
gradients flow into the prototype parameters only through the two
prototype losses, and into each head only through its own loss.

Checkpoints are a little-endian binary container (magic ``DPDLCKPT``)
holding the config, all parameters, optimizer state, and the exact random
generator state, so a resumed run reproduces an uninterrupted one bit for
bit.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import coerce_fields, parse_kv_file
from .errors import CorruptionError, FormatError, NumericError, ValidationError
from .features import Dataset, SplitPlan, cutmix_pseudo_anomaly
from .losses import loss_dfl, loss_dpl_anomaly, loss_dpl_normal, unitize
from .prototypes import MGPParams, mgp_new, mgp_realize, vq_init
from .scoring import (LinearHead, ScoringHeads, head_loss_anomaly, head_loss_normal,
                      head_loss_residual)

CKPT_MAGIC = b"DPDLCKPT"
CKPT_VERSION = 1

# At most this many observed anomalies enter a single iteration; with ten or
# fewer available they are all used every time.
MAX_ANOMALIES_PER_ITER = 10
GRAD_CLIP_NORM = 10.0
VQ_MAX_ITERS = 100

_CONFIG_ALIASES = {"lambda": "lambda_"}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; all fields can be set from a key = value file.

    The file key for ``lambda_`` is spelled ``lambda`` (the underscore only
    dodges the Python keyword).
    """

    epochs: int = 50
    iters_per_epoch: int = 20
    batch_size: int = 16
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    lambda_: float = 0.01
    kappa: float = 10.0
    epsilon: float = 0.001
    n_prototypes: int = 32
    topk_fraction: float = 0.10
    pseudo_anomaly_rate: float = 0.25
    residual_scale: str = "std"
    protocol: str = "general"
    m: int = 1
    seed: int = 0

    def __post_init__(self):
        for field in ("epochs", "iters_per_epoch", "batch_size", "n_prototypes"):
            if getattr(self, field) < 1:
                raise ValidationError(f"{field} must be positive, got {getattr(self, field)}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be positive and weight_decay nonnegative")
        if self.lambda_ < 0 or self.kappa < 0:
            raise ValidationError("lambda and kappa must be nonnegative")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValidationError(f"topk_fraction must lie in (0, 1], got {self.topk_fraction}")
        if not 0.0 <= self.pseudo_anomaly_rate <= 1.0:
            raise ValidationError(f"pseudo_anomaly_rate must lie in [0, 1], got {self.pseudo_anomaly_rate}")
        if self.residual_scale not in ("std", "var"):
            raise ValidationError(f"residual_scale must be 'std' or 'var', got {self.residual_scale!r}")
        if self.protocol not in ("general", "hard"):
            raise ValidationError(f"protocol must be 'general' or 'hard', got {self.protocol!r}")
        if self.m < 0 or self.seed < 0:
            raise ValidationError("m and seed must be nonnegative")


def parse_train_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a config file and apply keyword overrides on top."""
    kwargs = coerce_fields(TrainConfig, parse_kv_file(path), aliases=_CONFIG_ALIASES)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam moments, keyed like the parameter dict."""

    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
        )


def optimizer_step(params: dict, grads: dict, state: OptimizerState, learning_rate: float,
                   weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps_hat: float = 1e-8) -> None:
    """One in-place AdamW update over a named parameter dict.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps_hat) + wd * theta)
    with bias-corrected first and second moments.
    """
    if set(params) != set(grads):
        raise ValidationError(f"parameter/gradient keys differ: {sorted(params)} vs {sorted(grads)}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps_hat) + weight_decay * theta
        theta -= learning_rate * update


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    l_ma: float
    l_mn: float
    l_mr: float
    l_dpl_n: float
    l_dpl_a: float
    l_dfl: float
    total: float


LOG_HEADER = "epoch,L_Ma,L_Mn,L_Mr,L_DPLn,L_DPLa,L_DFL,total"


def format_training_log(rows) -> str:
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(",".join([str(r.epoch)] + [
            f"{v:.17g}" for v in (r.l_ma, r.l_mn, r.l_mr, r.l_dpl_n, r.l_dpl_a, r.l_dfl, r.total)
        ]))
    return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    config: TrainConfig
    params: MGPParams
    heads: ScoringHeads
    opt: OptimizerState
    rng_state: dict
    epoch: int


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    log: tuple


def _param_dict(params: MGPParams, heads: ScoringHeads) -> dict:
    return {
        "a": params.a, "m": params.m, "s": params.s,
        "w_a": heads.anomaly.w, "b_a": heads.anomaly.b,
        "w_n": heads.normal.w, "b_n": heads.normal.b,
        "w_r": heads.residual.w, "b_r": heads.residual.b,
    }


def _clip_global_norm(grads: dict, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def _check_split(dataset: Dataset, split: SplitPlan) -> None:
    n = len(dataset)
    for group in (split.train_normal_ids, split.train_anomaly_ids, split.test_ids):
        for i in group:
            if not 0 <= i < n:
                raise ValidationError(f"split references item {i} outside dataset of size {n}")
    if not split.train_normal_ids:
        raise ValidationError("split has no training normals")


def train(dataset: Dataset, split: SplitPlan, config: TrainConfig,
          resume: Checkpoint | None = None, freeze_heads: bool = False) -> TrainResult:
    """Run the optimization loop and return the final checkpoint plus log.

    ``resume`` continues a checkpoint whose config matches except for the
    epoch budget; the random stream picks up exactly where it stopped, so
    a 25+25-epoch run equals a straight 50-epoch run bit for bit.
    """
    _check_split(dataset, split)
    h, w, d = dataset.dims
    items = dataset.items
    normal_pool = list(split.train_normal_ids)
    anomaly_pool = list(split.train_anomaly_ids)

    if resume is None:
        flats = np.stack([items[i].flat() for i in normal_pool])
        init = vq_init(flats, config.n_prototypes, max_iters=VQ_MAX_ITERS, seed=config.seed)
        params = mgp_new(init, config.epsilon)
        heads = ScoringHeads.zeros(d, config.topk_fraction)
        opt = OptimizerState.for_params(_param_dict(params, heads))
        rng = np.random.default_rng([config.seed, 0x0D9D])
        start_epoch = 0
    else:
        _check_resume(resume, config)
        params = MGPParams(resume.params.a.copy(), resume.params.m.copy(),
                           resume.params.s.copy(), resume.params.epsilon)
        heads = _copy_heads(resume.heads)
        opt = OptimizerState(
            exp_avg={k: v.copy() for k, v in resume.opt.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in resume.opt.exp_avg_sq.items()},
            step=resume.opt.step,
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    pdict = _param_dict(params, heads)
    opt_keys = [k for k in pdict if freeze_heads is False or k in ("a", "m", "s")]
    n_pseudo = int(np.floor(config.pseudo_anomaly_rate * config.batch_size))
    log_rows: list[EpochLog] = []

    for epoch in range(start_epoch, config.epochs):
        sums = np.zeros(7)
        for it in range(config.iters_per_epoch):
            batch_fms, batch_labels, n_normal = _draw_batch(
                items, normal_pool, anomaly_pool, config.batch_size, n_pseudo, rng)
            mgp = mgp_realize(params)

            grads = {k: np.zeros_like(v) for k, v in pdict.items()}
            l_ma = l_mn = l_mr = 0.0
            count = len(batch_fms)
            for fm, y in zip(batch_fms, batch_labels):
                ha = head_loss_anomaly(heads, fm, y)
                hn = head_loss_normal(heads, fm, y)
                hr = head_loss_residual(heads, mgp, fm, y, config.residual_scale)
                l_ma += ha.value
                l_mn += hn.value
                l_mr += hr.value
                grads["w_a"] += ha.grad_w
                grads["b_a"] += ha.grad_b
                grads["w_n"] += hn.grad_w
                grads["b_n"] += hn.grad_b
                grads["w_r"] += hr.grad_w
                grads["b_r"] += hr.grad_b
            l_ma /= count
            l_mn /= count
            l_mr /= count
            for key in ("w_a", "b_a", "w_n", "b_n", "w_r", "b_r"):
                grads[key] /= count

            normal_flats = np.stack([fm.flat() for fm in batch_fms[:n_normal]])
            dpl_n = loss_dpl_normal(params, normal_flats)
            grads["a"] += dpl_n.grad_a
            grads["m"] += dpl_n.grad_m
            grads["s"] += dpl_n.grad_s
            l_dpl_a = 0.0
            if count > n_normal:
                anomaly_flats = np.stack([fm.flat() for fm in batch_fms[n_normal:]])
                dpl_a = loss_dpl_anomaly(params, anomaly_flats)
                grads["a"] += dpl_a.grad_a
                grads["m"] += dpl_a.grad_m
                grads["s"] += dpl_a.grad_s
                l_dpl_a = dpl_a.value

            units = np.stack([unitize(fm.flat()) for fm in batch_fms])
            dfl = loss_dfl(units, config.kappa)

            total = l_ma + l_mn + l_mr + dpl_n.value + l_dpl_a + config.lambda_ * dfl.value
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1} iteration {it + 1}: "
                    f"L_Ma={l_ma} L_Mn={l_mn} L_Mr={l_mr} "
                    f"L_DPLn={dpl_n.value} L_DPLa={l_dpl_a} L_DFL={dfl.value}")

            step_grads = {k: grads[k] for k in opt_keys}
            _clip_global_norm(step_grads, GRAD_CLIP_NORM)
            optimizer_step({k: pdict[k] for k in opt_keys}, step_grads, opt,
                           config.learning_rate, config.weight_decay)

            sums += np.array([l_ma, l_mn, l_mr, dpl_n.value, l_dpl_a, dfl.value, total])
        means = sums / config.iters_per_epoch
        log_rows.append(EpochLog(epoch + 1, *[float(v) for v in means]))

    ckpt = Checkpoint(config=config, params=params, heads=heads, opt=opt,
                      rng_state=rng.bit_generator.state, epoch=config.epochs)
    return TrainResult(checkpoint=ckpt, log=tuple(log_rows))


def _draw_batch(items, normal_pool, anomaly_pool, batch_size, n_pseudo, rng):
    """Deterministic draw order: normals, observed anomalies, pseudo-anomalies."""
    if len(normal_pool) >= batch_size:
        picked = rng.choice(len(normal_pool), size=batch_size, replace=False)
    else:
        picked = rng.choice(len(normal_pool), size=batch_size, replace=True)
    fms = [items[normal_pool[int(i)]] for i in picked]
    labels = [items[normal_pool[int(i)]].label for i in picked]
    n_normal = len(fms)

    if anomaly_pool:
        if len(anomaly_pool) <= MAX_ANOMALIES_PER_ITER:
            chosen = list(range(len(anomaly_pool)))
        else:
            chosen = sorted(int(i) for i in rng.choice(
                len(anomaly_pool), size=MAX_ANOMALIES_PER_ITER, replace=False))
        for i in chosen:
            fms.append(items[anomaly_pool[i]])
            labels.append(1)

    donor_pool = normal_pool + anomaly_pool
    for _ in range(n_pseudo):
        base = items[normal_pool[int(rng.integers(len(normal_pool)))]]
        donor = items[donor_pool[int(rng.integers(len(donor_pool)))]]
        pseudo = cutmix_pseudo_anomaly(base, donor, rng)
        fms.append(pseudo)
        labels.append(pseudo.label)
    return fms, labels, n_normal


def _copy_heads(heads: ScoringHeads) -> ScoringHeads:
    return ScoringHeads(
        anomaly=LinearHead(heads.anomaly.w.copy(), heads.anomaly.b.copy()),
        normal=LinearHead(heads.normal.w.copy(), heads.normal.b.copy()),
        residual=LinearHead(heads.residual.w.copy(), heads.residual.b.copy()),
        topk_fraction=heads.topk_fraction,
    )


def _check_resume(ckpt: Checkpoint, config: TrainConfig) -> None:
    for field in dataclasses.fields(TrainConfig):
        if field.name == "epochs":
            continue
        if getattr(ckpt.config, field.name) != getattr(config, field.name):
            raise ValidationError(
                f"cannot resume: config field {field.name!r} changed "
                f"({getattr(ckpt.config, field.name)!r} -> {getattr(config, field.name)!r})")
    if config.epochs < ckpt.epoch:
        raise ValidationError(f"cannot resume: checkpoint is at epoch {ckpt.epoch}, budget is {config.epochs}")


# ---------------------------------------------------------------------------
# Checkpoint serialization.

_OPT_KEY_ORDER = ("a", "m", "s", "w_a", "b_a", "w_n", "b_n", "w_r", "b_r")


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u32(self, v): self.buf += struct.pack("<I", v)

    def u64(self, v): self.buf += struct.pack("<Q", v)

    def f64(self, v): self.buf += struct.pack("<d", v)

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw

    def array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u32(arr.ndim)
        for n in arr.shape:
            self.u64(n)
        self.buf += arr.tobytes()


class _Reader:
    def __init__(self, blob: bytes, origin: str):
        self.blob = blob
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptionError(f"{self.origin}: truncated checkpoint payload")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self): return struct.unpack("<I", self.take(4))[0]

    def u64(self): return struct.unpack("<Q", self.take(8))[0]

    def f64(self): return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    w = _Writer()
    w.buf += CKPT_MAGIC
    w.u32(CKPT_VERSION)
    for field in dataclasses.fields(TrainConfig):
        value = getattr(ckpt.config, field.name)
        if field.type == "int":
            w.buf += b"i"
            w.u64(value)
        elif field.type == "float":
            w.buf += b"f"
            w.f64(value)
        else:
            w.buf += b"s"
            w.text(value)
    w.f64(ckpt.params.epsilon)
    w.array(ckpt.params.a)
    w.array(ckpt.params.m)
    w.array(ckpt.params.s)
    w.f64(ckpt.heads.topk_fraction)
    for head in (ckpt.heads.anomaly, ckpt.heads.normal, ckpt.heads.residual):
        w.array(head.w)
        w.array(head.b)
    w.u64(ckpt.opt.step)
    for key in _OPT_KEY_ORDER:
        w.array(ckpt.opt.exp_avg[key])
        w.array(ckpt.opt.exp_avg_sq[key])
    _write_rng_state(w, ckpt.rng_state)
    w.u64(ckpt.epoch)
    Path(path).write_bytes(bytes(w.buf))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(CKPT_MAGIC) + 4:
        raise CorruptionError(f"{path}: truncated checkpoint header")
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    r = _Reader(blob, str(path))
    r.pos = len(CKPT_MAGIC)
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    kwargs = {}
    for field in dataclasses.fields(TrainConfig):
        tag = r.take(1)
        if tag == b"i":
            kwargs[field.name] = int(r.u64())
        elif tag == b"f":
            kwargs[field.name] = r.f64()
        elif tag == b"s":
            kwargs[field.name] = r.text()
        else:
            raise CorruptionError(f"{path}: bad config field tag {tag!r}")
    config = TrainConfig(**kwargs)
    epsilon = r.f64()
    params = MGPParams(r.array(), r.array(), r.array(), epsilon)
    topk_fraction = r.f64()
    heads = ScoringHeads(
        anomaly=LinearHead(r.array(), r.array()),
        normal=LinearHead(r.array(), r.array()),
        residual=LinearHead(r.array(), r.array()),
        topk_fraction=topk_fraction,
    )
    step = int(r.u64())
    exp_avg = {}
    exp_avg_sq = {}
    for key in _OPT_KEY_ORDER:
        exp_avg[key] = r.array()
        exp_avg_sq[key] = r.array()
    opt = OptimizerState(exp_avg=exp_avg, exp_avg_sq=exp_avg_sq, step=step)
    rng_state = _read_rng_state(r)
    epoch = int(r.u64())
    if r.pos != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(config=config, params=params, heads=heads, opt=opt,
                      rng_state=rng_state, epoch=epoch)


def _write_rng_state(w: _Writer, state: dict) -> None:
    if state.get("bit_generator") != "PCG64":
        raise ValidationError(f"unsupported bit generator {state.get('bit_generator')!r}")
    inner = state["state"]
    w.buf += int(inner["state"]).to_bytes(16, "little")
    w.buf += int(inner["inc"]).to_bytes(16, "little")
    w.u32(int(state["has_uint32"]))
    w.u32(int(state["uinteger"]))


def _read_rng_state(r: _Reader) -> dict:
    state = int.from_bytes(r.take(16), "little")
    inc = int.from_bytes(r.take(16), "little")
    has_uint32 = int(r.u32())
    uinteger = int(r.u32())
    return {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
