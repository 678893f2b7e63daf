"""Training loop, plateau learning-rate schedule and checkpoint format.

Batches are drawn with replacement using a per-step seeded RNG, so a run
is reproducible from (seed, step) alone and training can resume from a
checkpoint bit-exactly.  Checkpoints are a self-describing binary
container of named float32 tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .loss import DEFAULT_MISS_PENALTY, batch_loss
from .model import EmbeddingConfig, FusionModel, NetConfig

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainRecord:
    """One training sample, already normalized."""
    values: np.ndarray   # (l, input_dim)
    times: np.ndarray    # (l,)
    steps: np.ndarray    # (l,)
    sensors: np.ndarray  # (l,)
    truth: np.ndarray    # (n, 4)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-4
    plateau_patience: int = 5000
    plateau_factor: float = 0.75  # "reduce by a quarter"; 0.25 = "to a quarter"
    min_learning_rate: float = 1e-7
    miss_penalty: float = DEFAULT_MISS_PENALTY
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class PlateauSchedule:
    """Step-based plateau tracker: after `patience` consecutive steps
    without improvement the rate is multiplied by `factor`."""
    patience: int
    factor: float
    min_rate: float = 0.0
    best: float = float("inf")
    counter: int = 0

    def step(self, loss: float, rate: float) -> float:
        if loss < self.best - 1e-12:
            self.best = loss
            self.counter = 0
            return rate
        self.counter += 1
        if self.counter >= self.patience:
            self.counter = 0
            return max(rate * self.factor, self.min_rate)
        return rate


def _collate(records: list[TrainRecord], dtype: torch.dtype):
    B = len(records)
    L = max(len(r) for r in records)
    dim = records[0].values.shape[1]
    values = torch.zeros(B, L, dim, dtype=dtype)
    times = torch.zeros(B, L, dtype=torch.long)
    steps = torch.zeros(B, L, dtype=torch.long)
    sensors = torch.zeros(B, L, dtype=torch.long)
    mask = torch.zeros(B, L, dtype=torch.bool)
    truths = []
    for b, rec in enumerate(records):
        n = len(rec)
        values[b, :n] = torch.as_tensor(rec.values, dtype=dtype)
        times[b, :n] = torch.as_tensor(rec.times, dtype=torch.long)
        steps[b, :n] = torch.as_tensor(rec.steps, dtype=torch.long)
        sensors[b, :n] = torch.as_tensor(rec.sensors, dtype=torch.long)
        mask[b, :n] = True
        truths.append(torch.as_tensor(rec.truth, dtype=dtype))
    return values, times, steps, sensors, mask, truths


def batch_indices(seed: int, step: int, n_records: int,
                  batch_size: int) -> np.ndarray:
    """Deterministic with-replacement batch for a given step."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, step)))
    return rng.integers(0, n_records, size=batch_size)


def train(model: FusionModel, records: list[TrainRecord], cfg: TrainConfig,
          start_step: int = 0, optimizer: torch.optim.Adam | None = None,
          schedule: PlateauSchedule | None = None,
          log_callback=None) -> list[tuple[int, float, float]]:
    """Optimize the model in place; returns the (step, loss, lr) curve.

    Records with empty sequences are skipped when sampling batches.
    """
    usable = [r for r in records if len(r) > 0]
    if not usable:
        raise ValueError("training set has no nonempty records")
    dtype = next(model.parameters()).dtype
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(),
                                     lr=cfg.learning_rate)
    if schedule is None:
        schedule = PlateauSchedule(cfg.plateau_patience, cfg.plateau_factor,
                                   cfg.min_learning_rate)
    model.train()
    curve: list[tuple[int, float, float]] = []
    for step in range(start_step + 1, cfg.steps + 1):
        idx = batch_indices(cfg.seed, step, len(usable), cfg.batch_size)
        batch = [usable[i] for i in idx]
        values, times, tsteps, sensors, mask, truths = _collate(batch, dtype)
        out = model(values, times, tsteps, sensors, mask)
        loss = batch_loss(out.existence, out.mean, out.chol, truths,
                          cfg.miss_penalty)
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step)
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        rate = optimizer.param_groups[0]["lr"]
        new_rate = schedule.step(loss_val, rate)
        if new_rate != rate:
            for group in optimizer.param_groups:
                group["lr"] = new_rate
        curve.append((step, loss_val, new_rate))
        if log_callback is not None:
            log_callback(step, loss_val, new_rate)
    return curve


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, then named little-endian float32
# tensors (u16 name length, name, u8 ndim, u32 dims, payload)
# ---------------------------------------------------------------------------

def _write_tensor(fh, name: str, array: np.ndarray):
    data = np.asarray(array, dtype="<f4")  # tobytes() emits C order
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray] | None:
    head = fh.read(2)
    if not head:
        return None
    (name_len,) = struct.unpack("<H", head)
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, model: FusionModel, optimizer=None,
                    schedule: PlateauSchedule | None = None,
                    step: int = 0, extra: dict | None = None):
    """Write model (and optionally optimizer/schedule) state."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        meta = {
            "step": float(step),
            **{f"emb.{k}": float(v)
               for k, v in asdict(model.emb_cfg).items()},
            **{f"net.{k}": float(v)
               for k, v in asdict(model.net_cfg).items()},
        }
        if schedule is not None:
            meta["sched.best"] = schedule.best
            meta["sched.counter"] = float(schedule.counter)
            meta["sched.patience"] = float(schedule.patience)
            meta["sched.factor"] = schedule.factor
            meta["sched.min_rate"] = schedule.min_rate
        if optimizer is not None:
            meta["opt.lr"] = float(optimizer.param_groups[0]["lr"])
        if extra:
            meta.update({k: float(v) for k, v in extra.items()})
        for name, value in sorted(meta.items()):
            _write_tensor(fh, f"meta.{name}", np.array(value))
        for name, tensor in model.state_dict().items():
            _write_tensor(fh, f"model.{name}", tensor.detach().numpy())
        if optimizer is not None:
            state = optimizer.state_dict()["state"]
            for p_idx, entries in state.items():
                for key, val in entries.items():
                    arr = val.detach().numpy() if torch.is_tensor(val) \
                        else np.array(float(val))
                    _write_tensor(fh, f"opt.{p_idx}.{key}", arr)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("not a checkpoint file "
                                        f"(magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected "
                f"{CHECKPOINT_VERSION}")
        tensors = {}
        while True:
            item = _read_tensor(fh)
            if item is None:
                break
            tensors[item[0]] = item[1]
    return tensors


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally optimizer/schedule) from a file.

    Returns (model, step) or (model, step, optimizer, schedule)."""
    tensors = read_checkpoint(path)

    def meta(name, default=None):
        key = f"meta.{name}"
        if key in tensors:
            return float(tensors[key])
        if default is not None:
            return default
        raise CheckpointFormatError(f"missing metadata field {name}")

    emb_cfg = EmbeddingConfig(
        model_dim=int(meta("emb.model_dim")),
        max_time=int(meta("emb.max_time")),
        max_traj_index=int(meta("emb.max_traj_index")),
        num_sensors=int(meta("emb.num_sensors")),
        input_dim=int(meta("emb.input_dim")),
    )
    net_cfg = NetConfig(
        encoder_layers=int(meta("net.encoder_layers")),
        decoder_layers=int(meta("net.decoder_layers")),
        attention_heads=int(meta("net.attention_heads")),
        ffn_dim=int(meta("net.ffn_dim")),
        num_queries=int(meta("net.num_queries")),
        dropout=meta("net.dropout"),
        sigma_origin=meta("net.sigma_origin"),
    )
    model = FusionModel(emb_cfg, net_cfg)
    state = {name[len("model."):]: torch.from_numpy(arr)
             for name, arr in tensors.items() if name.startswith("model.")}
    model.load_state_dict(state)
    step = int(meta("step"))
    if not with_optimizer:
        return model, step

    optimizer = torch.optim.Adam(model.parameters(),
                                 lr=meta("opt.lr", 1e-4))
    params = list(model.parameters())
    opt_state = {}
    for name, arr in tensors.items():
        if not name.startswith("opt."):
            continue
        _, p_idx, key = name.split(".", 2)
        entry = opt_state.setdefault(int(p_idx), {})
        entry[key] = (torch.from_numpy(arr) if arr.ndim else
                      torch.tensor(float(arr)))
    optimizer.load_state_dict({
        "state": opt_state,
        "param_groups": [{**optimizer.state_dict()["param_groups"][0],
                          "params": list(range(len(params)))}],
    })
    schedule = PlateauSchedule(
        patience=int(meta("sched.patience", 5000)),
        factor=meta("sched.factor", 0.75),
        min_rate=meta("sched.min_rate", 0.0),
        best=meta("sched.best", float("inf")),
        counter=int(meta("sched.counter", 0)),
    )
    return model, step, optimizer, schedule
