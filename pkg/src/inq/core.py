"""Incremental network quantization: partition, group-wise quantization and
masked re-training, repeated until every weight sits on its layer's grid.

A mask entry of 1 marks a weight that is still trainable, 0 marks a weight
that has been quantized and is frozen from then on.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .container import QuantizedModel, load_checkpoint, save_checkpoint
from .engine import Dataset, Network, SgdConfig, TrainingDiverged, evaluate, train
from .quantizer import QuantGrid, build_grid, quantize_array

logger = logging.getLogger(__name__)

STRATEGIES = ("pruning", "random")


class InqError(RuntimeError):
    """The INQ driver could not continue; ``state`` is left for inspection."""

    def __init__(self, msg: str, state: "InqState | None" = None):
        super().__init__(msg)
        self.state = state


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InqSchedule:
    """Accumulated fractions of weights quantized after each step."""

    sigmas: tuple

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig:
            raise ValueError("schedule must have at least one step")
        if any(not 0 < s <= 1 for s in sig):
            raise ValueError("schedule portions must lie in (0, 1]")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError("schedule must be strictly increasing")
        if sig[-1] != 1.0:
            raise ValueError("schedule must end at 1")
        object.__setattr__(self, "sigmas", sig)

    def __len__(self):
        return len(self.sigmas)

    def __iter__(self):
        return iter(self.sigmas)


_PRESETS = {
    "alexnet": (0.3, 0.6, 0.8, 1),
    "vgg16": (0.5, 0.75, 0.875, 1),
    "googlenet": (0.2, 0.4, 0.6, 0.8, 1),
    "resnet18-5bit": (0.5, 0.75, 0.875, 1),
    "resnet50": (0.5, 0.75, 0.875, 1),
    "4bit": (0.3, 0.5, 0.8, 0.9, 0.95, 1),
    "3bit": (0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 1),
    "2bit": (0.2, 0.4, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.975, 1),
}


def preset_schedules() -> dict[str, InqSchedule]:
    return {name: InqSchedule(s) for name, s in _PRESETS.items()}


def parse_schedule(text: str) -> InqSchedule:
    """A preset name or a comma-separated list such as ``"0.5,0.75,1"``."""
    text = text.strip()
    if text in _PRESETS:
        return InqSchedule(_PRESETS[text])
    try:
        return InqSchedule(tuple(float(t) for t in text.split(",")))
    except ValueError as exc:
        raise ValueError(f"bad schedule {text!r}: {exc}") from None


def frozen_count(sigma: float, size: int) -> int:
    """``round(sigma * size)`` with halves rounded up, on the decimal value of sigma."""
    return math.floor(Fraction(repr(float(sigma))) * size + Fraction(1, 2))


def default_epochs_per_step(b: int, n_steps: int) -> int:
    """Spread a total re-training budget (8 epochs at 5 bits, growing as the
    bit-width drops) over the steps that re-train."""
    budget = {2: 36, 3: 16, 4: 12}.get(b, 8)
    return max(1, budget // max(1, n_steps - 1))


# ---------------------------------------------------------------------------
# Partition
# ---------------------------------------------------------------------------


def _check_target(mask: np.ndarray, target_count: int) -> int:
    frozen = int(np.count_nonzero(mask == 0))
    if target_count < frozen:
        raise ValueError(f"target {target_count} below current frozen count {frozen}")
    if target_count > mask.size:
        raise ValueError(f"target {target_count} exceeds layer size {mask.size}")
    return target_count - frozen


def partition_pruning(weights, mask, target_count: int) -> np.ndarray:
    """Freeze the largest-magnitude trainable weights until ``target_count``
    weights are frozen. Equal magnitudes go to the lower flat index first."""
    mask = np.array(mask, dtype=np.uint8)
    extra = _check_target(mask, target_count)
    flat = mask.reshape(-1)
    cand = np.flatnonzero(flat)
    mags = np.abs(np.asarray(weights, dtype=np.float64).reshape(-1)[cand])
    chosen = cand[np.argsort(-mags, kind="stable")[:extra]]
    flat[chosen] = 0
    return mask


def partition_random(weights, mask, target_count: int, seed) -> np.ndarray:
    """Freeze trainable weights chosen uniformly without replacement."""
    mask = np.array(mask, dtype=np.uint8)
    if np.shape(weights) != mask.shape:
        raise ValueError("weights and mask shapes differ")
    extra = _check_target(mask, target_count)
    flat = mask.reshape(-1)
    cand = np.flatnonzero(flat)
    rng = np.random.default_rng(seed)
    flat[rng.choice(cand, size=extra, replace=False)] = 0
    return mask


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def frozen_checksum(net: Network, masks) -> str:
    """SHA-256 over the exact bytes of every frozen weight."""
    h = hashlib.sha256()
    for (w, _), m in zip(net.params, masks):
        h.update(np.ascontiguousarray(w[m == 0]).tobytes())
    return h.hexdigest()


@dataclass
class InqState:
    net: Network
    grids: list
    masks: list
    step: int = 0
    sigma: float = 0.0
    frozen: list = field(default_factory=list)

    @classmethod
    def start(cls, net: Network, b: int) -> "InqState":
        """Fresh state; grids are fixed here from the pre-trained weights."""
        net = net.copy()
        grids = [build_grid(w, b) for w, _ in net.params]
        masks = [np.ones(w.shape, dtype=np.uint8) for w, _ in net.params]
        frozen = [np.empty(0) for _ in net.params]
        return cls(net, grids, masks, 0, 0.0, frozen)

    def snapshot(self) -> None:
        self.frozen = [w[m == 0].copy() for (w, _), m in zip(self.net.params, self.masks)]

    def check_frozen(self) -> None:
        for l, ((w, _), m, ref) in enumerate(zip(self.net.params, self.masks, self.frozen)):
            cur = w[m == 0]
            if cur.tobytes() != ref.tobytes():
                raise InqError(f"frozen weights of learnable layer {l} changed", self)

    def frozen_fraction(self) -> float:
        total = sum(m.size for m in self.masks)
        return sum(int(np.count_nonzero(m == 0)) for m in self.masks) / total

    def save(self, path, extra=None) -> None:
        info = {"sigma": self.sigma}
        info.update(extra or {})
        save_checkpoint(path, self.net, self.masks, self.grids, self.step, info)

    @classmethod
    def load(cls, path) -> "InqState":
        ck = load_checkpoint(path)
        state = cls(ck["net"], ck["grids"], ck["masks"], ck["step"],
                    float(ck["extra"].get("sigma", 0.0)))
        state.snapshot()
        return state


def inq_step(state: InqState, strategy: str, sigma: float, retrain_epochs: int,
             data: Dataset | None, cfg: SgdConfig | None, seed: int = 0,
             on_epoch: Callable | None = None) -> tuple[InqState, list]:
    """Raise the frozen portion of every layer to ``sigma``, quantize the newly
    frozen weights and re-train the rest.

    Re-training starts from ``cfg``'s base learning rate with zero velocity.
    Returns the state (modified in place) and the epoch metrics.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    if not sigma > state.sigma:
        raise ValueError(f"sigma {sigma} must exceed the previous portion {state.sigma}")
    step = state.step + 1
    for l, ((w, _), grid) in enumerate(zip(state.net.params, state.grids)):
        old = state.masks[l]
        target = frozen_count(sigma, w.size)
        if strategy == "pruning":
            new = partition_pruning(w, old, target)
        else:
            new = partition_random(w, old, target, seed=[seed, step, l])
        newly = (old == 1) & (new == 0)
        w[newly] = quantize_array(w[newly], grid)
        state.masks[l] = new
    state.step, state.sigma = step, float(sigma)
    state.snapshot()

    history = []
    if retrain_epochs > 0:
        if data is None or cfg is None:
            raise ValueError("re-training needs data and an SgdConfig")

        def _epoch(epoch, net, metrics):
            state.check_frozen()
            if on_epoch is not None:
                on_epoch(state, epoch, metrics)

        try:
            history = train(state.net, data, cfg, retrain_epochs, seed=[seed, step],
                            masks=state.masks, on_epoch=_epoch)
        except TrainingDiverged as exc:
            raise InqError(f"re-training diverged in step {step}, epoch {exc.epoch}",
                           state) from exc
    state.check_frozen()
    return state, history


def _eval_record(net, eval_data):
    if eval_data is None:
        return {}
    acc = evaluate(net, eval_data)
    return {f"eval_{k}": v for k, v in acc.items()}


def run_inq(net: Network, b: int, schedule: InqSchedule, strategy: str, data: Dataset,
            cfg: SgdConfig, epochs_per_step: int | None = None, seed: int = 0,
            eval_data: Dataset | None = None, retrain_last: bool = False,
            state: InqState | None = None, on_step: Callable | None = None,
            on_epoch: Callable | None = None, provenance=None):
    """Quantize a trained network incrementally.

    Grids are computed once from ``net``'s weights and kept for every step.
    The final step only quantizes unless ``retrain_last`` is set (biases are
    the only thing left to train then). Pass ``state`` (e.g. from
    :meth:`InqState.load`) to resume after its step; ``on_step(state, record)``
    runs after each step.

    Returns ``(QuantizedModel, records)`` with one metrics record per step,
    preceded by a step-0 record for the input network.
    """
    schedule = schedule if isinstance(schedule, InqSchedule) else InqSchedule(schedule)
    if epochs_per_step is None:
        epochs_per_step = default_epochs_per_step(b, len(schedule))
    records = []
    if state is None:
        state = InqState.start(net, b)
        records.append({"step": 0, "sigma": 0.0, "frozen_fraction": 0.0,
                        **_eval_record(state.net, eval_data)})
    for n, sigma in enumerate(schedule.sigmas, start=1):
        if n <= state.step:
            continue
        last = n == len(schedule)
        epochs = 0 if (last and not retrain_last) else epochs_per_step
        _, history = inq_step(state, strategy, sigma, epochs, data, cfg, seed=seed,
                              on_epoch=on_epoch)
        rec = {"step": n, "sigma": sigma, "frozen_fraction": state.frozen_fraction(),
               "epochs": epochs}
        if history:
            rec["train_loss"] = history[-1].loss
            rec["train_accuracy"] = history[-1].accuracy
        rec.update(_eval_record(state.net, eval_data))
        logger.info("INQ step %d sigma=%.4g %s", n, sigma,
                    {k: v for k, v in rec.items() if k.startswith("eval")})
        records.append(rec)
        if on_step is not None:
            on_step(state, rec)
    for l, ((w, _), grid) in enumerate(zip(state.net.params, state.grids)):
        if not grid.contains(w).all():  # pragma: no cover - guarded by the steps above
            raise InqError(f"learnable layer {l} has weights off its grid", state)
    model = QuantizedModel.from_network(state.net, state.grids, provenance)
    return model, records


def one_shot(net: Network, b: int) -> QuantizedModel:
    """Quantize every weight at once with no re-training."""
    model, _ = run_inq(net, b, InqSchedule((1.0,)), "pruning", None, None,
                       epochs_per_step=0)
    return model
