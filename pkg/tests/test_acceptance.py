"""Acceptance checks. Each test prints one PASS/FAIL line, and the session
summary repeats them in order.

The regression experiment uses the command-line defaults (``ExperimentConfig``).
Set ``INQ_DATA_DIR`` to a directory holding MNIST-format IDX files to run it on
those instead of the generated spirals.
"""

import itertools
import os
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest

from inq.cli import ExperimentConfig, build_network, load_datasets, main
from inq.codec import decode_layer, encode_layer, encoded_bits
from inq.container import QuantizedModel, dumps_model, loads_model
from inq.core import frozen_checksum, one_shot, parse_schedule, run_inq
from inq.engine import Dense, Network, evaluate, forward, train
from inq.quantizer import QuantGrid, build_grid, quantize_array
from inq.runtime import (compression_report, distribution, effective_bitwidth, shift_forward,
                         to_shift_form)

from .helpers import (ACCEPTANCE_RESULTS, finite_difference_check, random_grid_tensor,
                      random_instance, random_quantized_model)

# (bits, schedule, allowed drop in percentage points)
LOSSLESS_TARGETS = [(5, "resnet18-5bit", 0.5), (4, "resnet18-5bit", 0.5),
                    (3, "resnet18-5bit", 1.0), (2, "2bit", 3.0)]


@contextmanager
def criterion(n: int, title: str):
    """Record and print the outcome of the enclosed checks."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE_RESULTS[n] = (False, title, info["detail"])
        print(f"criterion {n}: FAIL  {title}  [{info['detail']}]")
        raise
    ACCEPTANCE_RESULTS[n] = (True, title, info["detail"])
    print(f"criterion {n}: PASS  {title}  [{info['detail']}]")


# ---------------------------------------------------------------------------
# Shared regression experiment
# ---------------------------------------------------------------------------


class FrozenMonitor:
    """Independent check that frozen weights never move.

    The expected frozen values are rebuilt from the weights at the end of the
    previous step: entries frozen earlier keep their value, entries frozen
    now are that value quantized. Their checksum is compared against the
    network after every re-training epoch and after the final step.
    """

    def __init__(self, net):
        self.prev_w = [w.copy() for w, _ in net.params]
        self.prev_masks = [np.ones(w.shape, dtype=np.uint8) for w, _ in net.params]
        self.checks = 0
        self.mismatches = 0

    def _expected(self, state):
        expected = []
        for w0, m0, m, g in zip(self.prev_w, self.prev_masks, state.masks, state.grids):
            v = w0.copy()
            newly = (m0 == 1) & (m == 0)
            v[newly] = quantize_array(v[newly], g)
            expected.append(v)
        return expected

    def _check(self, state):
        expected = self._expected(state)
        exp_sum = frozen_checksum(_Params(expected), state.masks)
        self.checks += 1
        self.mismatches += exp_sum != frozen_checksum(state.net, state.masks)

    def on_epoch(self, state, epoch, metrics):
        self._check(state)

    def on_step(self, state, record):
        self._check(state)
        self.prev_w = [w.copy() for w, _ in state.net.params]
        self.prev_masks = [m.copy() for m in state.masks]


class _Params:
    def __init__(self, weights):
        self.params = [[w, None] for w in weights]


@pytest.fixture(scope="module")
def regression():
    cfg = ExperimentConfig(data_dir=os.environ.get("INQ_DATA_DIR", ""))
    t0 = time.perf_counter()
    train_set, test_set = load_datasets(cfg)
    net = build_network(cfg, train_set.inputs.shape[1:], cfg.classes)
    train(net, train_set, cfg.sgd(), cfg.epochs, seed=cfg.seed)
    base = evaluate(net, test_set)["top1"]
    return {"cfg": cfg, "train": train_set, "test": test_set, "net": net, "base": base,
            "baseline_seconds": time.perf_counter() - t0, "runs": {}}


def inq_run(regression, bits, schedule, strategy="pruning", seed=0):
    """Run (or reuse) one INQ experiment on the shared baseline."""
    key = (bits, schedule, strategy, seed)
    if key not in regression["runs"]:
        cfg = regression["cfg"]
        monitor = FrozenMonitor(regression["net"])
        t0 = time.perf_counter()
        model, records = run_inq(regression["net"], bits, parse_schedule(schedule), strategy,
                                 regression["train"], cfg.retrain_sgd(),
                                 epochs_per_step=cfg.epochs_per_step or None, seed=seed,
                                 eval_data=regression["test"], retrain_last=cfg.retrain_last,
                                 on_step=monitor.on_step, on_epoch=monitor.on_epoch)
        regression["runs"][key] = {"model": model, "records": records, "monitor": monitor,
                                   "top1": records[-1]["eval_top1"],
                                   "seconds": time.perf_counter() - t0}
    return regression["runs"][key]


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_quantizer_suite():
    with criterion(1, "quantizer unit suite on 1e5 weights") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2017)
        assert QuantGrid(3, -1).n2 == -2
        assert QuantGrid(3, -1).levels.tolist() == [-0.5, -0.25, 0.0, 0.25, 0.5]
        for b in (2, 3, 4, 5):
            w = rng.standard_t(3, size=100_000) * rng.choice([0.01, 0.1, 1.0])
            grid = build_grid(w, b)
            assert len(grid.levels) == 2 ** (b - 1) + 1
            q = quantize_array(w, grid)
            assert grid.contains(q).all()
            assert ((np.sign(q) == np.sign(w)) | (q == 0)).all()
            assert np.array_equal(quantize_array(q, grid), q)
            a, err = np.abs(w), np.abs(q - w)
            rung = a >= 0.75 * 2.0 ** grid.n2
            low = (a >= 2.0 ** (grid.n2 - 1)) & ~rung
            assert (err[rung] <= a[rung] / 3).all()
            assert (err[low] <= a[low]).all()
            assert (q[a < 2.0 ** (grid.n2 - 1)] == 0).all()
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{elapsed:.2f}s"
        assert elapsed < 5


def test_criterion_02_gradient_oracle():
    with criterion(2, "finite-difference gradient oracle") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        worst = {}
        for kind in ("Dense", "Conv2D", "MaxPool2D", "ReLU"):
            worst[kind] = max(finite_difference_check(*random_instance(kind, rng))
                              for _ in range(20))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max rel err {max(worst.values()):.1e}, {elapsed:.1f}s"
        assert max(worst.values()) <= 1e-5
        assert elapsed < 30


def test_criterion_04_losslessness(regression):
    with criterion(4, "desk-scale losslessness trend") as info:
        base = regression["base"]
        parts, ok = [f"base {100 * base:.1f}%"], True
        total = regression["baseline_seconds"]
        for bits, schedule, drop in LOSSLESS_TARGETS:
            run = inq_run(regression, bits, schedule)
            total += run["seconds"]
            good = run["top1"] >= base - drop / 100 - 1e-12
            ok &= good
            parts.append(f"b={bits} {100 * run['top1']:.1f}%{'' if good else ' (low)'}")
        parts.append(f"{total / 60:.1f} min")
        info["detail"] = ", ".join(parts)
        assert ok
        assert total <= 30 * 60


def test_criterion_03_frozen_immutability(regression):
    with criterion(3, "frozen weights bitwise invariant") as info:
        checks = mismatches = 0
        for bits, schedule, _ in LOSSLESS_TARGETS:
            monitor = inq_run(regression, bits, schedule)["monitor"]
            checks += monitor.checks
            mismatches += monitor.mismatches
        info["detail"] = f"{checks} checksums, {mismatches} mismatches"
        assert checks > 0 and mismatches == 0


def test_criterion_05_strategy_ordering(regression):
    with criterion(5, "pruning partition >= random partition at b=5") as info:
        pruning = [inq_run(regression, 5, "resnet18-5bit", "pruning", s)["top1"]
                   for s in range(3)]
        rand = [inq_run(regression, 5, "resnet18-5bit", "random", s)["top1"] for s in range(3)]
        info["detail"] = f"pruning {100 * np.mean(pruning):.2f}%, random {100 * np.mean(rand):.2f}%"
        assert np.mean(pruning) >= np.mean(rand)


def test_criterion_06_one_shot(regression):
    with criterion(6, "one-shot <= incremental") as info:
        parts, ok = [], True
        for bits, schedule, _ in LOSSLESS_TARGETS:
            shot = evaluate(one_shot(regression["net"], bits).to_network(),
                            regression["test"])["top1"]
            inc = inq_run(regression, bits, schedule)["top1"]
            ok &= shot <= inc
            parts.append(f"b={bits} {100 * shot:.1f}% vs {100 * inc:.1f}%")
        info["detail"] = ", ".join(parts)
        assert ok


def test_criterion_07_codec():
    with criterion(7, "codec round trips and size formula") as info:
        cases = 0
        for b in (2, 3):
            for n1 in (-6, -1, 0, 3):
                grid = QuantGrid(b, n1)
                for length in range(1, 5):
                    for combo in itertools.product(grid.levels.tolist(), repeat=length):
                        w = np.array(combo)
                        stream, nbits = encode_layer(w, grid)
                        z = int((w == 0).sum())
                        assert nbits == z + (w.size - z) * b == encoded_bits(w, b)
                        assert decode_layer(stream, grid, length).tobytes() == w.tobytes()
                        cases += 1
        rng = np.random.default_rng(5)
        for trial in range(20):
            grid = QuantGrid(5, int(rng.integers(-10, 4)))
            w = random_grid_tensor(rng, grid, (10_000,), zero_frac=float(rng.uniform(0, 0.9)))
            stream, nbits = encode_layer(w, grid)
            z = int((w == 0).sum())
            assert nbits == z + (w.size - z) * 5
            assert len(stream) == -(-nbits // 8)
            assert decode_layer(stream, grid, w.size).tobytes() == w.tobytes()
            cases += 1
        for trial in range(20):
            model, _ = random_quantized_model(rng)
            blob = dumps_model(model)
            assert dumps_model(loads_model(blob)) == blob
        info["detail"] = f"{cases} round trips, 20 re-saves"


def test_criterion_08_shift_add():
    with criterion(8, "shift-add forward bit-identical") as info:
        rng = np.random.default_rng(8)
        for _ in range(100):
            model, x = random_quantized_model(rng)
            ref = forward(model.to_network(), x)
            assert shift_forward(to_shift_form(model), x).tobytes() == ref.tobytes()
        info["detail"] = "100 models"


def test_criterion_09_analysis(regression):
    with criterion(9, "distribution, bit-width and compression checks") as info:
        widths = []
        for bits, schedule, _ in LOSSLESS_TARGETS:
            model = inq_run(regression, bits, schedule)["model"]
            table = distribution(model)
            for pct in table.percentages():
                assert abs(sum(pct.values()) - 100) <= 0.01
            for q, w in zip(model.qlayers, table.bitwidths()):
                assert w == effective_bitwidth(q.weights()) <= bits
            widths.append(f"b={bits}:{'/'.join(map(str, table.bitwidths()))}")

        def report(weights):
            w = np.array(weights).reshape(1, -1)
            net = Network((1,), [Dense(1, w.shape[1])], params=[[w, np.zeros(w.shape[1])]])
            return compression_report(QuantizedModel.from_network(net, [QuantGrid(5, -1)]))

        no_zero = report([0.5, -0.25, 0.125, -2.0 ** -8])
        assert no_zero.total["fixed_ratio"] == 32 / 5 == 6.4
        assert no_zero.total["ratio"] == 6.4
        assert report([0.5, 0.0, -0.25, 0.0]).total["ratio"] == 32 / 3
        info["detail"] = "effective bit-widths " + " ".join(widths)


def test_criterion_10_determinism(tmp_path, capsys):
    with criterion(10, "end-to-end determinism") as info:
        # full default data and network, shortened training
        args = ["--seed", "3", "--set", "epochs=3", "--set", "lr_schedule=2:0.1",
                "--epochs-per-step", "1", "--bits", "4"]
        # the output path is part of the recorded config, so both runs share it
        out = tmp_path / "run"
        common = [*args, "--out", str(out)]
        outputs = []
        for _ in range(2):
            assert main(["train", *common]) == 0
            assert main(["inq", *common, "--baseline", str(out / "baseline.inqm")]) == 0
            assert main(["stats", *common, "--model", str(out / "inq_b4.inqm"), "--csv"]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            shutil.rmtree(out)
        capsys.readouterr()
        info["detail"] = f"{len(outputs[0])} files compared"
        assert outputs[0].keys() == outputs[1].keys()
        assert {"baseline.inqm", "inq_b4.inqm", "train_metrics.jsonl",
                "inq_b4_metrics.jsonl"} <= outputs[0].keys()
        for name in outputs[0]:
            assert outputs[0][name] == outputs[1][name], name
