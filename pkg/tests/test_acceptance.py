"""Acceptance criteria, each checked at its stated tolerance.

Every test records a PASS/FAIL line through the ``record`` fixture; the
lines are printed in the terminal summary. The end-to-end criteria share one
seeded pipeline run through the command-line interface.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from oracles import masked_dense_oracle, random_matrix, scalar_quantize
from ternvpr.cli import main
from ternvpr.config import ModelConfig, TrainConfig
from ternvpr.gate import ScheduleConfig, schedule_max_sparsity, topk_mask
from ternvpr.kernels import OpsCounter, count_model_ops, sparse_ternary_matmul
from ternvpr.model import _LinearCache, forward, init_model
from ternvpr.modelio import DTYPE_TERNARY, load_model, read_records
from ternvpr.retrieval import ImageSet, load_dataset
from ternvpr.tensor import Prng, randn
from ternvpr.ternary import TernaryTensor, dequantize, quantize_ternary
from ternvpr.train import _linear_backward, default_freeze_mask, train_distill, train_finetune

LEVELS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
TERNARY = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")


def _run(*argv):
    rc = main([str(a) for a in argv])
    assert rc == 0, f"command failed with exit {rc}: {' '.join(map(str, argv))}"


def _write(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Seeded desk-scale run: teacher, 200-step distillation, fine-tune, sweep."""
    d = tmp_path_factory.mktemp("acceptance")
    train_cfg = _write(d / "train.json", {"schema_version": 1,
                                         "dataset": {"num_places": 100, "queries_per_place": 7, "seed": 101}})
    eval_cfg = _write(d / "eval.json", {"schema_version": 1, "dataset": {"num_places": 50, "seed": 7}})
    _run("gen-data", "--config", train_cfg, "--out", d / "train")
    _run("gen-data", "--config", eval_cfg, "--out", d / "eval")
    _run("pretrain-teacher", "--data", d / "train", "--out", d / "teacher.bin", "--seed", 1)
    _run("distill", "--teacher", d / "teacher.bin", "--data", d / "train", "--out", d / "student.bin",
         "--curve", d / "distill.csv", "--seed", 1)
    _run("finetune", "--model", d / "student.bin", "--data", d / "train", "--out", d / "tuned.bin", "--seed", 1)
    _run("sweep", "--model", d / "tuned.bin", "--data", d / "eval", "--out", d / "sweep.csv")
    return d


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- 1 ---------------------------------------------------------------------

def test_ac1_quantizer_oracle(record):
    mats = [random_matrix(seed) for seed in range(1000)]
    start = time.perf_counter()
    quantized = [quantize_ternary(w) for w in mats]
    elapsed = time.perf_counter() - start
    mismatches = 0
    for w, t in zip(mats, quantized):
        codes, gamma = scalar_quantize(w.tolist())
        if t.gamma != gamma or t.code_matrix().ravel().tolist() != codes:
            mismatches += 1
    ok = record("AC1", mismatches == 0 and elapsed < 5.0,
                f"{mismatches}/1000 mismatches, quantizer {elapsed:.2f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_ac2_idempotence(record):
    worst, code_failures = 0.0, 0
    for seed in range(1000):
        t = quantize_ternary(random_matrix(10_000 + seed))
        codes = t.code_matrix()
        frac = np.count_nonzero(codes) / codes.size
        t2 = quantize_ternary(dequantize(t))
        code_failures += not np.array_equal(t2.code_matrix(), codes)
        worst = max(worst, abs(t2.gamma - t.gamma * frac) / (t.gamma * frac))
    ok = record("AC2", code_failures == 0 and worst <= 1e-6,
                f"{code_failures} code mismatches, worst gamma rel err {worst:.2e}")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_ac3_kernel_oracle(record):
    p = Prng(2024)
    worst = 0.0
    for i in range(1000):
        n, d, m = (int(v) for v in p.integers(1, 33, 3))
        s = LEVELS[i % len(LEVELS)]
        x = randn(p, (n, d))
        w = quantize_ternary(randn(p, (m, d)))
        mask = topk_mask(x, s)
        y = sparse_ternary_matmul(x, mask, w).astype(np.float64)
        ref = masked_dense_oracle(x, mask.dense(), w.code_matrix(), w.gamma)
        scale = np.abs(ref).max()
        if scale > 0:
            worst = max(worst, float(np.abs(y - ref).max() / scale))
        elif np.any(y != 0):
            worst = math.inf
    ok = record("AC3", worst <= 1e-5, f"worst rel err {worst:.2e} over 1000 instances")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_ac4_ops_accounting(record):
    cfg = ModelConfig()
    model = init_model(cfg, Prng(0))
    image = randn(Prng(1), cfg.image)
    per_level = {}
    mismatched = []
    for s in LEVELS:
        c = OpsCounter()
        forward(model, image, s, c)
        per_level[s] = dict(c.by_layer)
        if c.macs != count_model_ops(cfg, s):
            mismatched.append(s)
    n = cfg.tokens
    slack_ok = True
    for i in range(cfg.depth):
        for layer in TERNARY:
            name = f"blocks.{i}.{layer}"
            m = model.params[name + ".weight"].shape[0]
            if per_level[0.6][name] > 0.6 * per_level[0.0][name] + n * m:
                slack_ok = False
    ternary_macs = {s: sum(v for k, v in per_level[s].items() if k.endswith(TERNARY)) for s in (0.0, 0.6)}
    ratio = ternary_macs[0.6] / ternary_macs[0.0]
    total_ratio = count_model_ops(cfg, 0.6) / count_model_ops(cfg, 0.0)
    ok = record("AC4", slack_ok and not mismatched,
                f"ternary MACs at s=0.6 = {ratio:.4f} x dense, whole model {total_ratio:.4f} x; "
                f"counter mismatches at {mismatched or 'no levels'}")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_ac5_memory(record, pipeline):
    student, teacher = pipeline / "student.bin", pipeline / "teacher.bin"
    ratio = teacher.stat().st_size / student.stat().st_size
    _, records = read_records(student.read_bytes())
    bad = [r.name for r in records if r.dtype == DTYPE_TERNARY
           and r.payload_bytes != math.ceil(r.shape[0] * r.shape[1] / 4) + 4]
    n_ternary = sum(r.dtype == DTYPE_TERNARY for r in records)
    ok = record("AC5", ratio >= 5.0 and not bad and n_ternary == 16,
                f"file ratio {ratio:.3f}, {n_ternary} ternary tensors, {len(bad)} payload mismatches")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_ac6_gradient_suite(record):
    start = time.perf_counter()
    worst = {name: max(check(seed) for seed in range(20)) for name, check in gradcheck.SUBPATHS.items()}
    worst["model (teacher)"] = max(gradcheck.check_model_backward(seed) for seed in range(20))
    worst["model (student, s=0.4)"] = max(gradcheck.check_model_backward(seed, True, 0.4) for seed in range(20))

    nonzero_masked = 0
    r = np.random.default_rng(6)
    for i in range(20):
        x = r.normal(size=(17, 32))
        mask = topk_mask(x, LEVELS[1 + i % 6])
        dx = _linear_backward(r.normal(size=(16, 32)), r.normal(size=(17, 16)), _LinearCache(x, mask), {}, "l")
        nonzero_masked += int(np.count_nonzero(dx[~mask.dense()]))
    elapsed = time.perf_counter() - start
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    ok = record("AC6", max(worst.values()) <= 1e-3 and nonzero_masked == 0 and elapsed < 60,
                f"worst rel err: {summary}; masked grads nonzero: {nonzero_masked}; {elapsed:.1f}s")
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_ac7_distillation(record, pipeline):
    losses = [float(row["loss"]) for row in _read_csv(pipeline / "distill.csv")]
    first, last = np.mean(losses[:20]), np.mean(losses[-20:])

    teacher = load_model(pipeline / "teacher.bin")
    twin = load_model(pipeline / "teacher.bin")
    ds = load_dataset(pipeline / "train")
    twin_losses = [r.loss for r in train_distill(twin, teacher, ImageSet.concat(ds.references, ds.queries),
                                                TrainConfig(steps=20), seed=1)]
    ok = record("AC7", len(losses) == 200 and last <= 0.5 * first and all(v == 0.0 for v in twin_losses),
                f"first-20 mean {first:.4g}, last-20 mean {last:.4g} (ratio {last / first:.3f}); "
                f"twin max loss {max(twin_losses)}")
    assert ok


# -- 8 ---------------------------------------------------------------------

def test_ac8_finetune_contracts(record, pipeline):
    model = load_model(pipeline / "student.bin")
    mask = default_freeze_mask(model)
    expected = {"norm.weight", "norm.bias"} | {n for n in model.names() if n.startswith(("blocks.2.", "blocks.3."))}

    def snapshot():
        out = {}
        for name, p in model.params.items():
            out[name] = (p.codes, p.gamma) if isinstance(p, TernaryTensor) else p.tobytes()
        return out

    before = snapshot()
    ds = load_dataset(pipeline / "train")
    train_finetune(model, ImageSet.concat(ds.references, ds.queries), TrainConfig(steps=100, learning_rate=5e-4),
                   mask, seed=8)
    after = snapshot()
    changed = {n for n in before if before[n] != after[n]}
    frozen_changed = changed - mask.trainable
    ok = record("AC8", mask.trainable == expected and not frozen_changed,
                f"mask has {len(mask.trainable)} tensors, {len(changed)} changed, "
                f"{len(frozen_changed)} frozen tensors changed")
    assert ok


# -- 9 ---------------------------------------------------------------------

def test_ac9_end_to_end(record, pipeline):
    rows = _read_csv(pipeline / "sweep.csv")
    by_s = {float(r["sparsity"]): r for r in rows}
    r1 = {s: float(r["recall_at_1"]) for s, r in by_s.items()}
    macs = [int(r["macs_per_query"]) for r in rows]
    decreasing = all(a > b for a, b in zip(macs, macs[1:]))
    delta = r1[0.4] - r1[0.0]
    ok = record("AC9", r1[0.0] >= 10 * (1 / 50) and decreasing and len(rows) == 7,
                f"recall@1 {r1[0.0]:.2f} at s=0, {r1[0.6]:.2f} at s=0.6 (chance 0.02); "
                f"delta recall@1 s=0.4 vs s=0: {delta:+.2f}; macs strictly decreasing: {decreasing}")
    assert ok


# -- 10 --------------------------------------------------------------------

def _artifacts(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_ac10_determinism(record, pipeline, tmp_path, capsys):
    cfg = _write(tmp_path / "cfg.json", {
        "schema_version": 1, "seed": 5,
        "dataset": {"num_places": 12, "queries_per_place": 2},
        "train_teacher": {"steps": 15},
        "train_distill": {"steps": 15},
        "train_finetune": {"steps": 15},
    })
    runs, outputs = [], []
    for threads in (1, 4, 4):
        d = tmp_path / f"run{len(runs)}"
        t = ("--threads", threads)
        _run("gen-data", "--config", cfg, "--out", d / "data", *t)
        _run("pretrain-teacher", "--config", cfg, "--data", d / "data", "--out", d / "teacher.bin", *t)
        _run("distill", "--config", cfg, "--teacher", d / "teacher.bin", "--data", d / "data",
             "--out", d / "student.bin", "--save-state", *t)
        _run("finetune", "--config", cfg, "--model", d / "student.bin", "--data", d / "data",
             "--out", d / "tuned.bin", *t)
        _run("sweep", "--model", d / "tuned.bin", "--data", d / "data", "--out", d / "sweep.csv", *t)
        capsys.readouterr()
        _run("inspect", "--model", d / "tuned.bin", *t)
        outputs.append(capsys.readouterr().out.replace(str(d), "<run>"))
        runs.append(_artifacts(d))
    same_small = runs[0] == runs[1] == runs[2] and outputs[0] == outputs[1] == outputs[2]

    _run("sweep", "--model", pipeline / "tuned.bin", "--data", pipeline / "eval",
         "--out", tmp_path / "sweep4.csv", "--threads", 4)
    same_full = (tmp_path / "sweep4.csv").read_bytes() == (pipeline / "sweep.csv").read_bytes()
    ok = record("AC10", same_small and same_full,
                f"{len(runs[0])} artifacts identical across threads 1/4/4: {same_small}; "
                f"full sweep threads 1 vs 4 identical: {same_full}")
    assert ok


# -- 11 --------------------------------------------------------------------

def test_ac11_schedule_endpoints(record):
    results = []
    for total in (1, 7, 200, 1000):
        cfg = ScheduleConfig(0.10, 0.60, total)
        results.append((schedule_max_sparsity(0, cfg), schedule_max_sparsity(total, cfg)))
    ok = record("AC11", all(a == 0.10 and b == 0.60 for a, b in results),
                f"endpoints {sorted(set(results))}")
    assert ok
