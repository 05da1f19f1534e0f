"""
Counting operations and bytes
=============================

The closed-form MAC count of the whole model agrees with the counter that
runs inside a real forward pass, and the ternary student file is far smaller
than its full-precision twin.
"""

import tempfile
from pathlib import Path

from ternvpr import ModelConfig, OpsCounter, Prng, count_model_ops, forward, init_model, randn
from ternvpr.kernels import macs_to_tops
from ternvpr.modelio import save_model
from ternvpr.retrieval import memory_report

cfg = ModelConfig()
student = init_model(cfg, Prng(0))
image = randn(Prng(1), cfg.image)

print("sparsity   closed form   live counter   TOPs per image")
for s in (0.0, 0.2, 0.4, 0.6):
    counter = OpsCounter()
    forward(student, image, s, counter)
    print(f"{s:8.1f} {count_model_ops(cfg, s):13d} {counter.macs:14d} {macs_to_tops(counter.macs):16.3e}")

teacher = init_model(cfg.twin(quantized=False), Prng(0))
with tempfile.TemporaryDirectory() as tmp:
    s_path, t_path = Path(tmp, "student.bin"), Path(tmp, "teacher.bin")
    save_model(student, s_path)
    save_model(teacher, t_path)
    report = memory_report(s_path, t_path)
    print()
    print("\n".join(report.format().splitlines()[-8:]))
