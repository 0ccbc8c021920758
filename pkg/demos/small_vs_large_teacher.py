"""Train a small and a large teacher, compare their soft labels, and distill
a student from each on 50 examples per class.

Run from the repository root:  python demos/small_vs_large_teacher.py
Takes a few minutes on one CPU core.
"""
import numpy as np

from kdlab.analysis import classify_nature, entropy_curve, variance_in_response
from kdlab.data import load_mnist_dir, select_transfer_set
from kdlab.presets import DESK_TRAINING, preset
from kdlab.train import DistillConfig, TrainConfig, distill_student, evaluate, generate_soft_labels, train_teacher

ROOT = "data/mnist-desk"
T = 9.0

train = load_mnist_dir(ROOT, "train")
test = load_mnist_dir(ROOT, "test")

teachers = {}
for name in ("mnist-small-desk", "mnist-large-desk"):
    ckpt, _ = train_teacher(preset(name), train, TrainConfig(**DESK_TRAINING[name]))
    teachers[name] = ckpt
    print(f"{name}: test accuracy {evaluate(ckpt, test)[0]:.4f}")

print("\nmean soft-label entropy (nats) by temperature")
for name, teacher in teachers.items():
    curve = entropy_curve(teacher, test)
    print(f"  {name:18s}", "  ".join(f"T={t:g}: {h:.3f}" for t, h in zip(curve.temperatures, curve.mean)))

student_train = TrainConfig(batch_size=32, epochs=20, entropy_probe=0)
for name, teacher in teachers.items():
    ts = select_transfer_set(train, 50, "entropy_ranked", teacher=teacher, T_sel=T)
    soft = generate_soft_labels(teacher, ts, T)
    nature = classify_nature(soft.probs)
    spread = variance_in_response(soft).per_class
    student, _ = distill_student(preset("mnist-general-desk"), ts, soft, DistillConfig(0.99, T, train=student_train))
    print(f"\n{name} as teacher, {len(ts)} transfer examples")
    print(f"  soft labels look {nature.regime} (score {nature.score:.4f})")
    print(f"  mean similarity variance {np.mean([v['similarity_variance'] for v in spread.values()]):.3e}")
    print(f"  student test accuracy {evaluate(student, test)[0]:.4f}")
