"""Tune a PID controller, train a small policy and fly both on the aerobatic script.

Run with ``python3 demos/pid_vs_nn.py [total_steps]``. The default of 50k steps
finishes in a few seconds; use 200000 or more for a policy that tracks well.
"""
import sys

from ratelab.control import zn_tune_all
from ratelab.dynamics import AirframeModel
from ratelab.evaluation import aerobatic_script, compare
from ratelab.trainer import PpoConfig, train


def main(total_steps: int = 50_000):
    airframe = AirframeModel()
    gains, results = zn_tune_all(airframe)
    for axis, r in zip(("roll", "pitch", "yaw"), results):
        print(f"{axis:5s} K_u={r.k_u:.4g} T_u={r.t_u:.4g}s")

    run = train(0, ppo_config=PpoConfig(total_steps=total_steps), airframe=airframe)
    print(f"trained {run.total_steps} steps, final reward {run.final_window_mean():.3g}")

    result = compare(run.params, gains, aerobatic_script(), airframe)
    for label, rep in zip(result.labels, result.reports):
        per_axis = " ".join(f"{a}={m['mae']:.1f}" for a, m in rep.per_axis.items())
        print(f"{label:3s} MAE deg/s: {per_axis} average={rep.average['mae']:.1f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 50_000)
