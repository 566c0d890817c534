"""Smoke test for the handeye_py extension module.

Build and install first, e.g. `maturin develop --release -m crates/py/Cargo.toml`.
"""

import math
import sys

import handeye_py as he


def main() -> int:
    arm = he.Arm()
    assert abs(he.Arm.px_per_cm() - 0.42) < 1e-12

    scene = arm.campaign_task(1, 0)
    assert len(scene.q) == 3 and len(scene.target) == 2
    theta = arm.normalize_theta(scene)
    assert all(0.0 <= v <= 1.0 for v in theta)

    # the kinematic oracle never increases the distance
    d0 = arm.distance(scene)
    nxt = arm.step(scene, arm.guided_action(scene))
    assert arm.distance(nxt) <= d0 + 1e-12

    frame = arm.render(scene)
    pixels = frame.pixels()
    assert frame.shape == (84, 84) and len(pixels) == 84 * 84
    assert all(0.0 <= p <= 1.0 for p in pixels)

    perception = he.PerceptionNet(1)
    out = perception.perceive(frame)
    assert len(out) == 5 and all(0.0 < v < 1.0 for v in out)

    control = he.ControlNet(2)
    q = control.q_values(theta)
    assert len(q) == he.NUM_ACTIONS
    assert control.greedy_action(theta) == max(range(len(q)), key=lambda i: (q[i], -i))
    assert he.combined_q(perception, control, frame) == control.q_values(out)

    assert he.mix_gradients([1.0, 0.0], [0.0, 1.0], 0.8) == [0.800000011920929, 0.20000000298023224]
    assert he.mix_gradients([1.5], [2.5], 1.0) == [1.5]
    try:
        he.mix_gradients([1.0], [1.0, 2.0], 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")

    assert math.isclose(he.bellman_target(1.0, [0.0, 2.0], 0.9, False), 2.8)
    assert he.bellman_target(1.0, [0.0, 2.0], 0.9, True) == 1.0

    assert he.run_cli(["--help"]) == 0
    assert he.run_cli(["eval", "--variants", "best"]) == 1

    print("handeye_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
