"""Smoke test for the hgwm_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/hgwm-py
then run:
    python python/smoke_test.py
"""

import math
import os
import tempfile

import hgwm_py as hg


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)


def scene_and_render():
    g = hg.Gaussian(
        mu=[0.0, 0.0, 0.3],
        color=[0.9, 0.2, 0.1],
        rot=[1.0, 0.0, 0.0, 0.0],
        scale=[0.08, 0.08, 0.08],
        opacity=0.9,
        logits=[0.0, 0.0, 10.0],
    )
    scene = hg.GaussianSet([g])
    check(len(scene) == 1, "set length")
    cams = hg.ring_rig(3, 32, 32)
    check(len(cams) == 3 and cams[0].width == 32, "ring rig")
    fast = hg.render(scene, cams[0])
    slow = hg.render(scene, cams[0], brute_force=True)
    worst = max(abs(a - b) for a, b in zip(fast.rgb, slow.rgb))
    check(worst < 1e-5, f"tiled vs brute force {worst}")
    check(len(fast.rgb) == 32 * 32 * 3, "rgb size")
    labels = fast.labels()
    check(2 in labels and set(labels) <= {2, 255}, f"labels {set(labels)}")
    uvd = cams[0].project([0.0, 0.0, 0.3])
    check(uvd is not None and uvd[2] > 0, "projection")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scene.bgs")
        scene.write(path)
        back = hg.GaussianSet.read(path)
        check(back[0].mu == g.mu and back[0].opacity == g.opacity, "scene round trip")
    print(f"render ok, {sum(l == 2 for l in labels)} target pixels")


def actions_and_losses():
    left = hg.ArmAction([10, 20, 30], [0, 36, 71], open=True)
    right = hg.ArmAction([50, 50, 50], [1, 2, 3], open=False, collide=True)
    a = hg.BimanualAction(left, right, role="left-stabilizes")
    check(a.left == left and a.role == "left-stabilizes", "bimanual action")
    try:
        hg.ArmAction([100, 0, 0], [0, 0, 0], open=True)
        raise AssertionError("out-of-range bin accepted")
    except hg.HgwmError:
        pass
    # uniform logits: each head contributes ln(K)
    loss = hg.loss_bc([0.0] * 1040, a)
    want = 2 * (3 * math.log(100) + 3 * math.log(72) + 2 * math.log(2))
    check(abs(loss - want) < 1e-9, f"bc loss {loss} vs {want}")
    print(f"actions ok, uniform bc loss {loss:.4f}")


def pipeline():
    small = {
        "grid": "10",
        "feat": "6",
        "conv_hidden": "4",
        "mlp_hidden": "8",
        "latents": "2",
        "attn_dim": "4",
        "attn_layers": "1",
        "pool": "2",
        "image_size": "16",
        "batch": "2",
    }
    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "data")
        lengths = hg.generate_demos("push-box", 1, data, seed=2, size=16)
        check(lengths == [7], f"episode lengths {lengths}")
        summary = hg.train(data, os.path.join(d, "run"), steps=3, config=small)
        check(summary["steps_done"] == 3, "steps done")
        ckpt = summary["checkpoints"][-1]
        report = hg.evaluate(ckpt, data)
        check(0.0 <= float(report["mask_accuracy"]) <= 1.0, "mask accuracy range")
        model = hg.Model.load(ckpt)
        demo = os.path.join(data, "demos", "demo_0000")
        current, future = model.predict(demo, 0)
        check(len(current) == 3 and len(future) == 3, "views")
        left, right = model.decode(demo, 0)
        check(0 <= left.trans_bin[0] < 100, "decoded bin")
        fresh = hg.Model(seed=1, config=small)
        check(fresh.parameter_count == model.parameter_count, "parameter count")
        print(f"pipeline ok, psnr {float(report['psnr']):.2f} dB, {model.parameter_count} parameters")


if __name__ == "__main__":
    scene_and_render()
    actions_and_losses()
    pipeline()
    print("smoke test passed")
