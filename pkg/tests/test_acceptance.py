"""Acceptance suite: one reported PASS/FAIL line per criterion."""
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np

from singhead import cvae, dataset, generation, headfit, metrics, synthetic, training
from singhead.audio import AudioClip, write_wav
from singhead.cli import main
from singhead.cvae import ModelConfig, ppe
from singhead.losses import (
    LossWeights, loss_kl, loss_kl_grad, loss_reconstruction, loss_reconstruction_grad,
    loss_velocity, loss_velocity_grad)
from singhead.motion_core import MotionSequence, ShapeParams


def central_diff(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_criterion_01_loss_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    m = rng.normal(size=(30, 100))
    offset = rng.normal(size=(1, 100))
    checks = [
        loss_reconstruction(m, m) == 0.0,
        loss_velocity(m + offset, m) < 1e-24,
        loss_velocity(m, m) == 0.0,
        loss_kl(np.zeros(16), np.ones(16)) == 0.0,
        abs(loss_kl(np.array([1.0]), np.array([1.0])) - 0.5) <= 1e-9,
    ]
    elapsed = time.perf_counter() - t0
    report(1, "loss identities", all(checks) and elapsed < 1.0, f"{sum(checks)}/5 identities, {elapsed:.3f}s")


def test_criterion_02_gradient_checks(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    model = headfit.make_toy_model()
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(20):
        p, g = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        note("rec", rel_err(loss_reconstruction_grad(p, g), central_diff(lambda x: loss_reconstruction(x, g), p, 1e-6)))
        note("vel", rel_err(loss_velocity_grad(p, g), central_diff(lambda x: loss_velocity(x, g), p, 1e-6)))
        mu, sig = rng.normal(size=8), np.exp(rng.normal(size=8) * 0.5)
        gmu, gsig = loss_kl_grad(mu, sig)
        analytic = np.concatenate([gmu, gsig])
        fd = np.concatenate([central_diff(lambda x: loss_kl(x, sig), mu, 1e-6),
                             central_diff(lambda s: loss_kl(mu, s), sig, 1e-6)])
        note("kl", rel_err(analytic, fd))

        beta, X, obs = synthetic.make_landmark_sequence(model, T=3, seed=int(rng.integers(1 << 30)))
        Xp = X + rng.normal(size=X.shape) * np.r_[np.full(50, 0.1), np.full(6, 0.05), 10.0, 1.0, 1.0]
        _, grad = headfit.sequence_objective(model, beta, obs, Xp, lambda_s=0.1)
        fd = central_diff(lambda x: headfit.sequence_objective(model, beta, obs, x, 0.1, False)[0], Xp, 1e-6)
        note("sequence", rel_err(grad, fd))

        bt = rng.normal(size=100)
        verts = model.template + model.shape_basis @ bt
        scan = headfit.Scan(verts[rng.choice(model.n_vertices, 300, replace=False)], verts[model.landmarks])
        b = bt + rng.normal(size=100) * 0.05
        _, grad = headfit.shape_objective(model, scan, b)
        fd = central_diff(lambda x: headfit.shape_objective(model, scan, x, need_grad=False)[0], b, 1e-7)
        note("shape", rel_err(grad, fd))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    report(2, "analytic vs finite-difference gradients", max(worst.values()) < 1e-4 and elapsed < 60, detail)


def test_criterion_03_metric_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, ordered, single = 0.0, True, True
    for _ in range(200):
        n, T, D = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        gt = rng.normal(size=(T, D))
        samples = [rng.normal(size=(T, D)) for _ in range(n)]
        dists = []
        for s in samples:
            acc = 0.0
            for t in range(T):
                for k in range(D):
                    acc += (s[t, k] - gt[t, k]) ** 2
            dists.append(acc / (T * D))
        worst = max(worst, abs(metrics.min_dist(samples, gt) - min(dists)),
                    abs(metrics.mean_dist(samples, gt) - sum(dists) / n))
        ordered &= metrics.min_dist(samples, gt) <= metrics.mean_dist(samples, gt)
        if n >= 2:
            pair_sum, pairs = 0.0, 0
            for i in range(n):
                for j in range(n):
                    if i != j:
                        pair_sum += np.mean((samples[i] - samples[j]) ** 2)
                        pairs += 1
            worst = max(worst, abs(metrics.apd(samples) - pair_sum / pairs))
        else:
            single &= metrics.min_dist(samples, gt) == metrics.mean_dist(samples, gt)
        F = int(rng.integers(1, 4))
        pred, ref = rng.normal(size=(F, 68, 2)) * 10, rng.normal(size=(F, 68, 2)) * 10
        acc = 0.0
        for f in range(F):
            for k in range(48, 68):
                acc += math.sqrt((pred[f, k, 0] - ref[f, k, 0]) ** 2 + (pred[f, k, 1] - ref[f, k, 1]) ** 2)
        worst = max(worst, abs(metrics.lmd(pred, ref) - acc / (F * 20)))
    one = [rng.normal(size=(4, 100))]
    gt = rng.normal(size=(4, 100))
    single &= metrics.min_dist(one, gt) == metrics.mean_dist(one, gt)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and ordered and single and elapsed < 60
    report(3, "metrics match brute-force oracles", ok, f"max abs diff {worst:.1e}, {elapsed:.1f}s")


def test_criterion_04_sampling_structure(report, trained_toy, toy_data):
    ex = toy_data[2]
    audio, shape = ex.audio.astype(np.float64), ShapeParams(ex.shape)
    samples = generation.generate(trained_toy, audio, shape, n=30, seed=17)
    mins = [metrics.min_dist(samples[:n], ex.motion) for n in (1, 5, 10, 30)]
    nested = generation.generate(trained_toy, audio, shape, n=10, seed=17)
    nests = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(nested, samples))
    z = np.random.default_rng(0).normal(size=trained_toy.cfg.d)
    forced = metrics.apd(generation.generate(trained_toy, audio, shape, n=5, seed=17, z=z))
    diverse = metrics.apd(samples[:5])
    ok = nests and all(b <= a for a, b in zip(mins, mins[1:])) and forced == 0.0 and diverse > 0.0
    detail = "MinDist " + "/".join(f"{v:.4g}" for v in mins) + f", APD forced {forced} vs free {diverse:.3g}"
    report(4, "sampling structure", ok, detail)


def test_criterion_05_mask_causality(report):
    t0 = time.perf_counter()
    cfg = ModelConfig(d=32, n_layers_enc=1, n_layers_dec=1, n_heads=4, d_a=16, ppe_period=30, mask_band=0)
    model = training.build_model(cfg, seed=5).eval()
    rng = np.random.default_rng(5)
    T = 40
    audio = rng.normal(size=(T, 16))
    shape, z = ShapeParams(rng.normal(size=100)), rng.normal(size=32)
    base = cvae.decode(model, z, shape, audio).data
    ok = True
    for j in range(T):
        pert = audio.copy()
        pert[j] += rng.normal(size=16)
        out = cvae.decode(model, z, shape, pert).data
        changed = np.flatnonzero((out != base).any(axis=1)).tolist()
        ok &= changed == [j]
    elapsed = time.perf_counter() - t0
    report(5, "diagonal mask causality", ok and elapsed < 10, f"T={T}, {elapsed:.2f}s")


def test_criterion_06_ppe_periodicity(report):
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(10):
        d, period = int(rng.integers(1, 300)), int(rng.integers(1, 60))
        T = period * int(rng.integers(2, 6)) + int(rng.integers(0, period))
        pe = ppe(T, d, period)
        ok &= all(pe[t].tobytes() == pe[t + period].tobytes() for t in range(T - period))
    report(6, "periodic positional encoding repeats exactly", ok, "10 random configs")


def test_criterion_07_overfit(report):
    t0 = time.perf_counter()
    data = synthetic.make_dataset(5, T=60, d_a=80, seed=7)
    cfg = ModelConfig(d=64, n_layers_enc=2, n_layers_dec=2, n_heads=4, d_a=80)
    model = training.build_model(cfg, seed=0)
    tcfg = training.TrainConfig(epochs=2000, batch_size=5, lr=1e-3, seed=0,
                                weights=LossWeights(1.0, 1.0, 1e-4))
    result = training.train(model, data, tcfg)
    hist = [row["L_re"] for row in result.step_history]
    ratio = hist[0] / hist[-1]
    elapsed = time.perf_counter() - t0
    report(7, "overfit 5 synthetic sequences", len(hist) == 2000 and ratio >= 100 and elapsed < 600,
           f"L_re {hist[0]:.3g} -> {hist[-1]:.3g}, {ratio:.0f}x in {len(hist)} steps, {elapsed:.0f}s")


def test_criterion_08_headfit_roundtrips(report):
    t0 = time.perf_counter()
    model = headfit.make_toy_model()
    rng = np.random.default_rng(8)
    beta_true = rng.normal(size=100)
    beta_true /= np.linalg.norm(beta_true)
    verts = headfit.forward(model, beta_true, np.zeros(50), np.zeros(50))
    shape_fit = headfit.fit_shape(model, headfit.Scan(verts, verts[model.landmarks]))
    shape_err = float(np.linalg.norm(shape_fit.beta - beta_true))

    beta, X, obs = synthetic.make_landmark_sequence(model, T=60, seed=8)
    seq_fit = headfit.fit_sequence(model, beta, obs)
    elapsed = time.perf_counter() - t0
    ok = shape_err < 1e-2 and seq_fit.rmse < 0.5 and elapsed < 300
    report(8, "headfit round-trips", ok,
           f"|beta - beta*| {shape_err:.2e}, reprojection RMSE {seq_fit.rmse:.3f}px, {elapsed:.1f}s")


def test_criterion_09_protocol_arithmetic(report):
    counts = dataset.split_counts(12196)
    train, val, test = dataset.split(list(range(12196)), seed=0)
    rng = np.random.default_rng(9)
    matches = 0
    for inv in range(100):
        durations = rng.uniform(0.1, 300.0, size=int(rng.integers(1, 20)))
        records = [dataset.SequenceRecord(f"i{inv}r{k}", float(d)) for k, d in enumerate(durations)]
        expected = []
        for rec in records:
            start = 0.0
            while start + 8.0 <= rec.duration + 1e-9:
                expected.append((rec.id, round(start * 30), round((start + 8.0) * 30)))
                start += 8.0
        got = [(c.record_id, c.start_frame, c.end_frame) for c in dataset.segment(records)]
        matches += got == expected
    ok = counts == (9758, 609, 1829) and (len(train), len(val), len(test)) == counts and matches == 100
    report(9, "protocol arithmetic", ok, f"split {counts}, segment oracle {matches}/100")


def test_criterion_10_fid_ssim_sanity(report):
    rng = np.random.default_rng(10)
    a = rng.normal(size=(500, 6))
    b = rng.normal(size=(400, 6)) * 1.5 + 0.3
    same = metrics.fid(a, a)
    x = rng.normal(size=1000)
    one_d = metrics.fid(x, x + 1.0)
    img = rng.uniform(0, 255, size=(48, 48))
    other = np.clip(img + rng.normal(scale=20, size=img.shape), 0, 255)
    self_ssim = metrics.ssim(img, img)
    fid_sym = abs(metrics.fid(a, b) - metrics.fid(b, a)) <= 1e-9 * metrics.fid(a, b)
    ssim_sym = abs(metrics.ssim(img, other) - metrics.ssim(other, img)) <= 1e-12
    ok = same < 1e-6 and abs(one_d - 1.0) <= 1e-6 and abs(self_ssim - 1.0) <= 1e-9 and fid_sym and ssim_sym
    report(10, "FID / SSIM sanity", ok,
           f"fid(a,a) {same:.1e}, 1-D {one_d:.9f}, ssim(x,x) {self_ssim:.12f}, symmetric {fid_sym and ssim_sym}")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_11_determinism(report, tmp_path):
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    t = np.arange(24000) / 16000
    write_wav(inputs / "song.wav", AudioClip(0.3 * np.sin(2 * np.pi * 220 * t) * np.sin(2 * np.pi * 1.5 * t)))
    (inputs / "inv.json").write_text(json.dumps([{"id": "a", "duration": 33.0}, {"id": "b", "duration": 17.5}]))
    (inputs / "small.ini").write_text("[model]\nd = 16\nn_layers_enc = 1\nn_layers_dec = 1\nn_heads = 2\n"
                                      "[train]\nepochs = 3\nbatch_size = 2\nlr = 0.001\n")
    rng = np.random.default_rng(11)
    face = rng.uniform(20, 80, size=(68, 2))
    face[0], face[16], face[8], face[19] = (0, 50), (100, 50), (50, 100), (50, 0)
    lm = np.stack([face + [200 + 3 * k, 150] for k in range(12)])
    (inputs / "track.json").write_text(json.dumps({"landmarks": lm.tolist(), "frame_size": [640, 480]}))
    model = headfit.make_toy_model()
    beta, _, obs = synthetic.make_landmark_sequence(model, T=8, seed=11)
    (inputs / "tracks.json").write_text(json.dumps({"landmarks": obs.tolist(), "beta": beta.tolist()}))
    gt = MotionSequence(rng.normal(size=(10, 100)))
    from singhead.motion_core import save_motion
    for name in ("gt", "s0", "s1"):
        save_motion(MotionSequence(gt.data + (0 if name == "gt" else rng.normal(size=(10, 100)))),
                    ShapeParams.zeros(), inputs / f"{name}.motion")

    def run_all(out):
        out.mkdir()
        i = str(inputs)
        cmds = [
            ["features", "--audio", f"{i}/song.wav", "--out", f"{out}/feat.bin"],
            ["segment", "--inventory", f"{i}/inv.json", "--out", f"{out}/clips.json"],
            ["split", "--seed", "4", "--clips", f"{out}/clips.json", "--out", f"{out}/split.json"],
            ["cropplan", "--track", f"{i}/track.json", "--out", f"{out}/plan.json"],
            ["train", "--seed", "2", "--out", f"{out}/run", "--config", f"{i}/small.ini", "--synthetic", "3",
             "--synthetic-frames", "10", "--checkpoint-every", "1"],
            ["generate", "--checkpoint", f"{out}/run/model.ckpt", "--seed", "9", "--samples", "4",
             "--audio", f"{i}/song.wav", "--out", f"{out}/gen"],
            ["fit", "--tracks", f"{i}/tracks.json", "--out", f"{out}/fit.motion"],
            ["evaluate", "--mode", "3d", "--gt", f"{i}/gt.motion", "--samples", f"{i}/s0.motion",
             f"{i}/s1.motion", "--out", f"{out}/scores.csv"],
        ]
        codes = [main(c) for c in cmds]
        # generate's manifest records the checkpoint path, which differs per run
        manifest = out / "gen" / "manifest.json"
        m = json.loads(manifest.read_text())
        m["config"]["checkpoint"] = "<ckpt>"
        manifest.write_text(json.dumps(m, sort_keys=True))
        return codes

    codes_a, codes_b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    same = _digest(tmp_path / "a") == _digest(tmp_path / "b")

    resumed = tmp_path / "resumed"
    code_r = main(["train", "--seed", "2", "--out", str(resumed), "--config", str(inputs / "small.ini"),
                   "--synthetic", "3", "--synthetic-frames", "10", "--checkpoint-every", "1",
                   "--resume", str(tmp_path / "a" / "run" / "checkpoints" / "epoch_000001.ckpt")])
    resume_ok = (resumed / "model.ckpt").read_bytes() == (tmp_path / "a" / "run" / "model.ckpt").read_bytes()
    ok = codes_a == codes_b == [0] * 8 and code_r == 0 and same and resume_ok
    report(11, "CLI determinism and exact resume", ok,
           f"8 commands byte-identical {same}, resume identical {resume_ok}")
