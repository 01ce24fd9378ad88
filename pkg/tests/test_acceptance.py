"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the terminal summary."""

import math
import time

import numpy as np
import pytest

from layermix import ablation, cli
from layermix import displace as cgd
from layermix import losses
from layermix.grid import Axis
from layermix.losses import LossWeights, ScheduleConfig
from layermix.metrics import average_surface_distance, dice_score
from layermix.model import LOSSES, SegmentorParams, backward, forward
from layermix.shuffle import ShufflePlan, invert, recover_batch, sample_shuffle_matrix, shuffle_batch
from layermix.volume_file import HEADER, Kind, read_volume, write_volume


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@criterion(1, "shuffle round trip is voxel-exact on 1000 cases in under 1 s")
def test_c01_shuffle_round_trip():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(1000):
        axis = Axis(int(rng.integers(3)))
        p = int(rng.choice([1, 2, 3]))
        dims = [int(rng.integers(1, 4)) for _ in range(3)]
        dims[axis] = p * int(rng.integers(1, 4))
        batch = 2 * int(rng.integers(1, 4))
        cases.append((axis, p, rng.standard_normal((batch, *dims))))
    start = time.perf_counter()
    for axis, p, grids in cases:
        plan = ShufflePlan.sample(rng, len(grids), grids.shape[1 + axis], axis, p)
        back = recover_batch(shuffle_batch(grids, plan), plan)
        assert back.tobytes() == grids.tobytes()
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"{elapsed:.3f} s"


@criterion(2, "inverse-matrix law R[S[k,j], j] == k on 1000 matrices")
def test_c02_inverse_law():
    rng = np.random.default_rng(102)
    for _ in range(1000):
        rows, cols = 2 * int(rng.integers(1, 6)), int(rng.integers(1, 13))
        R = sample_shuffle_matrix(rng, rows, cols)
        S = invert(R)
        j = np.arange(cols)[None, :]
        np.testing.assert_array_equal(R[S, j], np.broadcast_to(np.arange(rows)[:, None], R.shape))


@criterion(3, "per-layer block multisets unchanged by the shuffle on 100 batches")
def test_c03_layer_preservation():
    rng = np.random.default_rng(103)
    for _ in range(100):
        axis = Axis(int(rng.integers(3)))
        p = int(rng.choice([1, 2]))
        dims = [4, 4, 4]
        dims[axis] = 6
        grids = rng.standard_normal((6, *dims))
        plan = ShufflePlan.sample(rng, 6, dims[axis], axis, p)
        out = shuffle_batch(grids, plan)
        for j in range(dims[axis] // p):
            take = [slice(None)] * 4
            take[1 + axis] = slice(j * p, (j + 1) * p)
            before = sorted(g.tobytes() for g in grids[tuple(take)])
            after = sorted(g.tobytes() for g in out[tuple(take)])
            assert before == after


@criterion(4, "displacement keeps image/label/supervision aligned, <= K swaps, complementary only")
def test_c04_displacement_alignment():
    rng = np.random.default_rng(104)
    for _ in range(200):
        B = int(rng.integers(1, 4))
        axis = Axis(int(rng.integers(3)))
        p, n = int(rng.choice([1, 2, 4])), int(rng.choice([1, 2]))
        k = int(rng.integers(1, n * n + 1))
        shape = (B, 2, 4, 4, 4)
        ids = np.arange(int(np.prod(shape))).reshape(shape)
        conf = rng.integers(0, 5, shape) / 4
        sup = rng.integers(0, 2, shape)
        stack = cgd.StreamStack(ids.astype(np.float64), ids.copy(), conf, sup)
        dec = cgd.patchify(stack, axis, p, n)
        stats = cgd.compute_stats(dec)
        selected = cgd.topk_select(cgd.confidence_gap(stats), k)
        out = cgd.displace(dec, stats, selected)
        vol, lab, g = (cgd.unfold_streams(x) for x in (out.volumes, out.labels, out.supervision))
        # the image sentinel names the source voxel; label and supervision must come from it too
        np.testing.assert_array_equal(vol.astype(np.int64), lab)
        np.testing.assert_array_equal(g, sup.ravel()[lab])
        mask = out.swapped
        assert (mask.reshape(B, mask.shape[1], -1).sum(-1) <= k).all()
        complementary = ((stats.src[:, 0] & stats.tgt[:, 1]) | (stats.tgt[:, 0] & stats.src[:, 1])) & selected
        assert not (mask & ~complementary).any()
        np.testing.assert_array_equal(mask, complementary)


@criterion(5, "composite labels take Y where G=1 and pseudo-labels where G=0")
def test_c05_composite_labels():
    rng = np.random.default_rng(105)
    for dims in ((2, 2, 2), (3, 4, 5), (6, 6, 6)):
        g = (np.indices(dims).sum(axis=0) % 2).astype(np.int64)
        flip = rng.integers(0, 2, dims)
        for G in (g, 1 - g, g ^ flip):
            Y = rng.integers(0, 5, dims)
            Yt = rng.integers(0, 5, dims)
            out = cgd.composite_labels(Y, G, Yt)
            for idx in np.ndindex(*dims):
                assert out[idx] == (Y[idx] if G[idx] == 1 else Yt[idx])


@criterion(6, "loss identities: Dice of one-hot, uniform CE, hybrid split, total-loss recombination")
def test_c06_loss_identities():
    rng = np.random.default_rng(106)
    for C in (1, 2, 4):
        y = rng.integers(0, C + 1, (3, 4, 5))
        assert losses.soft_dice_loss(losses.one_hot(y, C + 1), y) <= 1e-6
        uniform = np.full(y.shape + (C + 1,), 1.0 / (C + 1))
        assert abs(losses.cross_entropy_loss(uniform, y) - math.log(C + 1)) <= 1e-9
    for _ in range(20):
        probs = rng.dirichlet(np.ones(4), size=(3, 3, 3))
        y = rng.integers(0, 4, (3, 3, 3))
        half = 0.5 * (losses.cross_entropy_loss(probs, y) + losses.soft_dice_loss(probs, y))
        assert abs(losses.displacement_loss(probs, y) - half) <= 1e-12
        lab, unl, disp, alpha = rng.random(4)
        w = LossWeights(alpha)
        assert w.lambda_disp == 0.25 and w.beta == alpha * 0.25
        assert losses.total_loss(lab, unl, disp, w) == lab + alpha * unl + alpha * 0.25 * disp


def _numeric_grad(params, volume, target, kind, step=1e-4):
    theta = params.to_vector()
    out = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        f_up = LOSSES[kind](forward(SegmentorParams.from_vector(up, params.num_classes), volume), target)
        f_down = LOSSES[kind](forward(SegmentorParams.from_vector(down, params.num_classes), volume), target)
        out[i] = (f_up - f_down) / (2 * step)
    return out


@criterion(7, "CE, Dice and hybrid gradients match central differences on 50 3x3x3 instances in under 10 s")
def test_c07_gradient_check():
    rng = np.random.default_rng(107)
    start = time.perf_counter()
    worst = 0.0
    for kind in ("ce", "dice", "hybrid"):
        for _ in range(50):
            k = int(rng.integers(2, 5))
            params = SegmentorParams.init(k, rng, 1.0)
            params.bias[:] = rng.standard_normal(k)
            volume = rng.standard_normal((3, 3, 3))
            target = rng.integers(0, k, (3, 3, 3))
            analytic = backward(params, volume, forward(params, volume), target, kind).to_vector()
            numeric = _numeric_grad(params, volume, target, kind)
            err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    assert worst < 1e-4, worst
    assert elapsed < 10.0, f"{elapsed:.2f} s"


@criterion(8, "ramp, poly learning rate and EMA schedule values")
def test_c08_schedules():
    cfg = ScheduleConfig(max_iters=30000)
    assert losses.consistency_rampup(17000, cfg) == 1.0
    sweep = [losses.consistency_rampup(t, cfg) for t in range(20001)]
    assert all(a <= b for a, b in zip(sweep, sweep[1:]))
    assert losses.poly_lr(0, cfg) == 0.01
    assert losses.poly_lr(cfg.max_iters, cfg) == 0.0
    teacher, student = np.array([1.0, -2.0, 0.5]), np.array([3.0, 4.0, 0.5])
    np.testing.assert_array_equal(losses.ema_update(teacher, student, 0.99),
                                  0.99 * teacher + (1 - 0.99) * student)
    assert losses.ema_update(np.array([1.0]), np.array([0.0]), 0.99)[0] == 0.99


@criterion(9, "identical seeds give bit-identical loss CSVs and parameter snapshots")
def test_c09_determinism(tmp_path):
    args = ["--p", "2", "--iters", "40", "--size", "24", "--mode", "full", "--seed", "7",
            "--base-lr", "1.0", "--rampup-iters", "10", "--eval-interval", "10"]
    for tag in ("a", "b"):
        assert cli.main(["train", "--out-dir", str(tmp_path / tag)] + args) == 0
    for name in ("losses.csv", "params.json", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "losses.csv").read_text().splitlines()) == 41


@pytest.fixture(scope="module")
def ablation_result():
    return ablation.run_ablation(ablation.AblationConfig())


@criterion(10, "ablation trend on 24^3 phantoms: baseline < aug, full >= every single step, full - baseline >= 0.02")
@pytest.mark.slow
def test_c10_ablation_trend(ablation_result):
    print(ablation_result.table())
    for name, ok in ablation.trend_checks(ablation_result).items():
        assert ok, f"{name} failed:\n{ablation_result.table()}"


@criterion(11, "Dice and ASD match hand fixtures and the exhaustive shifted-cube oracle")
def test_c11_metrics():
    a = np.zeros((6, 6, 6), dtype=int)
    a[1:3, 1:3, 1:3] = 1
    assert dice_score(a, a, 1) == 1.0
    assert average_surface_distance(a, a, 1) == 0.0
    b = np.zeros_like(a)
    b[2:4, 1:3, 1:3] = 1
    assert dice_score(a, b, 1) == 0.5
    pts_a = np.argwhere(a == 1)
    pts_b = np.argwhere(b == 1)
    # every voxel of a 2x2x2 cube is on its surface
    d_ab = np.mean([min(math.dist(p, q) for q in pts_b) for p in pts_a])
    d_ba = np.mean([min(math.dist(p, q) for q in pts_a) for p in pts_b])
    assert abs(average_surface_distance(a, b, 1) - 0.5 * (d_ab + d_ba)) < 1e-9


@criterion(12, "file format round trips every kind bit-exactly; corrupted headers exit with code 3")
def test_c12_file_format(tmp_path):
    rng = np.random.default_rng(112)
    grids = {
        Kind.IMAGE: rng.standard_normal((4, 4, 4)).astype(np.float32),
        Kind.LABEL: rng.integers(0, 5, (4, 4, 4)),
        Kind.CONFIDENCE: rng.random((4, 4, 4)).astype(np.float32),
        Kind.SUPERVISION: rng.integers(0, 2, (4, 4, 4)),
    }
    for kind, grid in grids.items():
        path = tmp_path / f"{kind.name}.jnv"
        write_volume(path, grid, kind, 5)
        raw = path.read_bytes()
        back = read_volume(path)
        assert back.data.tobytes() == np.asarray(grid, dtype=kind.dtype).tobytes()
        write_volume(path, back.data, kind, back.class_count)
        assert path.read_bytes() == raw
    good = (tmp_path / "IMAGE.jnv").read_bytes()
    corrupt = {
        "magic": b"XNV1" + good[4:],
        "kind": good[:4] + bytes([9]) + good[5:],
        "dims": HEADER.pack(b"JNV1", 0, 4, 4, 5, 0) + good[21:],
        "header": good[:12],
        "classes": HEADER.pack(b"JNV1", 0, 4, 4, 4, 2) + good[21:],
    }
    for name, payload in corrupt.items():
        path = tmp_path / f"bad_{name}.jnv"
        path.write_bytes(payload)
        assert cli.main(["montage", str(path), "--out-dir", str(tmp_path / "m")]) == cli.EXIT_IO, name
    assert cli.main(["montage", str(tmp_path / "IMAGE.jnv"), "--out-dir", str(tmp_path / "m")]) == cli.EXIT_OK
