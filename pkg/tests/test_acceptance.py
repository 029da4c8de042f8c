"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria (tolerances pinned here, not deferred):
  1  finite-difference gradient suite over every differentiable op, 5 seeds,
     double precision, max relative error < 1e-4, wall time < 5 min
  2  formula oracles (cost map, non-local LSTM, block recurrence) within
     1e-6 at H=W=8, s=4, D=8
  3  zero block state == non-local path removed, exact
  4  streaming peak activation memory: D=256 <= 1.3x D=64 at H=W=64, s=8
  5  end-to-end toy reconstruction: >= 90% of valid held-out pixels within
     one plane; fused overall metric < 3x plane spacing; < 15 min CPU
  6  thresholding law exact values + brute-force acceptance equality on
     10k random records
  7  dynamic fusion keeps at least the fixed baseline's inliers with at
     most +1 percentage point outlier fraction
  8  geometry suite at 1e-4 px / 1e-6 relative
  9  metrics: identical clouds -> exactly zero; grid NN == brute force
"""

import gc
import time

import numpy as np

import sweepstereo as ss
from sweepstereo import ops
from sweepstereo.cost import cost_map
from sweepstereo.fusion import (ConsistencyRecord, FusionConfig,
                                consistency_error_maps, dynamic_accept,
                                dynamic_threshold, fuse)
from sweepstereo.geometry import plane_homography, project, sample_inverse_depth, unproject
from sweepstereo.inference import (GroundTruthDepth, cross_entropy_loss,
                                   infer_depth, probability_volume)
from sweepstereo.metrics import GridIndex, evaluate, nearest_distances
from sweepstereo.params import ParameterStore
from sweepstereo.regularizer import (BlockStateUpdater, ConvLstmCell,
                                     DepthAttention, NonLocalConvLstmCell,
                                     Regularizer, RegularizerConfig)
from sweepstereo.tensor import Tensor, memory_meter

from conftest import E2E_DEPTH_PLANES, E2E_HOLDOUT
from helpers import (brute_force_dynamic_accept, brute_force_nearest,
                     check_gradient)
from test_cost import loop_cost_map
from test_geometry import make_camera
from test_regularizer import (collect, oracle_block_update,
                              oracle_nonlocal_step, random_cost_stream)


def report(n, text):
    print(f"ACCEPTANCE {n} PASS: {text}")


class TestCriterion1GradientSuite:
    def test_criterion_1_gradient_suite(self):
        t0 = time.time()
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)

            def u(*shape):
                return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)

            def w(*shape):
                return Tensor(rng.uniform(-1, 1, shape))

            # conv2d (incl. stride and dilation), group_norm
            x, wt, b = u(2, 6, 6), u(3, 2, 3, 3), u(3)
            w1, w2 = w(3, 6, 6), w(3, 3, 3)  # stride-2 dilated output is 3x3
            worst = max(worst, check_gradient(
                lambda: (ops.conv2d(x, wt, b, padding=1) * w1).sum(),
                [x, wt, b]))
            worst = max(worst, check_gradient(
                lambda: (ops.conv2d(x, wt, b, stride=2, dilation=2, padding=2)
                         * w2).sum(), [x, wt, b]))
            g, bt = u(4), u(4)
            xg = u(4, 4, 4)
            w3 = w(4, 4, 4)
            worst = max(worst, check_gradient(
                lambda: (ops.group_norm(xg, 2, g, bt) * w3).sum(),
                [xg, g, bt]))

            # activations, softmax, pooling, resize
            xa = u(3, 4, 4)
            w4 = w(3, 4, 4)
            for op in (ops.sigmoid, ops.tanh, ops.relu, ops.softmax_over_depth,
                       ops.log_softmax_over_depth):
                worst = max(worst, check_gradient(
                    lambda op=op: (op(xa) * w4).sum(), [xa]))
            xp = u(2, 3, 4, 4)
            w5 = w(2, 4, 4)
            for mode in ("max", "avg"):
                worst = max(worst, check_gradient(
                    lambda mode=mode: (ops.pool_depth(xp, mode) * w5).sum(),
                    [xp]))
            xr = u(2, 4, 4)
            w6, w7 = w(2, 6, 6), w(2, 2, 2)
            worst = max(worst, check_gradient(
                lambda: (ops.bilinear_resize(xr, 6, 6) * w6).sum(), [xr]))
            worst = max(worst, check_gradient(
                lambda: (ops.bilinear_resize(xr, 2, 2) * w7).sum(), [xr]))

            # LSTM steps (vanilla and non-local), via their parameters
            store = ParameterStore()
            cell = ConvLstmCell(store, "c", 2, 2, rng)
            xc = u(2, 4, 4)
            w8 = w(2, 4, 4)
            state = cell.init_state(4, 4, np.float64)
            worst = max(worst, check_gradient(
                lambda: (cell.step(xc, state)[0] * w8).sum(),
                [xc, cell.gates.weight, cell.gates.bias]))
            nl = NonLocalConvLstmCell(store, "nl", 2, 2, 2, rng)
            bprev = u(2, 4, 4)
            worst = max(worst, check_gradient(
                lambda: (nl.step(xc, state, block_prev=bprev)[0] * w8).sum(),
                [xc, bprev, nl.attention_gate.weight, nl.block_proj.weight]))

            # depth attention and block update
            att = DepthAttention(store, "att", 3, 2, 4, rng)
            f_raw, f_reg = u(3, 2, 4, 4), u(2, 2, 4, 4)
            w9 = w(4, 4, 4)
            worst = max(worst, check_gradient(
                lambda: (att(f_raw, f_reg) * w9).sum(),
                [f_raw, f_reg, att.conv.weight]))
            upd = BlockStateUpdater(store, "upd", 3, 2, 4, rng)
            f_att, bb = u(4, 4, 4), u(4, 4, 4)
            worst = max(worst, check_gradient(
                lambda: (upd(f_raw, f_att, bb) * w9).sum(),
                [f_raw, f_att, bb, upd.gate_i.weight, upd.gate_f.weight]))

            # classification loss through the probability volume
            hyp = sample_inverse_depth(1.0, 2.0, 4)
            logits = u(4, 4, 4)
            depth = hyp.values[rng.integers(0, 4, (4, 4))]
            mask = rng.random((4, 4)) > 0.3
            mask[0, 0] = True
            gt = GroundTruthDepth(depth, mask)
            worst = max(worst, check_gradient(
                lambda: cross_entropy_loss(probability_volume(logits, hyp), gt),
                [logits]))

        elapsed = time.time() - t0
        assert elapsed < 300, f"gradient suite took {elapsed:.0f}s"
        report(1, f"all op gradients within 1e-4 of finite differences "
                  f"(worst {worst:.2e}, 5 seeds, {elapsed:.0f}s)")


class TestCriterion2FormulaOracles:
    def test_criterion_2_formula_oracles(self):
        rng = np.random.default_rng(0)
        h = w = 8

        # Eq.-level cost map at 32 channels: weighted squared differences
        ref = rng.normal(size=(32, h, w))
        warped = [rng.normal(size=(32, h, w)) for _ in range(3)]
        weights = [rng.uniform(0, 1, (1, h, w)) for _ in range(3)]
        masks = [(rng.random((1, h, w)) > 0.15).astype(float) for _ in range(3)]
        got = cost_map(Tensor(ref), [Tensor(f) for f in warped],
                       [Tensor(x) for x in weights], masks)
        want = loop_cost_map(ref, warped, weights, masks)
        err_cost = float(np.abs(got.cost.data - want).max())
        assert err_cost < 1e-6

        # non-local LSTM gate equations at production channel sizes
        store = ParameterStore()
        reg = Regularizer(store, np.random.default_rng(1),
                          config=RegularizerConfig(block_size=4))
        cellmaps = random_cost_stream(rng, 8, h=h, w=w)
        x = cellmaps[0].cost.data
        h_prev = rng.uniform(-0.5, 0.5, (32, h, w))
        c_prev = rng.uniform(-0.5, 0.5, (32, h, w))
        b_prev = rng.uniform(-0.5, 0.5, (16, h, w))
        from sweepstereo.regularizer import LstmCellState
        hidden, new_state = reg.fine.step(
            Tensor(x), LstmCellState(Tensor(h_prev), Tensor(c_prev)),
            block_prev=Tensor(b_prev))
        oh, oc = oracle_nonlocal_step(
            x, h_prev, c_prev, b_prev, reg.fine.gates.weight.data,
            reg.fine.gates.bias.data, reg.fine.attention_gate.weight.data,
            reg.fine.attention_gate.bias.data, reg.fine.block_proj.weight.data, 32)
        err_nl = max(float(np.abs(hidden.data - oh).max()),
                     float(np.abs(new_state.cell.data - oc).max()))
        assert err_nl < 1e-6

        # block recurrence gates (s=4 -> two sampled planes)
        f_raw = rng.normal(size=(32, 2, h, w))
        f_att = rng.normal(size=(16, h, w))
        bb = rng.uniform(-0.8, 0.8, (16, h, w))
        got_b = reg.block_update(Tensor(f_raw), Tensor(f_att), Tensor(bb))
        want_b = oracle_block_update(
            f_raw, f_att, bb,
            reg.block_update.gate_i.weight.data, reg.block_update.gate_i.bias.data,
            reg.block_update.gate_f.weight.data, reg.block_update.gate_f.bias.data)
        err_blk = float(np.abs(got_b.data - want_b).max())
        assert err_blk < 1e-6

        report(2, f"cost/non-local/block formulas match scalar-loop oracles "
                  f"(errors {err_cost:.1e}, {err_nl:.1e}, {err_blk:.1e})")


class TestCriterion3NonlocalDegeneration:
    def test_criterion_3_nonlocal_degeneration(self):
        rng = np.random.default_rng(2)
        store = ParameterStore()
        reg = Regularizer(store, np.random.default_rng(3),
                          config=RegularizerConfig(block_size=8))
        reg.head.weight.data[...] = rng.normal(0.0, 0.3, reg.head.weight.shape)
        maps = random_cost_stream(rng, 16, h=16, w=16)
        reg.config.force_zero_block_state = True
        forced = collect(reg.stream(enumerate(maps), 16))
        reg.config.force_zero_block_state = False
        baseline_sensitive = collect(reg.stream(enumerate(maps), 16))
        assert any(not np.array_equal(forced[j], baseline_sensitive[j])
                   for j in range(16))  # the block path is live, not vacuous
        reg.config.nonlocal_enabled = False
        vanilla = collect(reg.stream(enumerate(maps), 16))
        assert sorted(forced) == sorted(vanilla) == list(range(16))
        for j in range(16):
            assert np.array_equal(forced[j], vanilla[j]), f"plane {j} differs"
        report(3, "B == 0 stream exactly equals the vanilla-LSTM baseline "
                  "(16 planes, two blocks)")


class TestCriterion4StreamingMemory:
    def test_criterion_4_streaming_memory(self):
        spec = ss.SceneSpec(kind="plane-sphere", n_views=3, height=64, width=64,
                            baseline=40.0)
        scene = ss.generate_scene(spec, seed=0)
        net = ss.DepthNetwork(ss.NetworkConfig(dtype="float32", block_size=8,
                                               seed=0))

        def peak_activation(planes):
            gc.collect()
            memory_meter.reset_peak()
            base = memory_meter.live_bytes
            infer_depth(scene.views, 1, net, planes)
            return memory_meter.peak_bytes - base

        p64 = peak_activation(64)
        p256 = peak_activation(256)
        ratio = p256 / p64
        assert ratio <= 1.3, f"peak ratio {ratio:.3f} (D=256 {p256}B vs D=64 {p64}B)"
        report(4, f"peak activation memory D=256 / D=64 = {ratio:.3f} "
                  f"({p256 / 1e6:.1f} MB vs {p64 / 1e6:.1f} MB)")


class TestCriterion5EndToEnd:
    def test_criterion_5_end_to_end(self, toy_trained):
        scene, net, train_seconds, history = toy_trained
        t0 = time.time()

        est = infer_depth(scene.views, E2E_HOLDOUT, net, E2E_DEPTH_PLANES)
        gt = scene.gt_depth[E2E_HOLDOUT]
        mask = scene.gt_mask[E2E_HOLDOUT]
        gt_idx = est.hypotheses.nearest_index(gt)
        within_one = np.abs(est.plane_index - gt_idx) <= 1
        frac = float(within_one[mask].mean())
        assert frac >= 0.90, f"only {frac:.3f} of held-out pixels within one plane"

        ests = [est if r == E2E_HOLDOUT else
                infer_depth(scene.views, r, net, E2E_DEPTH_PLANES)
                for r in range(len(scene.views))]
        cloud = fuse(scene.views, ests, FusionConfig())
        assert len(cloud) > 0
        spacing = est.hypotheses.spacing_at(float(np.median(gt[mask])))
        metrics = evaluate(cloud.points, scene.gt_cloud, cap=20 * spacing)
        assert metrics.overall < 3 * spacing, (
            f"overall {metrics.overall:.2f} vs limit {3 * spacing:.2f}")

        elapsed = train_seconds + time.time() - t0
        assert elapsed < 900, f"end-to-end took {elapsed:.0f}s"
        report(5, f"held-out accuracy {frac:.3f}, overall {metrics.overall:.2f} "
                  f"< {3 * spacing:.2f} (plane spacing {spacing:.2f}), "
                  f"{elapsed:.0f}s total")


class TestCriterion6FusionLaw:
    def test_criterion_6_fusion_law(self):
        assert dynamic_threshold(10) == 0.6
        taus = [dynamic_threshold(mu) for mu in range(1, 40)]
        assert all(b > a for a, b in zip(taus, taus[1:]))
        cfg = FusionConfig()
        assert cfg.eps(4) == 1.0
        assert cfg.eta(13) == 0.01

        rng = np.random.default_rng(4)
        checked = 0
        for _ in range(10000):
            n = int(rng.integers(1, 9))
            psis = rng.exponential(1.2, n)
            phis = rng.exponential(0.004, n)
            valids = rng.random(n) > 0.25
            theta = float(rng.random())
            recs = [ConsistencyRecord(psi=p, phi=f, valid=v)
                    for p, f, v in zip(psis, phis, valids)]
            got = dynamic_accept(theta, recs, cfg)
            want = brute_force_dynamic_accept(theta, psis, phis, valids, 1, n)
            assert got == want
            checked += 1
        report(6, f"tau(10)=0.6 exact, tau strictly increasing, eps(4)=1.0, "
                  f"eta(13)=0.01; acceptance == brute force on {checked} records")


class TestCriterion7DynamicVersusFixed:
    def test_criterion_7_dynamic_vs_fixed(self):
        from test_fusion import TestDynamicVersusFixed

        builder = TestDynamicVersusFixed()
        scene, ests, outlier_masks = builder.build_noisy(seed=11, n_views=5,
                                                         size=32)
        dyn = fuse(scene.views, ests, FusionConfig(mode="dynamic"))
        fix = fuse(scene.views, ests, FusionConfig(mode="fixed", fixed_tau=0.35))
        dyn_in, dyn_out = builder.classify(dyn, outlier_masks)
        fix_in, fix_out = builder.classify(fix, outlier_masks)
        assert dyn_in >= fix_in
        dyn_frac = dyn_out / max(len(dyn), 1)
        fix_frac = fix_out / max(len(fix), 1)
        assert dyn_frac <= fix_frac + 0.01
        report(7, f"dynamic keeps {dyn_in} inliers (fixed {fix_in}) at outlier "
                  f"fraction {dyn_frac:.4f} vs fixed {fix_frac:.4f}")


class TestCriterion8GeometrySuite:
    def test_criterion_8_geometry_suite(self):
        # identity homography
        a, b = make_camera(), make_camera()
        for d in (0.5, 5.0, 500.0):
            H = plane_homography(a, b, d)
            assert np.abs(H / H[2, 2] - np.eye(3)).max() < 1e-12

        # analytic disparity under pure x-translation
        f, base, d = 100.0, 2.5, 8.0
        ref = make_camera(f=f)
        src = make_camera(f=f, center=(base, 0.0, 0.0))
        H = plane_homography(ref, src, d)
        p = np.array([30.0, 20.0, 1.0])
        q = H @ p
        assert abs(q[0] / q[2] - (p[0] - f * base / d)) < 1e-9

        # projection round trip
        rng = np.random.default_rng(5)
        cam = make_camera(f=120.0, cx=31.0, cy=33.5, center=(0.4, -0.2, 0.1))
        pix = rng.uniform(0, 64, size=(1000, 2))
        depth = rng.uniform(0.5, 20.0, size=1000)
        back_pix, back_depth = project(unproject(pix, depth, cam), cam)
        assert np.max(np.abs(back_pix - pix)) < 1e-6
        assert np.max(np.abs(back_depth - depth) / depth) < 1e-6

        # GT cross-view consistency on a pure-translation rig
        spec = ss.SceneSpec(kind="plane", n_views=3, height=16, width=16,
                            baseline=10.0, plane_depth=650.0)
        scene = ss.generate_scene(spec, seed=0)
        worst_psi = worst_phi = 0.0
        for r, s in [(0, 1), (1, 2), (2, 0)]:
            psi, phi, valid, _ = consistency_error_maps(
                scene.gt_depth[r], scene.views[r], scene.views[s],
                scene.gt_depth[s])
            worst_psi = max(worst_psi, float(psi[valid].max()))
            worst_phi = max(worst_phi, float(phi[valid].max()))
        assert worst_psi < 1e-4 and worst_phi < 1e-6
        report(8, f"homography/disparity/round-trip/GT-consistency pass "
                  f"(psi<=1e-4: {worst_psi:.1e}, phi<=1e-6: {worst_phi:.1e})")


class TestCriterion9Metrics:
    def test_criterion_9_metrics(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0, 100, (4000, 3))
        m = evaluate(pts, pts, cap=5.0)
        assert m.accuracy == 0.0 and m.completeness == 0.0 and m.overall == 0.0

        cloud = rng.uniform(0, 100, (6000, 3))
        gt = rng.uniform(0, 100, (4000, 3))
        got = nearest_distances(cloud, GridIndex(gt))
        want = brute_force_nearest(cloud, gt)
        np.testing.assert_array_equal(got, want)
        report(9, "identical clouds score exactly 0/0/0; grid NN equals "
                  "brute force on 10k points")
