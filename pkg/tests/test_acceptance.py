"""Acceptance gate: ten checks, one verdict line each.

Each test prints a [PASS]/[FAIL] line with the measured quantity so the
log reads as a checklist. The desk-scale experiments (criteria 7 to 9)
share one bundled synthetic benchmark and the models trained on it; the
heavy fixtures are module-scoped so the whole gate trains four models,
three of them the cross-validation folds.
"""

import dataclasses
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from specfuse.analysis import noise_study
from specfuse.datapipe import build_windows, default_synthetic_spec, \
    generate_synthetic
from specfuse.graph_fusion import gft_analyze, graph_filters, \
    propagation_matrix
from specfuse.imu_fusion import ComplementaryFilterParams, \
    complementary_filter, complementary_filter_expanded
from specfuse.model import TsfConfig, count_flops, TsfModel, tsf_forward
from specfuse.numerics import Tensor, backward
from specfuse.temporal_fusion import FrequencySelector, WaveletFilterPair, \
    dwt_step, select_frequency
from specfuse.training import confusion_matrix, cross_entropy, macro_f1, \
    per_class_metrics, run_fold, weighted_f1

from conftest import assert_grads_close


def verdict(ok: bool, label: str, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def random_signed_graph(rng, n):
    """Symmetric signed adjacency, zero diagonal, entries in (-1, 1)."""
    A = rng.uniform(-1.0, 1.0, size=(n, n))
    A = (A + A.T) / 2.0
    np.fill_diagonal(A, 0.0)
    return A


# ----------------------------------------------------------------------
# 1-4: closed-form identities


def test_graph_filter_identities():
    started = time.perf_counter()
    rng = np.random.default_rng(4101)
    worst_split = worst_pair = worst_eig_lo = worst_eig_hi = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 9))
        A = random_signed_graph(rng, n)
        X = rng.standard_normal((n, int(rng.integers(1, 5))))
        alpha = float(rng.uniform(0.05, 1.0))

        F_L, F_H = graph_filters(Tensor(A))
        split = F_L.data + F_H.data - 2.0 * np.eye(n)
        worst_split = max(worst_split, float(np.abs(split).max()))

        # same filter through the vertex domain and through the spectrum
        P = propagation_matrix(Tensor(A))
        direct = X + alpha * (P.data @ X)
        spec = gft_analyze(A, X)
        h = 1.0 + alpha * (1.0 - spec.eigenvalues)
        via_spectrum = spec.basis @ (h[:, None] * spec.coefficients)
        worst_pair = max(worst_pair,
                         float(np.abs(direct - via_spectrum).max()))

        worst_eig_lo = min(worst_eig_lo, float(spec.eigenvalues.min()))
        worst_eig_hi = max(worst_eig_hi, float(spec.eigenvalues.max()))
    elapsed = time.perf_counter() - started
    ok = (worst_split == 0.0 and worst_pair < 1e-12
          and worst_eig_lo > -1e-9 and worst_eig_hi < 2.0 + 1e-9
          and elapsed < 5.0)
    verdict(ok, "filter identities",
            f"split residual {worst_split:.1e}, route gap {worst_pair:.1e}, "
            f"spectrum [{worst_eig_lo:.2e}, {worst_eig_hi:.9f}], "
            f"{elapsed:.2f}s")


def test_attitude_filter_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(4102)
    worst = 0.0
    for alpha in (0.1, 0.5, 0.9, 0.98):
        params = ComplementaryFilterParams(tau=alpha / (1.0 - alpha), T=1.0)
        for _ in range(50):
            grav_ang = rng.standard_normal((2, 100))
            gyro = rng.standard_normal((2, 100))
            recursive = complementary_filter(grav_ang, gyro, params)
            expanded = complementary_filter_expanded(grav_ang, gyro, params)
            worst = max(worst, float(np.abs(recursive - expanded).max()))
    elapsed = time.perf_counter() - started
    ok = worst < 1e-10 and elapsed < 1.0
    verdict(ok, "attitude filter equivalence",
            f"max recursive/expanded gap {worst:.1e}, {elapsed:.2f}s")


def test_wavelet_bank_correctness():
    started = time.perf_counter()
    pair = WaveletFilterPair()
    sums_ok = (abs(pair.low.sum() - np.sqrt(2.0)) < 1e-10
               and abs(pair.high.sum()) < 1e-10)
    m_low, m_high = pair.analysis_matrices(64)
    Q = np.vstack([m_low, m_high])
    ortho = float(np.abs(Q @ Q.T - np.eye(64)).max())

    rng = np.random.default_rng(4103)
    worst_rec = 0.0
    for _ in range(100):
        L = int(rng.integers(8, 80))
        x = rng.standard_normal((1, L))
        low, high = dwt_step(Tensor(x), pair)
        padded = L + (L % 2)
        ml, mh = pair.analysis_matrices(padded)
        rebuilt = (low.data @ ml + high.data @ mh)[:, :L]
        worst_rec = max(worst_rec, float(np.abs(rebuilt - x).max()))

    _, flat_high = dwt_step(Tensor(np.full((1, 32), 3.7)), pair)
    flat = float(np.abs(flat_high.data).max())
    elapsed = time.perf_counter() - started
    ok = (sums_ok and ortho < 1e-10 and worst_rec < 1e-9 and flat < 1e-10
          and elapsed < 5.0)
    verdict(ok, "wavelet bank",
            f"orthonormality {ortho:.1e}, reconstruction {worst_rec:.1e}, "
            f"constant high band {flat:.1e}, {elapsed:.2f}s")


def test_band_choice_sampling():
    started = time.perf_counter()
    rng = np.random.default_rng(4104)
    selector = FrequencySelector(rng, channels=4)
    selector.weight.data[:] = 0.0          # equal logits by construction
    selector.temperature = 1.0
    selector.training = True

    low = Tensor(rng.standard_normal((10000, 4, 8)))
    high = Tensor(rng.standard_normal((10000, 4, 8)))
    _, _, mask, bits = select_frequency(low, high, selector,
                                        np.random.default_rng(7),
                                        batched=True)
    mask_sum = float(np.abs(mask.data.sum(axis=-1) - 1.0).max())
    rate = float(np.mean(bits))

    selector.training = False
    picks = []
    for run_seed in (1, 2):
        primary, _, hard, _ = select_frequency(
            low, high, selector, np.random.default_rng(run_seed),
            batched=True)
        picks.append((primary.data.copy(), hard.data.copy()))
    deterministic = (np.array_equal(picks[0][0], picks[1][0])
                     and np.array_equal(picks[0][1], picks[1][1]))
    elapsed = time.perf_counter() - started
    ok = (mask_sum < 1e-12 and abs(rate - 0.5) <= 0.02 and deterministic
          and elapsed < 10.0)
    verdict(ok, "band choice sampling",
            f"soft mask residual {mask_sum:.1e}, equal-logit pick rate "
            f"{rate:.4f}, inference bit-identical {deterministic}, "
            f"{elapsed:.2f}s")


# ----------------------------------------------------------------------
# 5-6: differentiability and shape contract


def test_gradients_every_block():
    from specfuse.imu_fusion import ImuFusionBlock, imu_fusion_forward
    from specfuse.graph_fusion import ModalityGraphBlock, \
        modality_node_fusion
    from specfuse.temporal_fusion import AttentionBlock, LocalFusionBlock, \
        global_fusion, local_fusion

    started = time.perf_counter()
    for seed in (1, 2, 3):
        rng = np.random.default_rng(5000 + seed)

        block = ImuFusionBlock(rng, channels=5)
        grav = Tensor(rng.standard_normal((2, 3, 8)))
        gyro = Tensor(rng.standard_normal((2, 3, 8)))
        lacc = Tensor(rng.standard_normal((2, 3, 8)))

        def imu_loss():
            posture, motion, _ = imu_fusion_forward(grav, gyro, lacc, block)
            return ((posture * posture).mean()
                    + (motion * motion).mean()).item()

        posture, motion, _ = imu_fusion_forward(grav, gyro, lacc, block)
        backward((posture * posture).mean() + (motion * motion).mean())
        assert_grads_close(imu_loss, [block.attn_weight.tensor,
                                      block.attn_bias.tensor,
                                      block.grav_kernel.tensor,
                                      block.gyro_kernel.tensor], tol=1e-4)

        gblock = ModalityGraphBlock(rng, channels=4)
        Xg = Tensor(rng.standard_normal((2, 4, 4)))

        def graph_loss():
            fused, _ = modality_node_fusion(Xg, gblock)
            return (fused * fused).mean().item()

        fused, _ = modality_node_fusion(Xg, gblock)
        backward((fused * fused).mean())
        assert_grads_close(graph_loss, [gblock.edge_mlp.w1.tensor,
                                        gblock.layer1_weight.tensor,
                                        gblock.squeeze_weight.tensor],
                           tol=1e-4)

        lblock = LocalFusionBlock(rng, 3, 5)
        xl = Tensor(rng.standard_normal((3, 2, 8)))
        sl = Tensor(rng.standard_normal((3, 2, 8)))

        def local_loss():
            return (local_fusion(xl, sl, lblock) ** 2.0).mean().item()

        backward((local_fusion(xl, sl, lblock) ** 2.0).mean())
        assert_grads_close(local_loss, [lblock.kernel.tensor,
                                        lblock.proj_kernel.tensor],
                           tol=1e-4)

        ablock = AttentionBlock(rng, d_model=8, heads=2)
        xa = Tensor(rng.standard_normal((8, 6)))

        def attn_loss():
            return (global_fusion(xa, None, ablock) ** 2.0).mean().item()

        backward((global_fusion(xa, None, ablock) ** 2.0).mean())
        assert_grads_close(attn_loss, [ablock.wq.tensor, ablock.wo.tensor,
                                       ablock.w_ff1.tensor], tol=1e-4)

        cfg = TsfConfig(window=16, classes=3, imus=1, imu_channels=6,
                        node_channels=8, fused_channels=8, heads=2)
        model = TsfModel(cfg, rng)
        model.set_training(False)
        xm = rng.standard_normal((2, 1, 3, 3, 16))
        ym = np.eye(3)[[0, 2]]

        def head_loss():
            out = tsf_forward(xm, model, np.random.default_rng(0))
            return cross_entropy(out, Tensor(ym)).item()

        logits = tsf_forward(xm, model, np.random.default_rng(0))
        backward(cross_entropy(logits, Tensor(ym)))
        assert_grads_close(head_loss, [model.cls_weight.tensor,
                                       model.cls_bias.tensor], tol=1e-4)
    elapsed = time.perf_counter() - started
    verdict(elapsed < 120.0, "gradient checks",
            f"3 instances x 5 blocks, all < 1e-4, {elapsed:.1f}s")


def test_length_and_imu_count_contract():
    started = time.perf_counter()
    pair = WaveletFilterPair()
    lengths_ok = True
    for L in (48, 125, 128, 200, 500):
        x = Tensor(np.random.default_rng(L).standard_normal((1, L)))
        stages = [L]
        for _ in range(3):
            x, _ = dwt_step(x, pair)
            stages.append(x.data.shape[-1])
        expected = [L]
        for _ in range(3):
            expected.append((expected[-1] + 1) // 2)
        lengths_ok = lengths_ok and stages == expected

    forwards_ok = True
    rng = np.random.default_rng(4106)
    for imus in (1, 3, 7):
        cfg = TsfConfig(window=48, classes=3, imus=imus, imu_channels=6,
                        node_channels=8, fused_channels=8, heads=2)
        model = TsfModel(cfg, rng)
        model.set_training(False)
        x = rng.standard_normal((2, imus, 3, 3, 48))
        logits, diag = tsf_forward(x, model, np.random.default_rng(0),
                                   with_diagnostics=True)
        forwards_ok = forwards_ok and logits.data.shape == (2, 3)
        # the per-timestamp graph runs on the twice-halved axis
        adjacency = diag["adjacency"].data
        forwards_ok = forwards_ok and adjacency.shape[1] == 12 \
            and adjacency.shape[2] == 2 * imus
    elapsed = time.perf_counter() - started
    ok = lengths_ok and forwards_ok and elapsed < 30.0
    verdict(ok, "length/shape contract",
            f"ceil-halving chain at 5 window sizes {lengths_ok}, "
            f"forward at P in (1, 3, 7) {forwards_ok}, {elapsed:.1f}s")


# ----------------------------------------------------------------------
# 7-9: desk-scale experiments on the bundled benchmark


ACCEPT_CONFIG = TsfConfig(window=128, classes=4, imus=1, epochs=20,
                          lr_half_every=7, batch_size=32, seed=11)


@pytest.fixture(scope="module")
def benchmark():
    spec = default_synthetic_spec()
    recordings = generate_synthetic(spec, seed=2026)
    windows, names = build_windows(recordings, spec.window, spec.overlap)
    return spec, windows, names


@pytest.fixture(scope="module")
def loso_outcome(benchmark):
    """One fold per subject, identical to the cross-validation driver."""
    _, windows, names = benchmark
    subjects = sorted({w.subject_id for w in windows})
    folds = []
    started = time.perf_counter()
    for subject in subjects:
        test_part = [w for w in windows if w.subject_id == subject]
        train_part = [w for w in windows if w.subject_id != subject]
        folds.append(run_fold(train_part, test_part, ACCEPT_CONFIG,
                              names, subject))
    elapsed = time.perf_counter() - started
    return folds, elapsed


def test_desk_scale_learning(benchmark, loso_outcome):
    _, windows, _ = benchmark
    folds, elapsed = loso_outcome
    scores = [result.macro_f1 for result, _, _ in folds]
    mean_f1 = float(np.mean(scores))
    ok = mean_f1 >= 0.90 and elapsed <= 900.0 and len(windows) == 600
    verdict(ok, "desk-scale learning",
            f"LOSO macro F1 {mean_f1:.4f} (folds "
            f"{', '.join(f'{s:.3f}' for s in scores)}), "
            f"{len(windows)} windows, {elapsed:.0f}s")


def test_selection_cuts_flops_not_accuracy(benchmark, loso_outcome):
    _, windows, names = benchmark
    folds, _ = loso_outcome
    selective_result, selective_model, _ = folds[-1]

    lean = count_flops(selective_model)
    dense_cfg = dataclasses.replace(ACCEPT_CONFIG, selection_mode="none")
    full = count_flops(TsfModel(dense_cfg, np.random.default_rng(0)))

    subject = sorted({w.subject_id for w in windows})[-1]
    train_part = [w for w in windows if w.subject_id != subject]
    test_part = [w for w in windows if w.subject_id == subject]
    dense_result, _, _ = run_fold(train_part, test_part, dense_cfg, names,
                                  "dense")
    gap = abs(selective_result.macro_f1 - dense_result.macro_f1)
    ok = lean <= 0.70 * full and gap <= 0.03
    verdict(ok, "selective routing economy",
            f"FLOPs {lean / 1e6:.1f}M vs {full / 1e6:.1f}M "
            f"({lean / full:.1%}), macro F1 gap {gap:.4f} "
            f"({selective_result.macro_f1:.4f} vs "
            f"{dense_result.macro_f1:.4f})")


def test_attention_tracks_sensor_noise(benchmark, loso_outcome):
    _, windows, _ = benchmark
    folds, _ = loso_outcome
    _, model, stats = folds[-1]
    subject = sorted({w.subject_id for w in windows})[-1]
    held_out = [w for w in windows if w.subject_id == subject]

    rows = noise_study(model, stats, held_out, seed=4109)
    levels = sorted({r[1] for r in rows})
    grav_curve = [r[3] for r in rows if r[0] == "grav_hf"]
    gyro_curve = [r[4] for r in rows if r[0] == "gyro_lf"]
    rho_grav = float(spearmanr(levels, grav_curve).statistic)
    rho_gyro = float(spearmanr(levels, gyro_curve).statistic)
    ok = rho_grav < 0.0 and rho_gyro < 0.0
    verdict(ok, "noise-adaptive attention",
            f"gravimeter rho {rho_grav:.2f} "
            f"(attention {', '.join(f'{a:.4f}' for a in grav_curve)}), "
            f"gyroscope rho {rho_gyro:.2f} "
            f"(attention {', '.join(f'{a:.4f}' for a in gyro_curve)})")


# ----------------------------------------------------------------------
# 10: metric oracle


def brute_force_f1(y_true, y_pred, classes):
    scores = []
    support = []
    for c in range(classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) \
            if precision + recall else 0.0
        scores.append(f1)
        support.append(tp + fn)
    scores = np.array(scores)
    support = np.array(support, dtype=np.float64)
    macro = float(scores[support > 0].mean())
    weighted = float((scores * support).sum() / support.sum())
    return macro, weighted


def test_metric_oracle():
    rng = np.random.default_rng(4110)
    exact = 0
    for _ in range(1000):
        classes = int(rng.integers(2, 7))
        n = int(rng.integers(5, 60))
        y_true = rng.integers(0, classes, size=n)
        y_pred = rng.integers(0, classes, size=n)
        cm = confusion_matrix(y_true, y_pred, classes)
        oracle_macro, oracle_weighted = brute_force_f1(y_true, y_pred,
                                                       classes)
        if macro_f1(cm) == oracle_macro and \
                weighted_f1(cm) == oracle_weighted:
            exact += 1

    y_true = np.array([0] * 90 + [1] * 10)
    y_pred = np.array([0] * 90 + [2] * 10)
    cm = confusion_matrix(y_true, y_pred, 3)
    skew = (macro_f1(cm), weighted_f1(cm))
    ok = exact == 1000 and skew == (0.5, 0.9)
    verdict(ok, "metric oracle",
            f"{exact}/1000 random pairs exact, 90/10 case "
            f"macro {skew[0]} weighted {skew[1]}")
