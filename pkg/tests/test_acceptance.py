"""Acceptance criteria, one test each. Every test logs a PASS/FAIL line for the summary.

Criteria 6 and 7 train real models and take minutes on one core.
"""

import contextlib
import math
import time

import numpy as np
from acceptance_log import LINES
from oracles import bilinear_ref, boundary_distances_ref, overlap_ref, sinusoid_ref

from convformer import gradsuite
from convformer.cli import main, run_ablation
from convformer.config import RunConfig, parse_config_text
from convformer.data import stack_batch, synth_dataset
from convformer.deform_attn import (
    MsMhsa,
    MultiScaleFeatures,
    flatten_multiscale,
    make_reference_points,
    ms_mhsa,
)
from convformer.detrans import FFM, conv_based_ffm
from convformer.layers import DWConv2d
from convformer.metrics import boundary_metrics, overlap_metrics
from convformer.model import (
    VARIANTS,
    ConvFormer,
    build_variant,
    convformer_forward,
    count_parameters,
)
from convformer.posenc import EPE, epe, sinusoidal_pe
from convformer.tensor import ParameterStore, Tensor
from convformer.train import TrainConfig, dead_parameters, evaluate, poly_lr, train_loop


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS or FAIL for a criterion; ``detail`` entries are appended to the line."""
    detail: dict[str, object] = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield detail
        ok = True
    finally:
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        LINES.append(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {title} "
                     f"({extra}{' ' if extra else ''}time={time.perf_counter() - t0:.1f}s)")


def test_1_gradient_suite():
    with criterion(1, "gradient suite") as d:
        t0 = time.perf_counter()
        reports = gradsuite.run()
        elapsed = time.perf_counter() - t0
        failed = [r.name for r in reports if not r.passed]
        composite = [r for r in reports if r.tol == gradsuite.COMPOSITE_TOL]
        d.update(checks=len(reports), failed=failed or "none",
                 worst_primitive=f"{max(r.max_error for r in reports if r.tol == 1e-4):.1e}")
        assert not failed
        assert [r.name for r in composite] == ["enhanced_detrans_layer"]
        assert all(r.tol == 1e-4 for r in reports if r not in composite)
        assert elapsed < 300


def test_2_conv_ffm_identity_kernel_degeneracy():
    with criterion(2, "conv-based FFM with identity DW kernel equals FFM bitwise"):
        rng = np.random.default_rng(2)
        shapes = [(8, 8), (4, 4)]
        store = ParameterStore(seed=2)
        ffm, dw = FFM(store, "ffm", 16), DWConv2d(store, "dw", 16, 3)
        dw.weight.data[...] = 0
        dw.weight.data[:, 0, 1, 1] = 1
        dw.bias.data[...] = 0
        x = Tensor(rng.normal(size=(2, 80, 16)).astype(np.float32))
        assert conv_based_ffm(x, shapes, ffm, dw).data.tobytes() == ffm(x).data.tobytes()


def test_3_epe_degeneracy_and_closed_form():
    with criterion(3, "EPE with zero content branch equals sinusoidal PE; closed form") as d:
        rng = np.random.default_rng(3)
        module = EPE(ParameterStore(seed=3), "epe", 16)
        module.dw.weight.data[...] = 0
        x = Tensor(rng.normal(size=(2, 16, 6, 5)).astype(np.float32))
        out = epe(x, module).data
        assert np.array_equal(out, np.broadcast_to(sinusoidal_pe(6, 5, 16).data, out.shape))
        pe = sinusoidal_pe(6, 5, 16).data
        d["pe_1_0"] = f"{pe[0, 1, 0]:.6f}"
        assert abs(pe[0, 1, 0] - 0.84147) < 1e-5 and abs(pe[0, 1, 0] - math.sin(1)) < 1e-6
        worst = max(abs(pe[ch, y, xx] - (sinusoid_ref(y, ch, 8) if ch < 8 else sinusoid_ref(xx, ch - 8, 8)))
                    for ch in range(16) for y in range(6) for xx in range(5))
        assert worst < 1e-6


def test_4_ms_mhsa_degeneracy():
    with criterion(4, "MS-MHSA degenerates to cross-level bilinear average") as d:
        rng = np.random.default_rng(4)
        shapes = [(8, 8), (4, 4), (2, 2)]
        c = 8
        ms = MultiScaleFeatures([Tensor(rng.normal(size=(2, c, h, w)).astype(np.float32)) for h, w in shapes])
        attn = MsMhsa(ParameterStore(seed=4), "attn", c, 3, heads=2, points=1)
        attn.sampling_offsets.bias.data[...] = 0
        for lin in (attn.value_proj, attn.output_proj):
            lin.weight.data[...] = np.eye(c)
            lin.bias.data[...] = 0
        refs = make_reference_points(shapes)
        out = ms_mhsa(flatten_multiscale(ms), None, ms, refs, attn).data
        want = np.zeros(out.shape)
        for lvl in ms.levels:
            fm = lvl.data.astype(np.float64)
            for n in range(2):
                for q in range(refs.shape[1]):
                    y, x = refs[0, q, 0]
                    want[n, q] += [bilinear_ref(fm[n, ch], y, x) for ch in range(c)]
        want /= len(shapes)
        err = np.abs(out - want).max()
        wsum = np.abs(attn.last_weights.sum(axis=(-2, -1)) - 1).max()
        d.update(max_abs_err=f"{err:.1e}", weight_sum_err=f"{wsum:.1e}")
        assert err < 1e-5 and wsum < 1e-6


def test_5_shapes_wiring_and_parameter_ladder():
    with criterion(5, "variants, dead-parameter sweep, parameter ladder") as d:
        images, masks = stack_batch(synth_dataset(2, 64, 5))
        for name in VARIANTS:
            assert convformer_forward(images, ConvFormer(build_variant(name))).shape == (2, 2, 64, 64)
        dead = dead_parameters(ConvFormer(build_variant("full")), images, masks)
        counts = {v: count_parameters(build_variant(v)) for v in VARIANTS}
        ladder = ["no_detrans", "detrans", "no_additional", "no_epe", "full"]
        d.update(dead=len(dead), full_params=counts["full"])
        assert dead == []
        assert all(counts[a] < counts[b] for a, b in zip(ladder, ladder[1:]))
        assert counts["full"] == counts["no_stem_residuals"]


# batch 4 instead of a larger batch keeps 2000 iterations inside the time budget on one core
OVERFIT = TrainConfig(max_iters=2000, batch_size=4, seed=0)


def test_6_overfit():
    with criterion(6, "overfit 8 synthetic 64x64 images") as d:
        cfg = build_variant("full")
        data = synth_dataset(8, 64, 0)
        t0 = time.perf_counter()
        result = train_loop(cfg, OVERFIT, data)
        elapsed = time.perf_counter() - t0
        dice = evaluate(result.model, data).mean("dice")
        window = 100
        first, last = np.mean(result.losses[:window]), np.mean(result.losses[-window:])
        d.update(params=result.model.num_parameters(), dice=f"{dice:.4f}", train_s=f"{elapsed:.0f}",
                 loss=f"{first:.3f}->{last:.3f}")
        assert result.model.num_parameters() <= 1_000_000
        assert last < first
        assert dice >= 0.95
        assert elapsed < 15 * 60


ABLATION = "num_classes=2\ntrain_size=64\nval_size=32\nmax_iters=300\nablation_seeds=3\n"


def test_7_ablation_direction():
    with criterion(7, "full ConvFormer >= CNN baseline on validation Dice, 3 seeds") as d:
        rows = {r["variant"]: r for r in run_ablation(parse_config_text(ABLATION), ("no_detrans", "full"))}
        full, base = rows["full"]["dice"], rows["no_detrans"]["dice"]
        d.update(full=f"{full:.4f}", no_detrans=f"{base:.4f}")
        assert len(rows["full"]["per_seed_dice"]) == 3
        assert full >= base


def test_8_metrics_oracle():
    with criterion(8, "metrics match brute-force oracles on 200 mask pairs") as d:
        rng = np.random.default_rng(8)
        boundary_pairs = 0
        for _ in range(200):
            h, w = rng.integers(1, 17, size=2)
            pred, gt = rng.random((h, w)) < rng.random(), rng.random((h, w)) < rng.random()
            tp, fp, fn, tn = overlap_ref(pred, gt)
            r = overlap_metrics(pred, gt)
            assert r["dice"] == r["f1"]
            if tp + fp + fn:
                assert r["iou"] == tp / (tp + fp + fn) and r["dice"] == 2 * tp / (2 * tp + fp + fn)
            if tp + fp:
                assert r["precision"] == tp / (tp + fp)
            if tp + fn:
                assert r["recall"] == r["sensitivity"] == tp / (tp + fn)
            if tn + fp:
                assert r["specificity"] == tn / (tn + fp)
            if pred.any() and gt.any():
                boundary_pairs += 1
                assert boundary_metrics(pred, gt) == boundary_distances_ref(pred, gt)
        a = np.zeros((16, 16), dtype=bool)
        a[4:10, 3:9] = True
        d.update(boundary_pairs=boundary_pairs)
        assert boundary_metrics(a, np.roll(a, 1, axis=1))[0] == 1.0


def test_9_recipe_constants():
    with criterion(9, "recipe constants"):
        tc, rc = TrainConfig(), RunConfig()
        assert tc.weight_decay == rc.weight_decay == 0.005
        assert tc.lr0 == rc.lr0 == 2e-4
        assert poly_lr(0, tc) == 2e-4 and poly_lr(tc.max_iters, tc) == 0.0


DETERMINISM = """num_classes=2
image_size=64
train_size=4
max_iters=5
seed=7
"""


def test_10_deterministic_cli_runs(tmp_path):
    with criterion(10, "two deterministic runs are bitwise identical"):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            cfg = tmp_path / f"{run}.cfg"
            cfg.write_text(DETERMINISM + f"output_dir={out}\n")
            assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
            assert main(["eval", "--config", str(cfg), "--deterministic"]) == 0
            outs.append(out)
        for name in ("model.ckpt", "train_metrics.txt", "train_metrics.csv", "eval_metrics.txt", "loss.log"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
