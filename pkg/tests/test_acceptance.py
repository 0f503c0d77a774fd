"""Acceptance gate: ten numbered release criteria, one test each.

Every test wraps its checks in `criterion(...)`, which records a PASS/FAIL
line (printed after the pytest summary) and enforces the stated runtime
budget.  Criteria 7 and 8 share two smoke training runs built on first use.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ACCEPTANCE_LINES, assert_fd_ok, fd_gradcheck

from skinmamba.blocks import FBGM, FFGML, SMFFL, SRSSB, VSSB, BlockConfig
from skinmamba.checkpoint import load_checkpoint, save_checkpoint
from skinmamba.data import discover_pairs, make_synthetic_samples, split
from skinmamba.metrics import (
    ConfusionCounts,
    accumulate,
    compute_metrics,
    format_report,
)
from skinmamba.network import NetworkConfig, build_model
from skinmamba.scan_core import (
    SelectiveScan,
    selective_scan,
    selective_scan_sequential,
)
from skinmamba.training import TrainConfig, evaluate, loss_bce_dice, train


@contextmanager
def criterion(number: int, label: str, budget_s: float | None = None):
    t0 = time.time()
    try:
        yield
        elapsed = time.time() - t0
        if budget_s is not None:
            assert elapsed < budget_s, (
                f"criterion {number} took {elapsed:.1f}s (budget {budget_s}s)"
            )
    except BaseException:
        ACCEPTANCE_LINES.append(
            f"criterion {number:02d} ({label}): FAIL [{time.time() - t0:.1f}s]"
        )
        raise
    ACCEPTANCE_LINES.append(
        f"criterion {number:02d} ({label}): PASS [{time.time() - t0:.1f}s]"
    )


def zero_(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_criterion_1_scan_oracle_equivalence():
    with criterion(1, "scan-oracle equivalence", budget_s=30):
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(200):
            length = int(rng.integers(1, 65))
            channels = int(rng.integers(1, 9))
            state = int(rng.integers(1, 17))
            batch = int(rng.integers(1, 3))
            torch.manual_seed(int(rng.integers(0, 2**31)))
            params = SelectiveScan(channels, state_dim=state)
            x = torch.randn(batch, length, channels)
            with torch.no_grad():
                fast = selective_scan(x, params)
            reference = selective_scan_sequential(x, params)
            worst = max(worst, float((fast - reference.to(fast.dtype)).abs().max()))
        assert worst < 1e-4, f"worst scan deviation {worst:.3e}"


def test_criterion_2_gradient_checks():
    with criterion(2, "finite-difference gradients", budget_s=120):
        rng = np.random.default_rng(2)

        torch.manual_seed(1)
        scan = SelectiveScan(3, state_dim=4).double()
        x = torch.randn(1, 12, 3, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 12, 3, dtype=torch.float64)
        rel = fd_gradcheck(
            lambda: (selective_scan(x, scan) * w).sum(),
            [x, scan.A_log, scan.D, scan.delta_bias, scan.delta_proj.weight],
            rng=rng,
        )
        assert_fd_ok(rel)

        torch.manual_seed(2)
        vssb = VSSB(4, state_dim=4).double()
        xv = torch.randn(1, 4, 6, 6, dtype=torch.float64, requires_grad=True)
        wv = torch.randn(1, 4, 6, 6, dtype=torch.float64)
        rel = fd_gradcheck(
            lambda: (vssb(xv) * wv).sum(), [xv, vssb.in_proj.weight], rng=rng
        )
        assert_fd_ok(rel)

        torch.manual_seed(3)
        smffl = SMFFL(6).double()
        xs = torch.randn(1, 6, 7, 7, dtype=torch.float64, requires_grad=True)
        ws = torch.randn(1, 6, 7, 7, dtype=torch.float64)
        rel = fd_gradcheck(
            lambda: (smffl(xs) * ws).sum(), [xs, smffl.conv3.weight], rng=rng
        )
        assert_fd_ok(rel)

        torch.manual_seed(4)
        ffgml = FFGML(4).double()
        xf = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
        wf = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        rel = fd_gradcheck(
            lambda: (ffgml(xf) * wf).sum(), [xf, ffgml.pw1.weight], rng=rng
        )
        assert_fd_ok(rel)

        torch.manual_seed(5)
        logits = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(1, 1, 8, 8) > 0.5).double()
        rel = fd_gradcheck(lambda: loss_bce_dice(logits, target), [logits], rng=rng)
        assert_fd_ok(rel)


def test_criterion_3_residual_identities():
    with criterion(3, "residual identities", budget_s=10):
        torch.manual_seed(6)
        x = torch.randn(2, 8, 6, 6)

        smffl = SMFFL(8)
        zero_(smffl.out_proj)
        assert torch.equal(smffl(x), x)

        srssb = SRSSB(BlockConfig(channels=8, ssm_state_dim=4))
        zero_(srssb.mixer.out_proj)
        zero_(srssb.smffl.out_proj)
        assert torch.equal(srssb(x), x)

        fbgm = FBGM(8)
        zero_(fbgm.norm1.norm)
        zero_(fbgm.csffl.project)
        assert torch.equal(fbgm(x), x)


def test_criterion_4_frequency_invariants():
    with criterion(4, "frequency-module invariants", budget_s=10):
        torch.manual_seed(7)
        for h, w in ((1, 1), (5, 9), (64, 64)):
            x = torch.randn(2, 3, h, w)
            back = torch.fft.ifft2(torch.fft.fft2(x)).real
            assert (back - x).abs().max() < 1e-5

        m = FFGML(3)
        x = torch.randn(2, 3, 8, 8)
        freq = torch.fft.fft2(x)
        z = torch.cat([freq.real, freq.imag], dim=1)
        z = m.pw2(F.relu(m.pw1(z)))
        re, im = z.chunk(2, dim=1)
        gate = torch.sigmoid(torch.fft.ifft2(torch.complex(re, im)).real)
        assert gate.min() > 0.0 and gate.max() < 1.0
        assert torch.equal(m(x), gate * x)

        silenced = FFGML(3)
        zero_(silenced)
        assert torch.equal(silenced(x), 0.5 * x)


def test_criterion_5_shape_ledger_all_variants():
    with criterion(5, "shape ledger, 6 variants", budget_s=60):
        cells = (
            {"use_srssb": False, "use_fbgm": False, "variant": "VSSB"},
            {"use_srssb": True, "use_fbgm": False, "variant": "VSSB"},
            {"use_srssb": False, "use_fbgm": True, "variant": "VSSB"},
            {"use_srssb": True, "use_fbgm": True, "variant": "VSSB"},
            {"use_srssb": True, "use_fbgm": True, "variant": "CONV3x3"},
            {"use_srssb": True, "use_fbgm": True, "variant": "SELF_ATTENTION"},
        )
        x = torch.randn(1, 3, 224, 224)
        for toggles in cells:
            cfg = NetworkConfig(block=BlockConfig(**toggles))
            model = build_model(cfg, seed=0)
            trace: list = []
            with torch.no_grad():
                y = model(x, trace=trace)
            assert y.shape == (1, 1, 224, 224), toggles
            tagged = dict(trace)
            assert tagged["bottleneck"] == (512, 7, 7), toggles


def test_criterion_6_metrics_oracle():
    with criterion(6, "metrics oracle", budget_s=5):
        rng = np.random.default_rng(8)
        for _ in range(100):
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 9))
            pred = rng.integers(0, 2, (h, w))
            gt = rng.integers(0, 2, (h, w))
            counts = accumulate(pred, gt, ConfusionCounts())

            tp = int(((pred == 1) & (gt == 1)).sum())
            fp = int(((pred == 1) & (gt == 0)).sum())
            fn = int(((pred == 0) & (gt == 1)).sum())
            tn = int(((pred == 0) & (gt == 0)).sum())
            assert counts == ConfusionCounts(tp, fp, fn, tn)

            m = compute_metrics(counts)
            total = h * w
            expect = {
                "mIoU": tp / (tp + fp + fn) if tp + fp + fn else None,
                "DSC": 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None,
                "Acc": (tp + tn) / total,
                "Sen": tp / (tp + fn) if tp + fn else None,
                "Spe": tn / (tn + fp) if tn + fp else None,
            }
            for name, want in expect.items():
                if want is None:
                    assert m[name] is None, name
                else:
                    assert abs(m[name] - want) <= 1e-12, name
            if m["mIoU"] is not None:
                assert abs(m["DSC"] - 2 * m["mIoU"] / (1 + m["mIoU"])) <= 1e-12


# --- smoke training shared by criteria 7 and 8 -----------------------------------

SMOKE_MAX_STEPS = 120  # bar was reached by step 25 on this exact configuration

_smoke_cache: list | None = None


def _smoke_runs(tmp_path_factory):
    global _smoke_cache
    if _smoke_cache is None:
        samples = make_synthetic_samples(8, 64, seed=0)
        net_cfg = NetworkConfig(input_size=(64, 64))
        runs = []
        for tag in ("a", "b"):
            cfg = TrainConfig(deterministic=True, seed=42)
            model = build_model(net_cfg, seed=cfg.seed)
            run_dir = tmp_path_factory.mktemp(f"smoke_{tag}")
            manifest = train(
                model, samples, samples, cfg, run_dir,
                image_size=(64, 64), max_steps=SMOKE_MAX_STEPS,
            )
            runs.append((run_dir, manifest))
        _smoke_cache = runs
    return _smoke_cache


def test_criterion_7_overfit_smoke(tmp_path_factory):
    with criterion(7, "overfit smoke", budget_s=3600):
        runs = _smoke_runs(tmp_path_factory)
        _, manifest = runs[0]
        hits = [
            row for row in manifest.history
            if row["test_metrics"]["DSC"] is not None
            and row["test_metrics"]["DSC"] >= 0.95
        ]
        assert hits, "DSC never reached 0.95"
        first = hits[0]
        assert first["steps"] <= 200, first
        assert manifest.timings["steps"] <= 200


def test_criterion_8_deterministic_replay(tmp_path_factory):
    with criterion(8, "deterministic replay", budget_s=3600):
        runs = _smoke_runs(tmp_path_factory)
        (dir_a, man_a), (dir_b, man_b) = runs
        assert len(man_a.step_losses) == len(man_b.step_losses) > 0
        diffs = [abs(a - b) for a, b in zip(man_a.step_losses, man_b.step_losses)]
        assert max(diffs) <= 1e-6, f"max step-loss deviation {max(diffs):.3e}"
        for name in ("best.ckpt", "last.ckpt"):
            bytes_a = (dir_a / name).read_bytes()
            bytes_b = (dir_b / name).read_bytes()
            assert bytes_a == bytes_b, f"{name} differs between runs"


def test_criterion_9_split_arithmetic(tmp_path):
    with criterion(9, "split arithmetic", budget_s=5):
        for total, want_train, want_test in ((2150, 1500, 650), (2694, 1886, 808)):
            root = tmp_path / f"isic_{total}"
            (root / "images").mkdir(parents=True)
            (root / "masks").mkdir()
            for i in range(total):
                (root / "images" / f"img{i:05d}.png").touch()
                (root / "masks" / f"img{i:05d}.png").touch()
            ids = [stem for stem, _, _ in discover_pairs(root)]
            manifest = split(ids, ratio=0.7, seed=42)
            assert len(manifest.train_ids) == want_train
            assert len(manifest.test_ids) == want_test


def test_criterion_10_checkpoint_round_trip(tmp_path):
    with criterion(10, "checkpoint round-trip"):
        net_cfg = NetworkConfig(
            base_channels=8, input_size=(32, 32),
            block=BlockConfig(channels=8, ssm_state_dim=4),
        )
        model = build_model(net_cfg, seed=11)
        samples = make_synthetic_samples(4, 32, seed=1)

        def report(m):
            result = evaluate(m, samples, image_size=(32, 32))
            counts = ConfusionCounts(
                **{k.lower(): v for k, v in result["counts"].items()}
            )
            return format_report({"synthetic": counts})

        before = report(model)
        path = tmp_path / "round.ckpt"
        save_checkpoint(path, model, {"net": "tiny"}, epoch=1, best_metric=0.5)
        other = build_model(net_cfg, seed=99)
        load_checkpoint(path, other)
        after = report(other)
        assert before == after
