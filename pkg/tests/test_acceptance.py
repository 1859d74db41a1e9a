"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import hashlib
import time

import numpy as np
import torch

from swintempo.candidates import dbscan, find_contours
from swintempo.cli import run
from swintempo.froc import evaluate
from swintempo.model import ModelConfig, SwinTempo, Variant
from swintempo.pipeline import evaluate_dataset, train_on
from swintempo.swin import SwinBlock, SwinConfig, SwinEncoder
from swintempo.training import TrainConfig, bce_loss
from swintempo.volume_io import Dataset, PhantomConfig, generate_phantom

from gradcheck import check_gradients
from swin_oracle import naive_block
from test_candidates import brute_dbscan, flood_fill_components
from test_froc import brute_report, random_scene


def test_c1_gradient_correctness(criterion):
    t0 = time.time()
    torch.manual_seed(0)
    m = SwinTempo(ModelConfig.tiny(Variant.SWIN_TEMPO)).double()
    assert m.cfg.input_size == 64 and m.cfg.swin.embed_dim == 8
    x = torch.randn(1, 3, 64, 64, dtype=torch.float64)
    y = (torch.rand(1, 3, 64, 64, dtype=torch.float64) > 0.9).double()
    report = check_gradients(
        m, lambda: bce_loss(torch.sigmoid(m(x)[0]), y), n=100, seed=0,
        groups=("swin.", "gru.", "fuse.", "contract.", "expand."),
    )
    elapsed = time.time() - t0
    worst = max(report.resolved, key=lambda s: s.rel_err)
    ok = len(report.resolved) >= 100 and worst.rel_err < 1e-4 and report.max_abs_err_unresolved < 1e-10 and elapsed < 600
    criterion(
        1, "gradient correctness", ok,
        f"{len(report.resolved)} params, max rel err {worst.rel_err:.2e} at {worst.name}, "
        f"{report.non_smooth} non-smooth draws replaced, {elapsed:.0f}s",
    )
    assert ok


def _random_block(dim, heads, w, gen):
    b = SwinBlock(dim, heads, w, 4.0, shifted=True)
    with torch.no_grad():
        for p in b.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.3)
        b.norm1.weight.add_(1.0)
        b.norm2.weight.add_(1.0)
    return b


def test_c2_shifted_window_equivalence(criterion):
    gen = torch.Generator().manual_seed(2)
    shapes = [((8, 8), 4), ((12, 12), 4), ((10, 10), 4), ((14, 14), 7), ((12, 8), 4)]
    worst = 0.0
    with torch.no_grad():
        for i in range(20):
            (H, W), w = shapes[i % len(shapes)]
            b = _random_block(8, 2, w, gen)
            x = torch.randn(1, H, W, 8, generator=gen)
            worst = max(worst, float((b(x) - naive_block(b, x)).abs().max()))
    ok = worst < 1e-5
    criterion(2, "shifted-window equivalence", ok, f"20 inputs, float32, max abs diff {worst:.2e}")
    assert ok


def test_c3_bce_exactness(criterion):
    d = torch.float64
    ln2 = bce_loss(torch.tensor([0.5], dtype=d), torch.tensor([1.0], dtype=d)).item()
    ln10 = bce_loss(torch.tensor([0.9], dtype=d), torch.tensor([0.0], dtype=d)).item()
    gen = torch.Generator().manual_seed(3)
    x = (torch.randn(256, generator=gen, dtype=d) * 4).requires_grad_()
    y = (torch.rand(256, generator=gen, dtype=d) > 0.5).to(d)
    bce_loss(torch.sigmoid(x), y).backward()
    grad_err = float((x.grad * x.numel() - (torch.sigmoid(x) - y)).detach().abs().max())
    h, fd_err = 1e-6, 0.0
    with torch.no_grad():
        for i in range(16):
            xp, xm = x.clone(), x.clone()
            xp[i] += h
            xm[i] -= h
            fd = (bce_loss(torch.sigmoid(xp), y) - bce_loss(torch.sigmoid(xm), y)).item() / (2 * h) * x.numel()
            fd_err = max(fd_err, abs(fd - (torch.sigmoid(x[i]) - y[i]).item()))
    ok = abs(ln2 - 0.693147) < 1e-6 and abs(ln10 - 2.302585) < 1e-6 and grad_err < 1e-6 and fd_err < 1e-6
    criterion(3, "BCE exactness", ok, f"ln2 {ln2:.7f}, -ln0.1 {ln10:.7f}, grad err {grad_err:.1e}, fd err {fd_err:.1e}")
    assert ok


def test_c4_oracle_equivalence(criterion):
    rng = np.random.default_rng(4)
    db_ok = 0
    for _ in range(100):
        n = int(rng.integers(1, 201))
        pts = rng.uniform(0, 20, size=(n, 3))
        eps, min_pts = float(rng.uniform(0.5, 3.0)), int(rng.integers(1, 6))
        db_ok += np.array_equal(dbscan(pts, eps, min_pts), brute_dbscan(pts, eps, min_pts))
    froc_ok = 0
    for _ in range(50):
        cands, anns, n_scans, series = random_scene(rng)
        rep = evaluate(cands, anns, n_scans, series_ids=series)
        points, sens, cpm = brute_report(cands, anns, n_scans, series)
        froc_ok += rep.curve == points and rep.sensitivities == sens and rep.cpm == cpm
    cc_ok = 0
    for _ in range(100):
        mask = rng.random(tuple(rng.integers(1, 32, size=2))) < rng.uniform(0.1, 0.7)
        got = [frozenset(map(tuple, c.pixels)) for c in find_contours(mask)]
        cc_ok += got == flood_fill_components(mask)
    ok = db_ok == 100 and froc_ok == 50 and cc_ok == 100
    criterion(4, "oracle equivalence", ok, f"dbscan {db_ok}/100, froc {froc_ok}/50, components {cc_ok}/100")
    assert ok


def test_c5_shape_pyramid(criterion):
    cfg = ModelConfig.full(Variant.SWIN_TEMPO)
    torch.manual_seed(5)
    enc = SwinEncoder(SwinConfig.tiny()).eval()
    x = torch.randn(1, 1, 224, 224)
    with torch.no_grad():
        levels = [tuple(t.shape[1:]) for t in enc(x)]
    C = 96
    want = [(C, 56, 56), (2 * C, 28, 28), (4 * C, 14, 14), (8 * C, 7, 7)]
    model = SwinTempo(cfg).eval()
    probs = model.predict_slices(np.random.default_rng(5).normal(size=(1, 224, 224)).astype(np.float32))
    ok = levels == want and probs.shape == (1, 224, 224) and bool(((probs > 0) & (probs < 1)).all())
    criterion(5, "shape pyramid", ok, f"levels {levels}, probability map {probs.shape[1:]}")
    assert ok


ABLATION = dict(epochs=80, learning_rate=1e-2, background_window_prob=0.3, seed=0)


def test_c6_ablation_ordering(criterion):
    t0 = time.time()
    train_ds = Dataset.from_items(generate_phantom(PhantomConfig(n_volumes=8, shape=(16, 64, 64), seed=100)))
    test_ds = Dataset.from_items(generate_phantom(PhantomConfig(n_volumes=4, shape=(16, 64, 64), seed=200)))
    assert not set(train_ds.series_ids) & set(test_ds.series_ids)
    reports = {}
    for variant in Variant:
        ckpt = train_on(train_ds, TrainConfig(variant=variant, **ABLATION))
        reports[variant], _ = evaluate_dataset(ckpt.build_model(), test_ds)
    elapsed = time.time() - t0
    cpm = {v: r.cpm for v, r in reports.items()}
    tempo, enh, base = cpm[Variant.SWIN_TEMPO], cpm[Variant.SWIN_ENHANCED], cpm[Variant.BASELINE_UNET]
    ratio = reports[Variant.SWIN_TEMPO].detection_ratio
    ok = tempo >= enh - 0.05 and enh >= base - 0.05 and ratio >= 0.9 and elapsed < 3600
    criterion(
        6, "ablation ordering", ok,
        f"CPM baseline {base:.3f}, enhanced {enh:.3f}, tempo {tempo:.3f}; tempo detected "
        f"{reports[Variant.SWIN_TEMPO].n_detected}/{reports[Variant.SWIN_TEMPO].n_annotations}; {elapsed / 60:.1f} min",
    )
    assert ok


def _pipeline(root):
    data, run_dir = root / "data", root / "run"
    steps = [
        ["synth", "--out", str(data), "--n-volumes", "3", "--seed", "21"],
        ["train", "--data", str(data), "--out", str(run_dir), "--epochs", "2", "--learning-rate", "3e-3", "--seed", "21"],
        ["infer", "--checkpoint", str(run_dir / "checkpoint.zip"), "--data", str(data), "--threshold", "0.1",
         "--out", str(root / "candidates.csv")],
        ["evaluate", "--candidates", str(root / "candidates.csv"), "--annotations", str(data / "annotations.csv"),
         "--n-scans", "3", "--out", str(root / "report")],
    ]
    for argv in steps:
        assert run(argv + ["--log-level", "WARNING"]) == 0, argv
    return {
        name: hashlib.sha256((root / name).read_bytes()).hexdigest()
        for name in ("candidates.csv", "report/report.json", "report/froc.png", "run/checkpoint.zip", "run/train_log.csv")
    }


def test_c7_determinism(criterion, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    n_rows = len((tmp_path / "a" / "candidates.csv").read_text().splitlines()) - 1
    ok = a == b and n_rows > 0
    diff = [k for k in a if a[k] != b[k]]
    criterion(7, "pipeline determinism", ok, f"{len(a)} artifacts compared, {n_rows} candidates, differing: {diff or 'none'}")
    assert ok


def test_c8_causality_and_state(criterion):
    torch.manual_seed(8)
    m = SwinTempo(ModelConfig.tiny(Variant.SWIN_TEMPO)).eval()
    gen = torch.Generator().manual_seed(8)
    x = torch.randn(1, 6, 64, 64, generator=gen)
    causal = True
    with torch.no_grad():
        base, _ = m(x)
        for k in range(5):
            y = x.clone()
            y[:, k + 1] += torch.randn(64, 64, generator=gen)
            out, _ = m(y)
            causal &= torch.equal(out[:, : k + 1], base[:, : k + 1]) and not torch.equal(out[:, k + 1], base[:, k + 1])
        rev, _ = m(x.flip(1))
    order_sensitive = not torch.allclose(rev.flip(1), base)
    stack = x[0].numpy()
    first, second = m.predict_slices(stack), m.predict_slices(stack)
    reset = np.array_equal(first, second)
    ok = causal and order_sensitive and reset
    criterion(8, "causality and statefulness", ok, f"causal {causal}, reversal changes output {order_sensitive}, reset {reset}")
    assert ok
