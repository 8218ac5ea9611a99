"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line via ``record``."""

import filecmp
import shutil
import time

import numpy as np
import pytest
from scipy import stats

import synthetic_pipeline
from conftest import record
from mmode_ssl import autodiff as ad
from mmode_ssl.augment import AugmentationConfig, RngStream, plan_byol, plan_downstream, plan_mmode
from mmode_ssl.cli import main
from mmode_ssl.evaluation import auc
from mmode_ssl.gradcheck import analytic_gradient, check_gradients, numerical_gradient
from mmode_ssl.mmode import BModeVideo, extract_mmode, rank_columns
from mmode_ssl.model import EncoderSpec, ProjectorSpec, forward_features, forward_projector, initialize
from mmode_ssl.objectives import barlow_twins_loss, cross_correlation, simclr_loss, vicreg_loss, vicreg_terms
from mmode_ssl.training import LabeledSet, TrainConfig, train_downstream


# ---------------------------------------------------------------- 1


KINK_MARGIN = 1e-4  # ten finite-difference steps


def _pool_gap(x):
    """Smallest gap between the two largest entries of any 2x2 max-pool window with a positive max.

    Windows of all-zero ReLU outputs do not count: their pre-activations are checked separately.
    """
    n, c, h, w = x.shape
    windows = x[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    top = np.sort(windows.reshape(n, c, h // 2, w // 2, 4), axis=-1)
    gaps = (top[..., -1] - top[..., -2])[top[..., -1] > 0]
    return float(gaps.min()) if gaps.size else np.inf


def _kink_distance(weights, x, spec):
    """Distance of the forward pass from its nearest non-differentiable point."""
    nearest, h = np.inf, x
    for i, block in enumerate(spec.blocks, start=1):
        pre = ad.conv2d(h, weights[f"block{i}.conv.w"], weights[f"block{i}.conv.b"], stride=block.stride, pad=block.kernel // 2).data
        act = np.maximum(pre, 0.0)
        nearest = min(nearest, np.abs(pre).min(), _pool_gap(act))
        h = ad.max_pool2d(act, 2).data
    f = h.mean(axis=(2, 3))
    layers = sorted({k.rsplit(".", 1)[0] for k in weights if k.startswith("projector.")})
    for layer in layers[:-1]:
        pre = f @ weights[layer + ".w"] + weights[layer + ".b"]
        nearest = min(nearest, np.abs(pre).min())
        f = np.maximum(pre, 0.0)
    return nearest


def test_criterion_01_gradients():
    start = time.time()
    worst = {}
    g = np.random.default_rng(101)
    losses = {"simclr": simclr_loss, "barlow_twins": barlow_twins_loss, "vicreg": vicreg_loss}
    for name, fn in losses.items():
        errs = []
        for _ in range(20):
            # D = 1 makes every cosine +-1, so the SimCLR gradient is zero up to eps_norm
            # and a relative error would only measure round-off; covered separately below
            n, d = int(g.integers(2, 9)), int(g.integers(2, 9))
            za, zb = g.normal(size=(n, d)), g.normal(size=(n, d))
            errs.append(check_gradients(lambda a, b: fn(a, b), [za, zb], h=1e-5))
        worst[name] = max(errs)

    flat = g.normal(size=(5, 1))
    one_dim = [np.abs(a - n).max() for a, n in zip(
        analytic_gradient(lambda a, b: simclr_loss(a, b), [flat, -flat]),
        numerical_gradient(lambda a, b: float(simclr_loss(a, b).data), [flat, -flat]),
    )]
    degenerate = max(one_dim)

    spec = EncoderSpec.from_channels((3, 4), first_stride=2)
    objectives = list(losses.values())
    errs = []
    redrawn = collapsed = 0
    trial = 0
    while len(errs) < 20:
        trial += 1
        n = int(g.integers(3, 5))
        loss_fn = objectives[len(errs) % 3]
        params = initialize(trial, encoder=spec, projector=ProjectorSpec(int(g.integers(2, 9)), 2))
        names = params.names()
        # biases are zero at init; perturb them so every path is exercised
        arrays = [params[k] + (g.normal(0, 0.1, params[k].shape) if k.endswith(".b") else 0) for k in names]
        view_a, view_b = g.uniform(0, 1, (n, 1, 8, 8)), g.uniform(0, 1, (n, 1, 8, 8))
        if _kink_distance(dict(zip(names, arrays)), np.concatenate([view_a, view_b]), spec) < KINK_MARGIN:
            redrawn += 1  # central differences are not valid across a ReLU or max-pool switch
            continue

        def graph(*tensors):
            weights = dict(zip(names, tensors))
            feats, _ = forward_features(np.concatenate([view_a, view_b]), weights, spec)
            z = forward_projector(feats, weights)
            return loss_fn(z[:n], z[n:])

        if max(np.abs(a).max() for a in analytic_gradient(graph, arrays)) < 1e-10:
            collapsed += 1  # all embeddings parallel: the gradient is zero and relative error undefined
            continue
        # one relative error over all parameters: standardizing losses give the last bias a zero gradient
        errs.append(check_gradients(graph, arrays, h=1e-5, pooled=True))
    worst["encoder+projector"] = max(errs)
    elapsed = time.time() - start
    passed = all(e < 1e-4 for e in worst.values()) and degenerate < 1e-6 and elapsed < 60
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(1, passed, f"max rel. error {detail}; D=1 simclr abs. error {degenerate:.0e}; redrawn: {redrawn} near a kink, {collapsed} collapsed ({elapsed:.0f}s)")
    assert passed


# ---------------------------------------------------------------- 2


def test_criterion_02_loss_invariants():
    g = np.random.default_rng(202)
    failures = []
    for _ in range(100):
        n = int(g.integers(3, 12))
        d = int(g.integers(1, n))
        # Barlow Twins: exactly zero at C = I ...
        base = g.normal(size=(n, d))
        base -= base.mean(0)
        q, _ = np.linalg.qr(base)
        z = q * np.sqrt(n)
        if not (np.allclose(cross_correlation(z, z, 0.0).data, np.eye(d), atol=1e-10) and float(barlow_twins_loss(z, z, eps_var=0.0).data) < 1e-12):
            failures.append("bt zero at identity")
        # ... and strictly positive whenever C differs from I
        za, zb = g.normal(size=(n, d)), g.normal(size=(n, d))
        c = cross_correlation(za, zb, 0.0).data
        loss = float(barlow_twins_loss(za, zb, eps_var=0.0).data)
        if not (loss > 0 and not np.allclose(c, np.eye(d))):
            failures.append("bt positive off identity")

        # SimCLR: rescaling any embedding by a positive factor, permuting rows
        za, zb = g.normal(size=(n, 4)), g.normal(size=(n, 4))
        sa, sb = g.uniform(0.1, 10, (n, 1)), g.uniform(0.1, 10, (n, 1))
        perm = g.permutation(n)
        # exact for the pure cosine; the eps_norm guard perturbs it by about eps / |z|
        for eps, tol in ((0.0, 1e-12), (1e-8, 1e-6)):
            ref = float(simclr_loss(za, zb, eps_norm=eps).data)
            scaled = float(simclr_loss(za * sa, zb * sb, eps_norm=eps).data)
            permuted = float(simclr_loss(za[perm], zb[perm], eps_norm=eps).data)
            if abs(scaled - ref) > tol * ref or abs(permuted - ref) > 1e-12 * ref:
                failures.append(f"simclr invariance eps={eps}")

        # VICReg: variance term vanishes once every per-dimension std is >= gamma
        wide = g.normal(size=(n, 4))
        wide = (wide - wide.mean(0)) / wide.std(0, ddof=1) * g.uniform(1.0, 3.0, 4)
        if float(vicreg_terms(wide, wide[::-1])["variance"].data) != 0.0:
            failures.append("vicreg variance")

        # non-negativity
        a, b = g.normal(size=(n, d)) * g.uniform(0.01, 5), g.normal(size=(n, d))
        if min(float(fn(a, b).data) for fn in (simclr_loss, barlow_twins_loss, vicreg_loss)) < 0:
            failures.append("negative loss")
    passed = not failures
    record(2, passed, f"100 trials per invariant, {len(failures)} violations")
    assert passed, failures[:5]


# ---------------------------------------------------------------- 3


def _brute_rank(frames, lo, hi):
    t, h, _ = frames.shape
    totals = {}
    for col in range(lo, hi + 1):
        s = 0.0
        for i in range(t):
            for j in range(h):
                s += frames[i, j, col]
        totals[col] = s
    order = []
    remaining = list(range(lo, hi + 1))
    while remaining:
        best = remaining[0]
        for col in remaining[1:]:
            if totals[col] > totals[best]:
                best = col
        order.append((best, totals[best]))
        remaining.remove(best)
    return order


def _brute_mmode(frames, col):
    t, h, _ = frames.shape
    out = np.empty((h, t))
    for i in range(t):
        for j in range(h):
            out[j, i] = frames[i, j, col]
    return out


def test_criterion_03_extraction_oracle():
    g = np.random.default_rng(303)
    mismatches = 0
    for _ in range(200):
        t, h, w = int(g.integers(1, 11)), int(g.integers(1, 17)), int(g.integers(1, 17))
        # integer pixels keep column sums exact; duplicated columns force ties
        frames = g.integers(0, 4, (t, h, w)).astype(np.float64)
        if w > 2 and g.random() < 0.5:
            frames[:, :, 1] = frames[:, :, w - 1]
        lo = int(g.integers(0, w))
        hi = int(g.integers(lo, w))
        video = BModeVideo(frames, 10.0, (lo, hi))
        if rank_columns(video) != _brute_rank(frames, lo, hi):
            mismatches += 1
        for col in range(lo, hi + 1):
            if not np.array_equal(extract_mmode(video, col).pixels, _brute_mmode(frames, col)):
                mismatches += 1
    record(3, mismatches == 0, f"200 videos, {mismatches} mismatches")
    assert mismatches == 0


# ---------------------------------------------------------------- 4


def _rate_ok(count, n, p):
    lo, hi = stats.binom.interval(0.99, n, p)
    return lo <= count <= hi


def test_criterion_04_augmentation_statistics():
    start = time.time()
    cfg = AugmentationConfig()
    n, shape = 10_000, (128, 128)
    bad = []

    counts, swapped, both, tops = {}, 0, 0, []
    for i in range(n):
        plan = plan_mmode(RngStream(404, i), shape, cfg)
        names = [s.name for s in plan]
        for s in plan:
            counts[s.name] = counts.get(s.name, 0) + 1
            if s.name == "crop":
                tops.append(s.params["top"])
        if "brightness" in names and "contrast" in names:
            both += 1
            swapped += names.index("contrast") < names.index("brightness")
    expected = {"crop": cfg.crop_p, "flip": cfg.flip_p, "blur": cfg.blur_p, "noise": cfg.noise_p, "speckle": cfg.speckle_p, "brightness": cfg.brightness_p, "contrast": cfg.contrast_p}
    bad += [f"mmode {k}" for k, p in expected.items() if not _rate_ok(counts.get(k, 0), n, p)]
    if not _rate_ok(swapped, both, cfg.contrast_first_p):
        bad.append("mmode order swap")
    upper = float(np.mean(np.array(tops) <= shape[0] // 2))

    below = 0
    for branch, blur_p, sol_p in (("a", cfg.byol_blur_p_a, cfg.byol_solarize_p_a), ("b", cfg.byol_blur_p_b, cfg.byol_solarize_p_b)):
        counts = {}
        for i in range(n):
            for s in plan_byol(RngStream(405, i), shape, cfg, branch):
                counts[s.name] = counts.get(s.name, 0) + 1
                if s.name == "crop" and s.params["top"] > shape[0] // 2:
                    below += 1
        expected = {"crop": cfg.byol_crop_p, "flip": cfg.byol_flip_p, "brightness_scale": cfg.byol_jitter_p, "grayscale": cfg.byol_grayscale_p, "blur2d": blur_p, "solarize": sol_p}
        bad += [f"byol-{branch} {k}" for k, p in expected.items() if not _rate_ok(counts.get(k, 0), n, p)]

    counts = {}
    for i in range(n):
        for s in plan_downstream(RngStream(406, i), shape, cfg):
            counts[s.name] = counts.get(s.name, 0) + 1
    expected = {"contrast": 1.0, "brightness": 1.0, "noise": 1.0, "flip": cfg.down_flip_p}
    bad += [f"downstream {k}" for k, p in expected.items() if not _rate_ok(counts.get(k, 0), n, p)]

    elapsed = time.time() - start
    passed = not bad and upper == 1.0 and below > 0 and elapsed < 120
    record(4, passed, f"rates outside 99% CI: {bad or 'none'}; mmode crop-top upper half {upper:.0%}; byol below-half crops {below} ({elapsed:.0f}s)")
    assert passed


# ---------------------------------------------------------------- 5


def test_criterion_05_auc_oracle():
    g = np.random.default_rng(505)
    mismatches = 0
    for _ in range(500):
        n = int(g.integers(2, 201))
        labels = g.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = g.integers(0, int(g.integers(2, 50)), n) / 7.0  # coarse grid -> many ties
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        if auc(scores, labels) != wins / (len(pos) * len(neg)):
            mismatches += 1
    record(5, mismatches == 0, f"500 score sets, {mismatches} inexact")
    assert mismatches == 0


# ---------------------------------------------------------------- 6, 9, 10


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    return synthetic_pipeline.run(tmp_path_factory.mktemp("synthetic") / "out")


def test_criterion_06_end_to_end(synthetic_run):
    a = synthetic_run["auc"]
    checks = {
        "(a) pretrained >= 0.90": a["pretrained"] >= 0.90,
        "(b) pretrained - supervised >= 0.05": a["pretrained"] - a["supervised"] >= 0.05,
        "(c) train+unlabeled >= train-only - 0.02": a["pretrained"] >= a["pretrained_train_only"] - 0.02,
    }
    minutes = synthetic_run["seconds"] / 60
    passed = all(checks.values())
    failed = [k for k, ok in checks.items() if not ok]
    record(
        6,
        passed,
        f"pretrained={a['pretrained']:.3f} supervised={a['supervised']:.3f} train-only={a['pretrained_train_only']:.3f} "
        f"failed={failed or 'none'} ({minutes:.1f} min for the shared synthetic run)",
    )
    assert passed


def test_criterion_09_grad_cam(synthetic_run):
    cams = synthetic_run["cams"]
    share = float(np.mean(cams[:, 1] > cams[:, 0])) if len(cams) else 0.0
    passed = len(cams) > 0 and share >= 0.8
    record(9, passed, f"heat below > above in {share:.0%} of {len(cams)} correctly classified positives (need 80%)")
    assert passed


def test_criterion_10_label_sweep(synthetic_run):
    sweep = synthetic_run["sweep"]
    fractions = sorted(sweep["pretrained"])
    monotone = all(
        sweep[arm][hi] >= sweep[arm][lo] - 0.03 for arm in ("pretrained", "supervised") for lo, hi in zip(fractions, fractions[1:])
    )
    gap = {f: sweep["pretrained"][f] - sweep["supervised"][f] for f in fractions}
    passed = monotone and gap[0.1] >= gap[1.0]
    table = " ".join(f"f{f:g}:{sweep['pretrained'][f]:.3f}/{sweep['supervised'][f]:.3f}" for f in fractions)
    record(10, passed, f"pretrained/supervised AUC {table}; monotone={monotone} gap0.1={gap[0.1]:.3f} gap1.0={gap[1.0]:.3f}")
    assert passed


# ---------------------------------------------------------------- 7


def test_criterion_07_freezing():
    g = np.random.default_rng(707)
    size = 16
    labels = np.array([0] * 12 + [1] * 6)
    stacks = [g.uniform(0, 255, (4, size, size)).astype(np.float32) * (0.4 if y else 1.0) for y in labels]
    train = LabeledSet([f"c{i}" for i in range(len(labels))], labels, stacks)
    val = train.subset(range(0, 18, 3))
    params = initialize(7, encoder=EncoderSpec.from_channels((4, 8, 8)), head=True)
    cfg = TrainConfig(epochs=2, batch_size=8, lr0=1e-3)

    linear = train_downstream(cfg.replace(mode="linear"), params, train, val).params
    fine = train_downstream(cfg.replace(mode="finetune"), params, train, val).params
    linear_ok = all(np.array_equal(linear[k], params[k]) for k in params.extractor_names())
    frozen = {k for k in params.names() if np.array_equal(fine[k], params[k])}
    fine_ok = frozen == set(params.names("block1"))
    record(7, linear_ok and fine_ok, f"linear extractor bit-identical={linear_ok}; finetune unchanged={sorted(frozen)}")
    assert linear_ok and fine_ok


# ---------------------------------------------------------------- 8


TINY = """\
synth.n_labeled = 60
synth.n_unlabeled = 20
synth.absent_fraction = 0.3
pretrain_epochs = 1
downstream_epochs = 2
pretrain_batch_size = 16
batch_size = 16
label_fractions = 0.5,1.0
saliency_count = 2
"""


def _cli_pipeline(out, config):
    common = ["--config", str(config), "--out", str(out), "--seed", "8"]
    for argv in (["synth"], ["extract"], ["pretrain"], ["probe"], ["finetune"], ["evaluate"], ["saliency"], ["sweep"]):
        assert main(argv + common) == 0, argv


def _diff(cmp):
    found = cmp.diff_files + cmp.left_only + cmp.right_only + cmp.funny_files
    for sub in cmp.subdirs.values():
        found += _diff(sub)
    return found


def test_criterion_08_determinism(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY)
    out = tmp_path / "out"
    _cli_pipeline(out, config)
    # the echoed config records the output path, so both runs must use the same one
    shutil.move(out, tmp_path / "first")
    _cli_pipeline(out, config)
    cmp = filecmp.dircmp(tmp_path / "first", out)
    n_files = sum(1 for p in out.rglob("*") if p.is_file())
    differing = _diff(cmp)
    # dircmp compares shallowly by stat; confirm with full byte comparison
    byte_diff = [p for p in out.rglob("*") if p.is_file() and p.read_bytes() != (tmp_path / "first" / p.relative_to(out)).read_bytes()]
    passed = not differing and not byte_diff
    record(8, passed, f"{n_files} files from synth..sweep, {len(differing) + len(byte_diff)} differ")
    assert passed
