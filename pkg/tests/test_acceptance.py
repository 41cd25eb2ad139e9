"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 4 to 6 train the desk-scale model (32x32x3 toy shapes, 2000 train /
500 test, 50 pre-training epochs) for three seeds with the desk cls weight
``desk.LAMBDA_CLS``. They share the pre-trained models through a session
fixture and take about 25 minutes on one core.
"""
import math
import time

import numpy as np
import pytest

from supmae import checkpoint as ck, clirun, datapipe as dp, desk, diffcore as dc, model as M
from supmae import objectives as obj, runlog, trainharness as th

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- 1. gradient fidelity

def test_c1_gradient_fidelity(accept):
    t0 = time.perf_counter()
    rep = clirun.gradcheck_run(seed=0)
    took = time.perf_counter() - t0
    mcfg = clirun.GRADCHECK_MODEL
    assert (mcfg.img_height, mcfg.in_chans, mcfg.patch_size, mcfg.embed_dim, mcfg.depth, mcfg.decoder_depth) == \
        (16, 1, 4, 32, 2, 1)
    trainable = [k for k in M.param_shapes(mcfg) if k not in M.FROZEN]
    ok = rep.passed and took < 60 and sorted(rep.errors) == sorted(trainable)
    accept(1, ok, f"worst rel err {rep.worst:.2e} over {len(rep.errors)} tensors in {took:.1f}s")
    assert ok, rep.table()


# ---------------------------------------------------------------- 2. information barrier

def test_c2_information_barrier(accept):
    mcfg = clirun.GRADCHECK_MODEL
    params, buffers = M.init_params(mcfg, 0, np.float64)
    data = dp.synthetic_shapes(4, 1, mcfg.img_height, mcfg.in_chans)
    patches = dp.patchify(data.images.astype(np.float64), mcfg.patch_size).patches
    plans = [dp.plan_for(0, i, 0, mcfg.num_patches, 0.75) for i in range(4)]
    rng = np.random.default_rng(5)
    noisy = patches.copy()
    for i, p in enumerate(plans):
        noisy[i, p.masked_idx] = rng.normal(0, 1e3, noisy[i, p.masked_idx].shape)
    outs = []
    for x in (patches, noisy):
        batch = dp.make_batch(x, data.labels, plans)
        P = M.bind(dc.Graph(), params)
        q_v, cls_feat = M.encode_visible(P, mcfg, batch.visible, batch.visible_idx)
        logits = M.classify_pooled(P, dict(buffers), mcfg, q_v, cls_feat)
        cls = obj.classification_loss(logits, batch.labels, mcfg.tau)
        outs.append([np.asarray(t.data).tobytes() for t in (q_v, logits, cls)])
    unchanged = outs[0] == outs[1]

    batch = dp.make_batch(patches, data.labels, plans)
    P = M.bind(dc.Graph(), params)
    q_v, _ = M.encode_visible(P, mcfg, batch.visible, batch.visible_idx)
    pred_data = M.decode_reconstruct(P, mcfg, q_v, batch.restore).data
    g = dc.Graph()
    pred = g.leaf("pred", pred_data)
    rec = obj.reconstruction_loss(pred, obj.norm_pix_targets(batch.targets), batch.masked_idx)
    grad = dc.backward(rec)["pred"]
    vis_zero = all(np.all(grad[i, p.visible_idx] == 0.0) for i, p in enumerate(plans))
    masked_live = all(np.any(grad[i, p.masked_idx] != 0.0) for i, p in enumerate(plans))
    ok = unchanged and vis_zero and masked_live
    accept(2, ok, f"q_v/logits/cls bitwise unchanged={unchanged}, visible dL/dpred == 0: {vis_zero}")
    assert ok


# ---------------------------------------------------------------- 3. degenerate objective

def test_c3_lambda_cls_zero_is_rec_only(accept):
    mcfg = M.ModelConfig(img_height=16, img_width=16, in_chans=1, embed_dim=16, depth=2, num_heads=2,
                         decoder_dim=16, decoder_depth=1, decoder_heads=2, head_hidden=16)
    data = dp.synthetic_shapes(8, 2, 16, 1)
    data = dp.ImageDataset(data.images.astype(np.float64), data.labels, data.num_classes)
    cfg = th.TrainConfig.for_mode("pretrain", epochs=50, warmup_epochs=5, batch_size=8, lambda_cls=0.0)

    def trace(loss_fn):
        st = th.pretrain_state(mcfg, cfg, np.float64)
        losses, snaps = [], []

        def step(state, m, i):
            losses.append(m.losses[-1])
            snaps.append({k: v.copy() for k, v in state.params.items() if not k.startswith("head.")})

        while st.epoch < cfg.epochs:
            th.pretrain_epoch(data, mcfg, cfg, st, loss_fn=loss_fn, on_step=step)
        return np.array(losses), snaps

    la, sa = trace(th.pretrain_loss)
    lb, sb = trace(th.rec_only_loss)
    worst_loss = float(np.max(np.abs(la - lb)))
    worst_param = max(float(np.max(np.abs(a[k] - b[k]))) for a, b in zip(sa, sb) for k in a)
    ok = len(la) == 50 and worst_loss <= 1e-12 and worst_param <= 1e-12
    accept(3, ok, f"{len(la)} steps, max |dloss| {worst_loss:.1e}, max |dparam| {worst_param:.1e}")
    assert ok


# ---------------------------------------------------------------- 4-6. desk-scale directions

@pytest.fixture(scope="session")
def desk_runs():
    runs = {}
    for seed in SEEDS:
        train, test = desk.data(seed)
        runs[seed] = (train, test, desk.pretrain(train, seed, desk.LAMBDA_CLS))
    return runs


@pytest.mark.slow
def test_c4_joint_beats_rec_only_under_linear_probe(desk_runs, accept):
    joint, rec, cpu = [], [], []
    for seed, (train, test, pre) in desk_runs.items():
        base = desk.pretrain(train, seed, 0.0)
        cpu += [pre.seconds, base.seconds]
        joint.append(desk.linprobe_accuracy(pre.params, train, test, seed))
        rec.append(desk.linprobe_accuracy(base.params, train, test, seed))
    wins = sum(j > r for j, r in zip(joint, rec))
    gap = 100 * (np.mean(joint) - np.mean(rec))
    ok = wins >= 2 and gap >= 2.0 and max(cpu) <= 1800
    accept(4, ok, f"lin joint {desk.summarize(joint)} vs rec {desk.summarize(rec)}; "
                  f"wins {wins}/3, gap {gap:+.1f} pts, max pretrain cpu {max(cpu):.0f}s")
    assert ok


@pytest.mark.slow
def test_c5_full_image_beats_partial_patches(desk_runs, accept):
    full, part = [], []
    for seed, (_, test, pre) in desk_runs.items():
        a, b = desk.partial_patch(pre, test, 0.25, range(5))
        full.append(a)
        part.append(b)
    wins = sum(a >= b for a, b in zip(full, part))
    ok = wins >= 2
    accept(5, ok, f"keep=1 {desk.summarize(full)} vs keep=0.25 {desk.summarize(part)}; wins {wins}/3")
    assert ok


@pytest.mark.slow
def test_c6_pretrained_init_beats_random_after_one_epoch(desk_runs, accept):
    pre_acc, rnd_acc = [], []
    for seed, (train, test, pre) in desk_runs.items():
        pre_acc.append(desk.first_finetune_epoch(pre.params, train, test, seed))
        rnd_acc.append(desk.first_finetune_epoch(None, train, test, seed))
    wins = sum(a > b for a, b in zip(pre_acc, rnd_acc))
    ok = wins == 3
    accept(6, ok, f"epoch-1 ft pretrained {desk.summarize(pre_acc)} vs random {desk.summarize(rnd_acc)}; wins {wins}/3")
    assert ok


# ---------------------------------------------------------------- 7. schedules

def test_c7_schedule_exactness(accept):
    peak, total, warm = 4e-3, 1000, 100
    mid = warm + (total - 1 - warm) // 2
    # hand values: 0 at step 0, peak at the end of warmup, cosine midpoint, 0 at the last step
    progress = (mid - warm) / (total - 1 - warm)
    hand = {0: 0.0, warm: peak, mid: peak * 0.5 * (1 + math.cos(math.pi * progress)), total - 1: 0.0}
    errs = [abs(th.lr_at(s, total, warm, peak) - v) for s, v in hand.items()]
    scaled = th.scaled_lr(1.5e-4, 4096) == 2.4e-3
    m = th.layerwise_multipliers(12, 0.65)
    mono = all(a < b for a, b in zip(m, m[1:])) and m[-1] == 1.0
    ok = max(errs) <= 1e-9 * peak and scaled and mono
    accept(7, ok, f"max lr error {max(errs):.1e} (bound {1e-9 * peak:.1e}), scaled_lr exact={scaled}, "
                  f"multipliers monotone with head=1: {mono}")
    assert ok


# ---------------------------------------------------------------- 8. loss analytics

def test_c8_loss_analytics(accept):
    ce_err = 0.0
    for k in (2, 10, 100):
        g = dc.Graph()
        logits = g.leaf("z", np.full((4, k), 0.7))
        ce = obj.classification_loss(logits, np.arange(4) % k, 10.0)
        ce_err = max(ce_err, abs(float(ce.data) - math.log(k)))
    x = np.random.default_rng(0).random((8, 49, 48))
    t = obj.norm_pix_targets(x)
    mean_err = float(np.abs(t.mean(-1)).max())
    var_err = float(np.abs(t.var(-1) - 1).max())
    g = dc.Graph()
    rec, cls = g.leaf("r", np.array(0.83)), g.leaf("c", np.array(2.1))
    lin_err = 0.0
    for which in (0, 1):
        lams = (0.5, 1.0, 2.0)
        vals = [float(obj.joint_loss(rec, cls, obj.LossWeights(*((lam, 0.01) if which == 0 else (1.0, lam))))[0].data)
                for lam in lams]
        pred = vals[0] + (vals[1] - vals[0]) / (lams[1] - lams[0]) * (lams[2] - lams[0])
        lin_err = max(lin_err, abs(vals[2] - pred))
    ok = ce_err <= 1e-9 and mean_err <= 1e-6 and var_err <= 1e-4 and lin_err <= 1e-12
    accept(8, ok, f"|CE - ln K| {ce_err:.1e}, norm_pix mean {mean_err:.1e} |var-1| {var_err:.1e}, "
                  f"joint linearity {lin_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 9. operational soundness

TINY_CFG = """\
img_height = 16
img_width = 16
in_chans = 1
embed_dim = 16
depth = 2
num_heads = 2
decoder_dim = 16
decoder_heads = 2
head_hidden = 16
toy_train = 64
toy_test = 32
epochs = 3
warmup_epochs = 1
batch_size = 16
"""


def test_c9_operational_soundness(tmp_path, accept):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    a, b, r = tmp_path / "a", tmp_path / "b", tmp_path / "resumed"
    assert clirun.main(["pretrain", "--config", str(cfg), "--out", str(a), "--save-every", "1"]) == 0
    assert clirun.main(["pretrain", "--config", str(cfg), "--out", str(b)]) == 0
    final = a / "ckpt-final.smae"

    ck.save(tmp_path / "again.smae", ck.load(final))
    byte_identical = (tmp_path / "again.smae").read_bytes() == final.read_bytes()

    assert clirun.main(["pretrain", "--ckpt", str(a / "ckpt-epoch-1.smae"), "--out", str(r)]) == 0
    resume_bitwise = (r / "ckpt-final.smae").read_bytes() == final.read_bytes() and \
        runlog.metric_rows(r / "run.log") == [x for x in runlog.metric_rows(a / "run.log") if x["epoch"] >= 1]

    logs_identical = (a / "run.log").read_bytes() == (b / "run.log").read_bytes()

    blob = final.read_bytes()
    rejected = 0
    for cut in (1, 4, 100, len(blob) // 2, len(blob) - 1):
        bad = tmp_path / "bad.smae"
        bad.write_bytes(blob[:len(blob) - cut])
        try:
            ck.load(bad)
        except ck.CheckpointError:
            rejected += 1
    exit_code = clirun.main(["inspect", str(tmp_path / "bad.smae")])
    ok = byte_identical and resume_bitwise and logs_identical and rejected == 5 and exit_code == clirun.EXIT["checkpoint"]
    accept(9, ok, f"save/load/save identical={byte_identical}, resume bitwise={resume_bitwise}, "
                  f"rerun logs identical={logs_identical}, truncations rejected {rejected}/5 (cli exit {exit_code})")
    assert ok


# ---------------------------------------------------------------- 10. masking statistics

def test_c10_masking_statistics(accept):
    n, ratio, plans = 16, 0.75, 10_000
    counts = np.zeros(n)
    for i in range(plans):
        counts[dp.plan_for(0, i, 0, n, ratio).masked_idx] += 1
    freq = counts / plans
    freq_ok = bool(np.all(np.abs(freq - 0.75) <= 0.02))
    bad = 0
    rng = np.random.default_rng(0)
    for size in range(1, 257):
        for r in (0, 0.25, 0.5, 0.75, 0.9):
            p = dp.build_mask_plan(size, r, rng)
            both = np.concatenate([p.visible_idx, p.masked_idx])
            if not (np.array_equal(np.sort(both), np.arange(size)) and len(p.visible_idx) >= 1
                    and len(np.intersect1d(p.visible_idx, p.masked_idx)) == 0):
                bad += 1
    ok = freq_ok and bad == 0
    accept(10, ok, f"mask frequency in [{freq.min():.4f}, {freq.max():.4f}], partition violations {bad}/1280")
    assert ok
