"""Acceptance criteria, one test per criterion, at their stated scales and tolerances.

Each test carries ``@pytest.mark.acceptance(n, title)``; conftest prints one
PASS/FAIL line per criterion at the end of the session.
"""

import csv
import dataclasses
import io
import itertools
import time

import numpy as np
import pytest

from braidnet import arch, braid, cli, data, experiments, model, nn
from braidnet.arch import Crossing
from braidnet.model import BraidNetModel, MixConfig
from helpers import FD_STEP, check_layer, max_rel_error

acceptance = pytest.mark.acceptance


# ---------------------------------------------------------------- 1. braid algebra


def swap_replay(word):
    """Oracle permutation: follow strands through explicit position swaps."""
    at = list(range(word.strands))  # at[p] = strand currently at position p
    for g in word.letters:
        at[g.index - 1], at[g.index] = at[g.index], at[g.index - 1]
    final = [0] * word.strands
    for p, s in enumerate(at):
        final[s] = p + 1
    return tuple(final)


@acceptance(1, "braid algebra suite (>=1000 random words, m<=6, length<=12, <10 s)")
def test_braid_algebra_suite(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures, checked = [], 0
    for i in range(1500):
        m = int(rng.integers(2, 7))
        w1 = braid.random_word(m, int(rng.integers(0, 13)), seed=2 * i)
        w2 = braid.random_word(m, int(rng.integers(0, 13)), seed=2 * i + 1)
        checked += 1
        r = braid.free_reduce(w1)
        if braid.free_reduce(r) != r:
            failures.append(("idempotence", w1))
        if any(a == b.inverse for a, b in zip(r.letters, r.letters[1:])):
            failures.append(("reduced form", w1))
        if braid.permutation(r) != braid.permutation(w1):
            failures.append(("reduction keeps permutation", w1))
        if braid.permutation(w1).mapping != swap_replay(w1):
            failures.append(("permutation oracle", w1))
        p12 = braid.permutation(braid.compose(w1, w2))
        if p12 != braid.permutation(w1).then(braid.permutation(w2)) or p12.mapping != swap_replay(
                braid.compose(w1, w2)):
            failures.append(("homomorphism", w1, w2))
        cancel = braid.compose(w1, braid.inverse(w1))
        if braid.free_reduce(cancel).letters or braid.permutation(cancel) != braid.StrandPermutation.identity(m):
            failures.append(("inverse cancellation", w1))
        if m >= 4:
            i_, j_ = 1, int(rng.integers(3, m))
            a = braid.Generator(i_, int(rng.choice([1, -1])))
            b = braid.Generator(j_, int(rng.choice([1, -1])))
            left = braid.BraidWord(m, w1.letters + (a, b) + w2.letters)
            right = braid.BraidWord(m, w1.letters + (b, a) + w2.letters)
            if braid.permutation(left) != braid.permutation(right):
                failures.append(("far commutation", left))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{checked} words, {len(failures)} failures, {elapsed:.2f} s")
    assert checked >= 1000
    assert failures == []
    assert elapsed < 10


# ---------------------------------------------------------------- 2. gradient oracle


def layer_errors(rng):
    x4 = rng.standard_normal((2, 2, 8, 8))
    errs = {}
    for pad in (0, 2):
        w, b = rng.standard_normal((3, 2, 5, 5)), rng.standard_normal(3)
        errs[f"conv(pad={pad})"] = check_layer(
            lambda x, w, b, t: nn.conv2d_forward(x, w, b, padding=pad, tape=t, key="p"), x4, (w, b), rng=rng)
    errs["maxpool"] = check_layer(lambda x, t: nn.maxpool_forward(x, 2, 2, tape=t), x4, rng=rng)
    errs["flatten"] = check_layer(lambda x, t: nn.flatten(x, 1, tape=t), x4, rng=rng)
    xd = rng.standard_normal((2, 5, 7))
    w, b = rng.standard_normal((2, 7, 4)), rng.standard_normal((2, 4))
    errs["dense"] = check_layer(lambda x, w, b, t: nn.dense_forward(x, w, b, tape=t, key="p"), xd, (w, b), rng=rng)
    xa = rng.standard_normal((4, 6))
    xa[np.abs(xa) < 1e-3] = 0.5
    for fn in (nn.relu, nn.sigmoid, nn.softmax):
        errs[fn.__name__] = check_layer(lambda x, t, fn=fn: fn(x, tape=t), xa, rng=rng)
    p = rng.uniform(0.05, 0.95, (4, 3))
    t = (rng.random((4, 3)) < 0.5).astype(float)
    errs["bce"] = max_rel_error(nn.bce_grad(p, t), _fd_scalar(lambda: nn.bce_loss(p, t), p))
    q = nn.softmax(rng.standard_normal((4, 3)))
    y = np.array([0, 2, 1, 2])
    errs["ce"] = max_rel_error(nn.ce_grad(q, y), _fd_scalar(lambda: nn.ce_loss(q, y), q))
    return errs


def _fd_scalar(f, arr, h=FD_STEP):
    g = np.zeros_like(arr)
    for k in range(arr.size):
        orig = arr.flat[k]
        arr.flat[k] = orig + h
        fp = f()
        arr.flat[k] = orig - h
        fm = f()
        arr.flat[k] = orig
        g.flat[k] = (fp - fm) / (2 * h)
    return g


def strand_fd(m: BraidNetModel, strand: int, x, y, h=FD_STEP, chunk=128):
    """Central differences of strand ``strand``'s one-vs-all loss w.r.t. each of its parameters.

    The strand is replicated ``2 * chunk`` times on the strand axis of an uncrossed
    stack with identical modules; copy j carries +h (first half) or -h (second
    half) on one entry, so one forward pass yields ``chunk`` differences.
    """
    reps = 2 * chunk
    spec = arch.build_ndnn(reps, m.spec.input_shape, conv_padding=m.spec.modules[0].layers[0].padding)
    assert spec.modules == m.spec.modules
    rep = BraidNetModel(spec, [np.repeat(w[strand][None], reps, 0) for w in m.weights],
                        [np.repeat(b[strand][None], reps, 0) for b in m.biases])
    target = (np.asarray(y) == strand).astype(float)

    def losses():
        p = rep.raw_forward(x)[..., 0]  # (reps, B)
        assert np.all((p > nn.EPS) & (p < 1 - nn.EPS))
        return -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p), axis=1)

    out = []
    for arrs in (rep.weights, rep.biases):
        grads = []
        for arr in arrs:
            flat = arr.reshape(reps, -1)
            g = np.empty(flat.shape[1])
            for start in range(0, flat.shape[1], chunk):
                idx = np.arange(start, min(start + chunk, flat.shape[1]))
                rows = np.arange(len(idx))
                orig = flat[0, idx].copy()
                flat[rows, idx] = orig + h
                flat[chunk + rows, idx] = orig - h
                L = losses()
                flat[rows, idx] = orig
                flat[chunk + rows, idx] = orig
                g[idx] = (L[rows] - L[chunk + rows]) / (2 * h)
            grads.append(g.reshape(arr.shape[1:]))
        out.append(grads)
    return out


@acceptance(2, "gradient oracle (every layer + 2-strand BraidNet on 12x12, rel err < 1e-4, <60 s)")
def test_gradient_oracle(record_property):
    t0 = time.perf_counter()
    errs = layer_errors(np.random.default_rng(7))
    train, _ = data.synth_split(2, 1, 1, 12, seed=3)
    spec = arch.build_braidnet(2, (1, 12, 12), crossings_per_gap=1, seed=5, conv_padding=2)
    m = BraidNetModel.init(spec, 11)
    model.apply_schedule(m, 0.01)  # evaluate at a post-crossing state
    x, y = train.inputs, train.labels
    _, dw, db = m.gradients(x, y)
    worst_net, n_params = 0.0, 0
    for s in range(spec.strands):
        fw, fb = strand_fd(m, s, x, y)
        for d in range(m.depth):
            worst_net = max(worst_net, max_rel_error(dw[d][s], fw[d]), max_rel_error(db[d][s], fb[d]))
            n_params += fw[d].size + fb[d].size
    errs["braidnet"] = worst_net
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    record_property("detail", f"{n_params} network parameters, worst {worst}={errs[worst]:.2e}, {elapsed:.1f} s")
    assert n_params == sum(p.size for p in m.parameters())
    assert all(e < 1e-4 for e in errs.values()), errs
    assert elapsed < 60


# ---------------------------------------------------------------- 3. alpha = 0 equivalence


def _trajectory(metrics):
    return [(e.epoch, e.train_loss, e.train_acc, e.test_acc) for e in metrics]


@acceptance(3, "alpha=0 BraidNet equals NDNN bit-for-bit over 3 epochs on the default synthetic data")
def test_alpha_zero_equivalence(record_property):
    datasets = experiments.load_data(experiments.DataRef(), 10)
    base = experiments.RunConfig("ndnn", epochs=3, master_seed=4)
    ref = _trajectory(experiments.run(base, datasets))
    variants = {"braidnet k=1": ("braidnet", 1), "braidnet k=3": ("braidnet", 3), "random k=2": ("random", 2)}
    for label, (kind, k) in variants.items():
        cfg = dataclasses.replace(base, arch=kind, crossings_per_gap=k, mix=MixConfig(alpha=0.0))
        assert _trajectory(experiments.run(cfg, datasets)) == ref, label
    record_property("detail", f"{len(variants)} schedules, final ndnn test acc {ref[-1][3]:.3f}")


# ---------------------------------------------------------------- 4. mixing semantics


def _scalar_two_phase(values, pairs, alpha):
    pre = dict(values)
    delta = {}
    for under, over in pairs:
        delta[over] = delta.get(over, 0.0) + alpha * pre[under]
    return {s: pre[s] + delta[s] if s in delta else pre[s] for s in pre}


@acceptance(4, "crossing semantics: under unchanged, over = W_over + alpha*W_under exactly, two-phase gap reads")
def test_mixing_semantics():
    spec = arch.build_ndnn(4, (1, 16, 16))
    alpha = 0.37
    for d_gap, (under, over) in itertools.product(range(4), [(0, 1), (1, 0), (3, 2)]):
        m = BraidNetModel.init(spec, d_gap)
        pre_w = [w.copy() for w in m.weights]
        pre_b = [b.copy() for b in m.biases]
        model.apply_crossing(m, Crossing(d_gap, under=under, over=over), alpha)
        d = d_gap + 1
        assert np.array_equal(m.weights[d][under], pre_w[d][under])
        assert np.array_equal(m.weights[d][over], pre_w[d][over] + alpha * pre_w[d][under])
        assert np.array_equal(m.biases[d][over], pre_b[d][over] + alpha * pre_b[d][under])
        for dd in range(m.depth):
            for s in range(4):
                if (dd, s) != (d, over):
                    assert np.array_equal(m.weights[dd][s], pre_w[dd][s])
                    assert np.array_equal(m.biases[dd][s], pre_b[dd][s])

    # one gap: a chain 0->1->2, a shared under-strand 0->3, and a swap 2<->3
    pairs = [(0, 1), (1, 2), (0, 3), (3, 2), (2, 3)]
    m = BraidNetModel.init(spec, 9)
    pre_w = [w.copy() for w in m.weights]
    model.apply_gap(m, [Crossing(1, u, o) for u, o in pairs], alpha)
    rng = np.random.default_rng(0)
    for flat_idx in rng.choice(pre_w[2][0].size, 50, replace=False):
        idx = np.unravel_index(flat_idx, pre_w[2][0].shape)
        expect = _scalar_two_phase({s: float(pre_w[2][s][idx]) for s in range(4)}, pairs, alpha)
        for s in range(4):
            assert m.weights[2][s][idx] == pytest.approx(expect[s], rel=1e-15, abs=0)


# ---------------------------------------------------------------- 5. learning-speed comparison


@pytest.mark.slow
@acceptance(5, "BraidNet vs DNN: median test acc at epoch 5 >= DNN, final >= DNN - 0.02 (5 seeds, 30 epochs)")
def test_braidnet_learns_faster_than_dnn(record_property):
    common = dict(num_classes=10, epochs=30, data=experiments.DataRef(train_per_class=200, image_side=16))
    configs = {
        "dnn": experiments.RunConfig("dnn", **common),
        "braidnet": experiments.RunConfig("braidnet", crossings_per_gap=1, mix=MixConfig(alpha=0.01), **common),
    }
    report = experiments.compare(configs, seeds=range(5), keep_going=False)
    b5, d5 = report.median_at("braidnet", 5), report.median_at("dnn", 5)
    bf, df = report.median_at("braidnet", 30), report.median_at("dnn", 30)
    record_property("detail", f"epoch 5 braidnet={b5:.3f} dnn={d5:.3f}; epoch 30 braidnet={bf:.3f} dnn={df:.3f}")
    assert b5 >= d5
    assert bf >= df - 0.02


# ---------------------------------------------------------------- 6. sweep harness


def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0
    return code


def _check_schema(rows):
    for r in rows:
        assert tuple(r) == experiments.CSV_FIELDS
        assert int(r["seed"]) >= 0 and int(r["epoch"]) >= 1
        assert np.isfinite(float(r["train_loss"])) and float(r["wall_ms"]) >= 0
        assert 0 <= float(r["train_acc"]) <= 1 and 0 <= float(r["test_acc"]) <= 1


@pytest.mark.slow
@acceptance(6, "sweep --k 1,2,3,4,5 gives 5 x 30 rows with a valid schema; k=0 equals NDNN bit-exactly")
def test_sweep_harness(tmp_path, record_property):
    out = tmp_path / "sweep.csv"
    _cli("sweep", "--k", "1,2,3,4,5", "--seeds", "0", "--epochs", 30, "--out", out)
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 5 * 30
    _check_schema(rows)
    for k in range(1, 6):
        assert [int(r["epoch"]) for r in rows if r["arch"] == f"braidnet-k{k}"] == list(range(1, 31))
    finals = {r["arch"]: float(r["test_acc"]) for r in rows if r["epoch"] == "30"}
    early = {r["arch"]: float(r["test_acc"]) for r in rows if r["epoch"] == "3"}

    k0, nd = tmp_path / "k0.csv", tmp_path / "ndnn.csv"
    _cli("sweep", "--k", "0", "--seeds", "0", "--epochs", 30, "--out", k0)
    _cli("train", "--arch", "ndnn", "--seed", "0", "--epochs", 30, "--out", nd)
    drop = ("arch", "wall_ms")
    assert experiments.deterministic_body(k0.read_text(), drop) == experiments.deterministic_body(nd.read_text(), drop)
    fmt = lambda d: ",".join(f"{n[-2:]}={v:.3f}" for n, v in d.items())
    record_property("detail", f"test acc epoch 3 [{fmt(early)}], epoch 30 [{fmt(finals)}] (reported, not gated)")


# ---------------------------------------------------------------- 7. determinism


@pytest.mark.slow
@acceptance(7, "identical config reruns give byte-identical CSV bodies")
def test_rerun_is_byte_identical(tmp_path, record_property):
    argv = ["compare", "--arch", "dnn,ndnn,braidnet,random", "--crossings", "2", "--seeds", "0,1", "--epochs", "3"]
    texts, manifests = [], []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        _cli(*argv, "--out", out)
        texts.append(out.read_text())
        manifests.append((tmp_path / f"run{i}.csv.manifest.json").read_bytes())
    bodies = [experiments.deterministic_body(t).encode() for t in texts]
    assert bodies[0] == bodies[1]
    assert manifests[0] == manifests[1]
    assert texts[0].splitlines()[0] == texts[1].splitlines()[0]
    record_property("detail", f"{len(texts[0].splitlines()) - 1} rows, wall_ms excluded")


# ---------------------------------------------------------------- 8. IDX round trip


@acceptance(8, "IDX round trip is exact; bad magic, truncation and count mismatch raise distinct errors")
def test_idx_round_trip_and_errors(tmp_path):
    train, test = data.synth_split(10, 200, 50, 16, seed=0)
    for code in (data.IDX_UBYTE, data.IDX_FLOAT64):
        for name, ds in (("train", train), ("test", test)):
            img, lab = tmp_path / f"{name}{code}-img", tmp_path / f"{name}{code}-lab"
            data.save_idx(ds, img, lab, code)
            back = data.load_idx(img, lab, 10)
            assert back.inputs.dtype == ds.inputs.dtype and back.inputs.shape == ds.inputs.shape
            assert back.inputs.tobytes() == ds.inputs.tobytes()
            assert np.array_equal(back.labels, ds.labels)

    img, lab = tmp_path / "train8-img", tmp_path / "train8-lab"
    raw = img.read_bytes()
    cases = {}
    (tmp_path / "magic").write_bytes(b"\x01" + raw[1:])
    cases[data.BadMagicError] = (tmp_path / "magic", lab)
    (tmp_path / "short").write_bytes(raw[:-7])
    cases[data.TruncatedPayloadError] = (tmp_path / "short", lab)
    small = data.Dataset(test.inputs[:5], test.labels[:5], 10)
    data.save_idx(small, tmp_path / "small-img", tmp_path / "small-lab")
    cases[data.CountMismatchError] = (img, tmp_path / "small-lab")
    raised = []
    for expected, (i, l) in cases.items():
        with pytest.raises(data.IdxError) as info:
            data.load_idx(i, l)
        assert type(info.value) is expected
        raised.append(type(info.value))
    assert len(set(raised)) == 3
