"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are echoed as they happen and
again in the terminal summary.  The desk-scale runs are shared between the
criteria that read them, so the module takes roughly 20-25 minutes on one core.
"""

import struct
import time

import numpy as np
import pytest

from conftest import record_criterion, tiny_problem
from reprompt.adapter import knn_probability
from reprompt.cli import main as cli_main
from reprompt.data import DatasetSpec, gen_synthetic, intra_class_variance, write_embeddings, write_labels
from reprompt.experiments import LADDER, database_for, run_experiment
from reprompt.numerics import RngStream, Tensor, grad_check
from reprompt.prompt_learner import REConvBlock, generate_dynamic_prompts, reconv_forward
from reprompt.retrieval import build_database, fuse_retrieved, load_database, query_topk, save_database
from reprompt.training import (
    RePromptModel,
    TrainConfig,
    batch_loss,
    checkpoint_bytes,
    guidance_factors,
    load_checkpoint,
    metrics_csv,
    save_checkpoint,
    train,
)

SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------------------
# 1. retrieval oracle equivalence


def scan_oracle(keys, query, k):
    """Plain-Python linear scan: similarity descending, index ascending."""
    scored = []
    for i, row in enumerate(keys):
        scored.append((-sum(a * b for a, b in zip(row, query)), i))
    scored.sort()
    return [i for _, i in scored[:k]], {i: -s for s, i in scored}


def test_criterion_1_retrieval_oracle():
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 129)), int(rng.integers(2, 17))
        X = rng.normal(size=(n, d))
        if seed % 4 == 0:
            X[rng.integers(0, n, n // 2)] = X[0]  # force exact ties
        db = build_database(X, np.zeros(n, dtype=int), 1)
        q = db.keys[0] if seed % 3 == 0 else rng.normal(size=d)
        q = q / np.linalg.norm(q)
        keys, query = db.keys.tolist(), q.tolist()
        for k in sorted({1, min(7, n), n}):
            got = [h.entry_index for h in query_topk(db, q, k)]
            want, sims = scan_oracle(keys, query, k)
            if got != want:
                # BLAS and the Python loop may round a tie apart by one ulp
                mismatches += any(abs(sims[a] - sims[b]) > 1e-12 for a, b in zip(got, want))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record_criterion(1, ok, f"{mismatches} mismatches over 1000 databases in {elapsed:.1f}s (limit 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient suite


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    cfg, db, X, y = tiny_problem(seed=7, gamma=0.5, adapter_in_training=True)
    assert (cfg.layers, cfg.dim, cfg.patches, cfg.k_re, cfg.N, cfg.J, db.n_classes, len(db)) == (
        2, 16, 4, 2, 4, 1, 3, 6,
    )
    model = RePromptModel(cfg, db)
    rng = np.random.default_rng(0)
    for b in model.learner.blocks:  # move off the zero init so every path carries gradient
        b.w_expand.data[...] = rng.normal(size=b.w_expand.shape) * 0.02
    z_q = model.frozen_features(X)
    pi = model.prompt_inputs(db, z_q)
    w = 1.0 + cfg.gamma * guidance_factors(db, z_q, y, cfg.n, cfg.tau)

    def loss():
        p, _ = model.forward(X, pi, use_adapter=True)
        return batch_loss(p, y, w)[0]

    groups = {"P_T": [], "P_I": [], "REConv": [], "adapter.keys": []}
    for name, t in model.parameters().items():
        groups[next(g for g in groups if name.startswith(g))].append(t)
    errors = {g: grad_check(loss, ts) for g, ts in groups.items()}
    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{g} {e:.1e}" for g, e in errors.items())
    record_criterion(2, ok, f"max rel err per group: {detail}; {elapsed:.1f}s (limit 120s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. limiting cases


def test_criterion_3_limiting_cases():
    checks = {}
    cfg, db, X, y = tiny_problem(seed=3)
    model = RePromptModel(cfg, db)
    rng = np.random.default_rng(1)
    for b in model.learner.blocks:
        b.w_expand.data[...] = rng.normal(size=b.w_expand.shape) * 0.02
    z_q = model.frozen_features(X)
    pi = model.prompt_inputs(db, z_q)

    model.adapter.lam = 0.0
    p0, _ = model.forward(X, pi, use_adapter=True)
    plain, _ = model.forward(X, pi, use_adapter=False)
    checks["lam=0 equals no-adapter path"] = p0.data.tobytes() == plain.data.tobytes()

    model.adapter.lam = 1.0
    p1, _ = model.forward(X, pi, use_adapter=True)
    z_hat = model.vision.forward(X, model.learner.prompts, generate_dynamic_prompts(model.learner, Tensor(pi)))
    knn = knn_probability(model.adapter, z_hat)
    checks["lam=1 equals pure kNN"] = p1.data.tobytes() == knn.data.tobytes()
    checks["kNN normalized"] = float(np.abs(knn.data.sum(axis=1) - 1).max()) < 1e-12

    p_t = guidance_factors(db, z_q, y, cfg.n, cfg.tau)
    loss_g0, ce = batch_loss(plain, y, 1.0 + 0.0 * p_t)
    checks["gamma=0 loss equals CE"] = abs(loss_g0.item() - ce.mean()) <= 1e-12

    v = rng.normal(size=(1, 16))
    v /= np.linalg.norm(v)
    checks["k_re=1 fusion returns the neighbor"] = fuse_retrieved(z_q[0], v).data.tobytes() == v[0].tobytes()

    block = REConvBlock.init(16, RngStream(0, 2))
    x = rng.normal(size=(16, 4))
    checks["zero-init REConv is identity"] = reconv_forward(block, x).data.tobytes() == x.tobytes()

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(3, ok, "all limits exact" if ok else f"failed: {failed}")
    assert ok


# ---------------------------------------------------------------------------
# shared desk-scale runs (criteria 4 and 5)


@pytest.fixture(scope="module")
def ladder_runs():
    runs = {}
    for seed in SEEDS:
        data = gen_synthetic(DatasetSpec(n_classes=10, dim=64, sigma=0.15, shots=16, test_per_class=200, seed=seed))
        base = TrainConfig(seed=seed)
        t0 = time.perf_counter()
        db = database_for(data, base)
        per_seed = {}
        for name, toggles in LADDER:
            model = RePromptModel(TrainConfig(seed=seed, **toggles), db)
            result = train(model, db, data.X_train, data.y_train, data.X_test, data.y_test)
            per_seed[name] = result
        runs[seed] = (per_seed, time.perf_counter() - t0)
    return runs


def test_criterion_4_desk_scale_end_to_end(ladder_runs):
    base = TrainConfig()
    assert (base.lam, base.gamma, base.beta, base.k_re, base.J) == (0.5, 1e-4, 10.0, 7, 7)
    acc = {
        seed: {name: r.metrics[-1].accuracy for name, r in per_seed.items()}
        for seed, (per_seed, _) in ladder_runs.items()
    }
    times = [t for _, t in ladder_runs.values()]
    for seed in SEEDS:
        row = "  ".join(f"{n} {a:.4f}" for n, a in acc[seed].items())
        print(f"  seed {seed}: {row}  ({ladder_runs[seed][1]:.0f}s)")
    full = np.mean([acc[s]["+Rb"] for s in SEEDS])
    vlpt = np.mean([acc[s]["VLPT"] for s in SEEDS])
    per_seed_ok = all(acc[s]["+Rb"] >= acc[s]["VLPT"] - 0.005 for s in SEEDS)
    ok = full >= 0.95 and full >= vlpt - 0.005 and per_seed_ok and max(times) < 300
    record_criterion(
        4,
        ok,
        f"full mean {full:.4f} (>= 0.95), VLPT mean {vlpt:.4f}, per-seed full >= VLPT-0.5pt: {per_seed_ok}, "
        f"slowest seed {max(times):.0f}s (limit 300s)",
    )
    assert ok


def test_criterion_5_guided_loss_sanity(ladder_runs):
    bound_ok = all(
        b.total >= b.ce
        for per_seed, _ in ladder_runs.values()
        for r in per_seed.values()
        for b in r.batch_losses
    )
    votes = []
    for seed in SEEDS[:3]:
        r = ladder_runs[seed][0]["+Rb"]
        pts = [m.mean_pt for m in r.metrics if m.split == "train"]
        votes.append(all(b <= a + 1e-15 for a, b in zip(pts, pts[1:])))
    ok = bound_ok and sum(votes) >= 2
    record_criterion(5, ok, f"total >= ce on every batch: {bound_ok}; mean p_t non-increasing in {sum(votes)}/3 seeds")
    assert ok


# ---------------------------------------------------------------------------
# 6. intra-class variance


def two_pass(Z, y, C):
    out = np.zeros(Z.shape[1])
    for c in range(C):
        rows = Z[y == c]
        mean = [sum(col) / len(rows) for col in rows.T]
        out += np.array([sum((v - m) ** 2 for v in col) / len(rows) for col, m in zip(rows.T, mean)])
    return out / C


def test_criterion_6_intra_class_variance():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        y = np.concatenate([np.arange(4), rng.integers(0, 4, 36)])
        Z = rng.normal(size=(40, 8)) * rng.uniform(0.1, 3)
        worst = max(worst, float(np.abs(intra_class_variance(Z, y, 4)[1] - two_pass(Z, y, 4)).max()))
    monotone = 0
    for seed in SEEDS:
        s = [
            intra_class_variance(ds.X_train, ds.y_train)[2]
            for ds in (gen_synthetic(DatasetSpec(sigma=sig, seed=seed)) for sig in (0.05, 0.1, 0.2))
        ]
        monotone += s[0] < s[1] < s[2]
    ok = worst <= 1e-12 and monotone >= 3
    record_criterion(6, ok, f"max |v - oracle| {worst:.1e} (<= 1e-12); monotone in sigma for {monotone}/5 seeds")
    assert ok


# ---------------------------------------------------------------------------
# 7. determinism and formats


def test_criterion_7_determinism_and_formats(tmp_path):
    blobs = []
    for _ in range(2):
        cfg, db, X, y = tiny_problem(seed=5, epochs=3, batch_size=2)
        model = RePromptModel(cfg, db)
        r = train(model, db, X, y, X, y)
        blobs.append((metrics_csv(r.metrics).encode(), checkpoint_bytes(model)))
    same_run = blobs[0] == blobs[1]

    save_database(db, tmp_path / "a.rpdb")
    db2 = load_database(tmp_path / "a.rpdb")
    save_database(db2, tmp_path / "b.rpdb")
    db_rt = (tmp_path / "a.rpdb").read_bytes() == (tmp_path / "b.rpdb").read_bytes() and np.array_equal(
        db2.labels, db.labels
    )
    save_checkpoint(model, tmp_path / "a.rpck")
    save_checkpoint(load_checkpoint(tmp_path / "a.rpck", db2), tmp_path / "b.rpck")
    ck_rt = (tmp_path / "a.rpck").read_bytes() == (tmp_path / "b.rpck").read_bytes()

    raw_db, raw_ck = (tmp_path / "a.rpdb").read_bytes(), (tmp_path / "a.rpck").read_bytes()
    write_embeddings(X, tmp_path / "x.rpem")
    write_labels(y, 3, tmp_path / "x.rplb")
    io_args = ["--features", str(tmp_path / "x.rpem"), "--labels", str(tmp_path / "x.rplb")]
    rejected = []
    for name, payload in (
        ("magic.rpdb", b"ZZZZ" + raw_db[4:]),
        ("version.rpdb", raw_db[:4] + struct.pack("<I", 2) + raw_db[8:]),
        ("magic.rpck", b"ZZZZ" + raw_ck[4:]),
        ("version.rpck", raw_ck[:4] + struct.pack("<I", 2) + raw_ck[8:]),
    ):
        (tmp_path / name).write_bytes(payload)
        db_path = tmp_path / (name if name.endswith("rpdb") else "a.rpdb")
        ck_path = tmp_path / (name if name.endswith("rpck") else "a.rpck")
        rc = cli_main(["eval", "--checkpoint", str(ck_path), "--db", str(db_path), *io_args])
        rejected.append(rc != 0)
    ok = same_run and db_rt and ck_rt and all(rejected)
    record_criterion(
        7,
        ok,
        f"identical runs byte-equal: {same_run}; db round trip: {db_rt}; checkpoint round trip: {ck_rt}; "
        f"corrupt magic/version rejected: {sum(rejected)}/4",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. shift recipe


def test_criterion_8_shift_recipe():
    t0 = time.perf_counter()
    base = {"seed": "0", "n_classes": "10", "dim": "64", "sigma": "0.15", "shots": "16", "test_per_class": "200"}
    report = run_experiment({"recipe": "shift", "shift": "0.2", **base})
    source, shifted, knn = (acc for _, acc in report.rows())
    elapsed = time.perf_counter() - t0
    drop = (source - shifted) * 100
    ok = drop < 30 and shifted >= knn and elapsed < 300
    record_criterion(
        8,
        ok,
        f"unshifted {source:.4f}, shifted {shifted:.4f} (drop {drop:.1f} pts < 30), "
        f"lam=1 kNN {knn:.4f}; {elapsed:.0f}s (limit 300s)",
    )
    assert ok
