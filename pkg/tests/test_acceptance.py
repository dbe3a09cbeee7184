"""End-to-end acceptance checks; each one records a PASS/FAIL line for the run summary.

The desk-corpus pipeline runs twice (once for the accuracy check, once more
for the determinism check), which takes a few minutes on one core.
"""

import json
import time

import numpy as np
import pytest

from flowsentry import evaluate, flows, nn, pcap, synth, train
from flowsentry.cli import main
from flowsentry.errors import BadMagic, ShapeMismatch, VersionMismatch
from oracles import random_capture, reference_assemble
from test_nn import gradient_check

RESULTS = {}

PUBLISHED_PRECISION, PUBLISHED_RECALL, PUBLISHED_F1 = 0.9864, 0.9784, 0.9824
BUDGET_SECONDS = 600.0


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def run_pipeline(root):
    steps = [
        ["synth", "--seed", "7", "--attack", "syn", "--benign-flows", "300",
         "--attack-flows", "300", "--duration", "60", "--out", f"{root}/corpus"],
        ["preprocess", "--pcap", f"{root}/corpus/capture.pcap", "--labels",
         f"{root}/corpus/labels.csv", "-t", "10", "-n", "100", "--seed", "7", "--out", f"{root}/ds"],
        ["train", "--dataset", f"{root}/ds", "--out", f"{root}/model", "--lr-grid", "1e-3",
         "--batch-grid", "32", "--seed", "7"],
        ["evaluate", "--dataset", f"{root}/ds", "--model", f"{root}/model/model.json",
         "--out", f"{root}/report", "--format", "json"],
    ]
    start = time.perf_counter()
    for argv in steps:
        code = main(argv)
        assert code == 0, f"{argv[0]} exited with {code}"
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_a")
    elapsed = run_pipeline(root)
    return root, elapsed


def test_criterion_1_metric_fixture():
    f1 = evaluate.f1_score(PUBLISHED_PRECISION, PUBLISHED_RECALL)
    ok = abs(f1 - PUBLISHED_F1) <= 5e-5
    record(1, "metric fixture", ok, f"F1({PUBLISHED_PRECISION}, {PUBLISHED_RECALL}) = {f1:.6f}, "
                                    f"published {PUBLISHED_F1} (tolerance 0.00005)")


@pytest.mark.slow
def test_criterion_2_desk_pipeline(desk_run):
    root, elapsed = desk_run
    rep = json.loads((root / "report/report.json").read_text())["metrics"]
    ok = rep["accuracy"] >= 0.97 and rep["f1"] >= 0.97 and elapsed <= BUDGET_SECONDS
    record(2, "desk pipeline", ok, f"test accuracy {rep['accuracy']:.4f} (>= 0.97), "
                                   f"F1 {rep['f1']:.4f} (>= 0.97), "
                                   f"wall time {elapsed:.0f} s (<= {BUDGET_SECONDS:.0f} s)")


def test_criterion_3_gradient_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for draw in range(25):
        n = (3, 8, 16)[draw % 3]
        worst = max(worst, gradient_check(rng, n, batch=2, n_filters=nn.N_FILTERS))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    record(3, "gradient oracle", ok, f"max relative error {worst:.2e} over 25 draws (< 1e-4), "
                                     f"{elapsed:.1f} s (< 60 s)")


def test_criterion_4_algorithm_oracle():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        packets = random_capture(rng, max_packets=1000)
        t = float(rng.choice([0.5, 2.0, 10.0]))
        n = int(rng.choice([1, 5, 100]))
        got = {(s.window_start, tuple(s.key)): s.rows[: s.row_count].tolist()
               for s in flows.assemble_samples(packets, flows.AssemblerConfig(t, n))}
        if got != reference_assemble(packets, t, n):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    record(4, "windowing oracle", ok, f"{mismatches} of 100 captures differ from the reference "
                                      f"(0 allowed), {elapsed:.1f} s (< 60 s)")


@pytest.mark.slow
def test_criterion_5_inference_throughput(desk_run):
    root, _ = desk_run
    d = flows.read_dataset(str(root / "ds"))
    params = nn.load_model(str(root / "model/model.json"))
    count = min(2000, len(d))
    # take the first 2000 preprocessed samples as the evaluated split
    probe = flows.Dataset(d.samples, d.stats, flows.Split(np.arange(0), np.arange(0),
                                                           np.arange(count)),
                          d.class_weights, d.t, d.n)
    _, _, elapsed = train.evaluate_split(params, probe, "test")
    stored = json.loads((root / "report/report.json").read_text())["inference_seconds"]
    ok = count == 2000 and elapsed <= 2.0 and stored > 0
    record(5, "inference throughput", ok, f"{count} samples of {d.n}x11 in {elapsed:.3f} s "
                                          f"(<= 2.0 s), report.json records {stored:.4f} s")


def test_criterion_6_normalization_invariant():
    rng = np.random.default_rng(6)
    checked, bad = 0, 0
    while checked < 1000:
        raw = flows.assemble_samples(random_capture(rng, max_packets=400),
                                     flows.AssemblerConfig(float(rng.choice([0.5, 5.0])), 12))
        if len(raw) < 2:
            continue
        stats = flows.fit_norm_stats(raw[: len(raw) // 2])
        for s in flows.prepare_samples(raw, stats, 12):
            real, pad = s.rows[: s.row_count], s.rows[s.row_count:]
            if real.min() < 0 or real.max() > 1 or pad.any():
                bad += 1
            checked += 1
    record(6, "normalization invariant", bad == 0,
           f"{bad} of {checked} samples out of [0,1] or with nonzero padding (0 allowed)")


@pytest.mark.slow
def test_criterion_7_early_stopping(desk_run):
    tiny = _tiny_dataset()
    _, hist = train.train(tiny, train.TrainConfig(lr=0.0, patience=10, max_epochs=100),
                          n_filters=8)
    root, _ = desk_run
    (point,) = json.loads((root / "model/gridsearch.json").read_text())["points"]
    after = point["epochs"] - point["best_epoch"]
    ok = hist.stop_reason == "patience" and hist.epochs == 11 and after <= 10
    record(7, "early stopping", ok, f"lr=0 stopped at epoch {hist.epochs} ({hist.stop_reason}; "
                                    f"expected 11, patience); desk run stopped {after} epochs "
                                    f"after its best (<= 10, {point['stop_reason']})")


def _tiny_dataset():
    rng = np.random.default_rng(0)
    samples = [flows.FlowSample(flows.make_flow_key("10.0.0.1", i + 1, "10.0.0.2", 80, 6),
                                float(i), rng.random((6, 11)).astype(np.float32), 6, i % 2)
               for i in range(40)]
    split = flows.split_dataset(40)
    return flows.Dataset(samples, flows.NormStats(np.zeros(11), np.ones(11)), split,
                         (1.0, 1.0), 10.0, 6)


def _model_tensors(path):
    doc = json.loads(path.read_text())
    return doc["tensors"]


@pytest.mark.slow
def test_criterion_8_determinism(desk_run, tmp_path_factory):
    root_a, _ = desk_run
    root_b = tmp_path_factory.mktemp("desk_b")
    run_pipeline(root_b)
    same = {}
    for name in ("samples.f32le", "labels.u8", "meta.json"):
        same[f"ds/{name}"] = (root_a / "ds" / name).read_bytes() == (root_b / "ds" / name).read_bytes()
    same["model tensors"] = (_model_tensors(root_a / "model/model.json")
                             == _model_tensors(root_b / "model/model.json"))
    rep_a = json.loads((root_a / "report/report.json").read_text())
    rep_b = json.loads((root_b / "report/report.json").read_text())
    same["report metrics"] = (rep_a["metrics"], rep_a["counts"]) == (rep_b["metrics"],
                                                                      rep_b["counts"])
    differing = [k for k, v in same.items() if not v]
    record(8, "determinism", not differing,
           "dataset arrays, model tensors and report metrics identical across two seeded runs"
           if not differing else f"differs: {differing}")


def test_criterion_9_round_trips(tmp_path):
    checks = {}
    spec = synth.SynthSpec(seed=9, benign_flows=40, attack_flows=20, duration=15,
                           attack_type="mixed")
    packets, labels = synth.generate(spec)
    synth.write_pcap(packets, str(tmp_path / "c.pcap"))
    checks["pcap"] = list(pcap.read_capture(str(tmp_path / "c.pcap"))) == packets

    d = flows.build_dataset(packets, synth.label_rules(labels), flows.AssemblerConfig(5.0, 20))
    flows.write_dataset(d, str(tmp_path / "ds"))
    back = flows.read_dataset(str(tmp_path / "ds"))
    checks["dataset"] = (back.x.tobytes() == d.x.tobytes() and np.array_equal(back.y, d.y)
                         and all(np.array_equal(a, b) for a, b in zip(back.split, d.split))
                         and back.stats.fingerprint() == d.stats.fingerprint())

    params = nn.ModelParams.init(np.random.default_rng(9))
    params.trained_with = nn.trained_with(d.t, d.n, d.stats, 9)
    nn.save_model(params, str(tmp_path / "m.json"))
    loaded = nn.load_model(str(tmp_path / "m.json"))
    checks["model"] = all(v.tobytes() == loaded.tensors()[k].tobytes()
                          for k, v in params.tensors().items())

    (tmp_path / "zero.pcap").write_bytes(b"\x00" * 24)
    checks["BadMagic"] = _raises(BadMagic, pcap.read_capture, str(tmp_path / "zero.pcap"))

    meta_path = tmp_path / "ds/meta.json"
    meta = json.loads(meta_path.read_text())
    meta_path.write_text(json.dumps(dict(meta, feature_count=12)))
    checks["ShapeMismatch"] = _raises(ShapeMismatch, flows.read_dataset, str(tmp_path / "ds"))
    meta_path.write_text(json.dumps(dict(meta, version=99)))
    checks["VersionMismatch"] = _raises(VersionMismatch, flows.read_dataset, str(tmp_path / "ds"))

    failed = [k for k, v in checks.items() if not v]
    record(9, "format round-trips", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} checks ok"
           + (f", failed: {failed}" if failed else f" ({', '.join(checks)})"))


def _raises(exc, fn, *args):
    try:
        fn(*args)
    except exc:
        return True
    except Exception:
        return False
    return False

