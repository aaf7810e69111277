import csv
import json
import shutil

import pytest
import yaml

from econsandbox.cli import main
from econsandbox.dialogue import role_schedule


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _config(tmp_path, **sections):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(sections))
    return path


def _outputs(d):
    files = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                m = json.loads(data)
                m.pop("started"), m.pop("finished")
                data = json.dumps(m, sort_keys=True).encode()
            files[str(p.relative_to(d))] = data
    return files


def test_generate_then_simulate_retail_oracle(tmp_path, capsys, small_market_dir):
    out = tmp_path / "out"
    code, text, _ = _run(capsys, "--mock", "--data", small_market_dir, "--out", out,
                         "simulate", "--mode", "retail")
    assert code == 0, text
    report = json.loads((out / "report.json").read_text())
    assert (report["hit_rate"], report["quantity_error"], report["stability"]) == (1.0, 0.0, 0.0)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"episodes.jsonl", "report.json", "report.md"}
    assert "| Hit Rate | 1.0000 |" in (out / "report.md").read_text()


def test_global_flags_after_subcommand(tmp_path, capsys, small_market_dir):
    code, _, _ = _run(capsys, "simulate", "--mode", "meanfield", "--data", small_market_dir,
                      "--out", tmp_path)
    assert code == 0


def test_evaluate_oracle_and_errors(tmp_path, capsys, small_market_dir):
    sim = tmp_path / "sim"
    assert _run(capsys, "--mock", "--data", small_market_dir, "--out", sim, "simulate")[0] == 0
    ev = tmp_path / "ev"
    code, text, _ = _run(capsys, "--out", ev, "evaluate", "--episodes", sim / "episodes.jsonl",
                         "--truth", sim / "truth.jsonl")
    assert code == 0 and text.startswith("hit rate 1.0000, quantity error 0.0000, stability 0.0000")
    code, _, err = _run(capsys, "--out", ev, "evaluate", "--episodes", sim / "episodes.jsonl",
                        "--truth", sim / "truth.jsonl", "--ood")
    assert code == 2 and "--ood" in err
    rows = (sim / "episodes.jsonl").read_text().splitlines()
    first = json.loads(rows[0])["instance_id"]
    (tmp_path / "short.jsonl").write_text("\n".join(rows[1:]) + "\n")
    code, _, err = _run(capsys, "--out", ev, "evaluate", "--episodes", tmp_path / "short.jsonl",
                        "--truth", sim / "truth.jsonl")
    assert code == 1 and first in err


def test_evaluate_ood(tmp_path, capsys, small_market, small_market_dir):
    cats = sorted({p.category for p in small_market.catalog.values()})
    cfg = _config(tmp_path, split={"train": cats[:2], "test": cats[2:]})
    sim = tmp_path / "sim"
    assert _run(capsys, "--mock", "--data", small_market_dir, "--out", sim, "simulate")[0] == 0
    code, _, _ = _run(capsys, "--config", cfg, "--out", tmp_path / "ev", "evaluate",
                      "--episodes", sim / "episodes.jsonl", "--truth", sim / "truth.jsonl", "--ood")
    assert code == 0
    rec = json.loads((tmp_path / "ev" / "ood_report.json").read_text())
    assert rec["train_categories"] == cats[:2] and rec["test_categories"] == cats[2:]
    assert rec["metrics"]["hit_rate"]["delta"] == 0


def test_build_dataset_counts(tmp_path, capsys, small_market_dir):
    data = tmp_path / "data"
    shutil.copytree(small_market_dir, data)
    lines = (data / "transactions.csv").read_text().splitlines()
    (data / "transactions.csv").write_text("\n".join(lines[:51]) + "\n")
    code, text, _ = _run(capsys, "--data", data, "--out", tmp_path / "o", "build-dataset")
    assert code == 0 and text.startswith("wrote 50 examples")
    assert len((tmp_path / "o" / "alignment.jsonl").read_text().splitlines()) == 50


def test_empty_transactions_exit_2(tmp_path, capsys, small_market_dir):
    data = tmp_path / "data"
    shutil.copytree(small_market_dir, data)
    header = (data / "transactions.csv").read_text().splitlines()[0]
    (data / "transactions.csv").write_text(header + "\n")
    code, _, err = _run(capsys, "--data", data, "--out", tmp_path / "o", "build-dataset")
    assert code == 2 and "transactions" in err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = _config(tmp_path, retail={"kk": 3})
    assert _run(capsys, "--config", bad, "bound", "--d", 1, "--n-target", 1, "--n-full", 1)[0] == 2
    missing = _config(tmp_path, paths={"transactions": str(tmp_path / "nope.csv")})
    assert _run(capsys, "--config", missing, "build-dataset")[0] == 2
    assert _run(capsys, "--out", tmp_path, "build-dataset")[0] == 2


def test_bound(capsys):
    code, text, _ = _run(capsys, "bound", "--d", 100, "--n-target", 100, "--n-full", 10000,
                         "--lambda", 0)
    assert code == 0 and text.strip() == "0.9"
    assert _run(capsys, "bound", "--d", 1, "--n-target", 10, "--n-full", 5)[0] == 2


def test_calibrate_shift(tmp_path, capsys):
    real = [{"category": "A", "income_bracket": "low", "discount": 0.0, "quantity": q}
            for q in [1] * 20 + [2] * 40 + [3] * 30 + [4] * 10]
    sim = [{**r, "quantity": r["quantity"] + 2} for r in real]
    for name, rows in (("real", real), ("sim", sim)):
        (tmp_path / f"{name}.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, text, _ = _run(capsys, "--out", tmp_path / "o", "calibrate", "--sim", tmp_path / "sim.jsonl",
                         "--real", tmp_path / "real.jsonl")
    assert code == 0
    reduction = float(text.split("reduction ")[1].split("%")[0])
    assert reduction >= 90
    doc = json.loads((tmp_path / "o" / "calibration.json").read_text())
    assert set(doc) == {"maps", "reweight", "config"}
    kpi = json.loads((tmp_path / "o" / "kpi_report.json").read_text())
    assert kpi["baseline"]["mean_quantity"] == pytest.approx(2.3)
    assert kpi["kpis"]["mean_quantity"] == pytest.approx(4.3)
    assert [s["kpi"] for s in kpi["signals"]] == ["mean_quantity"]


def test_discover_rules(tmp_path, capsys):
    path = tmp_path / "d.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["price", "quantity"])
        for i in range(50):
            p = 0.5 + 0.08 * i
            w.writerow([p, 10 - 2 * p])
    code, _, _ = _run(capsys, "--out", tmp_path / "o", "discover-rules", "--dataset", path)
    assert code == 0
    (rule,) = json.loads((tmp_path / "o" / "rules.json").read_text())["rules"]
    assert rule["rmse"] < 1e-9
    assert set(rule) >= {"expression", "rmse", "complexity", "dataset_id"}


def test_wholesale_transcripts(tmp_path, capsys, small_market_dir):
    cfg = _config(tmp_path, wholesale={"rounds": 4, "n_dialogues": 100})
    out = tmp_path / "o"
    code, _, _ = _run(capsys, "--config", cfg, "--mock", "--data", small_market_dir, "--out", out,
                      "simulate", "--mode", "wholesale")
    assert code == 0
    files = sorted((out / "transcripts").glob("*.jsonl"))
    assert len(files) == 100
    for f in files:
        roles = [json.loads(l)["role"] for l in f.read_text().splitlines()]
        assert roles == ["background"] + role_schedule(4)
    assert json.loads((out / "report.json").read_text())["hit_rate"] == 1.0


@pytest.mark.parametrize("argv", [["meanfield"], ["simulate", "--mode", "meanfield"]])
def test_meanfield_converges(tmp_path, capsys, small_market_dir, argv):
    out = tmp_path / "o"
    code, text, _ = _run(capsys, "--data", small_market_dir, "--out", out, *argv)
    assert code == 0 and "converged=true" in text
    assert json.loads((out / "manifest.json").read_text())["extra"]["converged"] is True
    assert (out / "trajectory.jsonl").exists()


def test_reruns_byte_identical(tmp_path, capsys, small_market_dir):
    cfg = _config(tmp_path, wholesale={"rounds": 4, "n_dialogues": 5}, retail={"sigma": 0.7})
    commands = [["simulate"], ["simulate", "--mode", "wholesale"], ["meanfield"], ["build-dataset"]]
    for cmd in commands:
        a, b = tmp_path / "a" / cmd[-1], tmp_path / "b" / cmd[-1]
        for d in (a, b):
            assert _run(capsys, "--config", cfg, "--mock", "--data", small_market_dir,
                        "--out", d, *cmd)[0] == 0
        assert _outputs(a) == _outputs(b)


def test_retail_diagnostics(tmp_path, capsys, small_market_dir):
    cfg = _config(tmp_path, retail={"diagnostics": True, "perturb_sigma": 0.0}, dataset={"limit": 20})
    out = tmp_path / "o"
    assert _run(capsys, "--config", cfg, "--mock", "--data", small_market_dir, "--out", out,
                "simulate")[0] == 0
    rows = [json.loads(l) for l in (out / "episodes.jsonl").read_text().splitlines()]
    assert len(rows) == 20
    for r in rows:
        assert r["l_cons"] == 0
        assert abs(sum(r["attention"].values()) - 1) < 1e-9 and r["attention_kl"] >= 0
