import subprocess
import sys

from overlapckpt.cli import main


def out_of(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_plan_table1(capsys):
    code, cap = out_of(capsys, "plan", "--table1")
    assert code == 0
    rows = [l.split(",") for l in cap.out.splitlines() if l and not l.startswith(("#", "label", "stall"))]
    assert len(rows) == 6
    for row in rows:
        assert abs(int(row[3]) - int(row[6])) <= 2
    assert "stall GoCkpt" in cap.out and "Delta(N)" in cap.out


def test_plan_clamp_and_zero_rate(capsys):
    code, cap = out_of(capsys, "plan", "--p", "1/600", "--t-step", "0.5", "--t-ckpt", "0")
    assert code == 0 and "clamped to 1" in cap.out
    code, cap = out_of(capsys, "plan", "--p", "0", "--t-step", "0.5", "--t-ckpt", "1")
    assert code == 0 and "no finite optimal interval" in cap.out


def test_simulate(capsys):
    code, cap = out_of(capsys, "simulate", "--scheme", "Sync", "--p", "0", "--t-step", "1", "--t-ckpt", "1", "--N", "4", "--horizon", "5000")
    assert code == 0
    kv = dict(l.split(" = ") for l in cap.out.splitlines())
    assert float(kv["waste_ratio"]) == 0.25


def test_run_and_inspect(tmp_path, capsys):
    out = tmp_path / "r"
    code, cap = out_of(capsys, "run", "--output-dir", str(out), "--P", "200", "--total-steps", "40",
                       "--checkpoint-interval", "10", "--crash", "fixed", "--crash-period", "1.1")
    assert code == 0
    assert "trajectory_mismatches = 0" in cap.out
    assert (out / "report.csv").exists() and (out / "report.summary.txt").exists()
    code, cap = out_of(capsys, "inspect", str(out / "checkpoints"))
    assert code == 0 and "latest_complete = " in cap.out
    latest = cap.out.strip().splitlines()[-1].split(" = ")[1]
    code, cap = out_of(capsys, "inspect", str(out / "checkpoints" / f"ckpt-{latest}"))
    assert code == 0 and "status = complete" in cap.out


def test_run_from_config_file(tmp_path, capsys):
    conf = tmp_path / "c.cfg"
    conf.write_text(f"scheme = Ideal\nP = 64\ntotal_steps = 5\noutput_dir = {tmp_path / 'o'}\n")
    code, cap = out_of(capsys, "run", "--config", str(conf), "--total-steps", "7")
    assert code == 0 and "effective_steps = 7" in cap.out


def test_bad_config_exits_nonzero(capsys):
    code, cap = out_of(capsys, "run", "--total-steps", "0")
    assert code == 2 and "total_steps" in cap.err


def test_verify_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "overlapckpt", "verify"], capture_output=True, text=True)
    assert ok.returncode == 0
    assert ok.stdout.splitlines()[0] == "property,instances,failures"
    assert "verdict = pass" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "overlapckpt", "verify", "--skip-gradient"], capture_output=True, text=True)
    assert bad.returncode == 1
    assert "incomplete ledger" in bad.stderr
