import pytest

from indiff import cli
from indiff.blackscholes import BSField
from indiff.market import MarketParams, PayoffSpec

FAST = """
[command]
n_space = 80
n_time = 80
paths = 400
epsilon = [0.0, 0.1]
"""


def rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def test_defaults_filled():
    cfg = cli.parse_config("")
    assert cfg.prefs.gamma == 1.0 and cfg.payoff.kind == "call" and cfg.command.z == cfg.command.s
    assert cfg.raw["market"]["T"] == 1.0
    assert cfg.digest == cli.parse_config({}).digest


def test_all_violations_reported_together():
    text = """
[market]
T = 0
sigma = [[0.2, 0.2], [0.2, 0.2]]
mu = [0.1, 0.1]
[preferences]
gamma = -1.0
colour = "red"
[bogus]
x = 1
"""
    with pytest.raises(cli.ConfigError) as exc:
        cli.parse_config(text)
    msg = str(exc.value)
    for needle in ("market.T", "preferences.gamma", "preferences.colour: unknown key", "unknown section [bogus]"):
        assert needle in msg


def test_semidefinite_sigma_and_infinite_cash_legs():
    with pytest.raises(cli.ConfigError, match="positive definite"):
        cli.parse_config("[market]\nmu = [0.1, 0.1]\nsigma = [[0.2, 0.2], [0.2, 0.2]]\n"
                         "[costs]\nlambda = [[0, 1, 1], [1, 0, 1], [1, 1, 0]]\n")
    with pytest.raises(cli.ConfigError, match="costs.buy: cash legs must have finite cost"):
        cli.parse_config('[costs]\nbuy = "inf"\n')
    with pytest.raises(cli.ConfigError, match="finite cost"):
        cli.parse_config('[costs]\nlambda = [[0, "inf"], [1, 0]]\n')
    with pytest.raises(cli.ConfigError, match="not found"):
        cli.parse_config("/nonexistent/config.toml")


def test_type_mismatches():
    with pytest.raises(cli.ConfigError) as exc:
        cli.parse_config('[command]\nseed = 1.5\npaths = "many"\nepsilon = [0.1, -1]\nform = "x"\n')
    msg = str(exc.value)
    for needle in ("command.seed", "command.paths", "command.epsilon[1]", "command.form"):
        assert needle in msg


def test_main_invalid_config_exit_code(tmp_path, capsys):
    cfgf = tmp_path / "bad.toml"
    cfgf.write_text("[preferences]\ngamma = -2\n")
    assert cli.main(["price", "--config", str(cfgf)]) == cli.EXIT_INVALID
    assert "preferences.gamma" in capsys.readouterr().err


def test_price_reports_are_byte_identical_and_eps0_row_is_bs(tmp_path):
    cfgf = tmp_path / "c.toml"
    cfgf.write_text(FAST)
    for out in ("a", "b"):
        assert cli.main(["price", "--config", str(cfgf), "--out", str(tmp_path / out), "--quiet"]) == 0
    a, b = (tmp_path / "a" / "price.csv").read_bytes(), (tmp_path / "b" / "price.csv").read_bytes()
    assert a == b
    header, data = rows(tmp_path / "a" / "price.csv")
    assert header[:8] == ["epsilon", "V", "h", "p_eps", "u_tilde_g", "u_tilde_0", "stderr", "divergence_flag"]
    V = float(BSField(PayoffSpec.call(100), MarketParams(0.1, 0.2, 0.02, 1.0)).value(0.0, 100.0))
    assert float(data[0][0]) == 0.0 and float(data[0][3]) == V
    assert "# config_sha256:" in a.decode()


def test_price_digital_refused(tmp_path, capsys):
    cfgf = tmp_path / "d.toml"
    cfgf.write_text(FAST + '[payoff]\nkind = "digital"\nstrike = 100.0\n')
    assert cli.main(["price", "--config", str(cfgf), "--out", str(tmp_path)]) == cli.EXIT_DIVERGENT
    err = capsys.readouterr().err
    assert "diverge" in err and "audit" in err


def test_verify_default_passes_and_failure_exit_code(tmp_path, monkeypatch):
    assert cli.main(["verify", "--out", str(tmp_path), "--quiet"]) == 0
    header, data = rows(tmp_path / "verify.csv")
    assert header == ["check", "value", "tolerance", "status"]
    names = {r[0] for r in data}
    for n in ("bs_pde_residual", "hjb_relative_residual", "corrector_interior_pde_over_a", "u_tilde_fd_vs_mc_excess"):
        assert n in names
    assert all(r[3] == "pass" for r in data)
    monkeypatch.setattr(cli, "verify_checks", lambda cfg: [("forced", 1.0, 0.0, False)])
    assert cli.main(["verify", "--out", str(tmp_path), "--quiet"]) == cli.EXIT_VERIFY


def test_simulate_converge_audit_corrector(tmp_path):
    cfgf = tmp_path / "s.toml"
    cfgf.write_text("""
[market]
T = 0.5
[costs]
sell = 0.0
buy = 0.02
[payoff]
strike = 1.0
[command]
s = 1.0
z = 1.0
paths = 400
epsilon = [0.2, 0.3, 0.4]
""")
    base = ["--config", str(cfgf), "--out", str(tmp_path), "--quiet"]
    assert cli.main(["simulate", *base, "--seed", "3"]) == 0
    header, data = rows(tmp_path / "simulate.csv")
    assert header == ["epsilon", "delta", "delta_over_eps2", "stderr", "mean_cost", "insolvent_paths"]
    assert len(data) == 3
    assert cli.main(["converge", *base, "--epsilon", "0.2,0.3,0.4"]) == 0
    assert "slope=" in (tmp_path / "converge.csv").read_text()
    assert cli.main(["audit", *base]) == 0
    assert "verdict," in (tmp_path / "audit.csv").read_text()
    assert cli.main(["corrector", *base]) == 0
    header, data = rows(tmp_path / "corrector.csv")
    assert header[:4] == ["xi", "w", "w_xi", "branch"] and len(data) == 401
