import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from colearn import cli
from colearn.cli import (CSV_HEADER, ConfigError, Series, emit_svg_plot, load_config, main, parse_config,
                         read_summary, read_trace, run_experiment)
from colearn.data import load_dataset
from colearn.errors import ParameterError
from colearn.eval import last_k_summary

SVG = "{http://www.w3.org/2000/svg}"

TINY = """
dataset: {{num_classes: 4, n_train: 40, n_test: 20, side: 8, data_seed: 3}}
noise: {{kind: symmetric, rate: 0.4}}
methods:
  - {{method: colearning, epochs: 2, encoder_widths: [32, 32], projection_dim: 8}}
  - {{method: standard_ce, epochs: 2, encoder_widths: [32, 32], projection_dim: 8}}
seeds: [0, 1]
summary_k: 2
output_dir: {out}
"""


def tiny(out, **overrides):
    cfg = parse_config(TINY.format(out=out))
    return cfg.model_copy(update=overrides) if overrides else cfg


# -- config ---------------------------------------------------------------------------

def test_minimal_config_gets_defaults():
    cfg = parse_config("methods: [{method: colearning}]\nseeds: [0]\n")
    assert cfg.dataset.source == "synthetic" and cfg.dataset.n_train == 5000 and cfg.dataset.side == 16
    assert cfg.noise.kind == "symmetric" and cfg.noise.rate == 0.5 and not cfg.noise.include_true_class
    m = cfg.methods[0]
    assert (m.epochs, m.batch_size, m.lr, m.tau, m.alpha, m.sigma) == (30, 16, 0.001, 0.5, 1.0, 0.5)
    assert cfg.summary_k == 10 and cfg.output_dir == "runs"


def test_noise_rate_out_of_range_names_key():
    with pytest.raises(ConfigError) as err:
        parse_config("noise: {rate: 1.5}\nmethods: [{}]\nseeds: [0]\n")
    assert err.value.path == "noise.rate"
    assert "noise.rate" in str(err.value)


def test_typo_suggests_nearest_key():
    with pytest.raises(ConfigError, match="did you mean 'tau'"):
        parse_config("methods: [{tua: 0.5}]\nseeds: [0]\n")


@pytest.mark.parametrize("text", ["seeds: [0]\n", "methods: [{}]\nseeds: []\n", "- 1\n- 2\n", "a: [\n",
                                  "methods: [{}, {}]\nseeds: [0]\n"])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_repeated_methods_need_names():
    cfg = parse_config("methods: [{method: weighted_sup, name: a, sup_weight: 1}, "
                       "{method: weighted_sup, name: b}]\nseeds: [0]\n")
    assert [c.label for c in cfg.cells()] == ["a", "b"]


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(root)):
        load_config(os.path.join(root, name))


# -- experiments ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    return run_experiment(tiny(str(out))), out


def test_two_by_two_artifacts(grid):
    art, out = grid
    assert sorted(art.traces) == ["colearning_s0", "colearning_s1", "standard_ce_s0", "standard_ce_s1"]
    assert art.summary == out / "summary.csv"
    assert len(art.plots) == len(CSV_HEADER) - 1 and len(art.checkpoints) == 4
    assert not art.missing()
    assert all((out / f"{name}.done").exists() for name in art.traces)


def test_trace_schema(grid):
    art, _ = grid
    lines = art.traces["colearning_s0"].read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "1"]
    assert all(len(v.split("e")[0].replace("-", "").replace(".", "").lstrip("0")) <= 6
               for line in lines[1:] for v in line.split(",")[1:])


def test_summary_matches_traces(grid):
    art, _ = grid
    summary = read_summary(art.summary)
    for method in ("colearning", "standard_ce"):
        traces = [read_trace(art.traces[f"{method}_s{s}"]) for s in (0, 1)]
        mean, std = last_k_summary(traces, 2)
        assert summary[method]["test_acc_mean"] == pytest.approx(mean, rel=1e-5, abs=1e-9)
        assert summary[method]["test_acc_std"] == pytest.approx(std, rel=1e-5, abs=1e-6)
        assert summary[method]["seeds"] == 2


def test_rerun_is_byte_identical(grid, tmp_path):
    art, _ = grid
    again = run_experiment(tiny(str(tmp_path)))
    for name, path in art.traces.items():
        assert again.traces[name].read_bytes() == path.read_bytes()
    assert again.summary.read_bytes() == art.summary.read_bytes()
    for a, b in zip(art.plots, again.plots):
        assert a.read_bytes() == b.read_bytes()


def test_parallel_matches_serial(grid, tmp_path):
    art, _ = grid
    parallel = run_experiment(tiny(str(tmp_path)), jobs=4)
    for name, path in art.traces.items():
        assert parallel.traces[name].read_bytes() == path.read_bytes()


def test_resume_skips_finished_cells(tmp_path, monkeypatch):
    cfg = tiny(str(tmp_path))
    run_experiment(cfg)
    os.remove(tmp_path / "standard_ce_s1.done")
    before = (tmp_path / "colearning_s0.csv").read_bytes()
    calls = []
    real = cli.run_training
    monkeypatch.setattr(cli, "run_training", lambda *a, **k: calls.append(a[2].label) or real(*a, **k))
    run_experiment(cfg, resume=True)
    assert calls == ["standard_ce"]
    assert (tmp_path / "colearning_s0.csv").read_bytes() == before


def test_unwritable_output_fails_before_training(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    monkeypatch.setattr(cli, "run_training", lambda *a, **k: pytest.fail("training started"))
    with pytest.raises(OSError):
        run_experiment(tiny(str(blocker / "sub")))


# -- svg ----------------------------------------------------------------------------

def parse_svg(path):
    return ET.parse(path).getroot()


def test_svg_is_well_formed_with_legend_order(tmp_path):
    path = tmp_path / "p.svg"
    emit_svg_plot([Series("first <a>", [0.1, 0.5, 0.4], [0.01, 0.02, 0.0]), Series("second", [0.3, 0.2, 0.9])],
                  "acc & loss", path)
    root = parse_svg(path)
    assert root.tag == f"{SVG}svg"
    texts = [t.text for t in root.iter(f"{SVG}text")]
    assert texts.index("first <a>") < texts.index("second")
    assert len(root.findall(f"{SVG}polyline")) == 2
    assert len(root.findall(f"{SVG}polygon")) == 1
    assert len([e for e in root.iter(f"{SVG}line") if e.get("class") == "legend"]) == 2
    assert "href" not in path.read_text()


def test_constant_series_is_padded(tmp_path):
    path = tmp_path / "c.svg"
    emit_svg_plot([Series("flat", [0.7] * 5)], "flat", path)
    root = parse_svg(path)
    ys = {p.split(",")[1] for p in root.find(f"{SVG}polyline").get("points").split()}
    assert len(ys) == 1
    ticks = [float(t.text) for t in root.iter(f"{SVG}text") if t.get("text-anchor") == "end"]
    assert min(ticks) <= 0.65 + 1e-9 and max(ticks) >= 0.75 - 1e-9


def test_svg_errors(tmp_path):
    with pytest.raises(ParameterError):
        emit_svg_plot([], "x", tmp_path / "e.svg")
    with pytest.raises(ParameterError):
        emit_svg_plot([Series("a", [1.0, 2.0]), Series("b", [1.0])], "x", tmp_path / "e.svg")


# -- command line ------------------------------------------------------------------------

def write_config(tmp_path, text):
    path = tmp_path / "exp.yaml"
    path.write_text(text)
    return str(path)


def test_exit_code_config_error(tmp_path, capsys):
    assert main(["run", write_config(tmp_path, "methods: [{tua: 1}]\nseeds: [0]\n")]) == 1
    assert "tau" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1


def test_exit_code_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = write_config(tmp_path, TINY.format(out=blocker / "sub"))
    assert main(["run", path]) == 2


def test_run_command(tmp_path, capsys):
    path = write_config(tmp_path, TINY.format(out=tmp_path / "out"))
    assert main(["run", path, "--output-dir", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "summary.csv").exists() and not (tmp_path / "out").exists()
    assert "colearning: last-2 test acc" in capsys.readouterr().out


def test_corrupt_command(tmp_path):
    path = write_config(tmp_path, TINY.format(out=tmp_path / "out"))
    assert main(["corrupt", path]) == 0
    train = load_dataset(tmp_path / "out" / "train.clds")
    assert len(train) == 40 and train.corruption_mask.any()
    q = np.loadtxt(tmp_path / "out" / "transition.csv", delimiter=",")
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-5)
