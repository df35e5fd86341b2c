import numpy as np
import pytest

from fairprice.config import ConfigError, SCHEMA, parse_config, parse_text, preset, with_overrides
from fairprice.training import TrainConfig

MINIMAL = """
[graph]
source = sbm
blocks = 20, 20
means_0 = 0, 0
means_1 = 1, 0
[demand]
family = linear
weights = 10, 5
intercept = 100
[perception]
alpha = 0.1
beta = 0.2
[market]
cost = 20
p_max = 400
"""


def test_defaults_fill_in():
    cfg = parse_text(MINIMAL)
    assert cfg["train"]["lr"] == 0.001 and cfg["train"]["weight_decay"] == 0.0005
    assert cfg["train"]["tau"] == 0.5 and cfg["encoder"]["dropout"] == 0.1
    assert cfg["experiment"]["seeds"] == (0, 1, 2, 3, 4)
    assert cfg["train"]["grid_step"] == 0.1


def test_round_trip_is_exact():
    cfg = parse_text(MINIMAL + "[method.gat]\nmax_epochs = 7\nlam = 0.3  # note\n")
    again = parse_text(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_every_schema_key_renders():
    text = parse_text(MINIMAL).to_text()
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"\n{key} = " in text


def test_method_overrides_reach_setup():
    cfg = parse_text(MINIMAL + "[method.gat]\nmax_epochs = 7\n")
    setup = cfg.setup()
    assert setup.train_config("gat", 3).max_epochs == 7
    assert setup.train_config("gcn", 3).max_epochs == 400
    assert setup.train_config("gcn", 3).seed == 3


def test_builders():
    cfg = parse_text(MINIMAL)
    assert isinstance(cfg.train_config(), TrainConfig)
    ds = cfg.dataset()
    assert ds.graph.n == 40 and ds.table.X.shape == (40, 2)
    assert cfg.market().demand.weights == (10.0, 5.0)


@pytest.mark.parametrize("patch, message", [
    (("alpha = 0.1", "alpha = 0.3"), "perception.alpha must be < perception.beta"),
    (("family = linear", "family = quadratic"), "demand.family"),
    (("cost = 20", "cost = 500"), "market.p_max must be > market.cost"),
    (("weights = 10, 5", "weights = 10"), "demand.weights"),
    (("blocks = 20, 20", "blocks = 0, 20"), "graph.blocks"),
    (("p_max = 400", "p_max = lots"), "market.p_max: cannot parse"),
    (("source = sbm", "source = web"), "graph.source"),
])
def test_validation_messages_name_the_key(patch, message):
    with pytest.raises(ConfigError, match=message):
        parse_text(MINIMAL.replace(*patch))


def test_missing_required_key():
    with pytest.raises(ConfigError, match="missing required key market.cost"):
        parse_text(MINIMAL.replace("cost = 20\n", ""))


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key train.learning_rate"):
        parse_text(MINIMAL + "[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match=r"unknown section \[extras\]"):
        parse_text(MINIMAL + "[extras]\nx = 1\n")
    with pytest.raises(ConfigError, match="unknown method"):
        parse_text(MINIMAL + "[method.resnet]\nlam = 1\n")
    with pytest.raises(ConfigError, match="unknown key method.gcn.hidden_dim"):
        parse_text(MINIMAL + "[method.gcn]\nhidden_dim = 4\n")


def test_syntax_error_is_config_error():
    with pytest.raises(ConfigError):
        parse_text("[graph\nsource = sbm\n")


def test_unreadable_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "absent.ini")


def test_file_source_paths_resolve_against_config(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "e.txt").write_text("1 2\n2 3\n")
    (tmp_path / "data" / "n.csv").write_text("id,s,a,b\n1,0,0.5,1\n2,1,1.5,0\n3,0,0.1,0\n")
    text = MINIMAL.replace("source = sbm", "source = files\nedges = data/e.txt\nnodes = data/n.csv\nid_column = id")
    (tmp_path / "run.ini").write_text(text)
    ds = parse_config(tmp_path / "run.ini").dataset()
    assert ds.graph.n == 3 and ds.graph.num_edges == 2
    assert np.array_equal(ds.table.s, [0, 1, 0])


def test_with_overrides_revalidates():
    cfg = parse_text(MINIMAL)
    assert with_overrides(cfg, "train", lam=2.0)["train"]["lam"] == 2.0
    assert cfg["train"]["lam"] == 0.1
    with pytest.raises(ConfigError):
        with_overrides(cfg, "perception", alpha=0.5)


def test_benchmark_preset_parses():
    cfg = parse_text(preset("benchmark"))
    assert cfg["graph"]["blocks"] == (250, 250)
    assert len(cfg["experiment"]["seeds"]) == 5
    assert cfg["perception"]["alpha"] == 0.1 and cfg["perception"]["beta"] == 0.2
