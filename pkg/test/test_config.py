import tempfile
import unittest
from pathlib import Path

from padlab.config import config_schema, load_config, parse_config
from padlab.errors import EXIT_CONFIG, ConfigError, NotFoundError
from padlab.models import ExperimentId, PackingMode, ScenarioKind

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


class TestParse(unittest.TestCase):
    def test_defaults(self):
        spec = parse_config("").to_spec()
        self.assertEqual(spec.id, ExperimentId.EXP1)
        self.assertEqual(len(spec.sim.sites), 100)
        self.assertEqual(spec.sim.packing_mode, PackingMode.IDENTICAL)
        self.assertEqual(
            [s.kind for s in spec.scenarios], [ScenarioKind.MULTI_CLOSED, ScenarioKind.MULTI_OPEN]
        )
        self.assertEqual(spec.attack.max_len, 120)

    def test_small_site_population_for_strawman(self):
        spec = parse_config("experiment:\n  id: Exp4StrawmanIdentical\n").to_spec()
        self.assertEqual(len(spec.sim.sites), 10)

    def test_sites_follow_the_seed(self):
        a = parse_config("sim:\n  seed: 1\n  n_sites: 3\n").sim.sites
        b = parse_config("sim:\n  seed: 1\n  n_sites: 3\n").sim.sites
        c = parse_config("sim:\n  seed: 2\n  n_sites: 3\n").sim.sites
        self.assertEqual(a, b)
        self.assertNotEqual(a, c)

    def test_overrides_win(self):
        config = parse_config(
            "sim:\n  seed: 1\n  n_sites: 2\n",
            overrides={"sim.seed": 42, "experiment.output_dir": "elsewhere", "attack.max_len": None},
        )
        self.assertEqual(config.sim.seed, 42)
        self.assertEqual(config.experiment.output_dir, Path("elsewhere"))
        self.assertEqual(config.attack.max_len, 120)

    def test_yaml_error(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("sim:\n  seed: [1, 2\n", source="bad.yaml")
        self.assertEqual(ctx.exception.exit_code, EXIT_CONFIG)
        self.assertTrue(ctx.exception.context.startswith("bad.yaml"))

    def test_schema_error_points_at_line(self):
        text = "experiment:\n  id: Exp1Vanilla\nsim:\n  seed: 3\n  rtt: -1\n"
        with self.assertRaises(ConfigError) as ctx:
            parse_config(text, source="exp.yaml")
        self.assertEqual(ctx.exception.context, "exp.yaml:5")
        self.assertIn("sim.rtt", ctx.exception.detail)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("sim:\n  n_sites: 2\nstrategy:\n  kind: PCP\nextra: 1\n", source="x.yaml")
        self.assertEqual(ctx.exception.context, "x.yaml:5")

    def test_grid_required_for_pcp_experiment(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("experiment:\n  id: Exp5PCP\nsim:\n  n_sites: 2\n", source="e5.yaml")
        self.assertEqual(ctx.exception.context, "e5.yaml:2")

    def test_not_a_mapping(self):
        with self.assertRaises(ConfigError):
            parse_config("- 1\n- 2\n")


class TestFiles(unittest.TestCase):
    def test_missing_file(self):
        with self.assertRaises(NotFoundError):
            load_config(Path("/nonexistent/padlab.yaml"))

    def test_no_file_means_defaults(self):
        self.assertEqual(load_config(None).experiment.id, ExperimentId.EXP1)

    def test_load_from_disk(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "c.yaml"
            path.write_text("sim:\n  n_sites: 4\n  n_sessions: 10\n", encoding="utf-8")
            config = load_config(path, {"sim.seed": 5})
        self.assertEqual(len(config.sim.sites), 4)
        self.assertEqual(config.sim.seed, 5)

    def test_shipped_configs_are_valid(self):
        files = sorted(CONFIG_DIR.glob("*.yaml"))
        self.assertEqual(len(files), 6)
        ids = {load_config(path).to_spec().id for path in files}
        self.assertEqual(ids, set(ExperimentId))

    def test_schema(self):
        schema = config_schema()
        self.assertEqual(
            set(schema["properties"]), {"experiment", "sim", "strategy", "attack", "game"}
        )
        self.assertIn("sim", schema["required"])


if __name__ == "__main__":
    unittest.main()
