import unittest

import numpy as np

from padlab.errors import ValidationError
from padlab.models import (
    CircuitPurpose,
    ConnectionType,
    PackingMode,
    RelayCommand,
    SimConfig,
    SiteModel,
    UserModel,
)
from padlab.traffic import (
    MAX_SITE_CELLS,
    MIN_SITE_CELLS,
    STREAM_SITES,
    app_traffic,
    burst_plan,
    chunked,
    generate_sites,
    sample_inflation,
    simulate_dataset,
    simulate_session,
    substream,
)

SITE = SiteModel(site_id="site000", out_in_pattern=[(2, 20), (2, 40)])


def sim_config(**updates):
    config = SimConfig(sites=generate_sites(5, substream(9, STREAM_SITES)), n_sessions=60, seed=9)
    return config.model_copy(update=updates)


class TestSites(unittest.TestCase):
    def test_generate_sites(self):
        sites = generate_sites(20, np.random.default_rng(1))
        self.assertEqual([s.site_id for s in sites][:3], ["site000", "site001", "site002"])
        for site in sites:
            self.assertTrue(1 <= len(site.out_in_pattern) <= 5)
            self.assertTrue(MIN_SITE_CELLS <= site.onion_cell_count <= MAX_SITE_CELLS)

    def test_inflation_is_at_least_one(self):
        rng = np.random.default_rng(5)
        wide = SITE.model_copy(update={"packing_inflation_mean": 1.0, "packing_inflation_sd": 0.5})
        self.assertTrue(all(sample_inflation(wide, rng) >= 1.0 for _ in range(500)))
        flat = SITE.model_copy(update={"packing_inflation_sd": 0.0})
        self.assertEqual(sample_inflation(flat, rng), SITE.packing_inflation_mean)


class TestPacking(unittest.TestCase):
    def test_identical_packing(self):
        rng = np.random.default_rng(0)
        clear = burst_plan(SITE, ConnectionType.CLEARNET, PackingMode.IDENTICAL, rng)
        onion = burst_plan(SITE, ConnectionType.ONION, PackingMode.IDENTICAL, rng)
        self.assertEqual(clear, onion)
        self.assertEqual(onion, [(2, 20), (2, 40)])

    def test_asymmetric_packing_inflates_clearnet_only(self):
        rng = np.random.default_rng(0)
        site = SITE.model_copy(update={"packing_inflation_mean": 1.5, "packing_inflation_sd": 0.0})
        clear = burst_plan(site, ConnectionType.CLEARNET, PackingMode.ASYMMETRIC, rng)
        onion = burst_plan(site, ConnectionType.ONION, PackingMode.ASYMMETRIC, rng)
        self.assertEqual(onion, [(2, 20), (2, 40)])
        self.assertEqual(sum(a + b for a, b in clear), round(site.onion_cell_count * 1.5))
        self.assertEqual([a for a, _ in clear], [2, 2])

    def test_scheduling_noise_rotates_clearnet_responses(self):
        rng = np.random.default_rng(0)
        clear = burst_plan(SITE, ConnectionType.CLEARNET, PackingMode.IDENTICAL, rng, True)
        self.assertEqual(clear, [(2, 40), (2, 20)])

    def test_app_traffic(self):
        cells = app_traffic(SITE, ConnectionType.ONION, PackingMode.IDENTICAL, 1.0, np.random.default_rng(0))
        self.assertEqual(len(cells), SITE.onion_cell_count)
        self.assertTrue(all(c.command == RelayCommand.APP_DATA for c in cells))
        self.assertEqual(cells[0].time, 1.0)
        self.assertEqual([c.time for c in cells], sorted(c.time for c in cells))


class TestSessions(unittest.TestCase):
    def test_clearnet_session(self):
        config = sim_config()
        session = simulate_session(config, SITE, np.random.default_rng(3), "s000007", ConnectionType.CLEARNET)
        self.assertEqual([c.purpose for c in session.circuits], [CircuitPurpose.EXIT])
        exit_circuit = session.circuits[0]
        self.assertEqual(exit_circuit.created_at, session.think_time)
        self.assertEqual(len(exit_circuit.cells), 6 + SITE.onion_cell_count)
        self.assertEqual(exit_circuit.directions()[:6], "-+-+-+")
        self.assertGreaterEqual(exit_circuit.closed_at - exit_circuit.created_at, 600.0)

    def test_onion_session(self):
        config = sim_config()
        session = simulate_session(config, SITE, np.random.default_rng(3), "s000008", ConnectionType.ONION)
        self.assertEqual(
            [c.purpose for c in session.circuits],
            [CircuitPurpose.HSDIR, CircuitPurpose.INTRO, CircuitPurpose.REND],
        )
        hsdir, intro, rend = session.circuits
        self.assertEqual(len(hsdir.cells), 4 + 37)
        self.assertEqual(len(intro.cells), 4 + 4)
        self.assertEqual(len(rend.cells), 9 + SITE.onion_cell_count)
        self.assertEqual(hsdir.closed_at, hsdir.last_time)
        self.assertAlmostEqual(rend.closed_at - rend.last_time, 10.0, places=6)
        self.assertTrue(all(c.created_at == session.think_time for c in session.circuits))
        self.assertFalse(any(c.is_padding for circuit in session.circuits for c in circuit.cells))

    def test_connection_type_rate(self):
        config = sim_config(n_sessions=2000, user=UserModel(lambda_u=4.0, c=0.7))
        sessions = simulate_dataset(config)
        share = np.mean([s.connection_type == ConnectionType.CLEARNET for s in sessions])
        # 4 standard errors at n=2000
        self.assertAlmostEqual(share, 0.7, delta=0.042)
        think = np.mean([s.think_time for s in sessions])
        self.assertAlmostEqual(think, 0.25, delta=0.025)

    def test_balance_alternates_sites_and_types(self):
        config = sim_config(balance=True, n_sessions=20)
        sessions = simulate_dataset(config)
        types = [s.connection_type for s in sessions]
        self.assertEqual(types[:4], [ConnectionType.CLEARNET, ConnectionType.ONION] * 2)
        per_site = {}
        for s in sessions:
            per_site.setdefault(s.site_id, []).append(s.connection_type)
        for kinds in per_site.values():
            self.assertEqual(kinds.count(ConnectionType.CLEARNET), kinds.count(ConnectionType.ONION))

    def test_fixed_connection_types(self):
        config = sim_config(n_sessions=4)
        types = [ConnectionType.ONION, ConnectionType.ONION, ConnectionType.CLEARNET, ConnectionType.ONION]
        sessions = simulate_dataset(config, connection_types=types)
        self.assertEqual([s.connection_type for s in sessions], types)
        with self.assertRaises(ValidationError):
            simulate_dataset(config, connection_types=types[:2])

    def test_seed_determinism_and_independence_from_jobs(self):
        config = sim_config()
        first = simulate_dataset(config)
        self.assertEqual(first, simulate_dataset(config))
        self.assertEqual(first, simulate_dataset(config, jobs=2))
        self.assertEqual([s.session_id for s in first][:2], ["s000000", "s000001"])
        other = simulate_dataset(config.model_copy(update={"seed": 10}))
        self.assertNotEqual(first, other)

    def test_chunked(self):
        self.assertEqual(chunked(10, 3), [range(0, 4), range(4, 8), range(8, 10)])


if __name__ == "__main__":
    unittest.main()
