import unittest

import numpy as np

from padlab.adversary import BayesModel, count_triplets, session_views
from padlab.analytics import fit_geometric, optimal_accuracy
from padlab.cells import PATTERN_SIZES
from padlab.errors import ValidationError
from padlab.models import (
    CircuitPurpose,
    ConnectionType,
    DelayDistribution,
    RelayCommand,
    RequestKind,
    SimConfig,
    SiteModel,
    StrategyConfig,
    StrategyKind,
    UserModel,
)
from padlab.strategies import (
    RateEstimator,
    apply_pcp,
    apply_prop999,
    apply_strategy,
    apply_strawman,
    defend_dataset,
)
from padlab.traffic import simulate_dataset, simulate_session

SITE = SiteModel(site_id="site000", out_in_pattern=[(2, 20), (2, 40)])
TINY_SITE = SiteModel(site_id="site001", out_in_pattern=[(1, 2)])
SIM = SimConfig(sites=[SITE], n_sessions=200, seed=21, user=UserModel(lambda_u=4.0, c=0.5))


def session(conn, seed=0, index=0):
    return simulate_session(SIM, SITE, np.random.default_rng(seed), f"s{index:06d}", conn)


def pre_app_cells(circuit):
    return next(i for i, c in enumerate(circuit.cells) if c.command == RelayCommand.APP_DATA)


class TestProp999(unittest.TestCase):
    def test_clearnet_passes_through(self):
        vanilla = session(ConnectionType.CLEARNET)
        padded = apply_prop999(vanilla, StrategyConfig(kind=StrategyKind.PROP999), np.random.default_rng(0))
        self.assertEqual(padded.circuits, vanilla.circuits)
        self.assertEqual(padded.strategy, StrategyKind.PROP999)

    def test_onion_circuits_padded_but_recognizable(self):
        vanilla = session(ConnectionType.ONION)
        padded = apply_prop999(vanilla, StrategyConfig(kind=StrategyKind.PROP999), np.random.default_rng(0))
        hsdir, intro, rend = padded.circuits
        self.assertEqual(hsdir, vanilla.circuits[0])
        self.assertGreater(len(intro.padding_cells()), 0)
        self.assertGreater(len(rend.padding_cells()), 0)
        for before, after in zip(vanilla.circuits, padded.circuits):
            self.assertEqual(after.real_cells(), before.real_cells())
        self.assertGreaterEqual(intro.closed_at - intro.created_at, 600.0)
        # the rendezvous handshake still precedes application data
        self.assertGreaterEqual(pre_app_cells(rend), 9)
        self.assertEqual(pre_app_cells(session(ConnectionType.CLEARNET).circuits[0]), 6)


class TestStrawman(unittest.TestCase):
    def setUp(self):
        self.config = StrategyConfig(kind=StrategyKind.STRAWMAN)

    def test_onion_passes_through(self):
        vanilla = session(ConnectionType.ONION)
        padded = apply_strawman(vanilla, self.config, np.random.default_rng(0))
        self.assertEqual(padded.circuits, vanilla.circuits)

    def test_clearnet_gets_a_fake_triplet(self):
        vanilla = session(ConnectionType.CLEARNET)
        padded = apply_strawman(vanilla, self.config, np.random.default_rng(0))
        fake_hsdir, fake_intro, exit_circuit = padded.circuits
        self.assertEqual(fake_hsdir.purpose, CircuitPurpose.FAKE_HSDIR)
        self.assertEqual(fake_intro.purpose, CircuitPurpose.FAKE_INTRO)
        self.assertEqual(exit_circuit.purpose, CircuitPurpose.PADDED_EXIT)
        self.assertEqual(padded.added_circuits, (fake_hsdir, fake_intro))
        self.assertEqual(padded.dummy_triplet_count, 1)
        self.assertEqual(len(fake_hsdir.cells), 4 + PATTERN_SIZES[RequestKind.HSDIR_FETCH])
        self.assertEqual(len(fake_intro.cells), 4 + PATTERN_SIZES[RequestKind.INTRO_HANDSHAKE])
        self.assertEqual(exit_circuit.directions()[:9], "-+-+-++-+")
        self.assertEqual(len(exit_circuit.padding_cells()), 3)
        self.assertGreater(padded.delay_added, 0.0)

    def test_padded_exit_matches_rend_shape(self):
        clear = apply_strawman(session(ConnectionType.CLEARNET, 4), self.config, np.random.default_rng(0))
        onion = session(ConnectionType.ONION, 4)
        padded_exit = clear.circuits[2]
        rend = onion.circuits[2]
        self.assertEqual(padded_exit.directions(), rend.directions())
        self.assertEqual(clear.circuits[0].directions(), onion.circuits[0].directions())
        self.assertEqual(clear.circuits[1].directions(), onion.circuits[1].directions())


class TestPcp(unittest.TestCase):
    def setUp(self):
        self.config = StrategyConfig(kind=StrategyKind.PCP, phi=1.0, lambda_u_estimate=4.0)

    def test_onion_roles(self):
        padded = apply_pcp(session(ConnectionType.ONION, 2), self.config, np.random.default_rng(1))
        self.assertEqual(
            [c.purpose for c in padded.circuits],
            [CircuitPurpose.HSDIR, CircuitPurpose.INTRO, CircuitPurpose.REND],
        )
        self.assertEqual(padded.added_circuits, ())
        self.assertTrue(all(c.created_at == 0.0 for c in padded.circuits))
        self.assertEqual(padded.delay_added, 0.0)

    def test_clearnet_roles(self):
        padded = apply_pcp(session(ConnectionType.CLEARNET, 2), self.config, np.random.default_rng(1))
        self.assertEqual(
            [c.purpose for c in padded.circuits],
            [CircuitPurpose.FAKE_HSDIR, CircuitPurpose.FAKE_INTRO, CircuitPurpose.PADDED_EXIT],
        )
        self.assertEqual(len(padded.added_circuits), 2)

    def test_roles_share_dummy_count(self):
        rng = np.random.default_rng(8)
        for i in range(50):
            conn = ConnectionType.CLEARNET if i % 2 else ConnectionType.ONION
            padded = apply_pcp(session(conn, 100 + i, i), self.config, rng)
            d = padded.dummy_triplet_count
            sizes = [len(c.padding_cells()) for c in padded.circuits]
            self.assertEqual(sizes, [d * PATTERN_SIZES[k] for k in RequestKind])

    def test_real_cells_keep_their_offsets_from_arrival(self):
        flushed = 0
        for phi in (1.0, 4.0):
            config = self.config.model_copy(update={"phi": phi})
            sim = SIM.model_copy(update={"n_sessions": 10_000, "seed": int(phi)})
            sessions = simulate_dataset(sim, jobs=4)
            rng = np.random.default_rng(int(phi))
            for vanilla in sessions:
                padded = apply_pcp(vanilla, config, rng)
                t, d = vanilla.think_time, padded.dummy_triplet_count
                onion = vanilla.connection_type == ConnectionType.ONION
                self.assertEqual(padded.delay_added, 0.0)
                self.assertEqual(
                    [len(c.padding_cells()) for c in padded.circuits],
                    [d * PATTERN_SIZES[k] for k in RequestKind],
                )
                self.assertEqual(count_triplets(session_views(padded.as_session())), d + onion)
                roles = padded.circuits if onion else padded.circuits[2:]
                for role, base in zip(roles, vanilla.circuits):
                    real = role.real_cells()[4:]
                    self.assertEqual(
                        [(round(c.time - t, 6), c.direction, c.command) for c in real],
                        [(round(c.time - t, 6), c.direction, c.command) for c in base.cells[4:]],
                    )
                    # every dummy is on the wire before the first real request cell
                    first = role.cells.index(real[0])
                    self.assertFalse(any(c.is_padding for c in role.cells[first:]))
                for fake in padded.added_circuits:
                    self.assertLessEqual(fake.last_time, round(t + 0.2, 6))
                flushed += padded.drained_cells > 0
        self.assertGreater(flushed, 0)

    def test_clearnet_and_onion_look_alike(self):
        shapes = {}
        rng = np.random.default_rng(13)
        for i in range(400):
            conn = ConnectionType.CLEARNET if i % 2 else ConnectionType.ONION
            padded = apply_pcp(session(conn, 900 + i, i), self.config, rng)
            n = padded.dummy_triplet_count + (conn == ConnectionType.ONION)
            shape = tuple(c.directions() for c in padded.circuits)
            shapes.setdefault(n, {}).setdefault(conn, set()).add(shape)
        compared = 0
        for by_type in shapes.values():
            if len(by_type) == 2:
                self.assertEqual(len(by_type[ConnectionType.CLEARNET]), 1)
                self.assertEqual(by_type[ConnectionType.CLEARNET], by_type[ConnectionType.ONION])
                compared += 1
        self.assertGreaterEqual(compared, 3)

    def test_zero_phi_adds_no_dummies(self):
        config = self.config.model_copy(update={"phi": 0.0})
        padded = apply_pcp(session(ConnectionType.CLEARNET), config, np.random.default_rng(0))
        self.assertEqual(padded.dummy_triplet_count, 0)
        self.assertFalse(any(c.is_padding for circuit in padded.circuits for c in circuit.cells))

    def test_jitter_keeps_counts(self):
        config = self.config.model_copy(update={"triplet_jitter": DelayDistribution.uniform(0.0, 0.05)})
        padded = apply_pcp(session(ConnectionType.ONION, 9), config, np.random.default_rng(9))
        d = padded.dummy_triplet_count
        self.assertEqual(len(padded.circuits[2].padding_cells()), 3 * d)

    def test_dataset_dummy_counts_are_geometric(self):
        sim = SIM.model_copy(update={"sites": [TINY_SITE], "n_sessions": 40_000})
        sessions = simulate_dataset(sim, jobs=4)
        for phi in (1.0, 4.0):
            config = self.config.model_copy(update={"phi": phi})
            padded = defend_dataset(sessions, config, sim.seed, jobs=4)
            counts = [p.dummy_triplet_count for p in padded]
            self.assertLess(fit_geometric(counts, phi), 0.015)

    def test_bayes_accuracy_ignores_the_user_rate(self):
        accuracy = {}
        for rate in (4.0, 8.0):
            user = UserModel(lambda_u=rate, c=0.5)
            sim = SIM.model_copy(update={"sites": [TINY_SITE], "n_sessions": 10_000, "user": user})
            config = self.config.model_copy(update={"lambda_u_estimate": rate})
            padded = defend_dataset(simulate_dataset(sim, jobs=4), config, sim.seed, jobs=4)
            counts = [count_triplets(session_views(p.as_session())) for p in padded]
            truth = np.array([p.connection_type == ConnectionType.ONION for p in padded])
            accuracy[rate] = (BayesModel(1.0, 0.5).predict(counts) == truth).mean()
        # 4 standard errors at n=10000
        for value in accuracy.values():
            self.assertAlmostEqual(value, optimal_accuracy(1.0, 0.5), delta=0.018)
        self.assertLess(abs(accuracy[4.0] - accuracy[8.0]), 0.025)


class TestRateEstimator(unittest.TestCase):
    def test_converges_to_true_rate(self):
        estimator = RateEstimator(initial_rate=1.0, alpha=0.01)
        rng = np.random.default_rng(0)
        for t in rng.exponential(1 / 4.0, 5000):
            estimator.observe(t)
        self.assertAlmostEqual(estimator.rate, 4.0, delta=1.2)
        self.assertEqual(estimator.observed, 5000)

    def test_rejects_bad_parameters(self):
        with self.assertRaises(ValidationError):
            RateEstimator(0.0)
        with self.assertRaises(ValidationError):
            RateEstimator(1.0, alpha=0.0)

    def test_estimated_rate_is_sequential(self):
        config = StrategyConfig(kind=StrategyKind.PCP, estimate_rate=True)
        sessions = simulate_dataset(SIM.model_copy(update={"n_sessions": 20}))
        self.assertEqual(defend_dataset(sessions, config, 1, jobs=2), defend_dataset(sessions, config, 1))


class TestDispatch(unittest.TestCase):
    def test_apply_strategy_dispatch(self):
        vanilla = session(ConnectionType.CLEARNET)
        for kind in StrategyKind:
            padded = apply_strategy(vanilla, StrategyConfig(kind=kind), np.random.default_rng(0))
            self.assertEqual(padded.strategy, kind)
            self.assertIs(padded.base, vanilla)

    def test_defend_dataset_is_deterministic(self):
        sessions = simulate_dataset(SIM.model_copy(update={"n_sessions": 40}))
        config = StrategyConfig(kind=StrategyKind.PCP)
        self.assertEqual(defend_dataset(sessions, config, 3), defend_dataset(sessions, config, 3, jobs=2))


if __name__ == "__main__":
    unittest.main()
