import unittest

from padlab.cells import (
    PATTERN_SIZES,
    circuit_handshake,
    dummy_request,
    inject_cells,
    pattern_span,
    prologue,
    request_pattern,
)
from padlab.errors import ValidationError
from padlab.models import (
    IN,
    OUT,
    Cell,
    CircuitKind,
    CircuitPurpose,
    CircuitTrace,
    RelayCommand,
    RequestKind,
)

RTT = 0.1


def circuit(cells, created_at=0.0, closed_at=None):
    return CircuitTrace(
        circuit_id="s000000-0",
        purpose=CircuitPurpose.EXIT,
        cells=tuple(cells),
        created_at=created_at,
        closed_at=closed_at if closed_at is not None else cells[-1].time,
    )


class TestPatterns(unittest.TestCase):
    def test_pattern_sizes(self):
        for kind, size in PATTERN_SIZES.items():
            self.assertEqual(len(request_pattern(kind, 0.0, RTT, padding=False)), size)
        self.assertEqual(
            [len(request_pattern(k, 0.0, RTT, False)) for k in RequestKind], [37, 4, 3]
        )

    def test_pattern_directions(self):
        hsdir = request_pattern(RequestKind.HSDIR_FETCH, 0.0, RTT, False)
        self.assertEqual(circuit(hsdir).directions(), "-+--" + "+" * 33)
        self.assertEqual(hsdir[-1].command, RelayCommand.END)
        intro = request_pattern(RequestKind.INTRO_HANDSHAKE, 0.0, RTT, False)
        self.assertEqual(circuit(intro).directions(), "-+-+")
        rend = request_pattern(RequestKind.REND_HANDSHAKE, 0.0, RTT, False)
        self.assertEqual(circuit(rend).directions(), "-++")
        self.assertEqual(
            [c.command for c in rend],
            [RelayCommand.ESTABLISH_REND, RelayCommand.REND_ESTABLISHED, RelayCommand.REND2],
        )

    def test_pattern_spans(self):
        self.assertAlmostEqual(pattern_span(RequestKind.REND_HANDSHAKE, RTT), 2 * RTT, places=6)
        self.assertAlmostEqual(pattern_span(RequestKind.INTRO_HANDSHAKE, RTT), 2 * RTT, places=6)
        self.assertAlmostEqual(pattern_span(RequestKind.HSDIR_FETCH, RTT), 0.233, places=6)

    def test_dummy_matches_real_on_the_wire(self):
        for kind in RequestKind:
            real = request_pattern(kind, 1.5, RTT, padding=False)
            dummy = dummy_request(kind, 1.5, RTT)
            self.assertEqual([(c.time, c.direction) for c in real], [(c.time, c.direction) for c in dummy])
            self.assertTrue(all(c.is_padding for c in dummy))
            self.assertFalse(any(c.is_padding for c in real))

    def test_rtt_must_be_positive(self):
        with self.assertRaises(ValidationError):
            request_pattern(RequestKind.INTRO_HANDSHAKE, 0.0, 0.0, False)
        with self.assertRaises(ValidationError):
            prologue(0.0, -0.1)


class TestHandshakes(unittest.TestCase):
    def test_prologue_times_are_quantized(self):
        cells = prologue(0.1, RTT)
        self.assertEqual([c.time for c in cells], [0.1, 0.2, 0.2, 0.3])
        self.assertEqual(circuit(cells).directions(), "-+-+")

    def test_exit_handshake(self):
        cells = circuit_handshake(CircuitKind.EXIT, 0.0, RTT)
        self.assertEqual(len(cells), 6)
        self.assertEqual(circuit(cells).directions(), "-+-+-+")
        self.assertEqual(cells[-1].command, RelayCommand.CONNECTED)
        self.assertAlmostEqual(cells[-1].time, 3 * RTT, places=6)

    def test_rend_handshake(self):
        cells = circuit_handshake(CircuitKind.REND, 0.0, RTT)
        self.assertEqual(len(cells), 9)
        self.assertEqual(circuit(cells).directions(), "-+-+-++-+")
        self.assertAlmostEqual(cells[-1].time, 5 * RTT, places=6)
        self.assertEqual(cells[4].command, RelayCommand.ESTABLISH_REND)


class TestInject(unittest.TestCase):
    def test_inject_keeps_real_cells_first_on_ties(self):
        base = circuit(prologue(0.0, RTT))
        extra = [Cell(0.1, OUT, RelayCommand.DATA, True), Cell(0.5, IN, RelayCommand.DATA, True)]
        merged = inject_cells(base, extra)
        self.assertEqual(len(merged.cells), 6)
        self.assertEqual(merged.cells[1].command, RelayCommand.EXTENDED)
        self.assertTrue(merged.cells[3].is_padding)
        self.assertEqual(merged.real_cells(), base.cells)
        self.assertEqual(merged.closed_at, 0.5)

    def test_two_batches_equal_one(self):
        base = circuit(prologue(0.0, RTT))
        first = dummy_request(RequestKind.REND_HANDSHAKE, 0.2, RTT)
        # ties at 0.2, 0.3 and 0.4 across the two batches
        second = [
            Cell(0.25, OUT, RelayCommand.DATA, True),
            *dummy_request(RequestKind.INTRO_HANDSHAKE, 0.3, RTT),
        ]
        stepwise = inject_cells(inject_cells(base, first), second)
        self.assertEqual(stepwise, inject_cells(base, first + second))

    def test_inject_before_creation_is_rejected(self):
        base = circuit(prologue(1.0, RTT), created_at=1.0)
        with self.assertRaises(ValidationError):
            inject_cells(base, [Cell(0.5, IN, RelayCommand.DATA, True)])

    def test_inject_nothing(self):
        base = circuit(prologue(0.0, RTT))
        self.assertIs(inject_cells(base, []), base)

    def test_close_before_last_cell_is_rejected(self):
        with self.assertRaises(ValidationError):
            circuit(prologue(0.0, RTT), closed_at=0.1)


if __name__ == "__main__":
    unittest.main()
