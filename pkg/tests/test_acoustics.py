import math

import numpy as np
import pytest

from asnloc.acoustics import (
    ArrayNode,
    RoomScenario,
    RoomSpec,
    SourceEvent,
    WALL_MARGIN,
    displace_node,
    load_scenario,
    render_node_signals,
    sample_displacement,
    save_scenario,
    simulate_rir,
    simulate_rir_set,
    speech_like,
    square_scenario,
    white_noise,
)
from asnloc.errors import ConfigError, GeometryError, PlacementError, ReverberationError
from asnloc.seeding import rng_for

ROOM = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=0.2)


def schroeder_crossing_s(taps, fs):
    """Time from the direct-path peak to the -60 dB energy-decay crossing."""
    energy = np.cumsum(taps[::-1] ** 2)[::-1]
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-30))
    peak = int(np.argmax(np.abs(taps)))
    return (int(np.argmax(edc < -60.0)) - peak) / fs


class TestSimulateRir:
    def test_direct_path_delay(self):
        # distance 3.43 m at c=343, fs=16k -> 160 samples; offset source and
        # mic heights so no early reflection pair can stack above the direct.
        src, mic = (1.0, 2.5, 1.2), (1.0 + math.sqrt(3.43**2 - 0.5**2), 2.5, 1.7)
        rir = simulate_rir(ROOM, src, mic)
        assert abs(int(np.argmax(np.abs(rir.taps))) - 160) <= 1

    @pytest.mark.parametrize("t60", [0.2, 0.4, 0.6])
    def test_schroeder_decay_within_ten_percent(self, t60):
        room = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=t60)
        rir = simulate_rir(room, (2.1, 1.7, 1.2), (4.4, 4.9, 1.6))
        measured = schroeder_crossing_s(rir.taps, room.sample_rate)
        assert abs(measured / t60 - 1.0) < 0.10

    def test_anechoic_energy_concentration(self):
        room = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=0.0)
        rir = simulate_rir(room, (1.0, 1.0, 1.0), (4.43, 1.0, 1.0))
        peak = int(np.argmax(np.abs(rir.taps)))
        window = rir.taps[max(peak - 8, 0) : peak + 9]
        assert np.sum(window**2) / np.sum(rir.taps**2) > 0.99

    def test_deterministic(self):
        a = simulate_rir(ROOM, (2.0, 3.0, 1.5), (4.0, 2.0, 1.5))
        b = simulate_rir(ROOM, (2.0, 3.0, 1.5), (4.0, 2.0, 1.5))
        np.testing.assert_array_equal(a.taps, b.taps)

    def test_reciprocity_of_direct_delay(self):
        a = simulate_rir(ROOM, (1.0, 1.0, 1.0), (4.0, 4.0, 2.0))
        b = simulate_rir(ROOM, (4.0, 4.0, 2.0), (1.0, 1.0, 1.0))
        assert int(np.argmax(np.abs(a.taps))) == int(np.argmax(np.abs(b.taps)))

    def test_outside_room_rejected(self):
        with pytest.raises(GeometryError):
            simulate_rir(ROOM, (7.0, 1.0, 1.0), (1.0, 1.0, 1.0))
        with pytest.raises(GeometryError):
            simulate_rir(ROOM, (1.0, 1.0, 1.0), (1.0, -0.5, 1.0))

    def test_infeasible_reverberation(self):
        room = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=0.05)
        assert room.t60 < room.min_t60()
        with pytest.raises(ReverberationError):
            simulate_rir(room, (1.0, 1.0, 1.0), (4.0, 4.0, 2.0))

    def test_batch_matches_single(self):
        mics = [(4.0, 2.0, 1.5), (4.05, 2.0, 1.5)]
        batch = simulate_rir_set(ROOM, (2.0, 3.0, 1.5), mics)
        for mic, rir in zip(mics, batch):
            np.testing.assert_array_equal(rir.taps, simulate_rir(ROOM, (2.0, 3.0, 1.5), mic).taps)


class TestRenderNodeSignals:
    NODE = ArrayNode(id=1, center=(4.0, 2.0, 1.5))

    def test_impulse_source_reproduces_rir(self):
        impulse = np.zeros(64)
        impulse[0] = 1.0
        event = SourceEvent(position=(2.0, 3.0, 1.5), signal=impulse, snr_db=math.inf)
        out = render_node_signals(ROOM, self.NODE, event, noise_seed=0)
        rirs = simulate_rir_set(ROOM, (2.0, 3.0, 1.5), self.NODE.mic_positions())
        for ch, rir in zip(out, rirs):
            np.testing.assert_allclose(ch[: len(rir.taps)], rir.taps, atol=1e-12)

    def test_snr_zero_db_measured(self):
        rng = rng_for(7, "sig")
        event = SourceEvent(position=(2.0, 3.0, 1.5), signal=rng.standard_normal(4000), snr_db=0.0)
        clean_event = SourceEvent(position=(2.0, 3.0, 1.5), signal=event.signal, snr_db=math.inf)
        noisy = render_node_signals(ROOM, self.NODE, event, noise_seed=3)
        clean = render_node_signals(ROOM, self.NODE, clean_event, noise_seed=3)
        for ch_noisy, ch_clean in zip(noisy, clean):
            noise = ch_noisy - ch_clean
            snr = 10.0 * np.log10(np.mean(ch_clean**2) / np.mean(noise**2))
            assert abs(snr) < 0.1

    def test_same_seed_bit_identical(self):
        rng = rng_for(7, "sig")
        event = SourceEvent(position=(2.0, 3.0, 1.5), signal=rng.standard_normal(2000), snr_db=10.0)
        a = render_node_signals(ROOM, self.NODE, event, noise_seed=42)
        b = render_node_signals(ROOM, self.NODE, event, noise_seed=42)
        np.testing.assert_array_equal(a, b)

    def test_linear_in_source_signal(self):
        rng = rng_for(8, "sig")
        sig = rng.standard_normal(2000)
        out1 = render_node_signals(
            ROOM, self.NODE, SourceEvent((2.0, 3.0, 1.5), sig, math.inf), 0
        )
        out3 = render_node_signals(
            ROOM, self.NODE, SourceEvent((2.0, 3.0, 1.5), 3.0 * sig, math.inf), 0
        )
        np.testing.assert_allclose(out3, 3.0 * out1, rtol=1e-9, atol=1e-12)

    def test_silent_signal_rejected(self):
        with pytest.raises(ConfigError):
            SourceEvent(position=(2.0, 3.0, 1.5), signal=np.zeros(100))


class TestDisplaceNode:
    NODE = ArrayNode(id=2, center=(3.0, 3.0, 1.5))

    def test_identity(self):
        moved = displace_node(self.NODE, (0.0, 0.0, 0.0), 0.0, ROOM)
        np.testing.assert_array_equal(moved.mic_positions(), self.NODE.mic_positions())
        assert moved.id == self.NODE.id

    def test_quarter_turn_of_mic_pair(self):
        moved = displace_node(self.NODE, (0.0, 0.0, 0.0), math.pi / 2, ROOM)
        expected = np.array(self.NODE.center) + np.array([[0.0, -0.025, 0.0], [0.0, 0.025, 0.0]])
        np.testing.assert_allclose(moved.mic_positions(), expected, atol=1e-12)

    def test_planar_shift_definition(self):
        theta = 0.7
        shift = (math.cos(theta), math.sin(theta), 0.0)
        moved = displace_node(self.NODE, shift, 0.0, ROOM)
        np.testing.assert_allclose(
            np.array(moved.center), np.array(self.NODE.center) + np.array(shift)
        )

    def test_rejects_wall_violation(self):
        with pytest.raises(PlacementError):
            displace_node(self.NODE, (2.95, 0.0, 0.0), 0.0, ROOM)

    def test_sampled_displacement_respects_margin(self):
        rng = rng_for(11, "disp")
        for _ in range(50):
            moved, heading, rotation = sample_displacement(ROOM, self.NODE, 2.5, rng)
            assert 0.0 <= heading < 2 * math.pi
            assert 0.0 <= rotation < 2 * math.pi
            for mic in moved.mic_positions():
                assert ROOM.contains(mic, margin=WALL_MARGIN - 1e-12)

    def test_sampled_displacement_impossible(self):
        # Node at the room center cannot move 5 m in any planar direction.
        with pytest.raises(PlacementError):
            sample_displacement(ROOM, self.NODE, 5.0, rng_for(1, "x"))


class TestSignals:
    def test_speech_like_is_unit_power_and_band_rich(self):
        sig = speech_like(16000, 16000.0, rng_for(5, "sp"))
        assert abs(np.mean(sig**2) - 1.0) < 1e-9
        spec = np.abs(np.fft.rfft(sig)) ** 2
        freqs = np.fft.rfftfreq(len(sig), 1 / 16000.0)
        band = spec[(freqs > 300) & (freqs < 3500)]
        assert band.min() > 0

    def test_white_noise_deterministic(self):
        a = white_noise(100, rng_for(9, "w"))
        b = white_noise(100, rng_for(9, "w"))
        np.testing.assert_array_equal(a, b)


class TestScenarioFile:
    def test_roundtrip(self, tmp_path):
        sc = square_scenario(t60=0.4, snr_db=15.0)
        path = tmp_path / "scenario.json"
        save_scenario(sc, path)
        loaded = load_scenario(path)
        assert loaded == sc

    def test_missing_field_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 1, "room": {"dimensions": [6,6,3], "t60": 0.2}}')
        with pytest.raises(ConfigError, match="nodes"):
            load_scenario(path)

    def test_invalid_json_line_reported(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n "format_version": 1,\n oops\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_scenario(path)

    def test_duplicate_node_ids_rejected(self):
        room = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=0.2)
        nodes = (ArrayNode(id=1, center=(1, 1, 1)), ArrayNode(id=1, center=(2, 2, 1)))
        with pytest.raises(ConfigError):
            RoomScenario(room=room, nodes=nodes, roi_center=(3, 3, 1.5), roi_radius=2.0)

    def test_roi_sampling_stays_in_disc(self):
        sc = square_scenario()
        rng = rng_for(3, "roi")
        for _ in range(100):
            pos = sc.sample_roi_position(rng)
            assert np.linalg.norm(pos[:2] - np.array(sc.roi_center[:2])) <= sc.roi_radius
            assert pos[2] == sc.roi_center[2]
