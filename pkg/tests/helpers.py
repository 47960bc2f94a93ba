"""Shared generators for wire messages and a bitwise CRC oracle."""

import random

import hypothesis.strategies as st

from energyprobe import wire
from energyprobe.core import ProbeDescriptor, ProbeKind, Sample, TagEvent, Topology


def crc16_bitwise(data: bytes) -> int:
    # CRC-16/CCITT-FALSE, one bit at a time: poly 0x1021, init 0xFFFF, no reflection, no xorout
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
    return crc


u8, u16, u32, u64 = (st.integers(0, 2**b - 1) for b in (8, 16, 32, 64))
i32 = st.integers(-(2**31), 2**31 - 1)
text = st.text(max_size=40)

samples = st.builds(Sample, u8, u32, u64, i32, i32, i32, u8)
tags = st.builds(TagEvent, u64, u8)
descriptors = st.builds(ProbeDescriptor, u8, u8, u8, st.sampled_from(list(ProbeKind)), text)
topologies = st.builds(Topology, st.lists(descriptors, max_size=12).map(tuple), text)
statuses = st.builds(wire.Status, u8, text)
commands = st.one_of(
    st.just(wire.Start()), st.just(wire.Stop()), st.just(wire.GetTopology()), st.just(wire.Ping()),
    st.builds(wire.SetRate, st.integers(1, 255)),
    st.builds(wire.Power, u8, st.booleans()),
    st.builds(wire.InjectTag, u8),
)
messages = st.one_of(samples, tags, topologies, statuses, commands)


def random_message(rng: random.Random):
    """Plain-RNG message generator for bulk tests where hypothesis would be too slow."""
    k = rng.randrange(7)
    s32 = lambda: rng.randrange(-(2**31), 2**31)  # noqa: E731
    if k <= 2:
        return Sample(rng.randrange(256), rng.getrandbits(32), rng.getrandbits(64), s32(), s32(), s32(), rng.randrange(256))
    if k == 3:
        return TagEvent(rng.getrandbits(64), rng.randrange(256))
    if k == 4:
        word = "".join(rng.choice("abcxyzéª") for _ in range(rng.randrange(12)))
        return wire.Status(rng.randrange(256), word)
    if k == 5:
        probes = tuple(
            ProbeDescriptor(i, i // 6, i % 6, rng.choice(list(ProbeKind)), f"p{i}")
            for i in range(rng.randrange(13))
        )
        return Topology(probes, f"SN{rng.randrange(10**6)}")
    return rng.choice([
        wire.Start(), wire.Stop(), wire.GetTopology(), wire.Ping(),
        wire.SetRate(rng.randrange(1, 256)), wire.Power(rng.randrange(256), rng.random() < 0.5),
        wire.InjectTag(rng.randrange(256)),
    ])


def decode_all(data: bytes, chunks=None):
    """Frames and resync events from feeding *data* (optionally split at *chunks*) then finishing."""
    dec = wire.StreamDecoder()
    out = []
    cuts = [0, *(chunks or []), len(data)]
    for a, b in zip(cuts, cuts[1:]):
        out += dec.feed(data[a:b])
    out += dec.finish()
    return out, dec


def frames_only(events):
    return [e for e in events if isinstance(e, wire.Frame)]


def make_scenario(profiles, duration_s=1.0, *, kind=None, sigma_mW=0.0, tags=(), bus_of=None, serial="SIM-TEST"):
    """Scenario with one probe per profile, filling bus 0 then bus 1."""
    from energyprobe.sim.scenario import NoiseModel, ProbeSetup, SimScenario

    probes = []
    for i, prof in enumerate(profiles):
        bus = bus_of(i) if bus_of else i // 6
        k = kind or ProbeKind.UsbC
        desc = ProbeDescriptor(i, bus, i % 6, k, f"p{i}")
        probes.append(ProbeSetup(desc, prof, NoiseModel(sigma_mW, 1000 + i)))
    return SimScenario(tuple(probes), duration_s, board_serial=serial, tags=tuple(tags))


def parse_stream(data: bytes):
    """Decode a board byte stream into (samples by probe, tags, statuses)."""
    by_probe, tag_list, statuses = {}, [], []
    for f in frames_only(decode_all(data)[0]):
        msg = wire.unpack(f)
        if isinstance(msg, Sample):
            by_probe.setdefault(msg.probe_id, []).append(msg)
        elif isinstance(msg, TagEvent):
            tag_list.append(msg)
        elif isinstance(msg, wire.Status):
            statuses.append(msg)
    return by_probe, tag_list, statuses
