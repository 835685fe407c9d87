"""Register-map protocol between the slave aggregator and the master gateway.

Register file (30 octets, big-endian):

    0      status      bit 7 = data valid, bits 0-2 = temperature level index
    1..24  weights     6 x int32, 24-bit ADC counts sign-extended
    25..26 egg bitmap  bit (tray * 8 + slot) set when that switch is triggered
    27     bottles     low nibble, bit n = bottle slot n pressed
    28..29 sequence    uint16, bumped whenever the file contents change

Frame:

    kind | register | length | code | payload[...] | crc8

``length`` is the window size for requests and the payload size for
responses; ``code`` carries the error code of Error frames and is 0
otherwise. The CRC is CRC-8 (poly 0x07, init 0x00, no reflection, no final
xor) over every octet before it.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from fridgesim.sensors import LAYOUT, RawWeightReading, SaturationError, TempLevel

REGISTER_FILE_SIZE = 30
HEADER_SIZE = 4
FRAME_OVERHEAD = HEADER_SIZE + 1

REG_STATUS = 0
REG_WEIGHTS = 1
REG_EGGS = 25
REG_BOTTLES = 27
REG_SEQUENCE = 28

STATUS_VALID = 0x80

CRC8_POLY = 0x07


def _crc8_table(poly: int) -> bytes:
    table = bytearray(256)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = ((crc << 1) ^ poly) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table[i] = crc
    return bytes(table)


_CRC8_TABLE = _crc8_table(CRC8_POLY)


def crc8(data: bytes, initial: int = 0x00) -> int:
    crc = initial
    for b in data:
        crc = _CRC8_TABLE[crc ^ b]
    return crc


class FrameKind(enum.IntEnum):
    READ_REQUEST = 0x01
    READ_RESPONSE = 0x02
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    CHECKSUM = 0x01
    RANGE = 0x02
    MALFORMED = 0x03


class FrameError(ValueError):
    """Frame could not be decoded."""


class TruncatedFrame(FrameError):
    pass


class ChecksumMismatch(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class RangeError(ValueError):
    """Register window falls outside the register file."""


class SlaveError(Exception):
    """The slave answered with an Error frame."""

    def __init__(self, code: int):
        self.code = code
        try:
            name = ErrorCode(code).name.lower()
        except ValueError:
            name = "unknown"
        super().__init__(f"slave error 0x{code:02x} ({name})")


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    register: int
    length: int
    code: int = 0
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        body = bytes([self.kind, self.register, self.length, self.code]) + self.payload
        return body + bytes([crc8(body)])


def _check_window(register: int, length: int) -> None:
    if register < 0 or length < 0 or register + length > REGISTER_FILE_SIZE:
        raise RangeError(f"window ({register}, {length}) outside {REGISTER_FILE_SIZE}-octet file")


def encode_read_request(register: int, length: int) -> bytes:
    _check_window(register, length)
    return Frame(FrameKind.READ_REQUEST, register, length).to_bytes()


def decode_frame(octets: bytes) -> Frame:
    octets = bytes(octets)
    if len(octets) < FRAME_OVERHEAD:
        raise TruncatedFrame(f"{len(octets)} octets, need at least {FRAME_OVERHEAD}")
    if crc8(octets[:-1]) != octets[-1]:
        raise ChecksumMismatch(f"crc 0x{octets[-1]:02x} != 0x{crc8(octets[:-1]):02x}")
    kind_byte, register, length, code = octets[:HEADER_SIZE]
    try:
        kind = FrameKind(kind_byte)
    except ValueError:
        raise UnknownKind(f"frame kind 0x{kind_byte:02x}") from None
    payload = octets[HEADER_SIZE:-1]
    expected = length if kind is FrameKind.READ_RESPONSE else 0
    if len(payload) < expected:
        raise TruncatedFrame(f"payload {len(payload)} octets, header says {expected}")
    if len(payload) > expected:
        raise FrameError(f"payload {len(payload)} octets, header says {expected}")
    return Frame(kind, register, length, code, payload)


def decode_response(octets: bytes) -> bytes:
    """Payload of a ReadResponse; raises FrameError or SlaveError otherwise."""
    frame = decode_frame(octets)
    if frame.kind is FrameKind.ERROR:
        raise SlaveError(frame.code)
    if frame.kind is not FrameKind.READ_RESPONSE:
        raise UnknownKind(f"expected a response, got {frame.kind.name}")
    return frame.payload


# -- register file ----------------------------------------------------------

@dataclass(frozen=True)
class RegisterFile:
    status: int
    weight_counts: tuple[int, ...]
    egg_bitmap: int
    bottle_bitmap: int
    sequence: int

    def __post_init__(self):
        if len(self.weight_counts) != LAYOUT.weight_slots:
            raise ValueError("register file carries exactly 6 weight channels")
        for c in self.weight_counts:
            if not -(1 << 23) <= c < (1 << 23):
                raise SaturationError(f"counts {c} outside 24-bit range")
        if not 0 <= self.egg_bitmap <= 0xFFFF:
            raise ValueError("egg bitmap is 16 bits")
        if not 0 <= self.bottle_bitmap <= 0x0F:
            raise ValueError("bottle bitmap uses the low nibble only")
        if not 0 <= self.sequence <= 0xFFFF:
            raise ValueError("sequence is 16 bits")
        if not 0 <= self.status <= 0xFF:
            raise ValueError("status is one octet")

    def to_bytes(self) -> bytes:
        return struct.pack(
            ">B6iHBH",
            self.status,
            *self.weight_counts,
            self.egg_bitmap,
            self.bottle_bitmap,
            self.sequence,
        )

    @classmethod
    def from_bytes(cls, octets: bytes) -> "RegisterFile":
        if len(octets) != REGISTER_FILE_SIZE:
            raise ValueError(f"register file is {REGISTER_FILE_SIZE} octets, got {len(octets)}")
        status, *rest = struct.unpack(">B6iHBH", octets)
        weights, (eggs, bottles, seq) = tuple(rest[:6]), rest[6:]
        return cls(status, weights, eggs, bottles, seq)

    def window(self, register: int, length: int) -> bytes:
        _check_window(register, length)
        return self.to_bytes()[register:register + length]


@dataclass(frozen=True)
class SensorFrame:
    """Structured view of a register file."""

    weight_counts: tuple[int, ...]
    temp_level: TempLevel
    eggs: tuple[bool, ...]
    bottles: tuple[bool, ...]
    sequence: int

    def readings(self) -> list[RawWeightReading]:
        return [RawWeightReading(i, c, self.temp_level) for i, c in enumerate(self.weight_counts)]


def _to_bitmap(flags: Sequence[bool]) -> int:
    return sum(1 << i for i, on in enumerate(flags) if on)


def pack_registers(
    readings: Sequence[RawWeightReading],
    eggs: Sequence[bool],
    bottles: Sequence[bool],
    sequence: int,
) -> RegisterFile:
    if len(readings) != LAYOUT.weight_slots:
        raise ValueError(f"need {LAYOUT.weight_slots} weight readings, got {len(readings)}")
    if len(eggs) != LAYOUT.egg_slots:
        raise ValueError(f"need {LAYOUT.egg_slots} egg states, got {len(eggs)}")
    if len(bottles) != LAYOUT.bottle_slots:
        raise ValueError(f"need {LAYOUT.bottle_slots} bottle states, got {len(bottles)}")
    levels = {r.temp_level for r in readings}
    if len(levels) != 1:
        raise ValueError("all readings of one scan share a temperature level")
    return RegisterFile(
        status=STATUS_VALID | TempLevel(levels.pop()).index,
        weight_counts=tuple(r.counts for r in readings),
        egg_bitmap=_to_bitmap(eggs),
        bottle_bitmap=_to_bitmap(bottles),
        sequence=sequence & 0xFFFF,
    )


def unpack_registers(file: RegisterFile) -> SensorFrame:
    if not file.status & STATUS_VALID:
        raise ValueError("register file not marked valid")
    return SensorFrame(
        weight_counts=file.weight_counts,
        temp_level=TempLevel.from_index(file.status & 0x07),
        eggs=tuple(bool(file.egg_bitmap >> i & 1) for i in range(LAYOUT.egg_slots)),
        bottles=tuple(bool(file.bottle_bitmap >> i & 1) for i in range(LAYOUT.bottle_slots)),
        sequence=file.sequence,
    )


def slave_respond(file: RegisterFile, request: bytes) -> bytes:
    """Answer one master request. Never mutates ``file``."""
    try:
        frame = decode_frame(request)
    except ChecksumMismatch:
        return Frame(FrameKind.ERROR, 0, 0, ErrorCode.CHECKSUM).to_bytes()
    except FrameError:
        return Frame(FrameKind.ERROR, 0, 0, ErrorCode.MALFORMED).to_bytes()
    if frame.kind is not FrameKind.READ_REQUEST:
        return Frame(FrameKind.ERROR, frame.register, 0, ErrorCode.MALFORMED).to_bytes()
    try:
        payload = file.window(frame.register, frame.length)
    except RangeError:
        return Frame(FrameKind.ERROR, frame.register, 0, ErrorCode.RANGE).to_bytes()
    return Frame(FrameKind.READ_RESPONSE, frame.register, frame.length, 0, payload).to_bytes()


def format_frame_log(seq: int, frame: bytes) -> str:
    """``SEQ reg len payload crc`` debug line for one raw frame."""
    if len(frame) < FRAME_OVERHEAD:
        return f"{seq:05d} -- -- {frame.hex()} --"
    payload = frame[HEADER_SIZE:-1].hex() or "-"
    return f"{seq:05d} {frame[1]:02x} {frame[2]:02x} {payload} {frame[-1]:02x}"


class SlaveNode:
    """The aggregator: owns the register file, rewrites it after each sensor
    scan and answers master reads. One lock serialises scan and respond."""

    def __init__(self):
        self._lock = threading.Lock()
        self._file: Optional[RegisterFile] = None
        self._sequence = 0

    @property
    def register_file(self) -> Optional[RegisterFile]:
        with self._lock:
            return self._file

    def update(
        self,
        readings: Sequence[RawWeightReading],
        eggs: Sequence[bool],
        bottles: Sequence[bool],
    ) -> RegisterFile:
        with self._lock:
            candidate = pack_registers(readings, eggs, bottles, self._sequence)
            if self._file is not None and candidate != self._file:
                self._sequence = (self._sequence + 1) & 0xFFFF
                candidate = pack_registers(readings, eggs, bottles, self._sequence)
            self._file = candidate
            return candidate

    def transfer(self, request: bytes) -> bytes:
        with self._lock:
            if self._file is None:
                return Frame(FrameKind.ERROR, 0, 0, ErrorCode.MALFORMED).to_bytes()
            return slave_respond(self._file, request)


class BusLink:
    """Master-side handle on the wire. ``flips`` lists (transfer_index, bit)
    pairs to corrupt in the response, for fault injection; ``log`` receives
    one debug line per frame in each direction."""

    def __init__(
        self,
        slave: SlaveNode,
        flips: Iterable[tuple[int, int]] = (),
        log: Optional[Callable[[str], None]] = None,
    ):
        self.slave = slave
        self.flips = {}
        for index, bit in flips:
            self.flips.setdefault(index, []).append(bit)
        self.log = log
        self.transfers = 0

    def transfer(self, request: bytes) -> bytes:
        index = self.transfers
        self.transfers += 1
        response = bytearray(self.slave.transfer(request))
        for bit in self.flips.get(index, ()):
            response[(bit // 8) % len(response)] ^= 1 << (bit % 8)
        if self.log is not None:
            self.log(format_frame_log(index, request))
            self.log(format_frame_log(index, bytes(response)))
        return bytes(response)

    def read_window(self, register: int = 0, length: int = REGISTER_FILE_SIZE) -> bytes:
        return decode_response(self.transfer(encode_read_request(register, length)))
