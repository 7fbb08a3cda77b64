"""Minimal baseline-sequential grayscale JPEG reader.

Recovers the quantized coefficients exactly as stored (no dequantization,
no IDCT). Everything other than 8-bit, single-component, Huffman-coded,
baseline SOF0 streams without restart intervals is rejected.
"""
from __future__ import annotations

import struct

import numpy as np

from .jpeg_model import JpegImage, QuantTable

# ZIGZAG[n] is the natural (row-major) index of the n-th zigzag coefficient.
ZIGZAG = np.array(
    [
        0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5,
        12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
    ]
)

SOI, EOI, SOS, DQT, DHT, SOF0, DRI, DAC, COM = 0xD8, 0xD9, 0xDA, 0xDB, 0xC4, 0xC0, 0xDD, 0xCC, 0xFE
UNSUPPORTED_SOF = {0xC1, 0xC2, 0xC3, 0xC5, 0xC6, 0xC7, 0xC9, 0xCA, 0xCB, 0xCD, 0xCE, 0xCF}


class JpegFormatError(ValueError):
    pass


class UnsupportedJpegError(JpegFormatError):
    def __init__(self, detail: str):
        super().__init__(f"unsupported JPEG variant: {detail}")


class MalformedJpegError(JpegFormatError):
    def __init__(self, detail: str):
        super().__init__(f"malformed JPEG: {detail}")


class UnsupportedGeometryError(JpegFormatError):
    def __init__(self, detail: str):
        super().__init__(f"unsupported geometry: {detail}")


class _Huffman:
    """Canonical Huffman table with a 16-bit prefix lookup."""

    def __init__(self, counts: list[int], symbols: bytes):
        self.lookup_symbol = np.zeros(1 << 16, dtype=np.int32)
        self.lookup_length = np.zeros(1 << 16, dtype=np.int32)  # 0 = invalid code
        code = 0
        pos = 0
        for length in range(1, 17):
            for _ in range(counts[length - 1]):
                if code >= (1 << length):
                    raise MalformedJpegError("over-subscribed Huffman table")
                lo = code << (16 - length)
                hi = (code + 1) << (16 - length)
                self.lookup_symbol[lo:hi] = symbols[pos]
                self.lookup_length[lo:hi] = length
                code += 1
                pos += 1
            code <<= 1
        self.lookup_symbol = self.lookup_symbol.tolist()
        self.lookup_length = self.lookup_length.tolist()


class _BitReader:
    def __init__(self, data: bytes):
        self.nbits = 8 * len(data)
        # Trailing ones so a 16-bit peek never runs off the end.
        self.bits = "".join(f"{byte:08b}" for byte in data) + "1" * 32
        self.pos = 0

    def peek16(self) -> int:
        return int(self.bits[self.pos : self.pos + 16], 2)

    def skip(self, n: int) -> None:
        self.pos += n
        if self.pos > self.nbits:
            raise MalformedJpegError("entropy-coded data ends prematurely")

    def receive(self, n: int) -> int:
        if n == 0:
            return 0
        value = int(self.bits[self.pos : self.pos + n], 2)
        self.skip(n)
        return value

    def decode(self, table: _Huffman) -> int:
        prefix = self.peek16()
        length = table.lookup_length[prefix]
        if length == 0:
            raise MalformedJpegError("invalid Huffman code")
        self.skip(length)
        return table.lookup_symbol[prefix]


def _extend(value: int, size: int) -> int:
    if size == 0:
        return 0
    if value < (1 << (size - 1)):
        return value - (1 << size) + 1
    return value


def _segment(data: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 2 > len(data):
        raise MalformedJpegError("truncated segment header")
    (length,) = struct.unpack_from(">H", data, pos)
    if length < 2 or pos + length > len(data):
        raise MalformedJpegError("truncated segment")
    return data[pos + 2 : pos + length], pos + length


def _entropy_segment(data: bytes, pos: int) -> tuple[bytes, int]:
    """Scan data from ``pos`` up to the next real marker, with stuffing removed."""
    end = pos
    n = len(data)
    while True:
        end = data.find(b"\xff", end)
        if end < 0 or end + 1 >= n:
            raise MalformedJpegError("scan not terminated by a marker")
        nxt = data[end + 1]
        if nxt == 0x00:
            end += 2
        elif nxt == 0xFF:
            end += 1  # fill byte
        elif 0xD0 <= nxt <= 0xD7:
            raise UnsupportedJpegError("restart markers")
        else:
            break
    return data[pos:end].replace(b"\xff\x00", b"\xff"), end


def parse_baseline_jpeg(data: bytes) -> JpegImage:
    """Parse a baseline grayscale JPEG byte stream into its quantized coefficients."""
    data = bytes(data)
    if data[:2] != b"\xff\xd8":
        raise MalformedJpegError("missing SOI marker")
    qtables: dict[int, np.ndarray] = {}
    dc_tables: dict[int, _Huffman] = {}
    ac_tables: dict[int, _Huffman] = {}
    frame = None
    coefficients = None
    pos = 2
    while True:
        # Markers may be preceded by any number of 0xFF fill bytes.
        if pos >= len(data):
            raise MalformedJpegError("missing EOI marker")
        if data[pos] != 0xFF:
            raise MalformedJpegError(f"expected marker at offset {pos}")
        while pos < len(data) and data[pos] == 0xFF:
            pos += 1
        if pos >= len(data):
            raise MalformedJpegError("missing EOI marker")
        marker = data[pos]
        pos += 1

        if marker == EOI:
            break
        if marker in UNSUPPORTED_SOF:
            raise UnsupportedJpegError(f"SOF{marker - 0xC0} frame")
        if marker == DAC:
            raise UnsupportedJpegError("arithmetic coding")
        if marker == SOI or 0xD0 <= marker <= 0xD7:
            raise MalformedJpegError(f"unexpected marker 0xFF{marker:02X}")

        payload, pos = _segment(data, pos)
        if marker == DQT:
            _read_dqt(payload, qtables)
        elif marker == DHT:
            _read_dht(payload, dc_tables, ac_tables)
        elif marker == SOF0:
            if frame is not None:
                raise UnsupportedJpegError("multiple frames")
            frame = _read_sof0(payload)
        elif marker == DRI:
            if len(payload) != 2:
                raise MalformedJpegError("bad DRI segment")
            if struct.unpack(">H", payload)[0] != 0:
                raise UnsupportedJpegError("restart intervals")
        elif marker == SOS:
            if frame is None:
                raise MalformedJpegError("SOS before SOF")
            if coefficients is not None:
                raise UnsupportedJpegError("multiple scans")
            dc_id, ac_id = _read_sos(payload, frame["component"])
            if dc_id not in dc_tables or ac_id not in ac_tables:
                raise MalformedJpegError("scan references an undefined Huffman table")
            scan, pos = _entropy_segment(data, pos)
            coefficients = _decode_scan(scan, frame["height"], frame["width"], dc_tables[dc_id], ac_tables[ac_id])
        # APPn, COM and other benign segments are skipped.

    if frame is None or coefficients is None:
        raise MalformedJpegError("no frame or no scan before EOI")
    if frame["qtable"] not in qtables:
        raise MalformedJpegError("frame references an undefined quantization table")
    return JpegImage(coefficients, QuantTable(qtables[frame["qtable"]]))


def _read_dqt(payload: bytes, qtables: dict) -> None:
    pos = 0
    while pos < len(payload):
        precision, table_id = payload[pos] >> 4, payload[pos] & 15
        pos += 1
        if precision == 0:
            raw = np.frombuffer(payload, dtype=np.uint8, count=64, offset=pos) if pos + 64 <= len(payload) else None
            pos += 64
        elif precision == 1:
            raw = np.frombuffer(payload, dtype=">u2", count=64, offset=pos) if pos + 128 <= len(payload) else None
            pos += 128
        else:
            raise MalformedJpegError("bad DQT precision")
        if raw is None:
            raise MalformedJpegError("truncated DQT segment")
        natural = np.zeros(64, dtype=np.int64)
        natural[ZIGZAG] = raw
        if natural.min() < 1:
            raise MalformedJpegError("zero quantization step")
        qtables[table_id] = natural.reshape(8, 8)


def _read_dht(payload: bytes, dc_tables: dict, ac_tables: dict) -> None:
    pos = 0
    while pos < len(payload):
        if pos + 17 > len(payload):
            raise MalformedJpegError("truncated DHT segment")
        table_class, table_id = payload[pos] >> 4, payload[pos] & 15
        counts = list(payload[pos + 1 : pos + 17])
        total = sum(counts)
        symbols = payload[pos + 17 : pos + 17 + total]
        if len(symbols) != total:
            raise MalformedJpegError("truncated DHT segment")
        pos += 17 + total
        table = _Huffman(counts, symbols)
        if table_class == 0:
            dc_tables[table_id] = table
        elif table_class == 1:
            ac_tables[table_id] = table
        else:
            raise MalformedJpegError("bad Huffman table class")


def _read_sof0(payload: bytes) -> dict:
    if len(payload) < 6:
        raise MalformedJpegError("truncated SOF0 segment")
    precision, height, width, ncomp = struct.unpack_from(">BHHB", payload, 0)
    if len(payload) != 6 + 3 * ncomp:
        raise MalformedJpegError("bad SOF0 length")
    if ncomp != 1:
        raise UnsupportedJpegError(f"{ncomp}-component frame")
    if precision != 8:
        raise UnsupportedJpegError(f"{precision}-bit samples")
    if height == 0 or width == 0:
        raise UnsupportedGeometryError("zero or deferred (DNL) image height")
    if height % 8 or width % 8:
        raise UnsupportedGeometryError(f"{height}x{width} is not a multiple of 8")
    component, _sampling, qtable = payload[6], payload[7], payload[8]
    return {"height": height, "width": width, "component": component, "qtable": qtable}


def _read_sos(payload: bytes, component: int) -> tuple[int, int]:
    if len(payload) < 1 or len(payload) != 4 + 2 * payload[0]:
        raise MalformedJpegError("bad SOS length")
    if payload[0] != 1:
        raise UnsupportedJpegError("interleaved scan")
    if payload[1] != component:
        raise MalformedJpegError("scan references an unknown component")
    tables = payload[2]
    ss, se, approx = payload[3], payload[4], payload[5]
    if ss != 0 or se != 63 or approx != 0:
        raise UnsupportedJpegError("spectral selection or successive approximation")
    return tables >> 4, tables & 15


def _decode_scan(scan: bytes, height: int, width: int, dc: _Huffman, ac: _Huffman) -> np.ndarray:
    rows, cols = height // 8, width // 8
    out = np.zeros((rows * cols, 64), dtype=np.int32)
    reader = _BitReader(scan)
    predictor = 0
    for n in range(rows * cols):
        block = out[n]
        size = reader.decode(dc)
        if size > 11:
            raise MalformedJpegError("DC magnitude category out of range")
        predictor += _extend(reader.receive(size), size)
        block[0] = predictor
        k = 1
        while k < 64:
            rs = reader.decode(ac)
            run, size = rs >> 4, rs & 15
            if size == 0:
                if run == 15:
                    k += 16
                    continue
                break
            k += run
            if k > 63:
                raise MalformedJpegError("AC run past end of block")
            block[ZIGZAG[k]] = _extend(reader.receive(size), size)
            k += 1
        if k > 64:
            raise MalformedJpegError("AC run past end of block")
    blocks = out.reshape(rows, cols, 8, 8)
    return np.ascontiguousarray(blocks.swapaxes(1, 2)).reshape(height, width)
